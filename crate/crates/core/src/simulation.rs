//! Monte Carlo evaluation harness: sweep sample sizes, draw repeatedly,
//! and score each sampling/estimation method by absolute error against the
//! known test-set mean.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{bound, empirical_range, BoundKind, BoundSpec};
use crate::control_variates::{CovarianceEstimator, Variate};
use crate::error::{Error, Result};
use crate::incremental::{Session, SessionStatus, Strategy};
use crate::knn::DEFAULT_K;
use crate::model::{random_indices, SampleDraw, TestSet};
use crate::pipeline::{estimate, Prepared, Strata, VariateChoice};
use crate::rng::substream;
use crate::stats::{mean, population_std};
use crate::stratification::{
    metric_proxy_sigma, optimal_allocation, proportional_allocation, stratified_indices, Allocation, Partition,
    DEFAULT_METRIC_BIN_SIZE,
};

/// A sampling scheme paired with an estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "docs-prop")]
    DocsProp,
    #[serde(rename = "docs-opt")]
    DocsOpt,
    #[serde(rename = "metrics-prop")]
    MetricsProp,
    #[serde(rename = "metrics-opt")]
    MetricsOpt,
    #[serde(rename = "docs-incr-human")]
    DocsIncrHuman,
    #[serde(rename = "docs-incr-metrics")]
    DocsIncrMetrics,
    #[serde(rename = "cv-single")]
    CvSingle,
    #[serde(rename = "cv-mean")]
    CvMean,
    #[serde(rename = "cv-multi")]
    CvMulti,
    #[serde(rename = "cv-knn")]
    CvKnn,
    #[serde(rename = "docs-prop+cv-knn")]
    DocsPropCvKnn,
    #[serde(rename = "metrics-prop+cv-knn")]
    MetricsPropCvKnn,
}

/// How segments are chosen. Methods that share a sampler share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sampler {
    Random = 0,
    DocsProp = 1,
    DocsOpt = 2,
    MetricsProp = 3,
    MetricsOpt = 4,
    DocsIncrHuman = 5,
    DocsIncrMetrics = 6,
}

const SAMPLERS: usize = 7;

impl Method {
    pub const ALL: [Method; 13] = [
        Method::Baseline,
        Method::DocsProp,
        Method::DocsOpt,
        Method::MetricsProp,
        Method::MetricsOpt,
        Method::DocsIncrHuman,
        Method::DocsIncrMetrics,
        Method::CvSingle,
        Method::CvMean,
        Method::CvMulti,
        Method::CvKnn,
        Method::DocsPropCvKnn,
        Method::MetricsPropCvKnn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::DocsProp => "docs-prop",
            Method::DocsOpt => "docs-opt",
            Method::MetricsProp => "metrics-prop",
            Method::MetricsOpt => "metrics-opt",
            Method::DocsIncrHuman => "docs-incr-human",
            Method::DocsIncrMetrics => "docs-incr-metrics",
            Method::CvSingle => "cv-single",
            Method::CvMean => "cv-mean",
            Method::CvMulti => "cv-multi",
            Method::CvKnn => "cv-knn",
            Method::DocsPropCvKnn => "docs-prop+cv-knn",
            Method::MetricsPropCvKnn => "metrics-prop+cv-knn",
        }
    }

    fn sampler(&self) -> Sampler {
        match self {
            Method::Baseline | Method::CvSingle | Method::CvMean | Method::CvMulti | Method::CvKnn => Sampler::Random,
            Method::DocsProp | Method::DocsPropCvKnn => Sampler::DocsProp,
            Method::DocsOpt => Sampler::DocsOpt,
            Method::MetricsProp | Method::MetricsPropCvKnn => Sampler::MetricsProp,
            Method::MetricsOpt => Sampler::MetricsOpt,
            Method::DocsIncrHuman => Sampler::DocsIncrHuman,
            Method::DocsIncrMetrics => Sampler::DocsIncrMetrics,
        }
    }

    fn stack(&self, config: &SimulationConfig) -> (Strata, VariateChoice) {
        let knn = VariateChoice::Knn(config.knn_k);
        match self {
            Method::Baseline => (Strata::None, VariateChoice::None),
            Method::DocsProp | Method::DocsOpt | Method::DocsIncrHuman | Method::DocsIncrMetrics => {
                (Strata::Documents, VariateChoice::None)
            }
            Method::MetricsProp | Method::MetricsOpt => (Strata::Metrics, VariateChoice::None),
            Method::CvSingle => (Strata::None, VariateChoice::Single(config.cv_metric)),
            Method::CvMean => (Strata::None, VariateChoice::Mean),
            Method::CvMulti => (Strata::None, VariateChoice::Multi),
            Method::CvKnn => (Strata::None, knn),
            Method::DocsPropCvKnn => (Strata::Documents, knn),
            Method::MetricsPropCvKnn => (Strata::Metrics, knn),
        }
    }

    pub fn needs_metrics(&self) -> bool {
        !matches!(self, Method::Baseline | Method::DocsProp | Method::DocsIncrHuman)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(Method::name).collect();
            Error::InvalidArgument(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Sample sizes 5%, 10%, …, 50% of the test set.
pub fn default_size_fractions() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * 0.05).collect()
}

pub const DEFAULT_DRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub methods: Vec<Method>,
    pub size_fractions: Vec<f64>,
    pub draws_per_size: usize,
    pub master_seed: u64,
    pub gamma: f64,
    pub range_override: Option<f64>,
    pub metric_bin_size: usize,
    pub knn_k: usize,
    pub cv_metric: usize,
    pub covariance: CovarianceEstimator,
    pub incremental_stride: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            methods: Method::ALL.to_vec(),
            size_fractions: default_size_fractions(),
            draws_per_size: DEFAULT_DRAWS,
            master_seed: 1,
            gamma: 0.95,
            range_override: None,
            metric_bin_size: DEFAULT_METRIC_BIN_SIZE,
            knn_k: DEFAULT_K,
            cv_metric: 0,
            covariance: CovarianceEstimator::Uncentered,
            incremental_stride: 1,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("no methods selected".into()));
        }
        if self.size_fractions.is_empty() {
            return Err(Error::InvalidArgument("no sample sizes selected".into()));
        }
        if let Some(f) = self.size_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::InvalidArgument(format!("sample fraction {f} outside (0, 1]")));
        }
        if self.draws_per_size == 0 {
            return Err(Error::InvalidArgument("draws per size must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "confidence {} must lie in (0, 1)",
                self.gamma
            )));
        }
        if self.knn_k == 0 || self.metric_bin_size == 0 || self.incremental_stride == 0 {
            return Err(Error::InvalidArgument(
                "k, metric bin size and stride must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Methods in run order, baseline first (added when missing since win
    /// rates are measured against it).
    fn run_methods(&self) -> Vec<Method> {
        let mut out = vec![Method::Baseline];
        out.extend(self.methods.iter().copied().filter(|m| *m != Method::Baseline));
        out
    }
}

/// n = max(1, round(fraction·N)), capped at N.
pub fn sample_size(fraction: f64, population: usize) -> usize {
    ((fraction * population as f64).round() as usize).clamp(1, population)
}

/// One (simulation, method, sample size) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub simulation: usize,
    pub method: Method,
    pub size_index: usize,
    pub fraction: f64,
    pub n: usize,
    /// Mean of |μ − μ̂| over draws.
    pub mean_abs_error: f64,
    /// Population standard deviation of |μ − μ̂| over draws.
    pub sd_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResults {
    pub config: SimulationConfig,
    pub simulations: Vec<String>,
    /// Ordered by simulation, then size, then method.
    pub cells: Vec<CellResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub fraction: f64,
    pub mean_abs_error: f64,
    pub sd_error: f64,
    /// `None` for the baseline itself.
    pub win_pct: Option<f64>,
}

/// Aggregates for one method: per-size values averaged over simulations,
/// and the overall row averaged over sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub per_size: Vec<SizeSummary>,
    pub abs_error: f64,
    pub sd_error: f64,
    pub win_pct: Option<f64>,
}

/// Percentage of simulations whose average error is strictly below the
/// baseline's.
pub fn win_rate(method_errors: &[f64], baseline_errors: &[f64]) -> Result<f64> {
    if method_errors.len() != baseline_errors.len() {
        return Err(Error::DimensionMismatch {
            expected: baseline_errors.len(),
            got: method_errors.len(),
        });
    }
    if method_errors.is_empty() {
        return Err(Error::InvalidArgument("no simulations to compare".into()));
    }
    let wins = method_errors.iter().zip(baseline_errors).filter(|(m, b)| m < b).count();
    Ok(100.0 * wins as f64 / method_errors.len() as f64)
}

impl SimulationResults {
    fn errors_for(&self, method: Method, size_index: usize) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.method == method && c.size_index == size_index)
            .map(|c| c.mean_abs_error)
            .collect()
    }

    pub fn methods(&self) -> Vec<Method> {
        self.config.run_methods()
    }

    pub fn summarize(&self) -> Result<Vec<MethodResult>> {
        let sizes = self.config.size_fractions.len();
        self.methods()
            .into_iter()
            .map(|method| {
                let per_size = (0..sizes)
                    .map(|s| {
                        let cells: Vec<&CellResult> = self
                            .cells
                            .iter()
                            .filter(|c| c.method == method && c.size_index == s)
                            .collect();
                        let errs: Vec<f64> = cells.iter().map(|c| c.mean_abs_error).collect();
                        let sds: Vec<f64> = cells.iter().map(|c| c.sd_error).collect();
                        let win_pct = if method == Method::Baseline {
                            None
                        } else {
                            Some(win_rate(&errs, &self.errors_for(Method::Baseline, s))?)
                        };
                        Ok(SizeSummary {
                            fraction: self.config.size_fractions[s],
                            mean_abs_error: mean(&errs),
                            sd_error: mean(&sds),
                            win_pct,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let abs_error = mean(&per_size.iter().map(|s| s.mean_abs_error).collect::<Vec<_>>());
                let sd_error = mean(&per_size.iter().map(|s| s.sd_error).collect::<Vec<_>>());
                let win_pct = per_size
                    .iter()
                    .map(|s| s.win_pct)
                    .collect::<Option<Vec<f64>>>()
                    .map(|w| mean(&w));
                Ok(MethodResult {
                    method,
                    per_size,
                    abs_error,
                    sd_error,
                    win_pct,
                })
            })
            .collect()
    }
}

/// Everything about one simulation that does not change between draws.
struct SimContext {
    test_set: Arc<TestSet>,
    prepared: Prepared,
    mu: f64,
    doc_sigma: Option<Vec<f64>>,
    metric_sigma: Option<Vec<f64>>,
}

impl SimContext {
    fn new(test_set: Arc<TestSet>, config: &SimulationConfig, methods: &[Method]) -> Result<Self> {
        let mu = test_set.true_mean()?;
        if test_set.metric_count() == 0 {
            if let Some(m) = methods.iter().find(|m| m.needs_metrics()) {
                return Err(Error::InvalidArgument(format!(
                    "method {m} needs metric scores but the test set has none"
                )));
            }
        }
        let prepared = Prepared::new(&test_set, config.metric_bin_size)?;
        let doc_sigma = prepared
            .features()
            .map(|f| metric_proxy_sigma(f, prepared.partition(Strata::Documents).unwrap().unwrap()));
        let metric_sigma = match (prepared.features(), prepared.partition(Strata::Metrics)) {
            (Some(f), Ok(Some(p))) => Some(metric_proxy_sigma(f, p)),
            _ => None,
        };
        Ok(SimContext {
            test_set,
            prepared,
            mu,
            doc_sigma,
            metric_sigma,
        })
    }

    fn partition(&self, strata: Strata) -> Result<&Partition> {
        Ok(self.prepared.partition(strata)?.expect("stratified sampler"))
    }

    fn allocation(&self, sampler: Sampler, n: usize) -> Result<Allocation> {
        let need = |s: &Option<Vec<f64>>| {
            s.clone()
                .ok_or_else(|| Error::InvalidArgument("optimal allocation needs metric scores".into()))
        };
        match sampler {
            Sampler::DocsProp => proportional_allocation(self.partition(Strata::Documents)?, n),
            Sampler::DocsOpt => optimal_allocation(self.partition(Strata::Documents)?, &need(&self.doc_sigma)?, n),
            Sampler::MetricsProp => proportional_allocation(self.partition(Strata::Metrics)?, n),
            Sampler::MetricsOpt => optimal_allocation(self.partition(Strata::Metrics)?, &need(&self.metric_sigma)?, n),
            _ => unreachable!("not a batch stratified sampler"),
        }
    }

    fn draw(
        &self,
        sampler: Sampler,
        n: usize,
        alloc: Option<&Allocation>,
        seed: u64,
        path: [u64; 4],
        stride: usize,
    ) -> Result<SampleDraw> {
        let mut rng = substream(seed, &path);
        let indices = match sampler {
            Sampler::Random => random_indices(self.test_set.len(), n, &mut rng)?,
            Sampler::DocsProp | Sampler::DocsOpt => {
                stratified_indices(self.partition(Strata::Documents)?, alloc.expect("allocation"), &mut rng)?
            }
            Sampler::MetricsProp | Sampler::MetricsOpt => {
                stratified_indices(self.partition(Strata::Metrics)?, alloc.expect("allocation"), &mut rng)?
            }
            Sampler::DocsIncrHuman | Sampler::DocsIncrMetrics => {
                let strategy = if sampler == Sampler::DocsIncrHuman {
                    Strategy::IncrHuman
                } else {
                    Strategy::IncrMetrics
                };
                let mut session = Session::new(
                    self.test_set.clone(),
                    self.prepared.features().cloned(),
                    self.partition(Strata::Documents)?.clone(),
                    n,
                    strategy,
                    rng,
                )?
                .with_stride(stride);
                while session.status() == SessionStatus::Active {
                    let i = session.next_segment()?;
                    session.submit_rating(i, self.test_set.score(i)?)?;
                }
                return Ok(session.draw().expect("completed session has ratings"));
            }
        };
        SampleDraw::reveal(&self.test_set, indices)
    }
}

/// Per-draw outcome: the estimate and the draw's score deviation.
#[derive(Debug, Clone, Copy)]
struct DrawOutcome {
    estimate: f64,
    sample_sd: f64,
    n: usize,
}

/// Run every draw of one (simulation, size) unit for `methods`.
fn run_unit(
    ctx: &SimContext,
    sim: usize,
    size_index: usize,
    fraction: f64,
    methods: &[Method],
    config: &SimulationConfig,
) -> Result<Vec<Vec<DrawOutcome>>> {
    let n = sample_size(fraction, ctx.test_set.len());
    let mut allocs: [Option<Allocation>; SAMPLERS] = Default::default();
    for m in methods {
        let s = m.sampler();
        if matches!(
            s,
            Sampler::DocsProp | Sampler::DocsOpt | Sampler::MetricsProp | Sampler::MetricsOpt
        ) && allocs[s as usize].is_none()
        {
            allocs[s as usize] = Some(ctx.allocation(s, n)?);
        }
    }
    let mut out = vec![Vec::with_capacity(config.draws_per_size); methods.len()];
    for d in 0..config.draws_per_size {
        let mut draws: [Option<SampleDraw>; SAMPLERS] = Default::default();
        for (slot, method) in methods.iter().enumerate() {
            let s = method.sampler();
            if draws[s as usize].is_none() {
                let path = [sim as u64, size_index as u64, d as u64, s as u64];
                draws[s as usize] = Some(ctx.draw(
                    s,
                    n,
                    allocs[s as usize].as_ref(),
                    config.master_seed,
                    path,
                    config.incremental_stride,
                )?);
            }
            let draw = draws[s as usize].as_ref().expect("drawn above");
            let (strata, choice) = method.stack(config);
            let est = estimate(&ctx.prepared, &ctx.test_set, draw, strata, choice, config.covariance)?;
            out[slot].push(DrawOutcome {
                estimate: est.estimate.value,
                sample_sd: population_std(draw.scores()),
                n: draw.len(),
            });
        }
    }
    Ok(out)
}

fn contexts(simulations: &[Arc<TestSet>], config: &SimulationConfig, methods: &[Method]) -> Result<Vec<SimContext>> {
    simulations
        .par_iter()
        .map(|ts| SimContext::new(ts.clone(), config, methods))
        .collect()
}

/// Run the full protocol. Each test set is one simulation. Deterministic for
/// a fixed master seed regardless of thread scheduling.
pub fn run_simulation(simulations: &[(String, Arc<TestSet>)], config: &SimulationConfig) -> Result<SimulationResults> {
    config.validate()?;
    if simulations.is_empty() {
        return Err(Error::InvalidArgument("no simulations given".into()));
    }
    let methods = config.run_methods();
    let sets: Vec<Arc<TestSet>> = simulations.iter().map(|(_, ts)| ts.clone()).collect();
    let ctxs = contexts(&sets, config, &methods)?;
    let units: Vec<(usize, usize)> = (0..ctxs.len())
        .flat_map(|sim| (0..config.size_fractions.len()).map(move |s| (sim, s)))
        .collect();
    let per_unit: Vec<Vec<CellResult>> = units
        .par_iter()
        .map(|&(sim, s)| {
            let fraction = config.size_fractions[s];
            let outcomes = run_unit(&ctxs[sim], sim, s, fraction, &methods, config)?;
            Ok(methods
                .iter()
                .zip(outcomes)
                .map(|(&method, draws)| {
                    let errors: Vec<f64> = draws.iter().map(|o| (ctxs[sim].mu - o.estimate).abs()).collect();
                    CellResult {
                        simulation: sim,
                        method,
                        size_index: s,
                        fraction,
                        n: draws[0].n,
                        mean_abs_error: mean(&errors),
                        sd_error: population_std(&errors),
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(SimulationResults {
        config: config.clone(),
        simulations: simulations.iter().map(|(name, _)| name.clone()).collect(),
        cells: per_unit.into_iter().flatten().collect(),
    })
}

/// One row of a bound-calibration table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub fraction: f64,
    pub method: Method,
    /// % of draws with |μ − μ̂| ≤ t, averaged over simulations.
    pub cal_pct: f64,
    /// Mean of t − |μ − μ̂|.
    pub slack: f64,
    /// Mean bound value.
    pub t: f64,
}

/// Bound calibration per sample size for each of `methods`.
pub fn calibration_eval(
    simulations: &[Arc<TestSet>],
    config: &SimulationConfig,
    kind: BoundKind,
    methods: &[Method],
) -> Result<Vec<CalibrationRow>> {
    config.validate()?;
    if simulations.is_empty() || methods.is_empty() {
        return Err(Error::InvalidArgument(
            "calibration needs simulations and methods".into(),
        ));
    }
    let ctxs = contexts(simulations, config, methods)?;
    let ranges: Vec<f64> = simulations
        .iter()
        .map(|ts| empirical_range(ts, config.range_override).map(|r| r.value))
        .collect::<Result<_>>()?;
    let units: Vec<(usize, usize)> = (0..ctxs.len())
        .flat_map(|sim| (0..config.size_fractions.len()).map(move |s| (sim, s)))
        .collect();
    // per unit, per method: (cal %, slack, t)
    let stats: Vec<Vec<(f64, f64, f64)>> = units
        .par_iter()
        .map(|&(sim, s)| {
            let ctx = &ctxs[sim];
            let outcomes = run_unit(ctx, sim, s, config.size_fractions[s], methods, config)?;
            outcomes
                .iter()
                .map(|draws| {
                    let mut covered = 0usize;
                    let mut slack = Vec::with_capacity(draws.len());
                    let mut ts = Vec::with_capacity(draws.len());
                    for o in draws {
                        let spec =
                            BoundSpec::new(config.gamma, ranges[sim], o.n, ctx.test_set.len())?.with_sigma(o.sample_sd);
                        let t = bound(kind, &spec)?;
                        let err = (ctx.mu - o.estimate).abs();
                        if err <= t {
                            covered += 1;
                        }
                        slack.push(t - err);
                        ts.push(t);
                    }
                    Ok((100.0 * covered as f64 / draws.len() as f64, mean(&slack), mean(&ts)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for s in 0..config.size_fractions.len() {
        for (mi, &method) in methods.iter().enumerate() {
            let cells: Vec<(f64, f64, f64)> = units
                .iter()
                .zip(&stats)
                .filter(|((_, size), _)| *size == s)
                .map(|(_, st)| st[mi])
                .collect();
            rows.push(CalibrationRow {
                fraction: config.size_fractions[s],
                method,
                cal_pct: mean(&cells.iter().map(|c| c.0).collect::<Vec<_>>()),
                slack: mean(&cells.iter().map(|c| c.1).collect::<Vec<_>>()),
                t: mean(&cells.iter().map(|c| c.2).collect::<Vec<_>>()),
            });
        }
    }
    Ok(rows)
}

/// Estimators whose exact expectation can be enumerated.
#[derive(Debug, Clone, Copy)]
pub enum OracleMethod<'a> {
    Baseline,
    Stratified {
        partition: &'a Partition,
        allocation: &'a Allocation,
    },
    FixedCv {
        variate: &'a Variate,
        coefficient: f64,
    },
}

/// Largest number of draws [`enumerate_oracle`] will visit.
pub const ORACLE_LIMIT: u128 = 1_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Calls `visit` with every k-subset of `0..n` in lexicographic order.
fn for_each_combination(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        visit(&c);
        let Some(i) = (0..k).rev().find(|&i| c[i] != i + n - k) else {
            return;
        };
        c[i] += 1;
        for j in i + 1..k {
            c[j] = c[j - 1] + 1;
        }
    }
}

/// Exact E[μ̂] by averaging the estimator over every possible draw.
pub fn enumerate_oracle(test_set: &TestSet, n: usize, method: OracleMethod<'_>) -> Result<f64> {
    let big_n = test_set.len();
    if n == 0 || n > big_n {
        return Err(Error::SampleSizeOutOfRange { n, max: big_n });
    }
    let scores = test_set.scores()?;
    match method {
        OracleMethod::Baseline | OracleMethod::FixedCv { .. } => {
            let count = binomial(big_n, n);
            if count > ORACLE_LIMIT {
                return Err(Error::TooManyDraws {
                    count,
                    limit: ORACLE_LIMIT,
                });
            }
            let (z, coefficient) = match method {
                OracleMethod::FixedCv { variate, coefficient } => {
                    if !variate.is_scalar() || variate.rows() != big_n {
                        return Err(Error::InvalidArgument(
                            "fixed-coefficient oracle needs a scalar variate over the test set".into(),
                        ));
                    }
                    (Some(variate.column(0)), coefficient)
                }
                _ => (None, 0.0),
            };
            let mut total = 0.0;
            for_each_combination(big_n, n, |c| {
                let xbar = c.iter().map(|&i| scores[i]).sum::<f64>() / n as f64;
                let zbar = z.map_or(0.0, |z| c.iter().map(|&i| z[i]).sum::<f64>() / n as f64);
                total += xbar - coefficient * zbar;
            });
            Ok(total / count as f64)
        }
        OracleMethod::Stratified { partition, allocation } => {
            allocation.validate(partition)?;
            if allocation.total != n || partition.population() != big_n {
                return Err(Error::InvalidAllocation(
                    "allocation does not match the sample size".into(),
                ));
            }
            let count = allocation
                .counts
                .iter()
                .zip(partition.bin_sizes())
                .map(|(&k, &size)| binomial(size, k))
                .try_fold(1u128, |acc, c| acc.checked_mul(c))
                .unwrap_or(u128::MAX);
            if count > ORACLE_LIMIT {
                return Err(Error::TooManyDraws {
                    count,
                    limit: ORACLE_LIMIT,
                });
            }
            // the stratified estimate is a weighted sum of per-bin means, so
            // its expectation factorizes over bins
            let mut covered = 0usize;
            let mut acc = 0.0;
            for l in 0..partition.bin_count() {
                let k = allocation.counts[l];
                if k == 0 {
                    continue;
                }
                let members = partition.members(l);
                let mut sum = 0.0;
                let mut draws = 0u128;
                for_each_combination(members.len(), k, |c| {
                    sum += c.iter().map(|&j| scores[members[j]]).sum::<f64>() / k as f64;
                    draws += 1;
                });
                covered += members.len();
                acc += sum / draws as f64 * members.len() as f64;
            }
            Ok(acc / covered as f64)
        }
    }
}
