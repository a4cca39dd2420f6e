//! Control-variate estimators built from standardized auxiliary variables.
//!
//! A variate is a set of columns, each with mean 0 and variance 1 over the
//! full test set. The correction is applied after sampling and only looks at
//! the realized draw.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MetricFeatures;
use crate::knn::knn_fit;
use crate::model::{Estimate, EstimateFlag, SampleDraw, TestSet};
use crate::stats::{mean, population_variance, standardize};
use crate::stratification::{stratum_weighted_mean, Partition};

/// Gram matrices with a condition number above this are treated as singular.
pub const MAX_GRAM_CONDITION: f64 = 1e8;

const STANDARDIZED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariateKind {
    SingleMetric(usize),
    MeanOfMetrics,
    KnnPredictions,
    Multi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variate {
    columns: Vec<Vec<f64>>,
    kind: VariateKind,
}

impl Variate {
    /// Wrap pre-standardized columns, checking zero mean and unit variance.
    pub fn from_columns(kind: VariateKind, columns: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = columns.first() else {
            return Err(Error::InvalidArgument("variate has no columns".into()));
        };
        let rows = first.len();
        for col in &columns {
            if col.len() != rows {
                return Err(Error::DimensionMismatch {
                    expected: rows,
                    got: col.len(),
                });
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("variate has non-finite values".into()));
            }
            let (m, v) = (mean(col), population_variance(col));
            if m.abs() > STANDARDIZED_TOL || (v - 1.0).abs() > STANDARDIZED_TOL {
                return Err(Error::InvalidArgument(format!(
                    "variate column is not standardized (mean {m:e}, variance {v})"
                )));
            }
        }
        Ok(Variate { columns, kind })
    }

    /// Standardize `values` into a scalar variate.
    pub fn standardized(kind: VariateKind, values: &[f64]) -> Result<Self> {
        let z = standardize(values).ok_or_else(|| Error::ZeroVariance(format!("{kind:?} variate is constant")))?;
        Ok(Variate { columns: vec![z], kind })
    }

    pub fn kind(&self) -> &VariateKind {
        &self.kind
    }

    pub fn is_scalar(&self) -> bool {
        self.columns.len() == 1
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn rows(&self) -> usize {
        self.columns[0].len()
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.columns[c]
    }
}

/// How Cov(X, Z) is estimated from the sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceEstimator {
    /// (1/n) Σ X_i Z_i, using the known zero test-set mean of Z.
    #[default]
    Uncentered,
    /// (1/n) Σ (X_i − X̄)(Z_i − Z̄).
    Centered,
}

impl std::str::FromStr for CovarianceEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncentered" => Ok(Self::Uncentered),
            "centered" => Ok(Self::Centered),
            other => Err(Error::InvalidArgument(format!(
                "unknown covariance estimator `{other}` (expected uncentered or centered)"
            ))),
        }
    }
}

pub fn variate_from_metric(test_set: &TestSet, metric_index: usize) -> Result<Variate> {
    if metric_index >= test_set.metric_count() {
        return Err(Error::InvalidArgument(format!(
            "metric index {metric_index} out of range (test set has {} metrics)",
            test_set.metric_count()
        )));
    }
    Variate::standardized(
        VariateKind::SingleMetric(metric_index),
        &test_set.metric_column(metric_index),
    )
}

pub fn variate_mean_of_metrics(test_set: &TestSet) -> Result<Variate> {
    variate_mean_of_features(&MetricFeatures::new(test_set)?)
}

pub fn variate_mean_of_features(features: &MetricFeatures) -> Result<Variate> {
    Variate::standardized(VariateKind::MeanOfMetrics, &features.mean_z())
}

/// Every non-constant metric, standardized, as a vector variate.
pub fn variate_multi(test_set: &TestSet) -> Result<Variate> {
    variate_multi_features(&MetricFeatures::new(test_set)?)
}

pub fn variate_multi_features(features: &MetricFeatures) -> Result<Variate> {
    let columns = (0..features.width()).map(|c| features.column(c)).collect();
    Ok(Variate {
        columns,
        kind: VariateKind::Multi,
    })
}

/// Standardized knn predictions for every segment, from a model trained on
/// the draw. Fails when the predictions are constant (for instance n = 1);
/// callers fall back to the mean-of-metrics variate.
pub fn variate_from_knn(test_set: &TestSet, draw: &SampleDraw, k: usize) -> Result<Variate> {
    variate_from_knn_features(&MetricFeatures::new(test_set)?, draw, k)
}

pub fn variate_from_knn_features(features: &MetricFeatures, draw: &SampleDraw, k: usize) -> Result<Variate> {
    let model = knn_fit(features, draw, k)?;
    let predictions = model.predict_all(features)?;
    standardize(&predictions)
        .map(|z| Variate {
            columns: vec![z],
            kind: VariateKind::KnnPredictions,
        })
        .ok_or_else(|| Error::ZeroVariance("knn predictions are constant".into()))
}

fn check_rows(draw: &SampleDraw, variate: &Variate) -> Result<()> {
    if draw.is_empty() {
        return Err(Error::EmptyDraw);
    }
    if let Some(&i) = draw.indices().iter().find(|&&i| i >= variate.rows()) {
        return Err(Error::InvalidArgument(format!("draw index {i} outside the variate")));
    }
    Ok(())
}

fn sampled(draw: &SampleDraw, column: &[f64]) -> Vec<f64> {
    draw.indices().iter().map(|&i| column[i]).collect()
}

fn covariance(x: &[f64], z: &[f64], estimator: CovarianceEstimator) -> f64 {
    let n = x.len() as f64;
    match estimator {
        CovarianceEstimator::Uncentered => x.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / n,
        CovarianceEstimator::Centered => {
            let (mx, mz) = (mean(x), mean(z));
            x.iter().zip(z).map(|(a, b)| (a - mx) * (b - mz)).sum::<f64>() / n
        }
    }
}

fn require_scalar(variate: &Variate) -> Result<()> {
    if variate.is_scalar() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "scalar control variate expected, got {} columns",
            variate.width()
        )))
    }
}

/// μ̂ = X̄_n − Ĉov(X, Z)·Z̄_n.
pub fn cv_estimate_scalar(draw: &SampleDraw, variate: &Variate, estimator: CovarianceEstimator) -> Result<Estimate> {
    require_scalar(variate)?;
    check_rows(draw, variate)?;
    let z = sampled(draw, variate.column(0));
    let coefficient = covariance(draw.scores(), &z, estimator);
    Ok(Estimate::new(draw.mean() - coefficient * mean(&z), "cv", draw.len()))
}

/// μ̂ = X̄_n − c·Z̄_n for a coefficient fixed ahead of sampling (unbiased).
pub fn cv_estimate_fixed(draw: &SampleDraw, variate: &Variate, coefficient: f64) -> Result<Estimate> {
    require_scalar(variate)?;
    check_rows(draw, variate)?;
    let z = sampled(draw, variate.column(0));
    Ok(Estimate::new(
        draw.mean() - coefficient * mean(&z),
        "cv-fixed",
        draw.len(),
    ))
}

/// Scalar correction applied to stratum-weighted means of X and Z, for
/// stratified draws: μ̂ = μ̂_strat(X) − Ĉov(X, Z)·μ̂_strat(Z).
pub fn cv_estimate_stratified(
    draw: &SampleDraw,
    variate: &Variate,
    partition: &Partition,
    estimator: CovarianceEstimator,
) -> Result<Estimate> {
    require_scalar(variate)?;
    check_rows(draw, variate)?;
    let z = sampled(draw, variate.column(0));
    let coefficient = covariance(draw.scores(), &z, estimator);
    let (x_strat, partial) = stratum_weighted_mean(draw.indices(), draw.scores(), partition)?;
    let (z_strat, _) = stratum_weighted_mean(draw.indices(), &z, partition)?;
    let est = Estimate::new(x_strat - coefficient * z_strat, "stratified+cv", draw.len());
    Ok(if partial {
        est.with_flag(EstimateFlag::PartialCoverage)
    } else {
        est
    })
}

/// Test-set Gram matrix E(ZZᵀ) over a well-conditioned subset of the
/// variate's columns. Columns are admitted greedily in order; a column that
/// would push the condition number past [`MAX_GRAM_CONDITION`] is dropped.
#[derive(Debug, Clone)]
pub struct GramSystem {
    kept: Vec<usize>,
    dropped: usize,
    gram: DMatrix<f64>,
}

impl GramSystem {
    pub fn new(variate: &Variate) -> Self {
        let rows = variate.rows() as f64;
        let width = variate.width();
        let mut full = DMatrix::zeros(width, width);
        for a in 0..width {
            for b in a..width {
                let v = variate
                    .column(a)
                    .iter()
                    .zip(variate.column(b))
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    / rows;
                full[(a, b)] = v;
                full[(b, a)] = v;
            }
        }
        let mut kept: Vec<usize> = Vec::new();
        for c in 0..width {
            let mut trial = kept.clone();
            trial.push(c);
            let sub = full.select_rows(&trial).select_columns(&trial);
            let eig = sub.symmetric_eigenvalues();
            let (lo, hi) = eig
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if lo > 0.0 && hi / lo <= MAX_GRAM_CONDITION {
                kept = trial;
            } else {
                warn!("control variate column {c} is collinear with earlier columns; dropping it");
            }
        }
        let gram = full.select_rows(&kept).select_columns(&kept);
        GramSystem {
            dropped: width - kept.len(),
            kept,
            gram,
        }
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// μ̂ = X̄_n − (E(ZZᵀ)⁻¹ Ê(XZ))ᵀ Z̄_n.
    pub fn estimate(&self, draw: &SampleDraw, variate: &Variate) -> Result<Estimate> {
        self.estimate_with(draw, variate, None)
    }

    /// As [`GramSystem::estimate`]; with a partition, X̄_n and Z̄_n become
    /// stratum-weighted means.
    pub fn estimate_with(
        &self,
        draw: &SampleDraw,
        variate: &Variate,
        partition: Option<&Partition>,
    ) -> Result<Estimate> {
        check_rows(draw, variate)?;
        if self.kept.is_empty() {
            return Err(Error::ZeroVariance("no usable control variate columns".into()));
        }
        let n = draw.len() as f64;
        let width = self.kept.len();
        let mut xz = DVector::zeros(width);
        let mut zbar = DVector::zeros(width);
        let mut partial = false;
        for (slot, &c) in self.kept.iter().enumerate() {
            let col = variate.column(c);
            let z = sampled(draw, col);
            xz[slot] = draw.scores().iter().zip(&z).map(|(x, z)| x * z).sum::<f64>() / n;
            zbar[slot] = match partition {
                Some(p) => stratum_weighted_mean(draw.indices(), &z, p)?.0,
                None => mean(&z),
            };
        }
        let xbar = match partition {
            Some(p) => {
                let (v, flag) = stratum_weighted_mean(draw.indices(), draw.scores(), p)?;
                partial = flag;
                v
            }
            None => draw.mean(),
        };
        let beta = self
            .gram
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&xz))
            .or_else(|| self.gram.clone().lu().solve(&xz))
            .ok_or_else(|| Error::ZeroVariance("control variate Gram matrix is singular".into()))?;
        let mut est = Estimate::new(xbar - beta.dot(&zbar), "cv-multi", draw.len());
        if self.dropped > 0 {
            est = est.with_flag(EstimateFlag::DroppedColumns(self.dropped));
        }
        if partial {
            est = est.with_flag(EstimateFlag::PartialCoverage);
        }
        Ok(est)
    }
}

pub fn cv_estimate_multi(draw: &SampleDraw, variate: &Variate) -> Result<Estimate> {
    GramSystem::new(variate).estimate(draw, variate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::scored_single_doc;
    use crate::model::Segment;
    use crate::rng::stream;
    use crate::stats::pearson;
    use rand::Rng;

    fn metric_set(metrics: &[Vec<f64>], scores: &[f64]) -> TestSet {
        let m = metrics.len();
        let segs = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| Segment::new(format!("s{i}"), "d", metrics.iter().map(|c| c[i]).collect(), Some(s)))
            .collect();
        TestSet::new(segs, (0..m).map(|j| format!("m{j}")).collect()).unwrap()
    }

    #[test]
    fn metric_variate_examples() {
        let ts = metric_set(&[vec![1.0, 2.0, 3.0]], &[0.0; 3]);
        let v = variate_from_metric(&ts, 0).unwrap();
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in v.column(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let again = metric_set(&[v.column(0).to_vec()], &[0.0; 3]);
        let w = variate_from_metric(&again, 0).unwrap();
        for (a, b) in v.column(0).iter().zip(w.column(0)) {
            assert!((a - b).abs() < 1e-9);
        }
        let flat = metric_set(&[vec![2.0; 3]], &[0.0; 3]);
        assert!(matches!(variate_from_metric(&flat, 0), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn mean_variate_examples() {
        let col = vec![3.0, 1.0, 4.0, 1.0, 5.0];
        let single = metric_set(std::slice::from_ref(&col), &[0.0; 5]);
        let a = variate_mean_of_metrics(&single).unwrap();
        let b = variate_from_metric(&single, 0).unwrap();
        for (x, y) in a.column(0).iter().zip(b.column(0)) {
            assert!((x - y).abs() < 1e-12);
        }
        let anti: Vec<f64> = col.iter().map(|v| -v).collect();
        let opposed = metric_set(&[col.clone(), anti], &[0.0; 5]);
        assert!(matches!(variate_mean_of_metrics(&opposed), Err(Error::ZeroVariance(_))));
        let dup = metric_set(&[col.clone(), col.clone()], &[0.0; 5]);
        let a = variate_mean_of_metrics(&dup).unwrap();
        let b = variate_from_metric(&dup, 0).unwrap();
        for (x, y) in a.column(0).iter().zip(b.column(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_variate_examples() {
        let metric: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let scores: Vec<f64> = metric.iter().map(|m| 3.0 * m + 1.0).collect();
        let ts = metric_set(&[metric], &scores);
        let one = SampleDraw::reveal(&ts, vec![4]).unwrap();
        assert!(matches!(variate_from_knn(&ts, &one, 25), Err(Error::ZeroVariance(_))));

        let all = SampleDraw::reveal(&ts, (0..12).collect()).unwrap();
        let v = variate_from_knn(&ts, &all, 1).unwrap();
        assert!((pearson(v.column(0), &scores) - 1.0).abs() < 1e-12);

        let some = SampleDraw::reveal(&ts, vec![0, 3, 7, 11]).unwrap();
        assert_eq!(
            variate_from_knn(&ts, &some, 2).unwrap(),
            variate_from_knn(&ts, &some, 2).unwrap()
        );
    }

    #[test]
    fn scalar_examples() {
        let v = Variate::from_columns(VariateKind::MeanOfMetrics, vec![vec![-1.0, 1.0]]).unwrap();
        let d = SampleDraw::new(vec![0, 1], vec![2.0, 4.0], 2).unwrap();
        assert!(
            (cv_estimate_scalar(&d, &v, CovarianceEstimator::Uncentered)
                .unwrap()
                .value
                - 3.0)
                .abs()
                < 1e-15
        );

        // Z̄_n = 0 leaves the sample mean untouched
        let v = Variate::from_columns(VariateKind::MeanOfMetrics, vec![vec![-1.0, 1.0, -1.0, 1.0]]).unwrap();
        let d = SampleDraw::new(vec![0, 1], vec![5.0, 9.0], 4).unwrap();
        for est in [CovarianceEstimator::Uncentered, CovarianceEstimator::Centered] {
            assert_eq!(cv_estimate_scalar(&d, &v, est).unwrap().value, 7.0);
        }
        assert_eq!(cv_estimate_fixed(&d, &v, 123.0).unwrap().value, 7.0);
    }

    #[test]
    fn centered_covariance_differs_from_uncentered() {
        let v = Variate::from_columns(VariateKind::MeanOfMetrics, vec![vec![-1.0, 1.0, -1.0, 1.0]]).unwrap();
        let d = SampleDraw::new(vec![0, 1, 3], vec![1.0, 2.0, 6.0], 4).unwrap();
        // z = [-1, 1, 1], z̄ = 1/3, x̄ = 3
        let unc = cv_estimate_scalar(&d, &v, CovarianceEstimator::Uncentered)
            .unwrap()
            .value;
        let cen = cv_estimate_scalar(&d, &v, CovarianceEstimator::Centered).unwrap().value;
        let cov_u = (-1.0 + 2.0 + 6.0) / 3.0;
        let cov_c = ((-2.0) * (-4.0 / 3.0) + -(2.0 / 3.0) + 3.0 * (2.0 / 3.0)) / 3.0;
        assert!((unc - (3.0 - cov_u / 3.0)).abs() < 1e-12);
        assert!((cen - (3.0 - cov_c / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn perfect_variate_recovers_the_mean() {
        let mut rng = stream(11);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..25.0)).collect();
            let ts = scored_single_doc(&scores);
            let mu = ts.true_mean().unwrap();
            let sigma = population_variance(&scores).sqrt();
            let v = Variate::standardized(VariateKind::MeanOfMetrics, &scores).unwrap();
            let n = rng.random_range(1..=40);
            let d = crate::model::random_sample(&ts, n, &mut rng).unwrap();
            let e = cv_estimate_fixed(&d, &v, sigma).unwrap();
            assert!((e.value - mu).abs() < 1e-9);
        }
    }

    #[test]
    fn multi_examples() {
        let col = vec![-1.5, -0.5, 0.5, 1.5];
        let col = standardize(&col).unwrap();
        let scalar = Variate::from_columns(VariateKind::Multi, vec![col.clone()]).unwrap();
        let d = SampleDraw::new(vec![0, 2, 3], vec![1.0, 4.0, 2.0], 4).unwrap();
        let a = cv_estimate_multi(&d, &scalar).unwrap().value;
        let b = cv_estimate_scalar(&d, &scalar, CovarianceEstimator::Uncentered)
            .unwrap()
            .value;
        assert!((a - b).abs() < 1e-12);

        let dup = Variate::from_columns(VariateKind::Multi, vec![col.clone(), col.clone()]).unwrap();
        let e = cv_estimate_multi(&d, &dup).unwrap();
        assert!((e.value - b).abs() < 1e-12);
        assert_eq!(e.flags, [EstimateFlag::DroppedColumns(1)]);
    }

    #[test]
    fn multi_orthonormal_two_by_two() {
        // two orthogonal standardized columns over N = 4
        let z1 = vec![1.0, -1.0, 1.0, -1.0];
        let z2 = vec![1.0, 1.0, -1.0, -1.0];
        let v = Variate::from_columns(VariateKind::Multi, vec![z1.clone(), z2.clone()]).unwrap();
        let d = SampleDraw::new(vec![0, 1, 2], vec![3.0, 5.0, 10.0], 4).unwrap();
        // Gram = I, so beta = Ê(XZ)
        let e_xz1 = (3.0 - 5.0 + 10.0) / 3.0;
        let e_xz2 = (3.0 + 5.0 - 10.0) / 3.0;
        let zbar1 = 1.0 / 3.0;
        let zbar2 = 1.0 / 3.0;
        let expect = 6.0 - (e_xz1 * zbar1 + e_xz2 * zbar2);
        assert!((cv_estimate_multi(&d, &v).unwrap().value - expect).abs() < 1e-12);
    }

    #[test]
    fn multi_correlated_two_by_two_closed_form() {
        let a = standardize(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = standardize(&[2.0, 1.0, 4.0, 3.0, 6.0]).unwrap();
        let v = Variate::from_columns(VariateKind::Multi, vec![a.clone(), b.clone()]).unwrap();
        let rho = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / 5.0;
        let d = SampleDraw::new(vec![1, 2, 4], vec![2.0, 7.0, 1.0], 5).unwrap();
        let idx = [1, 2, 4];
        let x = [2.0, 7.0, 1.0];
        let exz_a = idx.iter().zip(&x).map(|(&i, x)| x * a[i]).sum::<f64>() / 3.0;
        let exz_b = idx.iter().zip(&x).map(|(&i, x)| x * b[i]).sum::<f64>() / 3.0;
        let det = 1.0 - rho * rho;
        let beta_a = (exz_a - rho * exz_b) / det;
        let beta_b = (exz_b - rho * exz_a) / det;
        let za = idx.iter().map(|&i| a[i]).sum::<f64>() / 3.0;
        let zb = idx.iter().map(|&i| b[i]).sum::<f64>() / 3.0;
        let expect = 10.0 / 3.0 - beta_a * za - beta_b * zb;
        assert!((cv_estimate_multi(&d, &v).unwrap().value - expect).abs() < 1e-12);
    }

    #[test]
    fn scalar_rejects_vector_variate() {
        let v = Variate::from_columns(VariateKind::Multi, vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let d = SampleDraw::new(vec![0], vec![1.0], 2).unwrap();
        assert!(cv_estimate_scalar(&d, &v, CovarianceEstimator::Uncentered).is_err());
    }

    #[test]
    fn from_columns_checks_standardization() {
        assert!(Variate::from_columns(VariateKind::Multi, vec![vec![0.0, 2.0]]).is_err());
    }

    #[test]
    fn stratified_cv_single_bin_matches_plain() {
        let z = standardize(&[0.3, 1.2, -0.7, 2.2, 0.0, 0.9]).unwrap();
        let v = Variate::from_columns(VariateKind::KnnPredictions, vec![z]).unwrap();
        let d = SampleDraw::new(vec![5, 1, 2], vec![1.0, 3.0, 0.5], 6).unwrap();
        let p = Partition::single(6).unwrap();
        let a = cv_estimate_stratified(&d, &v, &p, CovarianceEstimator::Uncentered)
            .unwrap()
            .value;
        let b = cv_estimate_scalar(&d, &v, CovarianceEstimator::Uncentered)
            .unwrap()
            .value;
        assert!((a - b).abs() < 1e-12);
    }
}
