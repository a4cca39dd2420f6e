//! `evalsample`: plan rating budgets, estimate test-set scores from partial
//! ratings, run Monte Carlo comparisons, and serve incremental sessions.

mod server;

use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evalsample::bounds::{bernstein_bound, hoeffding_bound, range_of, BoundKind, BoundSpec};
use evalsample::control_variates::CovarianceEstimator;
use evalsample::dataio::{self, SyntheticSpec};
use evalsample::model::random_indices;
use evalsample::pipeline::{estimate, Prepared, Strata, VariateChoice};
use evalsample::report;
use evalsample::rng::stream;
use evalsample::service::Service;
use evalsample::simulation::{calibration_eval, run_simulation, Method, SimulationConfig};
use evalsample::stats::population_std;
use evalsample::stratification::{
    metric_proxy_sigma, optimal_allocation, proportional_allocation, stratified_indices, Partition,
    DEFAULT_METRIC_BIN_SIZE,
};
use evalsample::{Error, EstimateFlag, SampleDraw, TestSet};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "evalsample",
    version,
    about = "Budgeted sampling and low-variance estimation for human evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate MQM-like synthetic test sets.
    GenSynth(GenSynthArgs),
    /// Choose which segments to rate for a fixed budget.
    Plan(PlanArgs),
    /// Estimate the test-set mean from a partial set of ratings.
    Estimate(EstimateArgs),
    /// Compare sampling/estimation methods on fully rated test sets.
    Simulate(SimulateArgs),
    /// Measure how often error bounds cover the true error.
    Calibrate(CalibrateArgs),
    /// Serve incremental rating sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    /// Output file, or output directory when --count > 1.
    #[arg(long)]
    out: PathBuf,
    /// Number of test sets to generate.
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long, default_value_t = 1000)]
    segments: usize,
    #[arg(long, default_value_t = 60)]
    documents: usize,
    /// Target correlation of each metric with the scores (comma-separated).
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.45, 0.42, 0.38, 0.3])]
    correlations: Vec<f64>,
    /// Share of latent score variance explained by documents.
    #[arg(long, default_value_t = 0.3)]
    doc_share: f64,
    /// Fraction of segments scored exactly 0.
    #[arg(long, default_value_t = 0.4)]
    zero_mass: f64,
    #[arg(long, default_value_t = 1.5)]
    tail_scale: f64,
    /// Maximum score.
    #[arg(long, default_value_t = 25.0)]
    cap: f64,
    /// Fraction of metric noise shared across metrics.
    #[arg(long, default_value_t = 0.5)]
    shared_noise: f64,
    /// Gamma shape of document sizes (smaller is more uneven).
    #[arg(long, default_value_t = 2.0)]
    doc_size_shape: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum AllocationKind {
    Prop,
    Opt,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum StrataArg {
    None,
    Docs,
    Metrics,
}

impl From<StrataArg> for Strata {
    fn from(s: StrataArg) -> Self {
        match s {
            StrataArg::None => Strata::None,
            StrataArg::Docs => Strata::Documents,
            StrataArg::Metrics => Strata::Metrics,
        }
    }
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Test-set TSV (scores may be empty).
    #[arg(long)]
    test_set: PathBuf,
    /// Number of segments to rate.
    #[arg(long)]
    budget: usize,
    #[arg(long, value_enum, default_value_t = StrataArg::Docs)]
    strata: StrataArg,
    #[arg(long, value_enum, default_value_t = AllocationKind::Prop)]
    allocation: AllocationKind,
    /// Target segments per metric bin.
    #[arg(long, default_value_t = DEFAULT_METRIC_BIN_SIZE)]
    metric_bin_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Segment-id list; a JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum CvArg {
    Auto,
    None,
    Single,
    Mean,
    Multi,
    Knn,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    test_set: PathBuf,
    /// Ratings TSV: segment_id, score.
    #[arg(long)]
    ratings: PathBuf,
    #[arg(long, value_enum, default_value_t = StrataArg::Docs)]
    strata: StrataArg,
    /// Control variate; auto uses knn predictions when metrics are present.
    #[arg(long, value_enum, default_value_t = CvArg::Auto)]
    cv: CvArg,
    /// Metric column (0-based) for --cv single.
    #[arg(long, default_value_t = 0)]
    metric: usize,
    /// Neighbours for --cv knn.
    #[arg(long, default_value_t = 25)]
    k: usize,
    #[arg(long, default_value = "uncentered")]
    covariance: CovarianceEstimator,
    #[arg(long, default_value_t = DEFAULT_METRIC_BIN_SIZE)]
    metric_bin_size: usize,
    /// Confidence level for the bounds.
    #[arg(long, default_value_t = 0.95)]
    gamma: f64,
    /// Score range R for the bounds (default: observed range of the ratings).
    #[arg(long = "range", visible_alias = "R")]
    range: Option<f64>,
}

#[derive(Args, Debug)]
struct SimInput {
    /// Fully rated test set; repeat for several simulations.
    #[arg(long = "test-set")]
    test_sets: Vec<PathBuf>,
    /// Directory whose *.tsv files are each one simulation.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// key = value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample sizes as fractions of N (comma-separated).
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<f64>>,
    /// Draws per sample size.
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Incremental sessions re-estimate deviations every this many ratings.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    input: SimInput,
    /// Methods to compare (comma-separated; baseline is always included).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Per-cell results CSV.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Per-size curve CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[command(flatten)]
    input: SimInput,
    #[arg(long, default_value = "hoeffding")]
    bound: BoundKind,
    /// Score range R (default: observed range of each test set).
    #[arg(long = "R", visible_alias = "range")]
    range: Option<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![Method::Baseline, Method::DocsPropCvKnn])]
    methods: Vec<Method>,
    /// Calibration CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Test set to serve, registered under its file stem; repeatable.
    #[arg(long = "test-set", required = true)]
    test_sets: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Port (0 picks a free one).
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Directory for append-only JSONL session transcripts.
    #[arg(long)]
    log_dir: Option<PathBuf>,
}

/// An error with its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const INTERNAL: u8 = 3;

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: DATA,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Failure {
            code: INTERNAL,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match err {
            Error::InvalidArgument(_) | Error::SampleSizeOutOfRange { .. } => USAGE,
            _ => DATA,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn context(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        if matches!(e, Error::Io { .. }) {
            return Failure::from(e);
        }
        let f = Failure::from(e);
        Failure {
            message: format!("{}: {}", path.display(), f.message),
            ..f
        }
    }
}

fn load(path: &Path) -> CliResult<TestSet> {
    dataio::load_test_set(path).map_err(context(path))
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult {
    fs::write(path, contents).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn gen_synth(args: GenSynthArgs, out: &mut impl Write) -> CliResult {
    let spec = SyntheticSpec {
        segments: args.segments,
        documents: args.documents,
        doc_size_shape: args.doc_size_shape,
        zero_mass: args.zero_mass,
        tail_scale: args.tail_scale,
        cap: args.cap,
        doc_share: args.doc_share,
        correlations: args.correlations,
        shared_noise: args.shared_noise,
        seed: args.seed,
    };
    spec.validate()?;
    if args.count == 0 {
        return Err(Failure::usage("--count must be at least 1"));
    }
    let targets: Vec<(PathBuf, SyntheticSpec)> = if args.count == 1 {
        vec![(args.out.clone(), spec)]
    } else {
        fs::create_dir_all(&args.out).map_err(|e| Failure::data(format!("{}: {e}", args.out.display())))?;
        (0..args.count)
            .map(|i| (args.out.join(format!("synth_{i:03}.tsv")), spec.replica(i)))
            .collect()
    };
    for (path, spec) in targets {
        let ts = dataio::generate_synthetic(&spec)?;
        dataio::save_test_set(&ts, &path)?;
        let r: Vec<String> = dataio::achieved_correlations(&ts)?
            .iter()
            .map(|r| format!("{r:.3}"))
            .collect();
        writeln!(
            out,
            "{}\tN={}\tD={}\tmean={:.4}\tr=[{}]",
            path.display(),
            ts.len(),
            ts.documents().len(),
            ts.true_mean()?,
            r.join(", ")
        )
        .map_err(|e| Failure::internal(e.to_string()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PlanBin {
    size: usize,
    count: usize,
}

#[derive(Serialize)]
struct PlanSidecar {
    test_set: String,
    population: usize,
    budget: usize,
    strata: StrataArg,
    allocation: AllocationKind,
    seed: u64,
    bins: Vec<PlanBin>,
    /// True when optimal allocation fell back to proportional.
    fallback: bool,
}

fn plan(args: PlanArgs, out: &mut impl Write) -> CliResult {
    let ts = load(&args.test_set)?;
    if args.budget == 0 || args.budget > ts.len() {
        return Err(Failure::usage(format!(
            "budget {} out of range [1, {}]",
            args.budget,
            ts.len()
        )));
    }
    let prepared = Prepared::new(&ts, args.metric_bin_size)?;
    let partition = match prepared.partition(args.strata.into())? {
        Some(p) => p.clone(),
        None => Partition::single(ts.len())?,
    };
    let allocation = match args.allocation {
        AllocationKind::Prop => proportional_allocation(&partition, args.budget)?,
        AllocationKind::Opt => {
            let features = prepared
                .features()
                .ok_or_else(|| Failure::usage("--allocation opt needs at least one non-constant metric column"))?;
            optimal_allocation(&partition, &metric_proxy_sigma(features, &partition), args.budget)?
        }
    };
    let mut rng = stream(args.seed);
    let indices = match args.strata {
        StrataArg::None => random_indices(ts.len(), args.budget, &mut rng)?,
        _ => stratified_indices(&partition, &allocation, &mut rng)?,
    };
    let mut ids = String::new();
    for &i in &indices {
        ids.push_str(&ts.segment(i).id);
        ids.push('\n');
    }
    write_file(&args.out, ids.as_bytes())?;
    let sidecar = PlanSidecar {
        test_set: args.test_set.display().to_string(),
        population: ts.len(),
        budget: args.budget,
        strata: args.strata,
        allocation: args.allocation,
        seed: args.seed,
        bins: partition
            .bin_sizes()
            .iter()
            .zip(&allocation.counts)
            .map(|(&size, &count)| PlanBin { size, count })
            .collect(),
        fallback: allocation.fallback,
    };
    let mut sidecar_path = args.out.clone().into_os_string();
    sidecar_path.push(".json");
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Failure::internal(e.to_string()))?;
    write_file(Path::new(&sidecar_path), json.as_bytes())?;
    writeln!(
        out,
        "planned {} of {} segments over {} bins -> {}",
        indices.len(),
        ts.len(),
        partition.bin_count(),
        args.out.display()
    )
    .map_err(|e| Failure::internal(e.to_string()))
}

/// Below this many ratings the covariance estimate is noisy.
const SMALL_SAMPLE: usize = 30;

fn estimate_cmd(args: EstimateArgs, out: &mut impl Write) -> CliResult {
    let ts = load(&args.test_set)?;
    let ratings = dataio::load_ratings(&args.ratings, &ts).map_err(context(&args.ratings))?;
    if ratings.is_empty() {
        return Err(Failure::data(format!("{}: no ratings", args.ratings.display())));
    }
    let (indices, scores): (Vec<usize>, Vec<f64>) = ratings.into_iter().unzip();
    let draw = SampleDraw::new(indices, scores, ts.len())?;
    let prepared = Prepared::new(&ts, args.metric_bin_size)?;
    if !matches!(args.cv, CvArg::Auto | CvArg::None) && ts.metric_count() == 0 {
        return Err(Failure::usage(
            format!(
                "--cv {:?} needs metric columns, but {} has none",
                args.cv,
                args.test_set.display()
            )
            .to_lowercase(),
        ));
    }
    let choice = match args.cv {
        CvArg::Auto if prepared.features().is_some() => VariateChoice::Knn(args.k),
        CvArg::Auto | CvArg::None => VariateChoice::None,
        CvArg::Single => VariateChoice::Single(args.metric),
        CvArg::Mean => VariateChoice::Mean,
        CvArg::Multi => VariateChoice::Multi,
        CvArg::Knn => VariateChoice::Knn(args.k),
    };
    let result = estimate(&prepared, &ts, &draw, args.strata.into(), choice, args.covariance)?;

    let (range, source) = match args.range {
        Some(r) => (r, "override"),
        None => (range_of(draw.scores()), "observed in ratings"),
    };
    let sigma = population_std(draw.scores());
    let spec = BoundSpec::new(args.gamma, range, draw.len(), ts.len())?.with_sigma(sigma);
    let hoeffding = hoeffding_bound(&spec)?;
    let bernstein = bernstein_bound(&spec)?;

    let mut text = String::new();
    let mut line = |k: &str, v: String| text.push_str(&format!("{k:<10} {v}\n"));
    line("estimate", result.estimate.value.to_string());
    line("method", result.estimate.method.clone());
    line("n", draw.len().to_string());
    line("N", ts.len().to_string());
    line("gamma", args.gamma.to_string());
    line("range", format!("{range} ({source})"));
    line("hoeffding", hoeffding.to_string());
    line("bernstein", bernstein.to_string());
    for w in &result.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    if result.estimate.flags.contains(&EstimateFlag::PartialCoverage) {
        text.push_str("warning: some strata have no ratings; weights renormalized over rated strata\n");
    }
    if result.variate.is_some() && draw.len() <= SMALL_SAMPLE {
        text.push_str(&format!(
            "warning: n = {} <= {SMALL_SAMPLE}; the covariance estimate is unreliable at this size, consider --cv none\n",
            draw.len()
        ));
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::internal(e.to_string()))
}

type Simulations = Vec<(String, Arc<TestSet>)>;

fn sim_inputs(input: &SimInput) -> CliResult<(Simulations, SimulationConfig)> {
    let mut paths = input.test_sets.clone();
    if let Some(dir) = &input.dir {
        let entries = fs::read_dir(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
            .collect();
        found.sort();
        paths.extend(found);
    }
    if paths.is_empty() {
        return Err(Failure::usage("give at least one --test-set or a --dir of .tsv files"));
    }
    let sims = paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((name, Arc::new(load(p)?)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut config = match &input.config {
        Some(p) => dataio::load_config(p).map_err(context(p))?,
        None => SimulationConfig::default(),
    };
    if let Some(s) = &input.sizes {
        config.size_fractions = s.clone();
    }
    if let Some(d) = input.draws {
        config.draws_per_size = d;
    }
    if let Some(s) = input.seed {
        config.master_seed = s;
    }
    if let Some(g) = input.gamma {
        config.gamma = g;
    }
    if let Some(s) = input.stride {
        config.incremental_stride = s;
    }
    Ok((sims, config))
}

fn simulate(args: SimulateArgs, out: &mut impl Write) -> CliResult {
    let (sims, mut config) = sim_inputs(&args.input)?;
    if let Some(m) = args.methods {
        config.methods = m;
    }
    config.validate()?;
    let results = run_simulation(&sims, &config)?;
    let summary = results.summarize()?;
    let internal = |e: std::io::Error| Failure::internal(e.to_string());
    writeln!(
        out,
        "{} simulation(s), {} size(s) x {} draws",
        sims.len(),
        config.size_fractions.len(),
        config.draws_per_size
    )
    .map_err(internal)?;
    out.write_all(report::summary_table(&summary).as_bytes())
        .map_err(internal)?;
    if let Some(path) = &args.results {
        let mut buf = Vec::new();
        report::write_results_csv(&results, &mut buf)?;
        write_file(path, &buf)?;
    }
    if let Some(path) = &args.curves {
        let mut buf = Vec::new();
        report::write_curves_csv(&summary, &mut buf)?;
        write_file(path, &buf)?;
    }
    Ok(())
}

fn calibrate(args: CalibrateArgs, out: &mut impl Write) -> CliResult {
    let (sims, mut config) = sim_inputs(&args.input)?;
    if args.range.is_some() {
        config.range_override = args.range;
    }
    config.validate()?;
    let sets: Vec<Arc<TestSet>> = sims.into_iter().map(|(_, ts)| ts).collect();
    let rows = calibration_eval(&sets, &config, args.bound, &args.methods)?;
    let range = config
        .range_override
        .map_or("observed per test set".to_string(), |r| format!("{r} (override)"));
    let internal = |e: std::io::Error| Failure::internal(e.to_string());
    writeln!(out, "bound {}  gamma {}  R {}", args.bound, config.gamma, range).map_err(internal)?;
    out.write_all(report::calibration_table(&rows).as_bytes())
        .map_err(internal)?;
    if let Some(path) = &args.out {
        let mut buf = Vec::new();
        report::write_calibration_csv(&rows, &mut buf)?;
        write_file(path, &buf)?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> CliResult {
    let mut service = Service::new();
    if let Some(dir) = &args.log_dir {
        fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
        service = service.with_log_dir(dir);
    }
    for path in &args.test_sets {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Failure::usage(format!("{}: no file name", path.display())))?;
        service.register_test_set(name, load(path)?).map_err(context(path))?;
    }
    let addr = SocketAddr::new(args.host, args.port);
    server::serve(service, addr, |bound| {
        println!("listening on http://{bound}");
        let _ = std::io::stdout().flush();
    })
    .map_err(|e| Failure::internal(format!("server on {addr}: {e}")))
}

fn run(cli: Cli) -> CliResult {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::GenSynth(a) => gen_synth(a, &mut out),
        Command::Plan(a) => plan(a, &mut out),
        Command::Estimate(a) => estimate_cmd(a, &mut out),
        Command::Simulate(a) => simulate(a, &mut out),
        Command::Calibrate(a) => calibrate(a, &mut out),
        Command::Serve(a) => {
            drop(out);
            serve(a)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
        Err(_) => ExitCode::from(INTERNAL),
    }
}
