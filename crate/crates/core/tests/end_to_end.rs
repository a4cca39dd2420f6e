use std::sync::Arc;

use evalsample::bounds::{empirical_range, RangeSource};
use evalsample::control_variates::CovarianceEstimator;
use evalsample::dataio::{generate_synthetic, load_test_set, save_test_set, SyntheticSpec};
use evalsample::pipeline::{estimate, recommended, Prepared};
use evalsample::rng::stream;
use evalsample::service::{read_log, replay, NextSegment, Rating, Service, SessionConfig};
use evalsample::simulation::{run_simulation, Method, SimulationConfig};
use evalsample::stratification::{partition_by_document, proportional_allocation, stratified_sample};
use evalsample::TestSet;

fn synthetic(segments: usize, seed: u64) -> TestSet {
    generate_synthetic(&SyntheticSpec {
        segments,
        documents: 12,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn file_round_trip_then_recommended_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ts.tsv");
    let ts = synthetic(240, 3);
    save_test_set(&ts, &path).unwrap();
    let loaded = load_test_set(&path).unwrap();
    assert_eq!(loaded, ts);

    let partition = partition_by_document(&loaded);
    let alloc = proportional_allocation(&partition, 48).unwrap();
    let draw = stratified_sample(&loaded, &partition, &alloc, &mut stream(8)).unwrap();
    let prepared = Prepared::with_default_bins(&loaded).unwrap();
    let (strata, choice) = recommended();
    let est = estimate(
        &prepared,
        &loaded,
        &draw,
        strata,
        choice,
        CovarianceEstimator::Uncentered,
    )
    .unwrap();
    assert_eq!(est.estimate.method, "docs+cv-knn(k=25)");
    assert_eq!(est.estimate.n, 48);
    let range = empirical_range(&loaded, None).unwrap();
    assert_eq!(range.source, RangeSource::Observed);
    assert!((est.estimate.value - loaded.true_mean().unwrap()).abs() < range.value);
}

#[test]
fn simulation_is_independent_of_thread_count() {
    let sims: Vec<(String, Arc<TestSet>)> = (0..3)
        .map(|i| (format!("s{i}"), Arc::new(synthetic(100, 10 + i))))
        .collect();
    let config = SimulationConfig {
        methods: vec![Method::DocsProp, Method::DocsIncrHuman, Method::CvKnn],
        size_fractions: vec![0.1, 0.3],
        draws_per_size: 4,
        ..Default::default()
    };
    let parallel = run_simulation(&sims, &config).unwrap();
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_simulation(&sims, &config).unwrap());
    assert_eq!(parallel, single);
}

#[test]
fn logged_session_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ts = synthetic(80, 4);
    let service = Service::new().with_log_dir(dir.path());
    service.register_test_set("t", ts.clone()).unwrap();
    let mut config = SessionConfig::new("t", 15);
    config.strategy = "incr-metrics".into();
    config.seed = 21;
    let id = service.create_session(config).unwrap().session_id;
    while let NextSegment::Pending { segment_id, .. } = service.next(&id).unwrap() {
        let score = ts.score(ts.index_of(&segment_id).unwrap()).unwrap();
        service.submit(&id, &Rating { segment_id, score }).unwrap();
    }
    let report = service.report(&id).unwrap();
    let (logged, ratings) = read_log(&dir.path().join(format!("{id}.jsonl"))).unwrap();
    assert_eq!(replay(ts, &logged, &ratings).unwrap(), report.rows);
}
