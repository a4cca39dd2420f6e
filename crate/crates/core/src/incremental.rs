//! Sequential rating sessions that re-plan the allocation after each rating.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MetricFeatures;
use crate::knn::{IncrementalKnn, DEFAULT_K};
use crate::model::{SampleDraw, TestSet};
use crate::rng::RandomStream;
use crate::stats::population_std;
use crate::stratification::{
    metric_proxy_sigma, optimal_allocation_for_sizes, proportional_allocation, Allocation, Partition,
};

/// How per-bin deviations are re-estimated between ratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Constant deviations: plain proportional allocation.
    Proportional,
    /// Deviation of the ratings already revealed in each bin.
    IncrHuman,
    /// Deviation of revealed ratings plus knn predictions for the rest.
    IncrMetrics,
    /// Caller-supplied deviations, never updated.
    Fixed(Vec<f64>),
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prop" | "proportional" => Ok(Strategy::Proportional),
            "incr-human" => Ok(Strategy::IncrHuman),
            "incr-metrics" => Ok(Strategy::IncrMetrics),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy `{other}` (expected proportional, incr-human or incr-metrics)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Complete,
}

/// One rater working through a fixed budget, one segment at a time.
///
/// Single writer: `next_segment` and `submit_rating` take `&mut self`.
#[derive(Debug, Clone)]
pub struct Session {
    test_set: Arc<TestSet>,
    features: Option<Arc<MetricFeatures>>,
    partition: Partition,
    budget: usize,
    strategy: Strategy,
    rng: RandomStream,
    proxy_sigma: Vec<f64>,
    revealed: Vec<(usize, f64)>,
    is_revealed: Vec<bool>,
    revealed_per_bin: Vec<usize>,
    pending: Option<usize>,
    stride: usize,
    batch_plan: Option<Allocation>,
    sigma_cache: Option<(usize, Vec<f64>)>,
    knn: Option<IncrementalKnn>,
}

impl Session {
    /// `features` may be `None` for test sets without metrics; the cold-start
    /// deviation estimate then falls back to equal deviations.
    pub fn new(
        test_set: Arc<TestSet>,
        features: Option<Arc<MetricFeatures>>,
        partition: Partition,
        budget: usize,
        strategy: Strategy,
        rng: RandomStream,
    ) -> Result<Self> {
        if partition.population() != test_set.len() {
            return Err(Error::DimensionMismatch {
                expected: test_set.len(),
                got: partition.population(),
            });
        }
        if budget == 0 || budget > test_set.len() {
            return Err(Error::SampleSizeOutOfRange {
                n: budget,
                max: test_set.len(),
            });
        }
        if let Strategy::Fixed(s) = &strategy {
            if s.len() != partition.bin_count() {
                return Err(Error::DimensionMismatch {
                    expected: partition.bin_count(),
                    got: s.len(),
                });
            }
        }
        let proxy_sigma = match &features {
            Some(f) => metric_proxy_sigma(f, &partition),
            None => vec![1.0; partition.bin_count()],
        };
        let knn = match (&strategy, &features) {
            (Strategy::IncrMetrics, Some(_)) => Some(IncrementalKnn::new(test_set.len(), DEFAULT_K)?),
            (Strategy::IncrMetrics, None) => {
                return Err(Error::InvalidArgument("incr-metrics needs metric scores".into()));
            }
            _ => None,
        };
        let bins = partition.bin_count();
        Ok(Session {
            is_revealed: vec![false; test_set.len()],
            test_set,
            features,
            partition,
            budget,
            strategy,
            rng,
            proxy_sigma,
            revealed: Vec::new(),
            revealed_per_bin: vec![0; bins],
            pending: None,
            stride: 1,
            batch_plan: None,
            sigma_cache: None,
            knn,
        })
    }

    /// Re-plan only every `stride` ratings (default 1).
    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn test_set(&self) -> &Arc<TestSet> {
        &self.test_set
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn status(&self) -> SessionStatus {
        if self.revealed.len() == self.budget {
            SessionStatus::Complete
        } else {
            SessionStatus::Active
        }
    }

    pub fn pending(&self) -> Option<usize> {
        self.pending
    }

    /// Ratings in submission order.
    pub fn revealed(&self) -> &[(usize, f64)] {
        &self.revealed
    }

    pub fn revealed_per_bin(&self) -> &[usize] {
        &self.revealed_per_bin
    }

    /// The ratings so far as a draw, if any.
    pub fn draw(&self) -> Option<SampleDraw> {
        if self.revealed.is_empty() {
            return None;
        }
        let (indices, scores) = self.revealed.iter().copied().unzip();
        Some(SampleDraw::new(indices, scores, self.test_set.len()).expect("session keeps ratings distinct"))
    }

    /// Current per-bin deviation estimates σ̂_l.
    pub fn variance_estimates(&self) -> Vec<f64> {
        let bins = self.partition.bin_count();
        match &self.strategy {
            Strategy::Proportional => vec![1.0; bins],
            Strategy::Fixed(s) => s.clone(),
            Strategy::IncrHuman => {
                let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); bins];
                for &(i, x) in &self.revealed {
                    per_bin[self.partition.bin_of()[i]].push(x);
                }
                per_bin
                    .iter()
                    .zip(&self.proxy_sigma)
                    .map(|(xs, &proxy)| if xs.len() >= 2 { population_std(xs) } else { proxy })
                    .collect()
            }
            Strategy::IncrMetrics => {
                let knn = self.knn.as_ref().expect("knn state exists for incr-metrics");
                if knn.is_empty() {
                    return self.proxy_sigma.clone();
                }
                let mut scores: Vec<Option<f64>> = vec![None; self.test_set.len()];
                for &(i, x) in &self.revealed {
                    scores[i] = Some(x);
                }
                (0..bins)
                    .map(|l| {
                        let values: Vec<f64> = self
                            .partition
                            .members(l)
                            .iter()
                            .map(|&i| scores[i].unwrap_or_else(|| knn.predict(i).expect("model is trained")))
                            .collect();
                        population_std(&values)
                    })
                    .collect()
            }
        }
    }

    fn sigma_for_planning(&mut self) -> Vec<f64> {
        let rated = self.revealed.len();
        if let Some((at, sigma)) = &self.sigma_cache {
            if rated - at < self.stride {
                return sigma.clone();
            }
        }
        let sigma = self.variance_estimates();
        self.sigma_cache = Some((rated, sigma.clone()));
        sigma
    }

    /// Per-bin number of segments still to draw under the current plan.
    ///
    /// Proportional sessions follow the batch allocation of the whole budget.
    /// The other strategies re-run optimal allocation for the remaining
    /// budget over the unrated segments of each bin.
    pub fn remaining_allocation(&mut self) -> Result<Vec<i64>> {
        let revealed = &self.revealed_per_bin;
        if self.strategy == Strategy::Proportional {
            if self.batch_plan.is_none() {
                self.batch_plan = Some(proportional_allocation(&self.partition, self.budget)?);
            }
            let plan = self.batch_plan.as_ref().expect("set above");
            return Ok(plan
                .counts
                .iter()
                .zip(revealed)
                .map(|(&a, &r)| a as i64 - r as i64)
                .collect());
        }
        let sigma = self.sigma_for_planning();
        let open: Vec<usize> = self
            .partition
            .bin_sizes()
            .iter()
            .zip(&self.revealed_per_bin)
            .map(|(&size, &r)| size - r)
            .collect();
        let remaining = self.budget - self.revealed.len();
        let alloc: Allocation = optimal_allocation_for_sizes(&open, &sigma, remaining)?;
        Ok(alloc.counts.iter().map(|&c| c as i64).collect())
    }

    /// Pick the next segment to rate: re-plan, take the bin whose unrated
    /// segments the plan samples at the highest rate (lowest index on ties)
    /// and draw an unrated segment from it uniformly. Repeated calls before a
    /// rating return the same segment.
    pub fn next_segment(&mut self) -> Result<usize> {
        if self.status() == SessionStatus::Complete {
            return Err(Error::SessionComplete);
        }
        if let Some(p) = self.pending {
            return Ok(p);
        }
        let todo = self.remaining_allocation()?;
        let sizes = self.partition.bin_sizes();
        let open: Vec<i64> = sizes
            .iter()
            .zip(&self.revealed_per_bin)
            .map(|(&size, &r)| (size - r) as i64)
            .collect();
        // highest planned sampling rate todo/open first, compared exactly
        let bin = (0..self.partition.bin_count())
            .filter(|&l| open[l] > 0)
            .max_by(|&a, &b| (todo[a] * open[b]).cmp(&(todo[b] * open[a])).then(b.cmp(&a)))
            .expect("budget ≤ N leaves an unrated segment");
        let candidates: Vec<usize> = self
            .partition
            .members(bin)
            .iter()
            .copied()
            .filter(|&i| !self.is_revealed[i])
            .collect();
        let pick = candidates[self.rng.random_range(0..candidates.len())];
        self.pending = Some(pick);
        Ok(pick)
    }

    pub fn submit_rating(&mut self, index: usize, score: f64) -> Result<SessionStatus> {
        if self.status() == SessionStatus::Complete {
            return Err(Error::SessionComplete);
        }
        let label = || {
            self.test_set
                .segments()
                .get(index)
                .map_or_else(|| format!("#{index}"), |s| s.id.clone())
        };
        if self.pending != Some(index) {
            return Err(Error::NotPending(label()));
        }
        if !score.is_finite() {
            return Err(Error::InvalidArgument(format!("score {score} is not finite")));
        }
        self.pending = None;
        self.is_revealed[index] = true;
        self.revealed_per_bin[self.partition.bin_of()[index]] += 1;
        self.revealed.push((index, score));
        if let (Some(knn), Some(features)) = (self.knn.as_mut(), self.features.as_ref()) {
            knn.insert(features, index, score);
        }
        Ok(self.status())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::knn_fit_pairs;
    use crate::model::fixtures::{scored, scored_single_doc};
    use crate::model::Segment;
    use crate::rng::stream;
    use crate::stratification::partition_by_document;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn session(ts: &TestSet, budget: usize, strategy: Strategy, seed: u64) -> Session {
        let ts = Arc::new(ts.clone());
        let features = MetricFeatures::new(&ts).ok().map(Arc::new);
        let p = partition_by_document(&ts);
        Session::new(ts, features, p, budget, strategy, stream(seed)).unwrap()
    }

    fn run(s: &mut Session) -> Vec<usize> {
        let mut seq = Vec::new();
        while s.status() == SessionStatus::Active {
            let i = s.next_segment().unwrap();
            let x = s.test_set().score(i).unwrap();
            s.submit_rating(i, x).unwrap();
            seq.push(i);
        }
        seq
    }

    fn doc_fixture() -> TestSet {
        let scores = [0.0, 1.0, 4.0, 2.0, 9.0, 3.0, 3.5, 0.5, 7.0, 2.5];
        scored(&scores, &["a", "a", "a", "b", "b", "b", "b", "c", "c", "c"])
    }

    #[test]
    fn census_returns_every_segment_once() {
        for strategy in [Strategy::Proportional, Strategy::IncrHuman, Strategy::IncrMetrics] {
            let ts = doc_fixture();
            let mut s = session(&ts, ts.len(), strategy, 5);
            let mut seq = run(&mut s);
            seq.sort();
            assert_eq!(seq, (0..ts.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_weight_bin_waits_until_the_other_is_exhausted() {
        let ts = scored(&[1.0, 2.0, 3.0, 4.0, 5.0], &["a", "a", "a", "b", "b"]);
        let mut s = session(&ts, 5, Strategy::Fixed(vec![1.0, 0.0]), 1);
        let seq = run(&mut s);
        let mut first: Vec<usize> = seq[..3].to_vec();
        first.sort();
        assert_eq!(first, [0, 1, 2]);
    }

    #[test]
    fn deterministic_sequence() {
        let ts = doc_fixture();
        let a = run(&mut session(&ts, 6, Strategy::IncrHuman, 77));
        let b = run(&mut session(&ts, 6, Strategy::IncrHuman, 77));
        assert_eq!(a, b);
    }

    #[test]
    fn next_is_idempotent_until_submit() {
        let ts = doc_fixture();
        let mut s = session(&ts, 3, Strategy::Proportional, 2);
        let a = s.next_segment().unwrap();
        assert_eq!(s.next_segment().unwrap(), a);
        assert_eq!(s.pending(), Some(a));
    }

    #[test]
    fn submit_errors() {
        let ts = doc_fixture();
        let mut s = session(&ts, 2, Strategy::Proportional, 2);
        let i = s.next_segment().unwrap();
        let other = (i + 1) % ts.len();
        assert!(matches!(s.submit_rating(other, 1.0), Err(Error::NotPending(_))));
        assert!(s.submit_rating(i, f64::NAN).is_err());
        assert_eq!(s.submit_rating(i, 1.0).unwrap(), SessionStatus::Active);
        assert_eq!(s.revealed().len(), 1);
        assert!(matches!(s.submit_rating(i, 1.0), Err(Error::NotPending(_))));
        let j = s.next_segment().unwrap();
        assert_eq!(s.submit_rating(j, 2.0).unwrap(), SessionStatus::Complete);
        assert!(s.draw().is_some());
        assert_eq!(s.next_segment(), Err(Error::SessionComplete));
    }

    #[test]
    fn cold_start_uses_metric_proxy() {
        let ts = doc_fixture();
        let features = MetricFeatures::new(&ts).unwrap();
        let proxy = metric_proxy_sigma(&features, &partition_by_document(&ts));
        for strategy in [Strategy::IncrHuman, Strategy::IncrMetrics] {
            assert_eq!(session(&ts, 4, strategy, 0).variance_estimates(), proxy);
        }
    }

    #[test]
    fn human_estimate_fully_rated_bin() {
        let ts = scored(&[0.0, 0.0, 6.0, 1.0, 5.0], &["a", "a", "a", "b", "b"]);
        let mut s = session(&ts, 5, Strategy::IncrHuman, 3);
        // steer the session: rate every segment of bin a first
        s.strategy = Strategy::Fixed(vec![1.0, 0.0]);
        for _ in 0..3 {
            let i = s.next_segment().unwrap();
            s.submit_rating(i, ts.score(i).unwrap()).unwrap();
        }
        s.strategy = Strategy::IncrHuman;
        let sig = s.variance_estimates();
        assert!((sig[0] - 8f64.sqrt()).abs() < 1e-12);
        assert!((sig[0] - 2.828_427).abs() < 1e-6);
    }

    #[test]
    fn metrics_estimate_matches_refit() {
        let ts = doc_fixture();
        let mut s = session(&ts, 6, Strategy::IncrMetrics, 9);
        for _ in 0..4 {
            let i = s.next_segment().unwrap();
            s.submit_rating(i, ts.score(i).unwrap()).unwrap();
        }
        let features = MetricFeatures::new(&ts).unwrap();
        let (idx, y): (Vec<usize>, Vec<f64>) = s.revealed().iter().copied().unzip();
        let model = knn_fit_pairs(&features, &idx, &y, DEFAULT_K).unwrap();
        let p = partition_by_document(&ts);
        let expect: Vec<f64> = (0..p.bin_count())
            .map(|l| {
                let v: Vec<f64> = p
                    .members(l)
                    .iter()
                    .map(|&i| match idx.iter().position(|&j| j == i) {
                        Some(k) => y[k],
                        None => model.predict(features.row(i)).unwrap(),
                    })
                    .collect();
                population_std(&v)
            })
            .collect();
        let got = s.variance_estimates();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn proportional_session_matches_batch_counts() {
        let ts = doc_fixture();
        let p = partition_by_document(&ts);
        for budget in 1..=ts.len() {
            let mut s = session(&ts, budget, Strategy::Proportional, budget as u64);
            run(&mut s);
            let batch = proportional_allocation(&p, budget).unwrap();
            assert_eq!(s.revealed_per_bin(), batch.counts.as_slice());
        }
    }

    #[test]
    fn constant_sigma_session_tracks_batch_counts() {
        let ts = doc_fixture();
        let p = partition_by_document(&ts);
        for budget in 1..=ts.len() {
            let mut s = session(&ts, budget, Strategy::Fixed(vec![2.0; 3]), budget as u64);
            run(&mut s);
            let batch = proportional_allocation(&p, budget).unwrap();
            for (a, b) in s.revealed_per_bin().iter().zip(&batch.counts) {
                assert!(
                    a.abs_diff(*b) <= 1,
                    "budget {budget}: {:?} vs {:?}",
                    s.revealed_per_bin(),
                    batch.counts
                );
            }
        }
    }

    #[test]
    fn budget_is_validated() {
        let ts = Arc::new(scored_single_doc(&[1.0, 2.0]));
        let p = Partition::single(2).unwrap();
        assert!(Session::new(ts.clone(), None, p.clone(), 0, Strategy::Proportional, stream(0)).is_err());
        assert!(Session::new(ts.clone(), None, p.clone(), 3, Strategy::Proportional, stream(0)).is_err());
        assert!(Session::new(ts, None, p, 2, Strategy::IncrMetrics, stream(0)).is_err());
    }

    #[test]
    fn sessions_without_metrics_still_run() {
        let segs = (0..6)
            .map(|i| Segment::new(format!("s{i}"), if i < 3 { "a" } else { "b" }, vec![], Some(i as f64)))
            .collect();
        let ts = TestSet::new(segs, vec![]).unwrap();
        let mut s = session(&ts, 4, Strategy::IncrHuman, 4);
        assert_eq!(run(&mut s).len(), 4);
    }

    proptest! {
        #[test]
        fn scripted_sessions_never_repeat(
            seed in 0u64..1000,
            budget_frac in 0.0f64..1.0,
            strategy in 0usize..3,
            ratings in prop::collection::vec(0.0f64..25.0, 10),
        ) {
            let ts = doc_fixture();
            let budget = 1 + (budget_frac * 9.0) as usize;
            let strategy = [Strategy::Proportional, Strategy::IncrHuman, Strategy::IncrMetrics][strategy].clone();
            let mut s = session(&ts, budget, strategy, seed);
            let mut seen = std::collections::HashSet::new();
            let mut k = 0;
            while s.status() == SessionStatus::Active {
                let i = s.next_segment().unwrap();
                prop_assert!(i < ts.len());
                prop_assert!(seen.insert(i));
                s.submit_rating(i, ratings[k]).unwrap();
                k += 1;
            }
            prop_assert_eq!(seen.len(), budget);
            prop_assert!(s.draw().is_some());
        }
    }
}
