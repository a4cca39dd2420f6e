//! Estimator stacks: an optional stratification plus an optional control
//! variate, with the fallbacks used when a variate is degenerate.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control_variates::{
    cv_estimate_scalar, cv_estimate_stratified, variate_from_knn_features, variate_from_metric,
    variate_mean_of_features, variate_multi_features, CovarianceEstimator, GramSystem, Variate, VariateKind,
};
use crate::error::{Error, Result};
use crate::features::MetricFeatures;
use crate::knn::DEFAULT_K;
use crate::model::{sample_mean, Estimate, EstimateFlag, SampleDraw, TestSet};
use crate::stratification::{
    partition_by_document, partition_by_metric_features, stratified_estimate, Partition, DEFAULT_METRIC_BIN_SIZE,
};

/// How the test set is cut into strata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strata {
    None,
    Documents,
    Metrics,
}

impl std::str::FromStr for Strata {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "random" => Ok(Strata::None),
            "docs" | "documents" => Ok(Strata::Documents),
            "metrics" => Ok(Strata::Metrics),
            other => Err(Error::InvalidArgument(format!(
                "unknown strata `{other}` (expected none, docs or metrics)"
            ))),
        }
    }
}

/// Which control variate to apply after sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariateChoice {
    None,
    Single(usize),
    Mean,
    Multi,
    Knn(usize),
}

impl VariateChoice {
    pub fn needs_metrics(&self) -> bool {
        !matches!(self, VariateChoice::None)
    }

    pub fn label(&self) -> String {
        match self {
            VariateChoice::None => "none".into(),
            VariateChoice::Single(j) => format!("single({j})"),
            VariateChoice::Mean => "mean".into(),
            VariateChoice::Multi => "multi".into(),
            VariateChoice::Knn(k) => format!("knn(k={k})"),
        }
    }
}

/// Per-test-set data reused across many draws.
#[derive(Debug, Clone)]
pub struct Prepared {
    features: Option<Arc<MetricFeatures>>,
    documents: Partition,
    metrics: Option<Partition>,
    mean_variate: Option<Variate>,
    multi: Option<(Variate, GramSystem)>,
}

impl Prepared {
    pub fn new(test_set: &TestSet, metric_bin_size: usize) -> Result<Self> {
        let features = if test_set.metric_count() > 0 {
            match MetricFeatures::new(test_set) {
                Ok(f) => Some(Arc::new(f)),
                Err(Error::ZeroVariance(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let metrics = features
            .as_ref()
            .map(|f| partition_by_metric_features(f, metric_bin_size))
            .transpose()?;
        let mean_variate = features.as_ref().and_then(|f| variate_mean_of_features(f).ok());
        let multi = features.as_ref().map(|f| {
            let v = variate_multi_features(f).expect("features have columns");
            let g = GramSystem::new(&v);
            (v, g)
        });
        Ok(Prepared {
            documents: partition_by_document(test_set),
            features,
            metrics,
            mean_variate,
            multi,
        })
    }

    pub fn with_default_bins(test_set: &TestSet) -> Result<Self> {
        Prepared::new(test_set, DEFAULT_METRIC_BIN_SIZE)
    }

    pub fn features(&self) -> Option<&Arc<MetricFeatures>> {
        self.features.as_ref()
    }

    pub fn partition(&self, strata: Strata) -> Result<Option<&Partition>> {
        match strata {
            Strata::None => Ok(None),
            Strata::Documents => Ok(Some(&self.documents)),
            Strata::Metrics => self
                .metrics
                .as_ref()
                .map(Some)
                .ok_or_else(|| Error::InvalidArgument("metric strata need at least one non-constant metric".into())),
        }
    }

    fn require_features(&self) -> Result<&MetricFeatures> {
        self.features
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("control variates need at least one non-constant metric".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackEstimate {
    pub estimate: Estimate,
    /// The variate actually applied, after fallbacks.
    pub variate: Option<VariateKind>,
    pub warnings: Vec<String>,
}

/// Apply `strata` weighting and the `choice` variate to a realized draw.
///
/// knn falls back to the mean-of-metrics variate when its predictions are
/// constant, and that in turn to no variate.
pub fn estimate(
    prepared: &Prepared,
    test_set: &TestSet,
    draw: &SampleDraw,
    strata: Strata,
    choice: VariateChoice,
    covariance: CovarianceEstimator,
) -> Result<StackEstimate> {
    let partition = prepared.partition(strata)?;
    let mut warnings = Vec::new();
    let mut flags = Vec::new();

    if choice == VariateChoice::Multi {
        prepared.require_features()?;
        let (v, g) = prepared.multi.as_ref().expect("features imply multi variate");
        let mut est = g.estimate_with(draw, v, partition)?;
        if g.dropped() > 0 {
            warnings.push(format!("dropped {} collinear metric column(s)", g.dropped()));
        }
        est.method = method_label(strata, choice);
        return Ok(StackEstimate {
            estimate: est,
            variate: Some(VariateKind::Multi),
            warnings,
        });
    }

    let variate: Option<Variate> = match choice {
        VariateChoice::None => None,
        VariateChoice::Single(j) => {
            prepared.require_features()?;
            Some(variate_from_metric(test_set, j)?)
        }
        VariateChoice::Mean => {
            prepared.require_features()?;
            Some(
                prepared
                    .mean_variate
                    .clone()
                    .ok_or_else(|| Error::ZeroVariance("mean of standardized metrics is constant".into()))?,
            )
        }
        VariateChoice::Knn(k) => {
            let features = prepared.require_features()?;
            match variate_from_knn_features(features, draw, k) {
                Ok(v) => Some(v),
                Err(Error::ZeroVariance(_)) => {
                    let note = "knn predictions are constant; using the mean-of-metrics variate".to_string();
                    match &prepared.mean_variate {
                        Some(v) => {
                            warnings.push(note.clone());
                            flags.push(EstimateFlag::VariateFallback("mean".into()));
                            Some(v.clone())
                        }
                        None => {
                            warnings.push("no usable control variate; estimating without one".into());
                            flags.push(EstimateFlag::VariateFallback("none".into()));
                            None
                        }
                    }
                }
                Err(e) => return Err(e),
            }
        }
        VariateChoice::Multi => unreachable!(),
    };

    let mut est = match (&variate, partition) {
        (None, None) => sample_mean(draw)?,
        (None, Some(p)) => stratified_estimate(draw, p)?,
        (Some(v), None) => cv_estimate_scalar(draw, v, covariance)?,
        (Some(v), Some(p)) => cv_estimate_stratified(draw, v, p, covariance)?,
    };
    est.method = method_label(strata, choice);
    est.flags.extend(flags);
    Ok(StackEstimate {
        variate: variate.map(|v| v.kind().clone()),
        estimate: est,
        warnings,
    })
}

fn method_label(strata: Strata, choice: VariateChoice) -> String {
    let s = match strata {
        Strata::None => "random",
        Strata::Documents => "docs",
        Strata::Metrics => "metrics",
    };
    match choice {
        VariateChoice::None => s.to_string(),
        c => format!("{s}+cv-{}", c.label()),
    }
}

/// The default stack: document strata with a knn control variate.
pub fn recommended() -> (Strata, VariateChoice) {
    (Strata::Documents, VariateChoice::Knn(DEFAULT_K))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Segment;

    fn fixture() -> TestSet {
        let segs = (0..12)
            .map(|i| {
                let m = (i * 5 % 12) as f64;
                Segment::new(
                    format!("s{i}"),
                    format!("d{}", i / 4),
                    vec![m, m * 0.5 + (i % 3) as f64],
                    Some(m + 1.0),
                )
            })
            .collect();
        TestSet::new(segs, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn knn_falls_back_to_mean_for_single_rating() {
        let ts = fixture();
        let p = Prepared::new(&ts, 4).unwrap();
        let d = SampleDraw::reveal(&ts, vec![3]).unwrap();
        let e = estimate(
            &p,
            &ts,
            &d,
            Strata::Documents,
            VariateChoice::Knn(25),
            CovarianceEstimator::Uncentered,
        )
        .unwrap();
        assert_eq!(e.variate, Some(VariateKind::MeanOfMetrics));
        assert!(e.estimate.flags.contains(&EstimateFlag::VariateFallback("mean".into())));
        assert_eq!(e.warnings.len(), 1);
    }

    #[test]
    fn census_recovers_mean_for_every_stack() {
        let ts = fixture();
        let mu = ts.true_mean().unwrap();
        let p = Prepared::new(&ts, 4).unwrap();
        let d = SampleDraw::reveal(&ts, (0..12).collect()).unwrap();
        for strata in [Strata::None, Strata::Documents, Strata::Metrics] {
            for choice in [
                VariateChoice::None,
                VariateChoice::Single(1),
                VariateChoice::Mean,
                VariateChoice::Multi,
                VariateChoice::Knn(3),
            ] {
                let e = estimate(&p, &ts, &d, strata, choice, CovarianceEstimator::Uncentered).unwrap();
                assert!((e.estimate.value - mu).abs() < 1e-9, "{strata:?} {choice:?}");
            }
        }
    }

    #[test]
    fn variates_need_metrics() {
        let segs = (0..4)
            .map(|i| Segment::new(format!("s{i}"), "d", vec![], Some(i as f64)))
            .collect();
        let ts = TestSet::new(segs, vec![]).unwrap();
        let p = Prepared::new(&ts, 80).unwrap();
        let d = SampleDraw::reveal(&ts, vec![0, 1]).unwrap();
        for choice in [
            VariateChoice::Mean,
            VariateChoice::Multi,
            VariateChoice::Knn(2),
            VariateChoice::Single(0),
        ] {
            assert!(estimate(&p, &ts, &d, Strata::None, choice, CovarianceEstimator::Uncentered).is_err());
        }
        assert!(estimate(
            &p,
            &ts,
            &d,
            Strata::Metrics,
            VariateChoice::None,
            CovarianceEstimator::Uncentered
        )
        .is_err());
        let e = estimate(
            &p,
            &ts,
            &d,
            Strata::Documents,
            VariateChoice::None,
            CovarianceEstimator::Uncentered,
        )
        .unwrap();
        assert_eq!(e.estimate.value, 0.5);
    }
}
