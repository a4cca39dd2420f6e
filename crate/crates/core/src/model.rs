//! Test sets, sample draws and the baseline estimator.

use std::collections::{HashMap, HashSet};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Which end of the rating scale is better. Only affects reporting labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreDirection {
    #[default]
    Lower,
    Higher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: String,
    pub doc_id: String,
    pub metrics: Vec<f64>,
    pub score: Option<f64>,
}

impl Segment {
    pub fn new(id: impl Into<String>, doc_id: impl Into<String>, metrics: Vec<f64>, score: Option<f64>) -> Self {
        Segment {
            id: id.into(),
            doc_id: doc_id.into(),
            metrics,
            score,
        }
    }
}

/// An immutable, validated collection of segments.
///
/// Scores may be absent (live mode, before rating) or present (simulation
/// mode); every estimator works the same in both.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    segments: Vec<Segment>,
    metric_names: Vec<String>,
    doc_order: Vec<String>,
    doc_index: HashMap<String, Vec<usize>>,
    id_index: HashMap<String, usize>,
    direction: ScoreDirection,
}

impl TestSet {
    pub fn new(segments: Vec<Segment>, metric_names: Vec<String>) -> Result<Self> {
        Self::with_direction(segments, metric_names, ScoreDirection::default())
    }

    pub fn with_direction(
        segments: Vec<Segment>,
        metric_names: Vec<String>,
        direction: ScoreDirection,
    ) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidTestSet("test set has no segments".into()));
        }
        let m = metric_names.len();
        let mut doc_order = Vec::new();
        let mut doc_index: HashMap<String, Vec<usize>> = HashMap::new();
        let mut id_index = HashMap::with_capacity(segments.len());
        for (i, seg) in segments.iter().enumerate() {
            if seg.metrics.len() != m {
                return Err(Error::InvalidTestSet(format!(
                    "segment `{}` has {} metric values, expected {m}",
                    seg.id,
                    seg.metrics.len()
                )));
            }
            if seg.metrics.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidTestSet(format!(
                    "segment `{}` has a non-finite metric value",
                    seg.id
                )));
            }
            if let Some(s) = seg.score {
                if !s.is_finite() {
                    return Err(Error::InvalidTestSet(format!(
                        "segment `{}` has a non-finite score",
                        seg.id
                    )));
                }
            }
            if id_index.insert(seg.id.clone(), i).is_some() {
                return Err(Error::InvalidTestSet(format!("duplicate segment id `{}`", seg.id)));
            }
            doc_index
                .entry(seg.doc_id.clone())
                .or_insert_with(|| {
                    doc_order.push(seg.doc_id.clone());
                    Vec::new()
                })
                .push(i);
        }
        Ok(TestSet {
            segments,
            metric_names,
            doc_order,
            doc_index,
            id_index,
            direction,
        })
    }

    /// N
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, index: usize) -> &Segment {
        &self.segments[index]
    }

    pub fn metric_names(&self) -> &[String] {
        &self.metric_names
    }

    /// M
    pub fn metric_count(&self) -> usize {
        self.metric_names.len()
    }

    /// Document ids in order of first appearance.
    pub fn documents(&self) -> &[String] {
        &self.doc_order
    }

    pub fn doc_members(&self, doc_id: &str) -> Option<&[usize]> {
        self.doc_index.get(doc_id).map(Vec::as_slice)
    }

    pub fn index_of(&self, segment_id: &str) -> Option<usize> {
        self.id_index.get(segment_id).copied()
    }

    pub fn direction(&self) -> ScoreDirection {
        self.direction
    }

    /// Column `j` of the metric matrix.
    pub fn metric_column(&self, j: usize) -> Vec<f64> {
        self.segments.iter().map(|s| s.metrics[j]).collect()
    }

    pub fn has_all_scores(&self) -> bool {
        self.segments.iter().all(|s| s.score.is_some())
    }

    pub fn score(&self, index: usize) -> Result<f64> {
        self.segments[index].score.ok_or(Error::MissingScore { index })
    }

    /// All scores; fails in live mode.
    pub fn scores(&self) -> Result<Vec<f64>> {
        (0..self.len()).map(|i| self.score(i)).collect()
    }

    /// The full-test-set mean score μ.
    pub fn true_mean(&self) -> Result<f64> {
        Ok(self.scores()?.iter().sum::<f64>() / self.len() as f64)
    }

    /// Population variance σ² of the scores.
    pub fn score_variance(&self) -> Result<f64> {
        Ok(crate::stats::population_variance(&self.scores()?))
    }

    /// Copy with every score replaced by `scores`.
    pub fn with_scores(&self, scores: &[f64]) -> Result<TestSet> {
        if scores.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: scores.len(),
            });
        }
        let segments = self
            .segments
            .iter()
            .zip(scores)
            .map(|(s, &x)| Segment {
                score: Some(x),
                ..s.clone()
            })
            .collect();
        TestSet::with_direction(segments, self.metric_names.clone(), self.direction)
    }
}

/// Segment indices drawn without replacement, with their revealed scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDraw {
    indices: Vec<usize>,
    scores: Vec<f64>,
}

impl SampleDraw {
    /// Validates distinctness and alignment; `population` bounds the indices.
    pub fn new(indices: Vec<usize>, scores: Vec<f64>, population: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDraw);
        }
        if indices.len() != scores.len() {
            return Err(Error::DimensionMismatch {
                expected: indices.len(),
                got: scores.len(),
            });
        }
        if indices.len() > population {
            return Err(Error::SampleSizeOutOfRange {
                n: indices.len(),
                max: population,
            });
        }
        let mut seen = HashSet::with_capacity(indices.len());
        for &i in &indices {
            if i >= population {
                return Err(Error::InvalidArgument(format!("index {i} outside [0, {population})")));
            }
            if !seen.insert(i) {
                return Err(Error::InvalidArgument(format!("index {i} drawn twice")));
            }
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite score {s}")));
        }
        Ok(SampleDraw { indices, scores })
    }

    /// Look up the scores of `indices` in a rated test set.
    pub fn reveal(test_set: &TestSet, indices: Vec<usize>) -> Result<Self> {
        let scores = indices
            .iter()
            .map(|&i| {
                if i >= test_set.len() {
                    Err(Error::InvalidArgument(format!(
                        "index {i} outside [0, {})",
                        test_set.len()
                    )))
                } else {
                    test_set.score(i)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        SampleDraw::new(indices, scores, test_set.len())
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// n
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn mean(&self) -> f64 {
        crate::stats::mean(&self.scores)
    }
}

/// Conditions attached to an estimate that a caller may want to surface.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateFlag {
    /// Some strata had no sampled segment; weights were renormalized.
    PartialCoverage,
    /// The requested control variate was degenerate and a simpler one was used.
    VariateFallback(String),
    /// Collinear variate columns were dropped before solving.
    DroppedColumns(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub method: String,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<EstimateFlag>,
}

impl Estimate {
    pub fn new(value: f64, method: impl Into<String>, n: usize) -> Self {
        Estimate {
            value,
            method: method.into(),
            n,
            flags: Vec::new(),
        }
    }

    pub fn with_flag(mut self, flag: EstimateFlag) -> Self {
        self.flags.push(flag);
        self
    }
}

/// `n` distinct indices from `0..population`, uniformly without replacement.
pub fn random_indices(population: usize, n: usize, rng: &mut RandomStream) -> Result<Vec<usize>> {
    if n == 0 || n > population {
        return Err(Error::SampleSizeOutOfRange { n, max: population });
    }
    Ok(index::sample(rng, population, n).into_vec())
}

/// Simple random sample of `n` segments with their scores revealed.
pub fn random_sample(test_set: &TestSet, n: usize, rng: &mut RandomStream) -> Result<SampleDraw> {
    let indices = random_indices(test_set.len(), n, rng)?;
    SampleDraw::reveal(test_set, indices)
}

/// The baseline estimator: the plain sample mean.
pub fn sample_mean(draw: &SampleDraw) -> Result<Estimate> {
    if draw.is_empty() {
        return Err(Error::EmptyDraw);
    }
    Ok(Estimate::new(draw.mean(), "baseline", draw.len()))
}

/// Variance of the sample mean under simple random sampling without
/// replacement: (σ²/n)·(N−n)/(N−1).
pub fn baseline_variance(sigma2: f64, n: usize, population: usize) -> Result<f64> {
    if population < 2 {
        return Err(Error::PopulationTooSmall(population));
    }
    if n == 0 || n > population {
        return Err(Error::SampleSizeOutOfRange { n, max: population });
    }
    if sigma2 < 0.0 || !sigma2.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "variance {sigma2} must be finite and non-negative"
        )));
    }
    let (n, big_n) = (n as f64, population as f64);
    Ok(sigma2 / n * (big_n - n) / (big_n - 1.0))
}
