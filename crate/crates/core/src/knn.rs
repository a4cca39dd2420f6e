//! Unweighted k-nearest-neighbor regression on standardized metric vectors.

use crate::error::{Error, Result};
use crate::features::MetricFeatures;
use crate::model::SampleDraw;

pub const DEFAULT_K: usize = 25;

/// Training points are kept in insertion (draw) order; distance ties go to
/// the earlier point.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    k: usize,
    width: usize,
    points: Vec<f64>,
    targets: Vec<f64>,
}

impl KnnModel {
    pub fn new(k: usize, width: usize, points: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if targets.is_empty() {
            return Err(Error::EmptyDraw);
        }
        if points.len() != width * targets.len() {
            return Err(Error::DimensionMismatch {
                expected: width * targets.len(),
                got: points.len(),
            });
        }
        Ok(KnnModel {
            k,
            width,
            points,
            targets,
        })
    }

    /// Neighbor count actually used: min(k, training size).
    pub fn effective_k(&self) -> usize {
        self.k.min(self.targets.len())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn predict(&self, query: &[f64]) -> Result<f64> {
        if query.len() != self.width {
            return Err(Error::DimensionMismatch {
                expected: self.width,
                got: query.len(),
            });
        }
        let mut scratch = Vec::with_capacity(self.targets.len());
        Ok(self.predict_with(query, &mut scratch))
    }

    fn predict_with(&self, query: &[f64], scratch: &mut Vec<(f64, usize)>) -> f64 {
        let k = self.effective_k();
        scratch.clear();
        for (t, point) in self
            .points
            .chunks_exact(self.width.max(1))
            .enumerate()
            .take(self.targets.len())
        {
            let d: f64 = if self.width == 0 {
                0.0
            } else {
                point.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            scratch.push((d, t));
        }
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        scratch.select_nth_unstable_by(k - 1, by_distance);
        let nearest = &mut scratch[..k];
        nearest.sort_unstable_by(by_distance);
        nearest.iter().map(|&(_, t)| self.targets[t]).sum::<f64>() / k as f64
    }

    /// Predictions for every row of `features`.
    pub fn predict_all(&self, features: &MetricFeatures) -> Result<Vec<f64>> {
        if features.width() != self.width {
            return Err(Error::DimensionMismatch {
                expected: self.width,
                got: features.width(),
            });
        }
        let mut scratch = Vec::with_capacity(self.targets.len());
        Ok((0..features.rows())
            .map(|r| self.predict_with(features.row(r), &mut scratch))
            .collect())
    }
}

/// Fit on the standardized metric rows of the sampled segments.
pub fn knn_fit(features: &MetricFeatures, draw: &SampleDraw, k: usize) -> Result<KnnModel> {
    knn_fit_pairs(features, draw.indices(), draw.scores(), k)
}

pub(crate) fn knn_fit_pairs(
    features: &MetricFeatures,
    indices: &[usize],
    scores: &[f64],
    k: usize,
) -> Result<KnnModel> {
    if indices.is_empty() {
        return Err(Error::EmptyDraw);
    }
    let mut points = Vec::with_capacity(indices.len() * features.width());
    for &i in indices {
        if i >= features.rows() {
            return Err(Error::InvalidArgument(format!("index {i} outside the test set")));
        }
        points.extend_from_slice(features.row(i));
    }
    KnnModel::new(k, features.width(), points, scores.to_vec())
}

/// Knn predictions for every segment, maintained as training points arrive
/// one at a time. Each segment keeps its k nearest training points sorted by
/// (distance, insertion order), so predictions match a model refit on the
/// same points in the same order.
#[derive(Debug, Clone)]
pub struct IncrementalKnn {
    k: usize,
    // per segment: (squared distance, insertion order, score), sorted
    nearest: Vec<Vec<(f64, usize, f64)>>,
    inserted: usize,
}

impl IncrementalKnn {
    pub fn new(rows: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        Ok(IncrementalKnn {
            k,
            nearest: vec![Vec::with_capacity(k + 1); rows],
            inserted: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.inserted
    }

    pub fn is_empty(&self) -> bool {
        self.inserted == 0
    }

    /// Add the training point at row `index` with `score`.
    pub fn insert(&mut self, features: &MetricFeatures, index: usize, score: f64) {
        let point = features.row(index);
        let order = self.inserted;
        self.inserted += 1;
        for (r, list) in self.nearest.iter_mut().enumerate() {
            let d: f64 = features.row(r).iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
            if list.len() == self.k && d >= list[self.k - 1].0 {
                continue;
            }
            // later insertions lose distance ties
            let at = list.partition_point(|&(e, _, _)| e <= d);
            list.insert(at, (d, order, score));
            list.truncate(self.k);
        }
    }

    /// Prediction for row `r`; `None` before any insertion.
    pub fn predict(&self, r: usize) -> Option<f64> {
        let list = &self.nearest[r];
        if list.is_empty() {
            return None;
        }
        Some(list.iter().map(|&(_, _, s)| s).sum::<f64>() / list.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(k: usize, pts: &[[f64; 2]], y: &[f64]) -> KnnModel {
        KnnModel::new(k, 2, pts.iter().flatten().copied().collect(), y.to_vec()).unwrap()
    }

    #[test]
    fn single_point_predicts_its_score() {
        let m = model(25, &[[0.3, -1.0]], &[4.0]);
        assert_eq!(m.predict(&[9.0, 9.0]).unwrap(), 4.0);
        assert_eq!(m.effective_k(), 1);
    }

    #[test]
    fn full_neighborhood_is_the_mean() {
        let m = model(2, &[[0.0, 0.0], [5.0, 5.0]], &[0.0, 10.0]);
        for q in [[0.0, 0.0], [100.0, -3.0], [2.5, 2.5]] {
            assert_eq!(m.predict(&q).unwrap(), 5.0);
        }
    }

    #[test]
    fn k1_returns_nearest() {
        let m = model(1, &[[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]], &[1.0, 2.0, 3.0]);
        assert_eq!(m.predict(&[0.9, 0.2]).unwrap(), 2.0);
        assert_eq!(m.predict(&[0.0, 3.0]).unwrap(), 3.0);
        // equidistant from the first two: the earlier one wins
        assert_eq!(m.predict(&[0.5, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn k3_matches_exhaustive_sort() {
        let pts = [[0.0, 0.0], [2.0, 1.0], [-1.0, 1.5], [0.5, -0.5], [3.0, 3.0]];
        let y = [1.0, 7.0, 3.0, 5.0, 11.0];
        let m = model(3, &pts, &y);
        let q = [0.4, 0.6];
        let mut d: Vec<(f64, usize)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt(), i))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect = d[..3].iter().map(|&(_, i)| y[i]).sum::<f64>() / 3.0;
        assert!((m.predict(&q).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn incremental_matches_refit() {
        use crate::model::{Segment, TestSet};
        let segs = (0..30)
            .map(|i| {
                let a = ((i * 7) % 11) as f64;
                let b = ((i * 3) % 5) as f64;
                Segment::new(format!("s{i}"), "d", vec![a, b], None)
            })
            .collect();
        let ts = TestSet::new(segs, vec!["a".into(), "b".into()]).unwrap();
        let f = MetricFeatures::new(&ts).unwrap();
        let order = [4usize, 17, 0, 29, 8, 13, 22, 1, 5, 26, 11];
        let mut inc = IncrementalKnn::new(30, 3).unwrap();
        for (t, &i) in order.iter().enumerate() {
            inc.insert(&f, i, i as f64 * 0.5);
            let idx = &order[..=t];
            let y: Vec<f64> = idx.iter().map(|&i| i as f64 * 0.5).collect();
            let batch = knn_fit_pairs(&f, idx, &y, 3).unwrap().predict_all(&f).unwrap();
            for (r, b) in batch.iter().enumerate() {
                assert_eq!(inc.predict(r).unwrap().to_bits(), b.to_bits(), "row {r} after {t}");
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let m = model(1, &[[0.0, 0.0]], &[1.0]);
        assert!(m.predict(&[0.0]).is_err());
        assert!(KnnModel::new(0, 1, vec![0.0], vec![1.0]).is_err());
        assert!(KnnModel::new(1, 1, vec![], vec![]).is_err());
    }
}
