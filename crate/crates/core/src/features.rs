//! Standardized metric features shared by metric binning, the metric-proxy
//! variance estimate and the control variates.

use log::warn;

use crate::error::{Error, Result};
use crate::model::TestSet;
use crate::stats::standardize;

/// Metric columns z-scored over the whole test set.
///
/// Constant columns carry no information and are dropped with a warning.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricFeatures {
    rows: usize,
    kept: Vec<usize>,
    dropped: Vec<usize>,
    // row-major, rows × kept.len()
    data: Vec<f64>,
}

impl MetricFeatures {
    pub fn new(test_set: &TestSet) -> Result<Self> {
        let m = test_set.metric_count();
        if m == 0 {
            return Err(Error::InvalidArgument("test set has no metric columns".into()));
        }
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        let mut columns = Vec::new();
        for j in 0..m {
            match standardize(&test_set.metric_column(j)) {
                Some(z) => {
                    kept.push(j);
                    columns.push(z);
                }
                None => {
                    warn!(
                        "metric `{}` is constant over the test set; ignoring it",
                        test_set.metric_names()[j]
                    );
                    dropped.push(j);
                }
            }
        }
        if kept.is_empty() {
            return Err(Error::ZeroVariance("every metric column is constant".into()));
        }
        let rows = test_set.len();
        let width = kept.len();
        let mut data = vec![0.0; rows * width];
        for (c, col) in columns.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                data[r * width + c] = *v;
            }
        }
        Ok(MetricFeatures {
            rows,
            kept,
            dropped,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of retained (non-constant) metrics.
    pub fn width(&self) -> usize {
        self.kept.len()
    }

    /// Original metric indices that were kept, in order.
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.width() + c]).collect()
    }

    /// Per-segment mean of the standardized metrics.
    pub fn mean_z(&self) -> Vec<f64> {
        let w = self.width() as f64;
        (0..self.rows).map(|r| self.row(r).iter().sum::<f64>() / w).collect()
    }
}
