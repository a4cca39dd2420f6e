//! File formats: rated test sets (TSV), ratings, flat key=value simulation
//! configs, and an MQM-like synthetic data generator.
//!
//! Test-set layout (tab-separated, shown here with spaces):
//!
//! ```text
//! #direction=lower
//! segment_id  doc_id  score  bleurt  comet
//! s1          d1      0.0    0.41    0.73
//! s2          d1             0.12    0.55
//! ```
//!
//! An empty score marks an unrated segment. Lines starting with `#` are
//! directives (`direction=lower|higher`) or comments.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::control_variates::CovarianceEstimator;
use crate::error::{Error, Result};
use crate::model::{ScoreDirection, Segment, TestSet};
use crate::rng::substream;
use crate::simulation::{Method, SimulationConfig};
use crate::stats::{mean, pearson, standardize};
use crate::stratification::round_allocation;

const REQUIRED_COLUMNS: [&str; 3] = ["segment_id", "doc_id", "score"];

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_number(field: &str, what: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_error(line, format!("{what}: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(line, format!("{what}: `{field}` is not finite")));
    }
    Ok(v)
}

pub fn load_test_set(path: &Path) -> Result<TestSet> {
    parse_test_set(&read(path)?)
}

pub fn parse_test_set(text: &str) -> Result<TestSet> {
    let mut direction = ScoreDirection::default();
    let mut header: Option<Vec<String>> = None;
    let mut segments = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(directive) = line.strip_prefix('#') {
            if let Some((key, value)) = directive.split_once('=') {
                if key.trim() == "direction" {
                    direction = match value.trim() {
                        "lower" => ScoreDirection::Lower,
                        "higher" => ScoreDirection::Higher,
                        other => return Err(parse_error(line_no, format!("unknown direction `{other}`"))),
                    };
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let Some(cols) = &header else {
            if fields.len() < 3 || fields[..3] != REQUIRED_COLUMNS {
                return Err(parse_error(
                    line_no,
                    "header must start with segment_id, doc_id, score (tab-separated)",
                ));
            }
            header = Some(fields.iter().map(|f| f.trim().to_string()).collect());
            continue;
        };
        if fields.len() != cols.len() {
            return Err(parse_error(
                line_no,
                format!("expected {} columns, found {}", cols.len(), fields.len()),
            ));
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(parse_error(line_no, "empty segment id"));
        }
        if let Some(first) = seen.insert(id.to_string(), line_no) {
            return Err(parse_error(
                line_no,
                format!("duplicate segment id `{id}` (first seen on line {first})"),
            ));
        }
        let score = match fields[2].trim() {
            "" => None,
            s => Some(parse_number(s, "score", line_no)?),
        };
        let metrics = fields[3..]
            .iter()
            .zip(&cols[3..])
            .map(|(f, name)| parse_number(f, name, line_no))
            .collect::<Result<Vec<f64>>>()?;
        segments.push(Segment::new(id, fields[1].trim(), metrics, score));
    }
    let Some(cols) = header else {
        return Err(parse_error(1, "missing header line"));
    };
    TestSet::with_direction(segments, cols[3..].to_vec(), direction)
}

/// Writes a test set in the TSV layout, with full round-trip precision.
pub fn write_test_set<W: Write>(test_set: &TestSet, mut out: W) -> std::io::Result<()> {
    if test_set.direction() == ScoreDirection::Higher {
        writeln!(out, "#direction=higher")?;
    }
    let mut header = REQUIRED_COLUMNS.map(String::from).to_vec();
    header.extend(test_set.metric_names().iter().cloned());
    writeln!(out, "{}", header.join("\t"))?;
    for seg in test_set.segments() {
        let mut row = vec![
            seg.id.clone(),
            seg.doc_id.clone(),
            seg.score.map_or(String::new(), |s| s.to_string()),
        ];
        row.extend(seg.metrics.iter().map(f64::to_string));
        writeln!(out, "{}", row.join("\t"))?;
    }
    Ok(())
}

pub fn save_test_set(test_set: &TestSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_test_set(test_set, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Ratings file: `segment_id<TAB>score` per line, optional header, `#`
/// comments. Returns (segment index, score) in file order.
pub fn parse_ratings(text: &str, test_set: &TestSet) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(parse_error(
                line_no,
                format!("expected 2 columns, found {}", fields.len()),
            ));
        }
        let id = fields[0].trim();
        if out.is_empty() && seen.is_empty() && id == "segment_id" {
            continue;
        }
        let index = test_set
            .index_of(id)
            .ok_or_else(|| parse_error(line_no, format!("rating for unknown segment id `{id}`")))?;
        if let Some(first) = seen.insert(index, line_no) {
            return Err(parse_error(
                line_no,
                format!("duplicate rating for `{id}` (first on line {first})"),
            ));
        }
        out.push((index, parse_number(fields[1], "score", line_no)?));
    }
    Ok(out)
}

pub fn load_ratings(path: &Path, test_set: &TestSet) -> Result<Vec<(usize, f64)>> {
    parse_ratings(&read(path)?, test_set)
}

/// Config keys accepted by [`parse_config`], in file order.
pub const CONFIG_KEYS: [&str; 11] = [
    "methods",
    "size_fractions",
    "draws_per_size",
    "master_seed",
    "gamma",
    "range",
    "metric_bin_size",
    "knn_k",
    "cv_metric",
    "covariance",
    "incremental_stride",
];

fn covariance_name(c: CovarianceEstimator) -> &'static str {
    match c {
        CovarianceEstimator::Uncentered => "uncentered",
        CovarianceEstimator::Centered => "centered",
    }
}

fn list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Flat `key = value` text, one key per line; lists are comma-separated.
pub fn format_config(config: &SimulationConfig) -> String {
    let names: Vec<&str> = config.methods.iter().map(Method::name).collect();
    let values = [
        names.join(","),
        list(&config.size_fractions),
        config.draws_per_size.to_string(),
        config.master_seed.to_string(),
        config.gamma.to_string(),
        config.range_override.map_or("none".into(), |r| r.to_string()),
        config.metric_bin_size.to_string(),
        config.knn_k.to_string(),
        config.cv_metric.to_string(),
        covariance_name(config.covariance).to_string(),
        config.incremental_stride.to_string(),
    ];
    CONFIG_KEYS
        .iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// Starts from the defaults; keys that are absent keep their default.
pub fn parse_config(text: &str) -> Result<SimulationConfig> {
    let mut c = SimulationConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_error(line_no, "expected key = value"))?;
        let (key, value) = (key.trim(), value.trim());
        let int = |v: &str| -> Result<u64> {
            v.parse()
                .map_err(|_| parse_error(line_no, format!("{key}: `{v}` is not a non-negative integer")))
        };
        let real = |v: &str| parse_number(v, key, line_no);
        match key {
            "methods" => {
                c.methods = value
                    .split(',')
                    .map(|m| m.trim().parse::<Method>())
                    .collect::<Result<_>>()
                    .map_err(|e| parse_error(line_no, e.to_string()))?
            }
            "size_fractions" => c.size_fractions = value.split(',').map(real).collect::<Result<_>>()?,
            "draws_per_size" => c.draws_per_size = int(value)? as usize,
            "master_seed" => c.master_seed = int(value)?,
            "gamma" => c.gamma = real(value)?,
            "range" => {
                c.range_override = match value {
                    "" | "none" => None,
                    v => Some(real(v)?),
                }
            }
            "metric_bin_size" => c.metric_bin_size = int(value)? as usize,
            "knn_k" => c.knn_k = int(value)? as usize,
            "cv_metric" => c.cv_metric = int(value)? as usize,
            "covariance" => c.covariance = value.parse().map_err(|e: Error| parse_error(line_no, e.to_string()))?,
            "incremental_stride" => c.incremental_stride = int(value)? as usize,
            other => {
                return Err(Error::UnknownConfigKey {
                    key: other.to_string(),
                    valid: CONFIG_KEYS.join(", "),
                })
            }
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<SimulationConfig> {
    parse_config(&read(path)?)
}

pub fn save_config(config: &SimulationConfig, path: &Path) -> Result<()> {
    fs::write(path, format_config(config)).map_err(|e| Error::io(path, e))
}

/// Parameters of the MQM-like synthetic generator.
///
/// Scores come from a latent Gaussian `sqrt(s)·u_doc + sqrt(1−s)·e_seg`
/// (s = `doc_share`). The lowest `zero_mass` fraction of latents score 0;
/// the rest map through `tail_scale·(exp(y − c) − 1)`, capped at `cap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub segments: usize,
    pub documents: usize,
    /// Gamma shape of the document-size weights; smaller means more uneven.
    pub doc_size_shape: f64,
    pub zero_mass: f64,
    pub tail_scale: f64,
    pub cap: f64,
    pub doc_share: f64,
    /// Target Pearson correlation of each metric with the scores.
    pub correlations: Vec<f64>,
    /// Fraction of metric noise shared across metrics.
    pub shared_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            segments: 1000,
            documents: 60,
            doc_size_shape: 2.0,
            zero_mass: 0.4,
            tail_scale: 1.5,
            cap: 25.0,
            doc_share: 0.3,
            correlations: vec![0.45, 0.42, 0.38, 0.3],
            shared_noise: 0.5,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.documents == 0 || self.segments < self.documents {
            return bad(format!(
                "need segments ≥ documents ≥ 1 (got {} segments, {} documents)",
                self.segments, self.documents
            ));
        }
        if !(self.doc_size_shape > 0.0 && self.doc_size_shape.is_finite()) {
            return bad("document size shape must be positive".into());
        }
        if !(0.0..1.0).contains(&self.zero_mass) {
            return bad("zero mass must lie in [0, 1)".into());
        }
        if !(self.tail_scale > 0.0 && self.cap > 0.0) {
            return bad("tail scale and cap must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.doc_share) || !(0.0..=1.0).contains(&self.shared_noise) {
            return bad("document share and shared noise must lie in [0, 1]".into());
        }
        if let Some(r) = self.correlations.iter().find(|r| !(**r > -1.0 && **r < 1.0)) {
            return bad(format!("correlation {r} must lie in (-1, 1)"));
        }
        Ok(())
    }

    /// Same spec with a seed derived from this one's seed and `index`.
    pub fn replica(&self, index: u64) -> Self {
        use rand::RngCore;
        SyntheticSpec {
            seed: substream(self.seed, &[u64::MAX, index]).next_u64(),
            ..self.clone()
        }
    }
}

fn normals(rng: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Residual of `v` after removing its mean and its projection on the
/// standardized vector `z`, rescaled to unit population variance.
fn orthogonal_unit(v: &[f64], z: &[f64]) -> Option<Vec<f64>> {
    let m = mean(v);
    let n = v.len() as f64;
    let centered: Vec<f64> = v.iter().map(|x| x - m).collect();
    let proj = centered.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / n;
    let resid: Vec<f64> = centered.iter().zip(z).map(|(a, b)| a - proj * b).collect();
    standardize(&resid)
}

/// Deterministic MQM-like test set. Every metric's realized Pearson
/// correlation with the scores equals its target up to float rounding.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TestSet> {
    spec.validate()?;
    let (n, d) = (spec.segments, spec.documents);

    let mut rng = substream(spec.seed, &[0]);
    let gamma = Gamma::new(spec.doc_size_shape, 1.0).expect("validated shape");
    let weights: Vec<f64> = (0..d).map(|_| gamma.sample(&mut rng)).collect();
    let total: f64 = weights.iter().sum();
    let spare = (n - d) as f64;
    let mut raw: Vec<f64> = weights.iter().map(|w| spare * w / total).collect();
    // make the raw shares sum to the integer exactly
    let drift = spare - raw.iter().sum::<f64>();
    let top = (0..d).max_by(|&a, &b| raw[a].total_cmp(&raw[b])).unwrap_or(0);
    raw[top] = (raw[top] + drift).max(0.0);
    let sizes: Vec<usize> = round_allocation(&raw)?.into_iter().map(|s| s + 1).collect();

    let mut rng = substream(spec.seed, &[1]);
    let doc_effects = normals(&mut rng, d);
    let noise = normals(&mut rng, n);
    let (a, b) = (spec.doc_share.sqrt(), (1.0 - spec.doc_share).sqrt());
    let mut doc_of = Vec::with_capacity(n);
    for (doc, &size) in sizes.iter().enumerate() {
        doc_of.extend(std::iter::repeat_n(doc, size));
    }
    let latent: Vec<f64> = (0..n).map(|i| a * doc_effects[doc_of[i]] + b * noise[i]).collect();

    let mut sorted = latent.clone();
    sorted.sort_by(f64::total_cmp);
    let zeros = ((spec.zero_mass * n as f64).round() as usize).min(n);
    let cut = if zeros == 0 {
        f64::NEG_INFINITY
    } else {
        sorted[zeros - 1]
    };
    let scores: Vec<f64> = latent
        .iter()
        .map(|&y| {
            if y <= cut {
                0.0
            } else {
                let base = if zeros == 0 { sorted[0] } else { cut };
                (spec.tail_scale * ((y - base).exp() - 1.0)).min(spec.cap)
            }
        })
        .collect();

    let z = standardize(&scores);
    let mut rng = substream(spec.seed, &[2]);
    let shared = normals(&mut rng, n);
    let (sa, sb) = (spec.shared_noise.sqrt(), (1.0 - spec.shared_noise).sqrt());
    let mut columns = Vec::with_capacity(spec.correlations.len());
    for &r in &spec.correlations {
        let Some(z) = &z else {
            return Err(Error::InvalidArgument(format!(
                "correlation {r} is infeasible: generated scores are constant (achieved 0)"
            )));
        };
        let own = normals(&mut rng, n);
        let mixed: Vec<f64> = shared.iter().zip(&own).map(|(s, o)| sa * s + sb * o).collect();
        let e = orthogonal_unit(&mixed, z).ok_or_else(|| Error::ZeroVariance("metric noise".into()))?;
        let c = (1.0 - r * r).sqrt();
        let col: Vec<f64> = z.iter().zip(&e).map(|(zi, ei)| r * zi + c * ei).collect();
        let achieved = pearson(&scores, &col);
        if (achieved - r).abs() > 0.03 {
            return Err(Error::InvalidArgument(format!(
                "correlation {r} is infeasible (achieved {achieved})"
            )));
        }
        columns.push(col);
    }

    let segments = (0..n)
        .map(|i| {
            Segment::new(
                format!("seg{i:05}"),
                format!("doc{:03}", doc_of[i]),
                columns.iter().map(|c| c[i]).collect(),
                Some(scores[i]),
            )
        })
        .collect();
    let names = (0..columns.len()).map(|j| format!("metric{}", j + 1)).collect();
    TestSet::new(segments, names)
}

/// Realized Pearson correlation of each metric column with the scores.
pub fn achieved_correlations(test_set: &TestSet) -> Result<Vec<f64>> {
    let scores = test_set.scores()?;
    Ok((0..test_set.metric_count())
        .map(|j| pearson(&scores, &test_set.metric_column(j)))
        .collect())
}
