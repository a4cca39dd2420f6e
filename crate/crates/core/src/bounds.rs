//! Distribution-free bounds t with P(|μ − μ̂| ≤ t) ≥ γ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TestSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSpec {
    pub gamma: f64,
    /// Score range R = max − min.
    pub range: f64,
    pub n: usize,
    pub population: usize,
    /// Sample standard deviation, used by the Bernstein bound only.
    pub sigma_hat: Option<f64>,
}

impl BoundSpec {
    pub fn new(gamma: f64, range: f64, n: usize, population: usize) -> Result<Self> {
        let spec = BoundSpec {
            gamma,
            range,
            n,
            population,
            sigma_hat: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_sigma(mut self, sigma_hat: f64) -> Self {
        self.sigma_hat = Some(sigma_hat);
        self
    }

    /// δ = 1 − γ
    pub fn delta(&self) -> f64 {
        1.0 - self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "confidence {} must lie in (0, 1)",
                self.gamma
            )));
        }
        if !(self.range >= 0.0 && self.range.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "range {} must be finite and non-negative",
                self.range
            )));
        }
        if self.n == 0 || self.n > self.population {
            return Err(Error::SampleSizeOutOfRange {
                n: self.n,
                max: self.population,
            });
        }
        Ok(())
    }
}

/// Which inequality to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Hoeffding,
    Bernstein,
}

impl std::str::FromStr for BoundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hoeffding" => Ok(Self::Hoeffding),
            "bernstein" => Ok(Self::Bernstein),
            other => Err(Error::InvalidArgument(format!(
                "unknown bound `{other}` (expected hoeffding or bernstein)"
            ))),
        }
    }
}

impl std::fmt::Display for BoundKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoundKind::Hoeffding => "hoeffding",
            BoundKind::Bernstein => "bernstein",
        })
    }
}

/// Serfling's without-replacement factor k_n = 1 − (n − 1)/N.
pub fn serfling_factor(n: usize, population: usize) -> f64 {
    1.0 - (n as f64 - 1.0) / population as f64
}

/// t = R·sqrt(k_n·ln(2/δ) / 2n)
pub fn hoeffding_bound(spec: &BoundSpec) -> Result<f64> {
    spec.validate()?;
    let k_n = serfling_factor(spec.n, spec.population);
    Ok(spec.range * (k_n * (2.0 / spec.delta()).ln() / (2.0 * spec.n as f64)).sqrt())
}

/// t = σ̂·sqrt(2·ln(3/δ)/n) + 3·R·ln(3/δ)/n
pub fn bernstein_bound(spec: &BoundSpec) -> Result<f64> {
    spec.validate()?;
    let sigma = spec
        .sigma_hat
        .ok_or_else(|| Error::InvalidArgument("Bernstein bound needs a standard deviation estimate".into()))?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "standard deviation {sigma} must be finite and non-negative"
        )));
    }
    let n = spec.n as f64;
    let log_term = (3.0 / spec.delta()).ln();
    Ok(sigma * (2.0 * log_term / n).sqrt() + 3.0 * spec.range * log_term / n)
}

pub fn bound(kind: BoundKind, spec: &BoundSpec) -> Result<f64> {
    match kind {
        BoundKind::Hoeffding => hoeffding_bound(spec),
        BoundKind::Bernstein => bernstein_bound(spec),
    }
}

/// Where a range value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeSource {
    /// max − min of the scores that are available.
    Observed,
    /// Supplied by the caller (an oracle or empirical value).
    Override,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub value: f64,
    pub source: RangeSource,
}

pub fn empirical_range(test_set: &TestSet, override_range: Option<f64>) -> Result<ScoreRange> {
    if let Some(value) = override_range {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "range override {value} must be finite and non-negative"
            )));
        }
        return Ok(ScoreRange {
            value,
            source: RangeSource::Override,
        });
    }
    let scores: Vec<f64> = test_set.segments().iter().filter_map(|s| s.score).collect();
    if scores.is_empty() {
        return Err(Error::InvalidArgument(
            "no scores available and no range override given".into(),
        ));
    }
    Ok(ScoreRange {
        value: range_of(&scores),
        source: RangeSource::Observed,
    })
}

pub fn range_of(values: &[f64]) -> f64 {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    hi - lo
}
