//! Small descriptive-statistics helpers. Population (not Bessel-corrected)
//! moments are used everywhere.

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

pub fn population_std(values: &[f64]) -> f64 {
    population_variance(values).sqrt()
}

/// Relative tolerance below which a column is treated as constant.
pub(crate) const CONSTANT_TOL: f64 = 1e-12;

/// Z-score `values` with the population standard deviation. Returns `None`
/// for (numerically) constant columns.
pub fn standardize(values: &[f64]) -> Option<Vec<f64>> {
    let m = mean(values);
    let sd = population_std(values);
    let scale = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    if !sd.is_finite() || sd <= CONSTANT_TOL * scale {
        return None;
    }
    Some(values.iter().map(|v| (v - m) / sd).collect())
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
