//! Stratified sampling: binning, budget allocation, per-bin draws and the
//! stratified estimator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MetricFeatures;
use crate::model::{random_indices, Estimate, EstimateFlag, SampleDraw, TestSet};
use crate::rng::RandomStream;
use crate::stats::population_std;

/// Default number of segments per bin for metric-score binning.
pub const DEFAULT_METRIC_BIN_SIZE: usize = 80;

/// Assignment of every segment to one of L non-empty bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    bin_of: Vec<usize>,
    bin_sizes: Vec<usize>,
    #[serde(skip)]
    members: Vec<Vec<usize>>,
}

impl Partition {
    /// Build from a bin id per segment. Ids must be contiguous from 0 with
    /// no empty bin.
    pub fn new(bin_of: Vec<usize>) -> Result<Self> {
        if bin_of.is_empty() {
            return Err(Error::InvalidArgument("partition of an empty test set".into()));
        }
        let bins = bin_of.iter().max().unwrap() + 1;
        let mut members = vec![Vec::new(); bins];
        for (i, &b) in bin_of.iter().enumerate() {
            members[b].push(i);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("bin {empty} is empty")));
        }
        let bin_sizes = members.iter().map(Vec::len).collect();
        Ok(Partition {
            bin_of,
            bin_sizes,
            members,
        })
    }

    /// A single bin holding every segment.
    pub fn single(population: usize) -> Result<Self> {
        Partition::new(vec![0; population])
    }

    pub fn bin_of(&self) -> &[usize] {
        &self.bin_of
    }

    /// N_l per bin.
    pub fn bin_sizes(&self) -> &[usize] {
        &self.bin_sizes
    }

    /// L
    pub fn bin_count(&self) -> usize {
        self.bin_sizes.len()
    }

    /// N
    pub fn population(&self) -> usize {
        self.bin_of.len()
    }

    /// Segment indices of bin `l`, ascending.
    pub fn members(&self, l: usize) -> &[usize] {
        &self.members[l]
    }
}

/// Per-bin sample counts n_l.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub counts: Vec<usize>,
    pub total: usize,
    /// Set when optimal allocation had no usable variance signal and
    /// reverted to proportional allocation.
    #[serde(default)]
    pub fallback: bool,
}

impl Allocation {
    pub fn validate(&self, partition: &Partition) -> Result<()> {
        if self.counts.len() != partition.bin_count() {
            return Err(Error::InvalidAllocation(format!(
                "{} counts for {} bins",
                self.counts.len(),
                partition.bin_count()
            )));
        }
        if self.counts.iter().sum::<usize>() != self.total {
            return Err(Error::InvalidAllocation("counts do not sum to the total".into()));
        }
        for (l, (&c, &size)) in self.counts.iter().zip(partition.bin_sizes()).enumerate() {
            if c > size {
                return Err(Error::InvalidAllocation(format!("bin {l} allocated {c} of {size}")));
            }
        }
        Ok(())
    }
}

/// One bin per document, in order of first appearance.
pub fn partition_by_document(test_set: &TestSet) -> Partition {
    let mut bin_of = vec![0; test_set.len()];
    for (l, doc) in test_set.documents().iter().enumerate() {
        for &i in test_set.doc_members(doc).expect("document listed in index") {
            bin_of[i] = l;
        }
    }
    Partition::new(bin_of).expect("every document has a segment")
}

/// Sort segments by their mean standardized metric score and cut the order
/// into `round(N / target_bin_size)` runs whose sizes differ by at most one.
pub fn partition_by_metric_score(test_set: &TestSet, target_bin_size: usize) -> Result<Partition> {
    let features = MetricFeatures::new(test_set)?;
    partition_by_metric_features(&features, target_bin_size)
}

pub fn partition_by_metric_features(features: &MetricFeatures, target_bin_size: usize) -> Result<Partition> {
    if target_bin_size == 0 {
        return Err(Error::InvalidArgument("target bin size must be at least 1".into()));
    }
    let n = features.rows();
    let key = features.mean_z();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| key[a].total_cmp(&key[b]).then(a.cmp(&b)));

    let bins = ((n as f64 / target_bin_size as f64).round() as usize).clamp(1, n);
    let base = n / bins;
    let extra = n % bins;
    let mut bin_of = vec![0; n];
    let mut pos = 0;
    for l in 0..bins {
        let size = base + usize::from(l < extra);
        for &i in &order[pos..pos + size] {
            bin_of[i] = l;
        }
        pos += size;
    }
    Partition::new(bin_of)
}

/// Per-bin standard deviation of the segment-level mean standardized metric,
/// used as a stand-in for the unknown per-bin score deviation.
pub fn metric_proxy_sigma(features: &MetricFeatures, partition: &Partition) -> Vec<f64> {
    let key = features.mean_z();
    (0..partition.bin_count())
        .map(|l| {
            let vals: Vec<f64> = partition.members(l).iter().map(|&i| key[i]).collect();
            population_std(&vals)
        })
        .collect()
}

/// Integer counts summing to `round(Σ raw)` with minimal L1 distance to
/// `raw`: floor everything, then hand the deficit to the largest fractional
/// parts, lowest index first on ties.
pub fn round_allocation(raw: &[f64]) -> Result<Vec<usize>> {
    if let Some(v) = raw.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "raw allocation entry {v} must be finite and non-negative"
        )));
    }
    let sum: f64 = raw.iter().sum();
    let n = sum.round();
    if (sum - n).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "raw allocation sums to {sum}, not an integer"
        )));
    }
    let n = n as usize;
    // snap values within rounding noise of an integer before flooring
    let floors: Vec<f64> = raw.iter().map(|v| (v + 1e-9).floor()).collect();
    let mut counts: Vec<usize> = floors.iter().map(|&f| f as usize).collect();
    let assigned: usize = counts.iter().sum();
    let deficit = n.saturating_sub(assigned);
    // fractional parts quantized so that values equal up to rounding noise tie
    let frac_key = |l: usize| ((raw[l] - floors[l]).max(0.0) * 1e9).round() as i64;
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| frac_key(b).cmp(&frac_key(a)).then(a.cmp(&b)));
    for &l in order.iter().take(deficit) {
        counts[l] += 1;
    }
    Ok(counts)
}

fn check_budget(partition: &Partition, n: usize) -> Result<()> {
    if n == 0 || n > partition.population() {
        return Err(Error::SampleSizeOutOfRange {
            n,
            max: partition.population(),
        });
    }
    Ok(())
}

/// n_l = n·N_l/N, rounded.
pub fn proportional_allocation(partition: &Partition, n: usize) -> Result<Allocation> {
    check_budget(partition, n)?;
    let big_n = partition.population() as f64;
    let raw: Vec<f64> = partition
        .bin_sizes()
        .iter()
        .map(|&size| n as f64 * size as f64 / big_n)
        .collect();
    Ok(Allocation {
        counts: round_allocation(&raw)?,
        total: n,
        fallback: false,
    })
}

fn weighted_raw(budget: usize, weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| budget as f64 * w / total).collect()
}

/// n_l ∝ σ̂_l·N_l, rounded, with over-full bins capped and the excess
/// reallocated.
pub fn optimal_allocation(partition: &Partition, sigma_hat: &[f64], n: usize) -> Result<Allocation> {
    check_budget(partition, n)?;
    optimal_allocation_for_sizes(partition.bin_sizes(), sigma_hat, n)
}

/// [`optimal_allocation`] over explicit bin capacities, which may be zero.
pub fn optimal_allocation_for_sizes(sizes: &[usize], sigma_hat: &[f64], n: usize) -> Result<Allocation> {
    let capacity: usize = sizes.iter().sum();
    if n > capacity {
        return Err(Error::SampleSizeOutOfRange { n, max: capacity });
    }
    if sigma_hat.len() != sizes.len() {
        return Err(Error::DimensionMismatch {
            expected: sizes.len(),
            got: sigma_hat.len(),
        });
    }
    if let Some(s) = sigma_hat.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bin deviation {s} must be finite and non-negative"
        )));
    }
    let weights: Vec<f64> = sigma_hat.iter().zip(sizes).map(|(s, &size)| s * size as f64).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        let sizes_f: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
        return Ok(Allocation {
            counts: round_allocation(&weighted_raw(n, &sizes_f))?,
            total: n,
            fallback: true,
        });
    }
    let counts = round_allocation(&weighted_raw(n, &weights))?;
    cap_sizes(counts, sizes, sigma_hat, n)
}

/// Repeatedly clamp the bin with the largest overshoot n_l − N_l to its
/// size and redistribute the remaining budget over the unclamped bins.
pub fn cap_and_reallocate(
    counts: Vec<usize>,
    partition: &Partition,
    sigma_hat: &[f64],
    n: usize,
) -> Result<Allocation> {
    let alloc = cap_sizes(counts, partition.bin_sizes(), sigma_hat, n)?;
    alloc.validate(partition)?;
    Ok(alloc)
}

fn cap_sizes(mut counts: Vec<usize>, sizes: &[usize], sigma_hat: &[f64], n: usize) -> Result<Allocation> {
    let capacity: usize = sizes.iter().sum();
    if n > capacity {
        return Err(Error::SampleSizeOutOfRange { n, max: capacity });
    }
    if counts.len() != sizes.len() || sigma_hat.len() != sizes.len() {
        return Err(Error::DimensionMismatch {
            expected: sizes.len(),
            got: counts.len().min(sigma_hat.len()),
        });
    }
    let mut fixed = vec![false; sizes.len()];
    loop {
        let worst = (0..sizes.len())
            .filter(|&l| !fixed[l] && counts[l] > sizes[l])
            .max_by(|&a, &b| (counts[a] - sizes[a]).cmp(&(counts[b] - sizes[b])).then(b.cmp(&a)));
        let Some(l) = worst else { break };
        fixed[l] = true;
        counts[l] = sizes[l];

        let free: Vec<usize> = (0..sizes.len()).filter(|&b| !fixed[b]).collect();
        let used: usize = (0..sizes.len()).filter(|&b| fixed[b]).map(|b| counts[b]).sum();
        let remaining = n - used;
        if free.is_empty() {
            break;
        }
        let mut weights: Vec<f64> = free.iter().map(|&b| sigma_hat[b] * sizes[b] as f64).collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            // only zero-variance bins left: spread the rest by size
            weights = free.iter().map(|&b| sizes[b] as f64).collect();
        }
        let sub = round_allocation(&weighted_raw(remaining, &weights))?;
        for (&b, c) in free.iter().zip(sub) {
            counts[b] = c;
        }
    }
    if counts.iter().sum::<usize>() != n || counts.iter().zip(sizes).any(|(c, s)| c > s) {
        return Err(Error::InvalidAllocation(format!(
            "could not place {n} samples within capacities {sizes:?}"
        )));
    }
    Ok(Allocation {
        counts,
        total: n,
        fallback: false,
    })
}

/// Indices drawn uniformly without replacement within each bin.
pub fn stratified_indices(partition: &Partition, alloc: &Allocation, rng: &mut RandomStream) -> Result<Vec<usize>> {
    alloc.validate(partition)?;
    let mut out = Vec::with_capacity(alloc.total);
    for (l, &count) in alloc.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let members = partition.members(l);
        out.extend(
            random_indices(members.len(), count, rng)?
                .into_iter()
                .map(|k| members[k]),
        );
    }
    Ok(out)
}

pub fn stratified_sample(
    test_set: &TestSet,
    partition: &Partition,
    alloc: &Allocation,
    rng: &mut RandomStream,
) -> Result<SampleDraw> {
    if partition.population() != test_set.len() {
        return Err(Error::DimensionMismatch {
            expected: test_set.len(),
            got: partition.population(),
        });
    }
    let indices = stratified_indices(partition, alloc, rng)?;
    SampleDraw::reveal(test_set, indices)
}

/// Stratum-weighted mean Σ_l mean_l·N_l/N of `values` (aligned with
/// `indices`). Bins without samples are skipped and the weights renormalized;
/// the flag reports whether that happened.
pub(crate) fn stratum_weighted_mean(indices: &[usize], values: &[f64], partition: &Partition) -> Result<(f64, bool)> {
    let bins = partition.bin_count();
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for (&i, &v) in indices.iter().zip(values) {
        if i >= partition.population() {
            return Err(Error::InvalidArgument(format!("index {i} outside the partition")));
        }
        let l = partition.bin_of()[i];
        sums[l] += v;
        counts[l] += 1;
    }
    let mut covered = 0usize;
    let mut acc = 0.0;
    for l in 0..bins {
        if counts[l] > 0 {
            let size = partition.bin_sizes()[l];
            covered += size;
            acc += sums[l] / counts[l] as f64 * size as f64;
        }
    }
    if covered == 0 {
        return Err(Error::EmptyDraw);
    }
    Ok((acc / covered as f64, covered < partition.population()))
}

/// μ̂ = Σ_l μ̂_l·N_l/N over the sampled bins.
pub fn stratified_estimate(draw: &SampleDraw, partition: &Partition) -> Result<Estimate> {
    if draw.is_empty() {
        return Err(Error::EmptyDraw);
    }
    let (value, partial) = stratum_weighted_mean(draw.indices(), draw.scores(), partition)?;
    let est = Estimate::new(value, "stratified", draw.len());
    Ok(if partial {
        est.with_flag(EstimateFlag::PartialCoverage)
    } else {
        est
    })
}
