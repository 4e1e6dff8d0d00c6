//! Distributional evaluation: Wasserstein-2 distances (1-D exact, sliced in
//! higher dimension) and ensemble rank histograms with their total-variation
//! gap to uniform.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Result, RmlError};
use crate::rng::Rng;
use crate::sample::SampleBatch;

/// Wasserstein-2 distance between two empirical 1-D distributions.
///
/// Equal sample counts reduce to the root mean squared difference of order
/// statistics (the optimal coupling in 1-D). Unequal counts are compared on
/// the coarser quantile grid with linear interpolation.
pub fn wasserstein2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(RmlError::InsufficientSamples {
            need: 1,
            got: a.len().min(b.len()),
        });
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable_by(f64::total_cmp);
    sb.sort_unstable_by(f64::total_cmp);
    if sa.len() == sb.len() {
        let n = sa.len() as f64;
        let acc: f64 = sa
            .iter()
            .zip(&sb)
            .map(|(x, y)| {
                let d = x - y;
                d * d
            })
            .sum();
        return Ok((acc / n).sqrt());
    }
    let n = sa.len().min(sb.len());
    let mut acc = 0.0;
    for i in 0..n {
        let q = (i as f64 + 0.5) / n as f64;
        let d = quantile_sorted(&sa, q) - quantile_sorted(&sb, q);
        acc += d * d;
    }
    Ok((acc / n as f64).sqrt())
}

/// Empirical quantile of a sorted sample with linear interpolation between
/// midpoint plotting positions `(i + 0.5) / n`.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * n as f64 - 0.5;
    if pos <= 0.0 {
        return sorted[0];
    }
    if pos >= (n - 1) as f64 {
        return sorted[n - 1];
    }
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Root mean square of 1-D Wasserstein-2 distances over random unit-vector
/// projections; a cheap surrogate for multi-dimensional W2 trend checks.
pub fn sliced_wasserstein(
    a: &SampleBatch,
    b: &SampleBatch,
    n_projections: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(RmlError::DimMismatch {
            context: "sliced wasserstein batches",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    assert!(n_projections > 0, "need at least one projection");
    let d = a.dim();
    let mut acc = 0.0;
    let mut pa = vec![0.0; a.len()];
    let mut pb = vec![0.0; b.len()];
    for _ in 0..n_projections {
        let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = crate::linalg::norm2(&u);
        for v in &mut u {
            *v /= norm;
        }
        for (i, row) in a.iter_rows().enumerate() {
            pa[i] = crate::linalg::dot(row, &u);
        }
        for (i, row) in b.iter_rows().enumerate() {
            pb[i] = crate::linalg::dot(row, &u);
        }
        let w = wasserstein2_1d(&pa, &pb)?;
        acc += w * w;
    }
    Ok((acc / n_projections as f64).sqrt())
}

/// Tallied ranks of truths within size-`m` ensembles: counts over the `m+1`
/// possible positions.
#[derive(Debug, Clone)]
pub struct RankHistogram {
    counts: Vec<u64>,
    tallies: u64,
}

impl RankHistogram {
    pub fn new(ensemble_size: usize) -> Self {
        RankHistogram {
            counts: vec![0; ensemble_size + 1],
            tallies: 0,
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let tallies = counts.iter().sum();
        RankHistogram { counts, tallies }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn tallies(&self) -> u64 {
        self.tallies
    }

    /// Rank of `truth` among `members`: the number of members strictly
    /// below, with ties broken uniformly at random.
    pub fn tally(&mut self, truth: f64, members: &[f64], rng: &mut Rng) {
        assert_eq!(
            members.len() + 1,
            self.counts.len(),
            "ensemble size must match histogram"
        );
        let below = members.iter().filter(|&&v| v < truth).count();
        let ties = members.iter().filter(|&&v| v == truth).count();
        let rank = below + if ties > 0 { rng.gen_range(0..=ties) } else { 0 };
        self.counts[rank] += 1;
        self.tallies += 1;
    }
}

/// Builds a rank histogram from a sequence of truths and their ensembles.
pub fn rank_histogram(
    truths: &[f64],
    ensembles: &[Vec<f64>],
    rng: &mut Rng,
) -> Result<RankHistogram> {
    if truths.is_empty() || truths.len() != ensembles.len() {
        return Err(RmlError::InsufficientSamples {
            need: 1,
            got: truths.len().min(ensembles.len()),
        });
    }
    let m = ensembles[0].len();
    let mut h = RankHistogram::new(m);
    for (t, e) in truths.iter().zip(ensembles) {
        if e.len() != m {
            return Err(RmlError::DimMismatch {
                context: "ensemble size",
                expected: m,
                got: e.len(),
            });
        }
        h.tally(*t, e, rng);
    }
    Ok(h)
}

/// Total-variation distance between the normalized rank histogram and the
/// uniform distribution over its bins; 0 means perfectly calibrated.
pub fn rank_histogram_tv(h: &RankHistogram) -> Result<f64> {
    if h.tallies == 0 {
        return Err(RmlError::InsufficientSamples { need: 1, got: 0 });
    }
    let k = h.counts.len() as f64;
    let n = h.tallies as f64;
    let uniform = 1.0 / k;
    let tv: f64 = h
        .counts
        .iter()
        .map(|&c| (c as f64 / n - uniform).abs())
        .sum();
    Ok(0.5 * tv)
}
