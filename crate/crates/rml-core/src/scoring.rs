//! Proper-scoring-rule losses and distances.
//!
//! The energy score `S(p,x) = 1/2 E||X-X'||^b - E||X-x||^b` with `b in (0,2)`
//! drives everything here: the engression loss is its negated empirical
//! form, and the energy distance is the divergence it induces. Within-sample
//! means always exclude `i = j` pairs; when the two batches have equal size
//! the cross mean excludes index-aligned pairs too, so the estimator stays
//! unbiased while two identical batches cancel to exactly zero.

use crate::error::{Result, RmlError};
use crate::linalg::{euclidean_distance, Matrix};
use crate::nn::{self, InputLayout, MlpGenerator};
use crate::sample::SampleBatch;

#[derive(Debug, Clone, Copy)]
pub struct EnergyScoreConfig {
    /// Exponent on the Euclidean norm; strictly proper for values in (0,2).
    pub beta: f64,
    /// Monte Carlo sample count used when a distribution has to be sampled.
    pub mc_samples: usize,
}

impl Default for EnergyScoreConfig {
    fn default() -> Self {
        EnergyScoreConfig {
            beta: 1.0,
            mc_samples: 1000,
        }
    }
}

impl EnergyScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 2.0) {
            return Err(RmlError::config(format!(
                "energy score exponent must lie in (0,2), got {}",
                self.beta
            )));
        }
        if self.mc_samples < 2 {
            return Err(RmlError::InsufficientSamples {
                need: 2,
                got: self.mc_samples,
            });
        }
        Ok(())
    }
}

/// Empirical energy score of the sample-represented distribution at
/// observation `x`, with exponent `beta`:
/// `1/(2m(m-1)) sum_{i!=j} ||X_i-X_j||^b - 1/m sum_i ||X_i-x||^b`.
pub fn energy_score_beta(samples: &SampleBatch, x: &[f64], beta: f64) -> Result<f64> {
    let m = samples.len();
    if m < 2 {
        return Err(RmlError::InsufficientSamples { need: 2, got: m });
    }
    if samples.dim() != x.len() {
        return Err(RmlError::DimMismatch {
            context: "energy score observation",
            expected: samples.dim(),
            got: x.len(),
        });
    }
    let pairwise_mean = if samples.dim() == 1 && beta == 1.0 {
        let mut v = samples.column(0);
        v.sort_unstable_by(f64::total_cmp);
        sorted_pair_mean(&v)
    } else {
        let mut acc = 0.0;
        for i in 0..m {
            for j in (i + 1)..m {
                acc += pow_beta(euclidean_distance(samples.row(i), samples.row(j)), beta);
            }
        }
        2.0 * acc / (m as f64 * (m as f64 - 1.0))
    };
    let mut obs = 0.0;
    for i in 0..m {
        obs += pow_beta(euclidean_distance(samples.row(i), x), beta);
    }
    Ok(0.5 * pairwise_mean - obs / m as f64)
}

/// Energy score with the default exponent `beta = 1`.
pub fn energy_score(samples: &SampleBatch, x: &[f64]) -> Result<f64> {
    energy_score_beta(samples, x, 1.0)
}

fn pow_beta(d: f64, beta: f64) -> f64 {
    if beta == 1.0 {
        d
    } else {
        d.powf(beta)
    }
}

/// Mean over distinct pairs of |v_i - v_j| for sorted `v`.
fn sorted_pair_mean(v: &[f64]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for (j, &x) in v.iter().enumerate() {
        acc += (2.0 * j as f64 - (n as f64 - 1.0)) * x;
    }
    2.0 * acc / (n as f64 * (n as f64 - 1.0))
}

/// Energy distance `2 E||X-Y|| - E||X-X'|| - E||Y-Y'||` between two
/// sample batches. Exactly symmetric (arguments are ordered canonically
/// before summation) and exactly zero on bitwise-identical batches.
pub fn energy_distance(a: &SampleBatch, b: &SampleBatch) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(RmlError::InsufficientSamples {
            need: 1,
            got: a.len().min(b.len()),
        });
    }
    if a.dim() != b.dim() {
        return Err(RmlError::DimMismatch {
            context: "energy distance batches",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (p, q) = canonical_order(a, b);
    if p.data().data() == q.data().data() {
        return Ok(0.0);
    }
    if p.dim() == 1 {
        Ok(energy_distance_1d(&p.column(0), &q.column(0)))
    } else {
        Ok(energy_distance_general(p, q))
    }
}

fn canonical_order<'a>(a: &'a SampleBatch, b: &'a SampleBatch) -> (&'a SampleBatch, &'a SampleBatch) {
    let key = |s: &SampleBatch| s.len();
    match key(a).cmp(&key(b)).then_with(|| {
        let (da, db) = (a.data().data(), b.data().data());
        for (x, y) in da.iter().zip(db) {
            let c = x.total_cmp(y);
            if c != std::cmp::Ordering::Equal {
                return c;
            }
        }
        std::cmp::Ordering::Equal
    }) {
        std::cmp::Ordering::Greater => (b, a),
        _ => (a, b),
    }
}

fn energy_distance_general(a: &SampleBatch, b: &SampleBatch) -> f64 {
    let (n, m) = (a.len(), b.len());
    let cross_mean = if n == m {
        // exclude index-aligned pairs; every remaining pair is still an
        // unbiased draw of ||X - Y||
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += euclidean_distance(a.row(i), b.row(j))
                    + euclidean_distance(a.row(j), b.row(i));
            }
        }
        acc / (n as f64 * (n as f64 - 1.0))
    } else {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..m {
                acc += euclidean_distance(a.row(i), b.row(j));
            }
        }
        acc / (n as f64 * m as f64)
    };
    2.0 * cross_mean - within_mean(a) - within_mean(b)
}

fn within_mean(s: &SampleBatch) -> f64 {
    let n = s.len();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            acc += euclidean_distance(s.row(i), s.row(j));
        }
    }
    2.0 * acc / (n as f64 * (n as f64 - 1.0))
}

/// O(n log n) 1-D energy distance via order statistics.
fn energy_distance_1d(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable_by(f64::total_cmp);
    sb.sort_unstable_by(f64::total_cmp);
    let cross_sum = cross_abs_sum_sorted(&sa, &sb);
    let cross_mean = if n == m {
        let diag: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
        (cross_sum - diag) / (n as f64 * (n as f64 - 1.0))
    } else {
        cross_sum / (n as f64 * m as f64)
    };
    let wa = if n > 1 { sorted_pair_mean(&sa) } else { 0.0 };
    let wb = if m > 1 { sorted_pair_mean(&sb) } else { 0.0 };
    2.0 * cross_mean - wa - wb
}

/// `sum_{i,j} |a_i - b_j|` for sorted inputs, via a linear merge.
/// For each a_i with k = #(b_j <= a_i) and p = sum of those b_j:
/// `sum_j |a_i - b_j| = a_i*(2k - m) - 2p + total(b)`.
fn cross_abs_sum_sorted(a: &[f64], b: &[f64]) -> f64 {
    let m = b.len() as f64;
    let total: f64 = b.iter().sum();
    let mut acc = 0.0;
    let mut k = 0usize;
    let mut prefix = 0.0;
    for &x in a {
        while k < b.len() && b[k] <= x {
            prefix += b[k];
            k += 1;
        }
        acc += x * (2.0 * k as f64 - m) - 2.0 * prefix + total;
    }
    acc
}

/// Engression loss value and output adjoints for one batch:
/// `mean_i [ ||x_i - u_i|| - 1/2 ||u_i - v_i|| ]`, where `u` and `v` are the
/// generator outputs under the two independent noise draws. The norm is
/// non-differentiable at zero; the zero subgradient is used there.
pub fn energy_loss_parts(target: &Matrix, u: &Matrix, v: &Matrix) -> (f64, Matrix, Matrix) {
    let n = target.rows();
    assert_eq!(u.rows(), n);
    assert_eq!(v.rows(), n);
    assert_eq!(u.cols(), target.cols());
    assert_eq!(v.cols(), target.cols());
    let d = target.cols();
    let nf = n as f64;
    let mut loss = 0.0;
    let mut adj_u = Matrix::zeros(n, d);
    let mut adj_v = Matrix::zeros(n, d);
    for i in 0..n {
        let (x, ui, vi) = (target.row(i), u.row(i), v.row(i));
        let fit = euclidean_distance(x, ui);
        let rep = euclidean_distance(ui, vi);
        loss += fit - 0.5 * rep;
        let au = adj_u.row_mut(i);
        if fit > 0.0 {
            for j in 0..d {
                au[j] += (ui[j] - x[j]) / (fit * nf);
            }
        }
        if rep > 0.0 {
            let av = adj_v.row_mut(i);
            for j in 0..d {
                let g = 0.5 * (ui[j] - vi[j]) / (rep * nf);
                au[j] -= g;
                av[j] += g;
            }
        }
    }
    (loss / nf, adj_u, adj_v)
}

/// Engression loss of a generator on a batch (Monte Carlo with the supplied
/// noise draws). `eps` and `eps_prime` must match the generator's noise
/// dimension.
pub fn engression_loss(
    gen: &MlpGenerator,
    x: &SampleBatch,
    y: Option<&Matrix>,
    eps: &Matrix,
    eps_prime: &Matrix,
) -> Result<f64> {
    let layout = gen.layout();
    if eps.cols() != layout.noise_dim || eps_prime.cols() != layout.noise_dim {
        return Err(RmlError::DimMismatch {
            context: "engression noise",
            expected: layout.noise_dim,
            got: eps.cols(),
        });
    }
    let inputs_u = nn::assemble_inputs(layout, None, y, None, Some(eps))?;
    let inputs_v = nn::assemble_inputs(layout, None, y, None, Some(eps_prime))?;
    let u = gen.forward(&inputs_u)?;
    let v = gen.forward(&inputs_v)?;
    let (loss, _, _) = energy_loss_parts(x.data(), &u, &v);
    Ok(loss)
}

/// Flow-matching regression loss: mean squared error between
/// `field((1-s) x0 + s eps, y, s)` and the target velocity `eps - x0`.
pub fn fm_regression_loss(
    field: &MlpGenerator,
    x0: &SampleBatch,
    eps: &Matrix,
    s: &[f64],
    y: Option<&Matrix>,
) -> Result<f64> {
    let (inputs, target) = fm_inputs_and_target(field.layout(), x0, eps, s, y)?;
    let out = field.forward(&inputs)?;
    let (loss, _) = nn::squared_loss(&out, &target);
    Ok(loss)
}

/// Shared input/target assembly for flow-matching training and loss
/// evaluation: rows `[(1-s) x0 + s eps | y | s]` and targets `eps - x0`.
pub fn fm_inputs_and_target(
    layout: InputLayout,
    x0: &SampleBatch,
    eps: &Matrix,
    s: &[f64],
    y: Option<&Matrix>,
) -> Result<(Matrix, Matrix)> {
    let n = x0.len();
    let d = x0.dim();
    if eps.rows() != n || eps.cols() != d {
        return Err(RmlError::DimMismatch {
            context: "flow matching noise",
            expected: d,
            got: eps.cols(),
        });
    }
    if s.len() != n {
        return Err(RmlError::DimMismatch {
            context: "flow matching time column",
            expected: n,
            got: s.len(),
        });
    }
    let mut h = Matrix::zeros(n, d);
    let mut target = Matrix::zeros(n, d);
    for i in 0..n {
        let x = x0.row(i);
        let e = eps.row(i);
        let hrow = h.row_mut(i);
        for j in 0..d {
            hrow[j] = (1.0 - s[i]) * x[j] + s[i] * e[j];
        }
        let trow = target.row_mut(i);
        for j in 0..d {
            trow[j] = e[j] - x[j];
        }
    }
    let inputs = nn::assemble_inputs(layout, Some(&h), y, Some(s), None)?;
    Ok((inputs, target))
}
