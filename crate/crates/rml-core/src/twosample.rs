//! Two-sample testing on the linear SEM family: the plain energy-distance
//! statistic and its multi-step enhancement.
//!
//! The enhanced statistic walks the dimension-dropping forward process: for
//! each step it fits the Gaussian conditional mean of the newly revealed
//! coordinate by least squares on each sample, then averages the closed-form
//! 1-D Gaussian energy distance between the two fitted conditionals over the
//! pooled conditioning points. Critical values come from simulated null
//! datasets at a fixed adjacency.

use crate::error::{Result, RmlError};
use crate::gauss::energy_distance_unit_gaussians;
use crate::linalg::{solve_spd, Matrix};
use crate::report::{map_indexed, Table};
use crate::rng::{derive_rng, Rng};
use crate::sample::SampleBatch;
use crate::scoring::energy_distance;
use crate::sem::{sem_sample, SemSpec};
use rand::Rng as _;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct TestSpec {
    pub dim: usize,
    pub n_per_sample: usize,
    pub null_simulations: usize,
    pub level: f64,
    /// Frobenius norms of the adjacency separation swept by the power study.
    pub separations: Vec<f64>,
    pub replications: usize,
}

impl TestSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(RmlError::config("significance level must lie in (0,1)"));
        }
        if self.null_simulations < 100 {
            return Err(RmlError::config("need at least 100 null simulations"));
        }
        if self.dim < 2 || self.n_per_sample <= self.dim {
            return Err(RmlError::config("need dim >= 2 and n > dim"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatFamily {
    Plain,
    RmlEnhanced,
}

impl StatFamily {
    pub const ALL: [StatFamily; 2] = [StatFamily::Plain, StatFamily::RmlEnhanced];

    pub fn name(&self) -> &'static str {
        match self {
            StatFamily::Plain => "energy",
            StatFamily::RmlEnhanced => "rml-enhanced",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TestResult {
    pub statistic: f64,
    pub critical_value: f64,
    pub reject: bool,
    pub family: StatFamily,
}

/// Plain two-sample energy distance statistic.
pub fn plain_statistic(a: &SampleBatch, b: &SampleBatch) -> Result<f64> {
    energy_distance(a, b)
}

/// Per-coordinate least-squares fit of `x_k ~ b' x_{1:k-1}` (no intercept).
fn fit_row(data: &SampleBatch, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let n = data.len();
    let mut gram = Matrix::zeros(k, k);
    let mut rhs = vec![0.0; k];
    for i in 0..n {
        let row = data.row(i);
        for p in 0..k {
            for q in 0..=p {
                gram[(p, q)] += row[p] * row[q];
            }
            rhs[p] += row[p] * row[k];
        }
    }
    for p in 0..k {
        for q in (p + 1)..k {
            gram[(p, q)] = gram[(q, p)];
        }
    }
    solve_spd(&gram, &rhs)
}

/// Multi-step enhanced statistic under the dimension-dropping forward
/// process with `T = d` steps: the mean over steps of the average
/// closed-form energy distance between the fitted unit-variance Gaussian
/// conditionals, evaluated over the pooled conditioning points.
pub fn rml_statistic(a: &SampleBatch, b: &SampleBatch) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(RmlError::DimMismatch {
            context: "two-sample batches",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let d = a.dim();
    if a.len() <= d || b.len() <= d {
        return Err(RmlError::InsufficientSamples {
            need: d + 1,
            got: a.len().min(b.len()),
        });
    }
    let mut total = 0.0;
    // step t reveals coordinate k = d - t + 1 (1-indexed); k = 1 has no
    // regressors and contributes zero exactly
    for k in 1..d {
        let ca = fit_row(a, k)?;
        let cb = fit_row(b, k)?;
        let mut acc = 0.0;
        for batch in [a, b] {
            for i in 0..batch.len() {
                let row = batch.row(i);
                let mut delta = 0.0;
                for j in 0..k {
                    delta += (ca[j] - cb[j]) * row[j];
                }
                acc += energy_distance_unit_gaussians(delta, 0.0);
            }
        }
        total += acc / (a.len() + b.len()) as f64;
    }
    Ok(total / d as f64)
}

pub fn statistic(family: StatFamily, a: &SampleBatch, b: &SampleBatch) -> Result<f64> {
    match family {
        StatFamily::Plain => plain_statistic(a, b),
        StatFamily::RmlEnhanced => rml_statistic(a, b),
    }
}

/// Nearest-rank empirical quantile: the `ceil(q n)`-th order statistic.
pub fn nearest_rank_quantile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_unstable_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

/// Simulates `null_simulations` dataset pairs from the same adjacency and
/// returns the `(1 - level)` nearest-rank quantile of the statistic.
pub fn calibrate(
    spec: &TestSpec,
    family: StatFamily,
    base: &SemSpec,
    seed: u64,
    threads: usize,
) -> Result<f64> {
    spec.validate()?;
    let stats: Vec<Result<f64>> = map_indexed(spec.null_simulations, threads, |i| {
        let mut rng = derive_rng(seed, &[40, family as u64, i as u64]);
        let a = sem_sample(base, spec.n_per_sample, &mut rng);
        let b = sem_sample(base, spec.n_per_sample, &mut rng);
        statistic(family, &a, &b)
    });
    let mut values = Vec::with_capacity(stats.len());
    for s in stats {
        values.push(s?);
    }
    Ok(nearest_rank_quantile(&mut values, 1.0 - spec.level))
}

/// Runs one test at a precomputed critical value.
pub fn run_test(
    family: StatFamily,
    a: &SampleBatch,
    b: &SampleBatch,
    critical_value: f64,
) -> Result<TestResult> {
    let s = statistic(family, a, b)?;
    Ok(TestResult {
        statistic: s,
        critical_value,
        reject: s > critical_value,
        family,
    })
}

/// A strictly-lower-triangular perturbation with unit Frobenius norm.
fn random_direction(dim: usize, rng: &mut Rng) -> Matrix {
    let mut u = Matrix::zeros(dim, dim);
    let mut norm = 0.0;
    for i in 1..dim {
        for j in 0..i {
            let v: f64 = rng.sample(StandardNormal);
            u[(i, j)] = v;
            norm += v * v;
        }
    }
    let norm = norm.sqrt();
    for i in 1..dim {
        for j in 0..i {
            u[(i, j)] /= norm;
        }
    }
    u
}

#[derive(Debug, Clone)]
pub struct PowerRow {
    pub separation: f64,
    pub family: StatFamily,
    pub power: f64,
    pub critical_value: f64,
}

#[derive(Debug, Clone)]
pub struct PowerStudy {
    pub spec: TestSpec,
    pub rows: Vec<PowerRow>,
    /// `(family, separation, replication, statistic, reject)`
    pub draws: Vec<(StatFamily, f64, usize, f64, bool)>,
}

impl PowerStudy {
    pub fn power(&self, family: StatFamily, separation: f64) -> f64 {
        self.rows
            .iter()
            .find(|r| r.family == family && r.separation == separation)
            .map(|r| r.power)
            .expect("row exists")
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&[
            "separation",
            "family",
            "power",
            "n",
            "d",
            "replications",
            "critical_value",
        ]);
        for r in &self.rows {
            t.push(vec![
                r.separation.into(),
                r.family.name().into(),
                r.power.into(),
                self.spec.n_per_sample.into(),
                self.spec.dim.into(),
                self.spec.replications.into(),
                r.critical_value.into(),
            ]);
        }
        t
    }
}

/// Power sweep: calibrate both statistics under the null at a fixed random
/// adjacency `A`, then for each separation estimate the rejection rate over
/// replications of `A`-vs-`B` data with `||A - B||_F` fixed and the
/// perturbation direction redrawn per replication.
pub fn power_study(spec: &TestSpec, seed: u64, threads: usize) -> Result<PowerStudy> {
    spec.validate()?;
    let base = SemSpec::random(spec.dim, &mut derive_rng(seed, &[41]));
    let mut criticals = Vec::new();
    for family in StatFamily::ALL {
        criticals.push(calibrate(spec, family, &base, seed, threads)?);
    }
    let mut rows = Vec::new();
    let mut draws = Vec::new();
    for (si, &sep) in spec.separations.iter().enumerate() {
        let per_rep: Vec<Result<[(f64, bool); 2]>> =
            map_indexed(spec.replications, threads, |rep| {
                let mut rng = derive_rng(seed, &[42, si as u64, rep as u64]);
                let mut b_adj = base.adjacency().clone();
                if sep > 0.0 {
                    let dir = random_direction(spec.dim, &mut rng);
                    for i in 1..spec.dim {
                        for j in 0..i {
                            b_adj[(i, j)] += sep * dir[(i, j)];
                        }
                    }
                }
                let b_spec = SemSpec::new(b_adj)?;
                let a = sem_sample(&base, spec.n_per_sample, &mut rng);
                let b = sem_sample(&b_spec, spec.n_per_sample, &mut rng);
                let mut out = [(0.0, false); 2];
                for (fi, family) in StatFamily::ALL.iter().enumerate() {
                    let r = run_test(*family, &a, &b, criticals[fi])?;
                    out[fi] = (r.statistic, r.reject);
                }
                Ok(out)
            });
        let mut by_family = [Vec::new(), Vec::new()];
        for (rep, r) in per_rep.into_iter().enumerate() {
            let r = r?;
            for (fi, family) in StatFamily::ALL.iter().enumerate() {
                by_family[fi].push(r[fi]);
                draws.push((*family, sep, rep, r[fi].0, r[fi].1));
            }
        }
        for (fi, family) in StatFamily::ALL.iter().enumerate() {
            let rejects = by_family[fi].iter().filter(|(_, r)| *r).count();
            rows.push(PowerRow {
                separation: sep,
                family: *family,
                power: rejects as f64 / spec.replications as f64,
                critical_value: criticals[fi],
            });
        }
    }
    Ok(PowerStudy {
        spec: spec.clone(),
        rows,
        draws,
    })
}
