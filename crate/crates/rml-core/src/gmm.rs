//! Gaussian-mixture ground truth.
//!
//! Two roles: general isotropic mixtures (sampling, densities, the
//! low-density-fraction metric used to judge generated scatter), and the
//! symmetric two-component 1-D mixture whose reverse conditionals have
//! closed forms under all three matched-marginal forward schemes. The latter
//! feed exact reverse sampling and the sigma -> 0 analysis of how forward
//! process choice shapes conditional smoothness.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bridge::ForwardScheme;
use crate::error::{Result, RmlError};
use crate::rng::Rng;
use crate::sample::SampleBatch;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmSpec {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub sigma: f64,
}

impl GmmSpec {
    pub fn new(means: Vec<Vec<f64>>, weights: Vec<f64>, sigma: f64) -> Result<Self> {
        let spec = GmmSpec {
            means,
            weights,
            sigma,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The symmetric 1-D mixture `1/2 N(-1, s^2) + 1/2 N(+1, s^2)`.
    pub fn symmetric_1d(sigma: f64) -> Result<Self> {
        GmmSpec::new(vec![vec![-1.0], vec![1.0]], vec![0.5, 0.5], sigma)
    }

    /// The poorly-mixed three-component 2-D example: means (0,0), (5,5),
    /// (6,-1), equal weights, sigma 0.1.
    pub fn three_component_2d() -> Self {
        GmmSpec::new(
            vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![6.0, -1.0]],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            0.1,
        )
        .expect("static spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() || self.means.len() != self.weights.len() {
            return Err(RmlError::config("means and weights must align and be non-empty"));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(RmlError::config("component means must share a positive dimension"));
        }
        if self.weights.iter().any(|&w| w <= 0.0) {
            return Err(RmlError::config("weights must be positive"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(RmlError::config(format!("weights must sum to 1, got {total}")));
        }
        if self.sigma <= 0.0 {
            return Err(RmlError::config("sigma must be positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn draw_component(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        self.weights.len() - 1
    }

    pub fn sample_row(&self, rng: &mut Rng) -> Vec<f64> {
        let k = self.draw_component(rng);
        self.means[k]
            .iter()
            .map(|&m| m + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> SampleBatch {
        SampleBatch::from_rows(&(0..n).map(|_| self.sample_row(rng)).collect::<Vec<_>>())
    }

    /// Exact mixture density at `x`.
    pub fn density(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "density point dimension");
        let d = self.dim() as f64;
        let norm = (2.0 * std::f64::consts::PI * self.sigma * self.sigma).powf(-d / 2.0);
        self.means
            .iter()
            .zip(&self.weights)
            .map(|(m, &w)| {
                let sq: f64 = m
                    .iter()
                    .zip(x)
                    .map(|(mi, xi)| {
                        let d = xi - mi;
                        d * d
                    })
                    .sum();
                w * norm * (-sq / (2.0 * self.sigma * self.sigma)).exp()
            })
            .sum()
    }

    /// Density maximum over component means; with well-separated components
    /// this is the global peak.
    pub fn peak_density(&self) -> f64 {
        self.means
            .iter()
            .map(|m| self.density(m))
            .fold(0.0, f64::max)
    }

    /// Fraction of rows whose density falls below `rel_threshold` times the
    /// peak density.
    pub fn low_density_fraction(&self, batch: &SampleBatch, rel_threshold: f64) -> f64 {
        let cutoff = rel_threshold * self.peak_density();
        let n = batch.len();
        let low = batch.iter_rows().filter(|r| self.density(r) < cutoff).count();
        low as f64 / n as f64
    }
}

/// Closed-form reverse conditional of the symmetric +-1 mixture under one of
/// the matched-marginal forward schemes:
/// `X_{t-1} | X_t = x ~ sum_s w_s(x) N(a x + b_s, tau^2)`.
#[derive(Debug, Clone, Copy)]
pub struct ReverseConditionalParams {
    pub scheme: ForwardScheme,
    pub sigma: f64,
    pub t: usize,
    pub steps: usize,
    pub a: f64,
    pub tau2: f64,
}

impl ReverseConditionalParams {
    /// Mixture weight of component `s = +1` given `X_t = x`; the logistic
    /// form shared by all three schemes.
    pub fn weight_plus(&self, x: f64) -> f64 {
        let cap_t = self.steps as f64;
        let ct = 1.0 - self.t as f64 / cap_t;
        let den = ct * ct * self.sigma * self.sigma + (self.t as f64 / cap_t).powi(2);
        1.0 / (1.0 + (-2.0 * x * ct / den).exp())
    }

    /// Offset `b_s = s (1 - (t-1)/T - a (1 - t/T))`.
    pub fn offset(&self, s: f64) -> f64 {
        let cap_t = self.steps as f64;
        s * (1.0 - (self.t as f64 - 1.0) / cap_t - self.a * (1.0 - self.t as f64 / cap_t))
    }

    /// One draw of `X_{t-1}` given `X_t = x`.
    pub fn sample_reverse(&self, x: f64, rng: &mut Rng) -> f64 {
        let wp = self.weight_plus(x);
        let s = if rng.gen::<f64>() < wp { 1.0 } else { -1.0 };
        let mut v = self.a * x + self.offset(s);
        if self.tau2 > 0.0 {
            v += self.tau2.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        v
    }

    /// Density of the reverse conditional at `y` given `X_t = x`
    /// (requires `tau2 > 0`).
    pub fn conditional_density(&self, x: f64, y: f64) -> f64 {
        assert!(self.tau2 > 0.0, "degenerate conditional has no density");
        let tau = self.tau2.sqrt();
        let wp = self.weight_plus(x);
        let comp = |w: f64, s: f64| {
            let z = (y - self.a * x - self.offset(s)) / tau;
            w * (-0.5 * z * z).exp() / (tau * (2.0 * std::f64::consts::PI).sqrt())
        };
        comp(wp, 1.0) + comp(1.0 - wp, -1.0)
    }
}

/// Evaluates the scheme-specific slope `a` and conditional variance `tau^2`
/// for step `t` of `T`. `sigma = 0` is allowed and yields the two-point
/// (separated-modes) limit exactly.
pub fn reverse_params(
    scheme: ForwardScheme,
    sigma: f64,
    t: usize,
    steps: usize,
) -> Result<ReverseConditionalParams> {
    if t == 0 || t > steps {
        return Err(RmlError::config(format!(
            "reverse conditional needs 1 <= t <= T, got t={t}, T={steps}"
        )));
    }
    if sigma < 0.0 {
        return Err(RmlError::config("sigma must be non-negative"));
    }
    let cap_t = steps as f64;
    let tf = t as f64;
    let cp = 1.0 - (tf - 1.0) / cap_t;
    let cc = 1.0 - tf / cap_t;
    let s2 = sigma * sigma;
    let den = cc * cc * s2 + (tf / cap_t).powi(2);
    let num = match scheme {
        ForwardScheme::FlowMatching => cp * cc * s2 + (tf - 1.0) * tf / (cap_t * cap_t),
        ForwardScheme::Diffusion => cp * cc * s2 + ((tf - 1.0) / cap_t).powi(2),
        ForwardScheme::XProcess => cp * cc * s2,
    };
    let a = num / den;
    let prev_var = cp * cp * s2 + ((tf - 1.0) / cap_t).powi(2);
    // cancellation can leave an O(1e-17) residue where the conditional is
    // exactly degenerate; snap it so tau2 = 0 cases sample deterministically
    let mut tau2 = (prev_var - num * num / den).max(0.0);
    if tau2 < 1e-14 {
        tau2 = 0.0;
    }
    Ok(ReverseConditionalParams {
        scheme,
        sigma,
        t,
        steps,
        a,
        tau2,
    })
}

/// The sigma -> 0 limits of `(a, tau^2)` for each scheme.
pub fn sigma_zero_limits(scheme: ForwardScheme, t: usize, steps: usize) -> (f64, f64) {
    let tf = t as f64;
    let cap_t = steps as f64;
    match scheme {
        ForwardScheme::FlowMatching => ((tf - 1.0) / tf, 0.0),
        ForwardScheme::Diffusion => (
            (tf - 1.0) * (tf - 1.0) / (tf * tf),
            (2.0 * tf - 1.0) / (tf * tf) * (tf - 1.0) * (tf - 1.0) / (cap_t * cap_t),
        ),
        ForwardScheme::XProcess => (0.0, (tf - 1.0) * (tf - 1.0) / (cap_t * cap_t)),
    }
}

/// Exact reverse sampler for the symmetric +-1 mixture: the per-step
/// closed-form conditionals assembled for the whole chain.
#[derive(Debug, Clone)]
pub struct GmmReverseOracle {
    params: Vec<ReverseConditionalParams>,
}

impl GmmReverseOracle {
    pub fn new(scheme: ForwardScheme, sigma: f64, steps: usize) -> Result<Self> {
        let params = (1..=steps)
            .map(|t| reverse_params(scheme, sigma, t, steps))
            .collect::<Result<Vec<_>>>()?;
        Ok(GmmReverseOracle { params })
    }

    pub fn steps(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self, t: usize) -> &ReverseConditionalParams {
        &self.params[t - 1]
    }

    pub fn sample_reverse(&self, t: usize, x: f64, rng: &mut Rng) -> f64 {
        self.params[t - 1].sample_reverse(x, rng)
    }
}

/// Uniform two-point target on {-1, +1}: the sigma -> 0 mixture.
pub fn two_point_sample(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect()
}

/// The best n-point quantization of the two-point law: exactly half -1, half
/// +1 (sorted). Used as a noise-free reference for Wasserstein errors.
pub fn two_point_reference(n: usize) -> Vec<f64> {
    let mut v = vec![-1.0; n / 2];
    v.extend(std::iter::repeat(1.0).take(n - n / 2));
    v
}

/// Analytic conditional-expectation velocity field for the two-point target
/// under the linear bridge `h = (1-s) X0 + s eps`:
/// `g(x, s) = sum_{s0} w_{s0}(x, s) [ (x - (1-s) s0)/s - s0 ]` with logistic
/// weights `w_{s0} ∝ exp(-(x - (1-s) s0)^2 / (2 s^2))`.
#[derive(Debug, Clone, Copy)]
pub struct TwoPointFlowField;

impl TwoPointFlowField {
    pub fn velocity(&self, x: f64, s: f64) -> f64 {
        assert!(s > 0.0, "field is evaluated at s in (0, 1]");
        let c = 1.0 - s;
        let wp = 1.0 / (1.0 + (-2.0 * x * c / (s * s)).exp());
        let branch = |s0: f64| (x - c * s0) / s - s0;
        wp * branch(1.0) + (1.0 - wp) * branch(-1.0)
    }
}
