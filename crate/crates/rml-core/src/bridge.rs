//! Forward stochastic bridging processes.
//!
//! A bridge carries the data distribution at step 0 to a known, easy-to-sample
//! terminal distribution at step T (standard Gaussian for every bridge here),
//! exposing joint draws of adjacent states for training and, where the
//! process allows it, forward regeneration from an earlier step (the `P'`
//! used by alternating generation).
//!
//! Covariates are accepted everywhere for interface completeness; the
//! shipped bridges are unconditional and ignore them (conditioning enters
//! through the generators instead).

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RmlError};
use crate::rng::Rng;

pub trait Bridge: Send + Sync {
    /// Number of forward steps T (the chain visits states 0..=T).
    fn steps(&self) -> usize;

    /// Dimension of the state at step `t`, for `t` in `0..=T`.
    fn dim(&self, t: usize) -> usize;

    /// Draw from the terminal distribution q*.
    fn sample_terminal(&self, y: Option<&[f64]>, rng: &mut Rng) -> Vec<f64>;

    /// Joint draw of `(X_{t-1}, X_t)` conditioned on `X_0 = x0`, for
    /// `t` in `1..=T`.
    fn sample_pair(
        &self,
        t: usize,
        x0: &[f64],
        y: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, Vec<f64>)>;

    /// A full path draw `(x_0, ..., x_T)` conditioned on `X_0 = x0`.
    fn sample_path(&self, x0: &[f64], y: Option<&[f64]>, rng: &mut Rng) -> Result<Vec<Vec<f64>>>;

    /// Whether `regenerate(s, t, ..)` is available.
    fn supports_regeneration(&self, from: usize, to: usize) -> bool;

    /// Maps a sample with marginal p_s to a sample with marginal p_t
    /// (`s <= t`). `s == t` is always the identity.
    fn regenerate(
        &self,
        from: usize,
        to: usize,
        x_from: &[f64],
        y: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<Vec<f64>>;

    /// Short human-readable description for manifests.
    fn label(&self) -> String;
}

fn check_x0(bridge: &dyn Bridge, x0: &[f64]) -> Result<()> {
    if x0.len() != bridge.dim(0) {
        return Err(RmlError::DimMismatch {
            context: "bridge x0",
            expected: bridge.dim(0),
            got: x0.len(),
        });
    }
    Ok(())
}

fn check_t(bridge: &dyn Bridge, t: usize) -> Result<()> {
    if t == 0 || t > bridge.steps() {
        return Err(RmlError::config(format!(
            "step t={t} out of range 1..={}",
            bridge.steps()
        )));
    }
    Ok(())
}

fn gaussian_vec(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// The three same-marginal forward schemes on `X_t = (1 - t/T) X_0 + eps_t`:
/// one shared noise draw scaled by `t/T` (flow matching), accumulated
/// independent increments of variance `(2t-1)/T^2` (diffusion), or a fresh
/// draw scaled by `t/T` at every step (the X process). All three give
/// `Var(eps_t) = (t/T)^2`, so the per-step marginals agree; the reverse
/// conditionals do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardScheme {
    FlowMatching,
    Diffusion,
    XProcess,
}

impl ForwardScheme {
    pub const ALL: [ForwardScheme; 3] = [
        ForwardScheme::FlowMatching,
        ForwardScheme::Diffusion,
        ForwardScheme::XProcess,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ForwardScheme::FlowMatching => "flow-matching",
            ForwardScheme::Diffusion => "diffusion",
            ForwardScheme::XProcess => "x-process",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatchedMarginalBridge {
    scheme: ForwardScheme,
    steps: usize,
    dim: usize,
}

impl MatchedMarginalBridge {
    pub fn new(scheme: ForwardScheme, steps: usize, dim: usize) -> Result<Self> {
        if steps == 0 || dim == 0 {
            return Err(RmlError::config("steps and dim must be positive"));
        }
        Ok(MatchedMarginalBridge { scheme, steps, dim })
    }

    pub fn scheme(&self) -> ForwardScheme {
        self.scheme
    }

    /// `eps_{t-1}` and `eps_t` drawn jointly, per coordinate.
    fn noise_pair(&self, t: usize, rng: &mut Rng) -> (f64, f64) {
        let tf = t as f64;
        let cap_t = self.steps as f64;
        match self.scheme {
            ForwardScheme::FlowMatching => {
                let eta: f64 = rng.sample(StandardNormal);
                ((tf - 1.0) / cap_t * eta, tf / cap_t * eta)
            }
            ForwardScheme::Diffusion => {
                let prev_sd = (tf - 1.0) / cap_t;
                let prev = prev_sd * rng.sample::<f64, _>(StandardNormal);
                let inc = (2.0 * tf - 1.0).sqrt() / cap_t * rng.sample::<f64, _>(StandardNormal);
                (prev, prev + inc)
            }
            ForwardScheme::XProcess => {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                ((tf - 1.0) / cap_t * a, tf / cap_t * b)
            }
        }
    }
}

impl Bridge for MatchedMarginalBridge {
    fn steps(&self) -> usize {
        self.steps
    }

    fn dim(&self, _t: usize) -> usize {
        self.dim
    }

    fn sample_terminal(&self, _y: Option<&[f64]>, rng: &mut Rng) -> Vec<f64> {
        gaussian_vec(self.dim, rng)
    }

    fn sample_pair(
        &self,
        t: usize,
        x0: &[f64],
        _y: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_t(self, t)?;
        check_x0(self, x0)?;
        let cap_t = self.steps as f64;
        let (cp, cc) = (1.0 - (t as f64 - 1.0) / cap_t, 1.0 - t as f64 / cap_t);
        let mut prev = Vec::with_capacity(self.dim);
        let mut cur = Vec::with_capacity(self.dim);
        for &x in x0 {
            let (ep, ec) = self.noise_pair(t, rng);
            prev.push(cp * x + ep);
            cur.push(cc * x + ec);
        }
        Ok((prev, cur))
    }

    fn sample_path(&self, x0: &[f64], _y: Option<&[f64]>, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        check_x0(self, x0)?;
        let cap_t = self.steps as f64;
        let mut path = Vec::with_capacity(self.steps + 1);
        path.push(x0.to_vec());
        match self.scheme {
            ForwardScheme::FlowMatching => {
                let eta = gaussian_vec(self.dim, rng);
                for t in 1..=self.steps {
                    let c = 1.0 - t as f64 / cap_t;
                    let s = t as f64 / cap_t;
                    path.push(
                        x0.iter()
                            .zip(&eta)
                            .map(|(x, e)| c * x + s * e)
                            .collect(),
                    );
                }
            }
            ForwardScheme::Diffusion => {
                let mut eps = vec![0.0; self.dim];
                for t in 1..=self.steps {
                    let c = 1.0 - t as f64 / cap_t;
                    let sd = (2.0 * t as f64 - 1.0).sqrt() / cap_t;
                    for e in eps.iter_mut() {
                        *e += sd * rng.sample::<f64, _>(StandardNormal);
                    }
                    path.push(x0.iter().zip(&eps).map(|(x, e)| c * x + e).collect());
                }
            }
            ForwardScheme::XProcess => {
                for t in 1..=self.steps {
                    let c = 1.0 - t as f64 / cap_t;
                    let s = t as f64 / cap_t;
                    path.push(
                        x0.iter()
                            .map(|x| c * x + s * rng.sample::<f64, _>(StandardNormal))
                            .collect(),
                    );
                }
            }
        }
        Ok(path)
    }

    fn supports_regeneration(&self, from: usize, to: usize) -> bool {
        from <= to && to <= self.steps && (from == to || from == 0)
    }

    fn regenerate(
        &self,
        from: usize,
        to: usize,
        x_from: &[f64],
        _y: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        if !self.supports_regeneration(from, to) {
            return Err(RmlError::UnsupportedRegeneration { from, to });
        }
        if from == to {
            return Ok(x_from.to_vec());
        }
        // from == 0: X_t = (1 - t/T) X_0 + (t/T) eta with fresh noise; the
        // marginal matches all three schemes.
        let cap_t = self.steps as f64;
        let c = 1.0 - to as f64 / cap_t;
        let s = to as f64 / cap_t;
        Ok(x_from
            .iter()
            .map(|x| c * x + s * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }

    fn label(&self) -> String {
        format!("{}(T={}, dim={})", self.scheme.name(), self.steps, self.dim)
    }
}

/// Markov noising chain `X_t | X_{t-1} ~ N(sqrt(1 - sigma_t) X_{t-1}, sigma_t^2 I)`
/// with an increasing schedule ending at `sigma_T = 1`, so the terminal state
/// is exactly standard Gaussian. Being Markov, it regenerates from any
/// earlier step by running the chain forward.
#[derive(Debug, Clone)]
pub struct MarkovDiffusionBridge {
    schedule: Vec<f64>,
    dim: usize,
}

impl MarkovDiffusionBridge {
    pub fn new(schedule: Vec<f64>, dim: usize) -> Result<Self> {
        if schedule.is_empty() || dim == 0 {
            return Err(RmlError::config("schedule must be non-empty, dim positive"));
        }
        let mut prev = 0.0;
        for (i, &s) in schedule.iter().enumerate() {
            if !(s > 0.0 && s <= 1.0) || s <= prev {
                return Err(RmlError::config(format!(
                    "sigma schedule must be increasing within (0,1]; offending entry {s} at t={}",
                    i + 1
                )));
            }
            prev = s;
        }
        if (schedule[schedule.len() - 1] - 1.0).abs() > 1e-12 {
            return Err(RmlError::config("sigma_T must equal 1"));
        }
        Ok(MarkovDiffusionBridge { schedule, dim })
    }

    /// Default schedule `sigma_t = t/T`.
    pub fn linear(steps: usize, dim: usize) -> Result<Self> {
        let schedule = (1..=steps).map(|t| t as f64 / steps as f64).collect();
        MarkovDiffusionBridge::new(schedule, dim)
    }

    fn advance(&self, t: usize, state: &mut [f64], rng: &mut Rng) {
        let sigma = self.schedule[t - 1];
        let mean = (1.0 - sigma).sqrt();
        for v in state.iter_mut() {
            *v = mean * *v + sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

impl Bridge for MarkovDiffusionBridge {
    fn steps(&self) -> usize {
        self.schedule.len()
    }

    fn dim(&self, _t: usize) -> usize {
        self.dim
    }

    fn sample_terminal(&self, _y: Option<&[f64]>, rng: &mut Rng) -> Vec<f64> {
        gaussian_vec(self.dim, rng)
    }

    fn sample_pair(
        &self,
        t: usize,
        x0: &[f64],
        _y: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_t(self, t)?;
        check_x0(self, x0)?;
        let mut state = x0.to_vec();
        for s in 1..t {
            self.advance(s, &mut state, rng);
        }
        let prev = state.clone();
        self.advance(t, &mut state, rng);
        Ok((prev, state))
    }

    fn sample_path(&self, x0: &[f64], _y: Option<&[f64]>, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        check_x0(self, x0)?;
        let mut path = Vec::with_capacity(self.steps() + 1);
        let mut state = x0.to_vec();
        path.push(state.clone());
        for t in 1..=self.steps() {
            self.advance(t, &mut state, rng);
            path.push(state.clone());
        }
        Ok(path)
    }

    fn supports_regeneration(&self, from: usize, to: usize) -> bool {
        from <= to && to <= self.steps()
    }

    fn regenerate(
        &self,
        from: usize,
        to: usize,
        x_from: &[f64],
        _y: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        if !self.supports_regeneration(from, to) {
            return Err(RmlError::UnsupportedRegeneration { from, to });
        }
        let mut state = x_from.to_vec();
        for t in (from + 1)..=to {
            self.advance(t, &mut state, rng);
        }
        Ok(state)
    }

    fn label(&self) -> String {
        format!("markov-diffusion(T={}, dim={})", self.steps(), self.dim)
    }
}

/// Forward process that drops the trailing coordinate each step; the final
/// step replaces the remaining scalar with a standard Gaussian. T equals the
/// data dimension.
#[derive(Debug, Clone)]
pub struct DimensionDropBridge {
    dim: usize,
}

impl DimensionDropBridge {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(RmlError::config("dimension-drop bridge needs dim >= 1"));
        }
        Ok(DimensionDropBridge { dim })
    }
}

impl Bridge for DimensionDropBridge {
    fn steps(&self) -> usize {
        self.dim
    }

    fn dim(&self, t: usize) -> usize {
        if t >= self.dim {
            1
        } else {
            self.dim - t
        }
    }

    fn sample_terminal(&self, _y: Option<&[f64]>, rng: &mut Rng) -> Vec<f64> {
        vec![rng.sample(StandardNormal)]
    }

    fn sample_pair(
        &self,
        t: usize,
        x0: &[f64],
        _y: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_t(self, t)?;
        check_x0(self, x0)?;
        let prev = x0[..self.dim(t - 1)].to_vec();
        let cur = if t == self.dim {
            vec![rng.sample(StandardNormal)]
        } else {
            x0[..self.dim(t)].to_vec()
        };
        Ok((prev, cur))
    }

    fn sample_path(&self, x0: &[f64], y: Option<&[f64]>, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        check_x0(self, x0)?;
        let mut path: Vec<Vec<f64>> = (0..self.dim).map(|t| x0[..self.dim - t].to_vec()).collect();
        path.push(self.sample_terminal(y, rng));
        Ok(path)
    }

    fn supports_regeneration(&self, from: usize, to: usize) -> bool {
        from == to && to <= self.steps()
    }

    fn regenerate(
        &self,
        from: usize,
        to: usize,
        x_from: &[f64],
        _y: Option<&[f64]>,
        _rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        if !self.supports_regeneration(from, to) {
            return Err(RmlError::UnsupportedRegeneration { from, to });
        }
        Ok(x_from.to_vec())
    }

    fn label(&self) -> String {
        format!("dimension-drop(d={})", self.dim)
    }
}

/// Average-pooling ladder on square fields: each step pools by `kernel`,
/// shrinking the side while it stays divisible and larger than 2; the final
/// step replaces the coarsest field with i.i.d. standard Gaussians of the
/// same dimension.
#[derive(Debug, Clone)]
pub struct PoolingBridge {
    sides: Vec<usize>,
    kernel: usize,
}

impl PoolingBridge {
    pub fn new(side: usize, kernel: usize) -> Result<Self> {
        if kernel < 2 {
            return Err(RmlError::config("pooling kernel must be at least 2"));
        }
        if side < 2 || side % kernel != 0 {
            return Err(RmlError::config(format!(
                "grid side {side} is not divisible by kernel {kernel}"
            )));
        }
        let mut sides = vec![side];
        let mut s = side;
        while s > 2 && s % kernel == 0 {
            s /= kernel;
            sides.push(s);
        }
        if sides.len() < 2 {
            return Err(RmlError::config(format!(
                "grid side {side} admits no pooling step with kernel {kernel}"
            )));
        }
        Ok(PoolingBridge { sides, kernel })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    fn pooling_steps(&self) -> usize {
        self.sides.len() - 1
    }

    fn pool(&self, field: &[f64], side: usize) -> Vec<f64> {
        let k = self.kernel;
        let out_side = side / k;
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; out_side * out_side];
        for oy in 0..out_side {
            for ox in 0..out_side {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += field[(oy * k + dy) * side + ox * k + dx];
                    }
                }
                out[oy * out_side + ox] = acc * inv;
            }
        }
        out
    }
}

impl Bridge for PoolingBridge {
    fn steps(&self) -> usize {
        self.pooling_steps() + 1
    }

    fn dim(&self, t: usize) -> usize {
        let side = if t <= self.pooling_steps() {
            self.sides[t]
        } else {
            self.sides[self.pooling_steps()]
        };
        side * side
    }

    fn sample_terminal(&self, _y: Option<&[f64]>, rng: &mut Rng) -> Vec<f64> {
        gaussian_vec(self.dim(self.steps()), rng)
    }

    fn sample_pair(
        &self,
        t: usize,
        x0: &[f64],
        _y: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_t(self, t)?;
        check_x0(self, x0)?;
        let mut field = x0.to_vec();
        for s in 1..t {
            field = self.pool(&field, self.sides[s - 1]);
        }
        let prev = field.clone();
        let cur = if t <= self.pooling_steps() {
            self.pool(&field, self.sides[t - 1])
        } else {
            gaussian_vec(self.dim(t), rng)
        };
        Ok((prev, cur))
    }

    fn sample_path(&self, x0: &[f64], y: Option<&[f64]>, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        check_x0(self, x0)?;
        let mut path = vec![x0.to_vec()];
        for t in 1..=self.pooling_steps() {
            let prev = path.last().unwrap();
            path.push(self.pool(prev, self.sides[t - 1]));
        }
        path.push(self.sample_terminal(y, rng));
        Ok(path)
    }

    fn supports_regeneration(&self, from: usize, to: usize) -> bool {
        from == to && to <= self.steps()
    }

    fn regenerate(
        &self,
        from: usize,
        to: usize,
        x_from: &[f64],
        _y: Option<&[f64]>,
        _rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        if !self.supports_regeneration(from, to) {
            return Err(RmlError::UnsupportedRegeneration { from, to });
        }
        Ok(x_from.to_vec())
    }

    fn label(&self) -> String {
        format!(
            "pooling(side={}, kernel={}, T={})",
            self.sides[0],
            self.kernel,
            self.steps()
        )
    }
}

/// Serializable bridge description for experiment configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BridgeConfig {
    FlowMatching { steps: usize, dim: usize },
    Diffusion { steps: usize, dim: usize },
    XProcess { steps: usize, dim: usize },
    MarkovDiffusion { steps: usize, dim: usize },
    DimensionDrop { dim: usize },
    Pooling { side: usize, kernel: usize },
}

impl BridgeConfig {
    pub fn from_scheme(scheme: ForwardScheme, steps: usize, dim: usize) -> Self {
        match scheme {
            ForwardScheme::FlowMatching => BridgeConfig::FlowMatching { steps, dim },
            ForwardScheme::Diffusion => BridgeConfig::Diffusion { steps, dim },
            ForwardScheme::XProcess => BridgeConfig::XProcess { steps, dim },
        }
    }

    pub fn build(&self) -> Result<Box<dyn Bridge>> {
        Ok(match *self {
            BridgeConfig::FlowMatching { steps, dim } => Box::new(MatchedMarginalBridge::new(
                ForwardScheme::FlowMatching,
                steps,
                dim,
            )?),
            BridgeConfig::Diffusion { steps, dim } => Box::new(MatchedMarginalBridge::new(
                ForwardScheme::Diffusion,
                steps,
                dim,
            )?),
            BridgeConfig::XProcess { steps, dim } => Box::new(MatchedMarginalBridge::new(
                ForwardScheme::XProcess,
                steps,
                dim,
            )?),
            BridgeConfig::MarkovDiffusion { steps, dim } => {
                Box::new(MarkovDiffusionBridge::linear(steps, dim)?)
            }
            BridgeConfig::DimensionDrop { dim } => Box::new(DimensionDropBridge::new(dim)?),
            BridgeConfig::Pooling { side, kernel } => Box::new(PoolingBridge::new(side, kernel)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use crate::sample::SampleBatch;
    use crate::scoring::energy_distance;

    fn var(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    }

    /// Mixture sampler for the +-1 test target.
    fn gmm_draw(sigma: f64, rng: &mut Rng) -> f64 {
        let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        s + sigma * rng.sample::<f64, _>(StandardNormal)
    }

    #[test]
    fn dimension_drop_truncates() {
        let b = DimensionDropBridge::new(3).unwrap();
        let mut rng = derive_rng(300, &[]);
        let path = b.sample_path(&[1.0, 2.0, 3.0], None, &mut rng).unwrap();
        assert_eq!(path[0], vec![1.0, 2.0, 3.0]);
        assert_eq!(path[1], vec![1.0, 2.0]);
        assert_eq!(path[2], vec![1.0]);
        assert_eq!(path[3].len(), 1);
    }

    #[test]
    fn interpolation_path_is_exact() {
        let steps = 5;
        let b = MatchedMarginalBridge::new(ForwardScheme::FlowMatching, steps, 2).unwrap();
        let mut rng = derive_rng(301, &[]);
        let v = [0.25, -1.5];
        let path = b.sample_path(&v, None, &mut rng).unwrap();
        let w = path[steps].clone();
        for (t, x) in path.iter().enumerate() {
            let c = 1.0 - t as f64 / steps as f64;
            for j in 0..2 {
                let want = c * v[j] + (t as f64 / steps as f64) * w[j];
                assert!((x[j] - want).abs() < 1e-12, "t={t} j={j}");
            }
        }
    }

    #[test]
    fn pooling_constant_field_stays_constant() {
        let b = PoolingBridge::new(8, 2).unwrap();
        let mut rng = derive_rng(302, &[]);
        let c = 0.625;
        let field = vec![c; 64];
        let path = b.sample_path(&field, None, &mut rng).unwrap();
        // 8 -> 4 -> 2 then the Gaussian step
        assert_eq!(path.len(), 4);
        for x in &path[..3] {
            assert!(x.iter().all(|&v| v == c));
        }
    }

    #[test]
    fn pooling_step_counts_match_resolution_ladder() {
        // side 16: kernel 2 -> 16,8,4,2 (T=4); kernel 4 -> 16,4,1 (T=3);
        // kernel 8 -> 16,2 (T=2)
        assert_eq!(PoolingBridge::new(16, 2).unwrap().steps(), 4);
        assert_eq!(PoolingBridge::new(16, 4).unwrap().steps(), 3);
        assert_eq!(PoolingBridge::new(16, 8).unwrap().steps(), 2);
        // side 128 reproduces the 7/4/3 ladder
        assert_eq!(PoolingBridge::new(128, 2).unwrap().steps(), 7);
        assert_eq!(PoolingBridge::new(128, 4).unwrap().steps(), 4);
        assert_eq!(PoolingBridge::new(128, 8).unwrap().steps(), 3);
    }

    #[test]
    fn pooling_preserves_mean_exactly() {
        let b = PoolingBridge::new(8, 2).unwrap();
        // integer-valued field, so all the averaging is exact
        let field: Vec<f64> = (0..64).map(|i| ((i * 7) % 16) as f64).collect();
        let pooled = b.pool(&field, 8);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert_eq!(mean(&field), mean(&pooled));
    }

    #[test]
    fn matched_marginal_variance_identity() {
        // Var(X_t) = (1 - t/T)^2 Var(X_0) + (t/T)^2 within 2% at 1e5 draws
        let steps = 5;
        let sigma = 0.25;
        let var_x0 = 1.0 + sigma * sigma;
        for scheme in ForwardScheme::ALL {
            let b = MatchedMarginalBridge::new(scheme, steps, 1).unwrap();
            let mut rng = derive_rng(303, &[scheme as u64]);
            for t in 1..=steps {
                let mut xs = Vec::with_capacity(100_000);
                for _ in 0..100_000 {
                    let x0 = gmm_draw(sigma, &mut rng);
                    let (_, cur) = b.sample_pair(t, &[x0], None, &mut rng).unwrap();
                    xs.push(cur[0]);
                }
                let frac = t as f64 / steps as f64;
                let want = (1.0 - frac) * (1.0 - frac) * var_x0 + frac * frac;
                let got = var(&xs);
                assert!(
                    (got - want).abs() / want < 0.02,
                    "{} t={t}: var {got} vs {want}",
                    scheme.name()
                );
            }
        }
    }

    #[test]
    fn diffusion_noise_variance_telescopes() {
        // Var(eps_t) = sum_{k<=t} (2k-1)/T^2 = (t/T)^2, checked on paths
        // from a fixed x0 so Var(X_t) isolates the noise
        let steps = 5;
        let b = MatchedMarginalBridge::new(ForwardScheme::Diffusion, steps, 1).unwrap();
        let mut rng = derive_rng(304, &[]);
        let mut per_t: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
        for _ in 0..100_000 {
            let path = b.sample_path(&[0.7], None, &mut rng).unwrap();
            for (t, x) in path.iter().enumerate() {
                per_t[t].push(x[0]);
            }
        }
        for t in 1..=steps {
            let want = (t as f64 / steps as f64).powi(2);
            let got = var(&per_t[t]);
            assert!((got - want).abs() / want < 0.02, "t={t}: {got} vs {want}");
        }
    }

    #[test]
    fn matched_marginals_agree_across_schemes() {
        let steps = 4;
        let sigma = 0.25;
        let n = 10_000;
        let mut draws: Vec<Vec<Vec<f64>>> = Vec::new();
        for scheme in ForwardScheme::ALL {
            let b = MatchedMarginalBridge::new(scheme, steps, 1).unwrap();
            let mut rng = derive_rng(305, &[scheme as u64]);
            let mut per_t: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
            for _ in 0..n {
                let x0 = gmm_draw(sigma, &mut rng);
                let path = b.sample_path(&[x0], None, &mut rng).unwrap();
                for (t, x) in path.iter().enumerate() {
                    per_t[t].push(x[0]);
                }
            }
            draws.push(per_t);
        }
        for t in 1..=steps {
            for i in 0..3 {
                for j in (i + 1)..3 {
                    let a = SampleBatch::from_scalars(&draws[i][t]);
                    let b = SampleBatch::from_scalars(&draws[j][t]);
                    let d = energy_distance(&a, &b).unwrap();
                    assert!(d < 0.02, "schemes {i},{j} at t={t}: energy distance {d}");
                }
            }
        }
    }

    #[test]
    fn terminal_law_matches_direct_draws() {
        let mut rng = derive_rng(306, &[]);
        let n = 10_000;
        let sigma = 0.25;
        let bridges: Vec<Box<dyn Bridge>> = vec![
            Box::new(MatchedMarginalBridge::new(ForwardScheme::FlowMatching, 3, 1).unwrap()),
            Box::new(MatchedMarginalBridge::new(ForwardScheme::Diffusion, 3, 1).unwrap()),
            Box::new(MatchedMarginalBridge::new(ForwardScheme::XProcess, 3, 1).unwrap()),
            Box::new(MarkovDiffusionBridge::linear(4, 1).unwrap()),
            Box::new(DimensionDropBridge::new(3).unwrap()),
        ];
        for b in &bridges {
            let mut ends = Vec::with_capacity(n);
            let mut direct = Vec::with_capacity(n);
            for _ in 0..n {
                let x0: Vec<f64> = (0..b.dim(0)).map(|_| gmm_draw(sigma, &mut rng)).collect();
                let path = b.sample_path(&x0, None, &mut rng).unwrap();
                ends.push(path[b.steps()][0]);
                direct.push(b.sample_terminal(None, &mut rng)[0]);
            }
            let d = energy_distance(
                &SampleBatch::from_scalars(&ends),
                &SampleBatch::from_scalars(&direct),
            )
            .unwrap();
            assert!(d < 0.02, "{}: terminal energy distance {d}", b.label());
        }
    }

    #[test]
    fn markov_diffusion_terminal_is_standard_gaussian() {
        let b = MarkovDiffusionBridge::linear(4, 2).unwrap();
        let mut rng = derive_rng(307, &[]);
        let mut xs = Vec::new();
        for _ in 0..20_000 {
            // the mean factor at t=T is exactly zero, so x0 cannot leak through
            let path = b.sample_path(&[50.0, -50.0], None, &mut rng).unwrap();
            xs.push(path[4].clone());
        }
        for j in 0..2 {
            let col: Vec<f64> = xs.iter().map(|v| v[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 0.03, "mean {mean}");
            assert!((var(&col) - 1.0).abs() < 0.05, "var {}", var(&col));
        }
    }

    #[test]
    fn regeneration_identity_and_terminal() {
        let b = MatchedMarginalBridge::new(ForwardScheme::XProcess, 5, 1).unwrap();
        let mut rng = derive_rng(308, &[]);
        let x = vec![0.4];
        assert_eq!(b.regenerate(3, 3, &x, None, &mut rng).unwrap(), x);
        // s=0 to t=T: standard Gaussian regardless of input
        let mut ends = Vec::new();
        for _ in 0..20_000 {
            ends.push(b.regenerate(0, 5, &[123.0], None, &mut rng).unwrap()[0]);
        }
        let mean = ends.iter().sum::<f64>() / ends.len() as f64;
        assert!(mean.abs() < 0.03);
        assert!((var(&ends) - 1.0).abs() < 0.05);
    }

    #[test]
    fn regeneration_marginal_variance_identity() {
        // feeding true-marginal inputs through s=0 regeneration reproduces
        // the marginal variance at every t
        let steps = 5;
        let sigma = 0.25;
        let b = MatchedMarginalBridge::new(ForwardScheme::XProcess, steps, 1).unwrap();
        let mut rng = derive_rng(309, &[]);
        let var_x0 = 1.0 + sigma * sigma;
        for t in [1, 3, 5] {
            let mut xs = Vec::with_capacity(100_000);
            for _ in 0..100_000 {
                let x0 = gmm_draw(sigma, &mut rng);
                xs.push(b.regenerate(0, t, &[x0], None, &mut rng).unwrap()[0]);
            }
            let frac = t as f64 / steps as f64;
            let want = (1.0 - frac) * (1.0 - frac) * var_x0 + frac * frac;
            let got = var(&xs);
            assert!((got - want).abs() / want < 0.02, "t={t}: {got} vs {want}");
        }
    }

    #[test]
    fn unsupported_regeneration_is_an_error() {
        let mut rng = derive_rng(310, &[]);
        let b = MatchedMarginalBridge::new(ForwardScheme::XProcess, 5, 1).unwrap();
        assert!(matches!(
            b.regenerate(2, 4, &[0.0], None, &mut rng),
            Err(RmlError::UnsupportedRegeneration { from: 2, to: 4 })
        ));
        let p = PoolingBridge::new(8, 2).unwrap();
        assert!(!p.supports_regeneration(0, 1));
        let dd = DimensionDropBridge::new(3).unwrap();
        assert!(!dd.supports_regeneration(0, 2));
        // the Markov chain regenerates from anywhere
        let md = MarkovDiffusionBridge::linear(4, 1).unwrap();
        assert!(md.supports_regeneration(1, 3));
    }

    #[test]
    fn sample_pair_rejects_out_of_range_t() {
        let b = MatchedMarginalBridge::new(ForwardScheme::XProcess, 3, 1).unwrap();
        let mut rng = derive_rng(311, &[]);
        assert!(b.sample_pair(0, &[0.0], None, &mut rng).is_err());
        assert!(b.sample_pair(4, &[0.0], None, &mut rng).is_err());
    }

    #[test]
    fn bridge_config_roundtrip_builds() {
        let cfgs = vec![
            BridgeConfig::XProcess { steps: 3, dim: 2 },
            BridgeConfig::Pooling { side: 16, kernel: 4 },
            BridgeConfig::DimensionDrop { dim: 5 },
            BridgeConfig::MarkovDiffusion { steps: 4, dim: 1 },
        ];
        for cfg in cfgs {
            let json = serde_json::to_string(&cfg).unwrap();
            let back: BridgeConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(cfg, back);
            let bridge = back.build().unwrap();
            assert!(bridge.steps() >= 1);
        }
    }
}
