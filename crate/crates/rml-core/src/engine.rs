//! Training and sampling for reverse Markov generator stacks.
//!
//! One engression generator per bridge step learns the reverse conditional
//! `p*_t(x_{t-1} | x_t, y)`; generation starts from the terminal
//! distribution and applies the learned steps backwards. The alternating
//! variant re-runs the forward process between reverse sweeps, and the
//! flow-matching pair (velocity-field regression plus Euler rollback of the
//! flow ODE) is included for the discretization comparison.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bridge::{Bridge, BridgeConfig};
use crate::error::{Result, RmlError};
use crate::gmm::{GmmReverseOracle, TwoPointFlowField};
use crate::linalg::Matrix;
use crate::nn::{self, adam_step, AdamState, InputLayout, MlpGenerator};
use crate::report::{fmt_f64, Table};
use crate::rng::Rng;
use crate::sample::SampleBatch;
use crate::scoring;

/// Anything that can run one reverse step on a batch of states. Implemented
/// by trained generator stacks and by analytic reverse-conditional oracles.
pub trait BatchReverseSampler {
    fn steps(&self) -> usize;

    /// Batch draw from the terminal distribution q*.
    fn terminal_batch(&self, y: Option<&[f64]>, n: usize, rng: &mut Rng) -> Matrix;

    /// Batch draw of `X_{t-1} | X_t` for each row of `x_t`.
    fn reverse_step_batch(
        &self,
        t: usize,
        x_t: &Matrix,
        y: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<Matrix>;
}

impl BatchReverseSampler for GmmReverseOracle {
    fn steps(&self) -> usize {
        self.steps()
    }

    fn terminal_batch(&self, _y: Option<&[f64]>, n: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(n, 1, (0..n).map(|_| rng.sample(StandardNormal)).collect())
    }

    fn reverse_step_batch(
        &self,
        t: usize,
        x_t: &Matrix,
        _y: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<Matrix> {
        let mut out = Matrix::zeros(x_t.rows(), 1);
        for i in 0..x_t.rows() {
            out[(i, 0)] = self.sample_reverse(t, x_t[(i, 0)], rng);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total gradient updates; each update trains the single step drawn for
    /// that iteration.
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Force shared/per-step parametrization; `None` shares exactly when all
    /// state dimensions agree.
    pub shared: Option<bool>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(RmlError::config("iterations and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(RmlError::config("learning rate must be positive"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 10_000,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 0,
            shared: None,
        }
    }
}

/// Per-iteration training record `(iteration, t, loss)`.
#[derive(Debug, Clone)]
pub struct LossTrace {
    pub entries: Vec<(usize, usize, f64)>,
}

impl LossTrace {
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["iteration", "t", "loss"]);
        for &(it, step, loss) in &self.entries {
            t.push(vec![it.into(), step.into(), loss.into()]);
        }
        t
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        self.to_table().write(path)
    }

    /// Mean loss over the first and last `window` iterations; a cheap
    /// no-divergence check.
    pub fn window_means(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.entries.len());
        let head: f64 = self.entries[..w].iter().map(|e| e.2).sum::<f64>() / w as f64;
        let tail: f64 =
            self.entries[self.entries.len() - w..].iter().map(|e| e.2).sum::<f64>() / w as f64;
        (head, tail)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StackManifest {
    bridge: BridgeConfig,
    covariate_dim: usize,
    hidden: Vec<usize>,
    shared: bool,
    noise_dims: Vec<usize>,
    steps: usize,
}

/// The trained object: a bridge plus one generator per step (or one shared
/// network with a time input when every step has the same dimension).
pub struct GeneratorStack {
    bridge_cfg: BridgeConfig,
    bridge: Box<dyn Bridge>,
    covariate_dim: usize,
    hidden: Vec<usize>,
    shared: bool,
    noise_dims: Vec<usize>,
    nets: Vec<MlpGenerator>,
    trained: bool,
}

impl GeneratorStack {
    pub fn new(
        bridge_cfg: BridgeConfig,
        covariate_dim: usize,
        hidden: &[usize],
        shared: Option<bool>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bridge = bridge_cfg.build()?;
        let steps = bridge.steps();
        let dims: Vec<usize> = (0..=steps).map(|t| bridge.dim(t)).collect();
        let all_equal = dims.iter().all(|&d| d == dims[0]);
        let shared = match shared {
            Some(true) if !all_equal => {
                return Err(RmlError::config(
                    "shared generator requires equal dimensions at every step",
                ));
            }
            Some(v) => v,
            None => all_equal,
        };
        // noise dimension defaults to the output dimension of the step
        let noise_dims: Vec<usize> = (1..=steps).map(|t| dims[t - 1]).collect();
        let nets = if shared {
            let layout = InputLayout {
                state_dim: dims[0],
                covariate_dim,
                time_dim: 1,
                noise_dim: dims[0],
            };
            vec![MlpGenerator::generator(layout, hidden, dims[0], rng)]
        } else {
            (1..=steps)
                .map(|t| {
                    let layout = InputLayout {
                        state_dim: dims[t],
                        covariate_dim,
                        time_dim: 0,
                        noise_dim: noise_dims[t - 1],
                    };
                    MlpGenerator::generator(layout, hidden, dims[t - 1], rng)
                })
                .collect()
        };
        Ok(GeneratorStack {
            bridge_cfg,
            bridge,
            covariate_dim,
            hidden: hidden.to_vec(),
            shared,
            noise_dims,
            nets,
            trained: false,
        })
    }

    pub fn bridge(&self) -> &dyn Bridge {
        self.bridge.as_ref()
    }

    pub fn bridge_config(&self) -> &BridgeConfig {
        &self.bridge_cfg
    }

    pub fn steps(&self) -> usize {
        self.bridge.steps()
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Marks the stack usable without training (analytic or test setups).
    pub fn assume_trained(&mut self) {
        self.trained = true;
    }

    pub fn net_for_step(&self, t: usize) -> &MlpGenerator {
        if self.shared {
            &self.nets[0]
        } else {
            &self.nets[t - 1]
        }
    }

    pub fn net_for_step_mut(&mut self, t: usize) -> &mut MlpGenerator {
        if self.shared {
            &mut self.nets[0]
        } else {
            &mut self.nets[t - 1]
        }
    }

    fn net_index(&self, t: usize) -> usize {
        if self.shared {
            0
        } else {
            t - 1
        }
    }

    fn time_input(&self, t: usize) -> f64 {
        t as f64 / self.steps() as f64
    }

    fn broadcast_cov(&self, y: Option<&[f64]>, n: usize) -> Result<Option<Matrix>> {
        match (self.covariate_dim, y) {
            (0, _) => Ok(None),
            (d, Some(v)) if v.len() == d => {
                let mut m = Matrix::zeros(n, d);
                for i in 0..n {
                    m.row_mut(i).copy_from_slice(v);
                }
                Ok(Some(m))
            }
            (d, got) => Err(RmlError::DimMismatch {
                context: "stack covariate",
                expected: d,
                got: got.map_or(0, |v| v.len()),
            }),
        }
    }

    fn gaussian_matrix(n: usize, d: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect())
    }

    /// Reverse Markov learning: per iteration, draw a step `t` uniformly,
    /// draw a batch of forward pairs, and descend the per-step energy loss
    /// of generator `g_t`.
    pub fn train(
        &mut self,
        data: &SampleBatch,
        cfg: &TrainConfig,
        rng: &mut Rng,
    ) -> Result<LossTrace> {
        cfg.validate()?;
        if data.dim() != self.bridge.dim(0) {
            return Err(RmlError::DimMismatch {
                context: "training data",
                expected: self.bridge.dim(0),
                got: data.dim(),
            });
        }
        if self.covariate_dim > 0 && data.covariate_dim() != self.covariate_dim {
            return Err(RmlError::DimMismatch {
                context: "training covariates",
                expected: self.covariate_dim,
                got: data.covariate_dim(),
            });
        }
        let steps = self.steps();
        let m = cfg.batch_size;
        let mut adams: Vec<AdamState> = self
            .nets
            .iter()
            .map(|net| AdamState::new(net, cfg.learning_rate))
            .collect();
        let mut entries = Vec::with_capacity(cfg.iterations);
        for it in 0..cfg.iterations {
            let t = rng.gen_range(1..=steps);
            let dim_prev = self.bridge.dim(t - 1);
            let dim_cur = self.bridge.dim(t);
            let mut prev = Matrix::zeros(m, dim_prev);
            let mut cur = Matrix::zeros(m, dim_cur);
            let mut cov = if self.covariate_dim > 0 {
                Some(Matrix::zeros(m, self.covariate_dim))
            } else {
                None
            };
            for i in 0..m {
                let idx = rng.gen_range(0..data.len());
                let y = data.covariate(idx);
                let (p, c) = self.bridge.sample_pair(t, data.row(idx), y, rng)?;
                prev.row_mut(i).copy_from_slice(&p);
                cur.row_mut(i).copy_from_slice(&c);
                if let (Some(cm), Some(yv)) = (cov.as_mut(), y) {
                    cm.row_mut(i).copy_from_slice(yv);
                }
            }
            let noise_dim = self.noise_dims[t - 1];
            let eps = Self::gaussian_matrix(m, noise_dim, rng);
            let eps2 = Self::gaussian_matrix(m, noise_dim, rng);
            let time_col = if self.shared {
                Some(vec![self.time_input(t); m])
            } else {
                None
            };
            let net_idx = self.net_index(t);
            let net = &self.nets[net_idx];
            let layout = net.layout();
            let inputs_u = nn::assemble_inputs(
                layout,
                Some(&cur),
                cov.as_ref(),
                time_col.as_deref(),
                Some(&eps),
            )?;
            let inputs_v = nn::assemble_inputs(
                layout,
                Some(&cur),
                cov.as_ref(),
                time_col.as_deref(),
                Some(&eps2),
            )?;
            let tr_u = net.forward_trace(&inputs_u)?;
            let tr_v = net.forward_trace(&inputs_v)?;
            let (loss, adj_u, adj_v) = scoring::energy_loss_parts(&prev, tr_u.output(), tr_v.output());
            if !loss.is_finite() {
                return Err(RmlError::Diverged { iteration: it, step: t });
            }
            let mut grads = net.backward(&tr_u, &adj_u)?;
            let gv = net.backward(&tr_v, &adj_v)?;
            grads.add_scaled(&gv, 1.0);
            adam_step(&mut self.nets[net_idx], &mut adams[net_idx], &grads)?;
            entries.push((it, t, loss));
        }
        self.trained = true;
        Ok(LossTrace { entries })
    }

    /// Checkpoint layout: `stack.json` manifest plus one generator file per
    /// step (`g_1.json`, ..) or `shared.json` for the shared network.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = StackManifest {
            bridge: self.bridge_cfg.clone(),
            covariate_dim: self.covariate_dim,
            hidden: self.hidden.clone(),
            shared: self.shared,
            noise_dims: self.noise_dims.clone(),
            steps: self.steps(),
        };
        std::fs::write(
            dir.join("stack.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        if self.shared {
            self.nets[0].save(&dir.join("shared.json"))?;
        } else {
            for (i, net) in self.nets.iter().enumerate() {
                net.save(&dir.join(format!("g_{}.json", i + 1)))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let manifest: StackManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("stack.json"))?)?;
        let bridge = manifest.bridge.build()?;
        if bridge.steps() != manifest.steps {
            return Err(RmlError::config("stack manifest step count mismatch"));
        }
        let nets = if manifest.shared {
            vec![MlpGenerator::load(&dir.join("shared.json"))?]
        } else {
            (1..=manifest.steps)
                .map(|t| MlpGenerator::load(&dir.join(format!("g_{t}.json"))))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(GeneratorStack {
            bridge_cfg: manifest.bridge,
            bridge,
            covariate_dim: manifest.covariate_dim,
            hidden: manifest.hidden,
            shared: manifest.shared,
            noise_dims: manifest.noise_dims,
            nets,
            trained: true,
        })
    }
}

impl BatchReverseSampler for GeneratorStack {
    fn steps(&self) -> usize {
        self.bridge.steps()
    }

    fn terminal_batch(&self, y: Option<&[f64]>, n: usize, rng: &mut Rng) -> Matrix {
        let mut m = Matrix::zeros(n, self.bridge.dim(self.steps()));
        for i in 0..n {
            m.row_mut(i)
                .copy_from_slice(&self.bridge.sample_terminal(y, rng));
        }
        m
    }

    fn reverse_step_batch(
        &self,
        t: usize,
        x_t: &Matrix,
        y: Option<&[f64]>,
        rng: &mut Rng,
    ) -> Result<Matrix> {
        if !self.trained {
            return Err(RmlError::config(
                "generator stack is untrained; call train() first",
            ));
        }
        let n = x_t.rows();
        let cov = self.broadcast_cov(y, n)?;
        let eps = Self::gaussian_matrix(n, self.noise_dims[t - 1], rng);
        let time_col = if self.shared {
            Some(vec![self.time_input(t); n])
        } else {
            None
        };
        let net = self.net_for_step(t);
        let inputs = nn::assemble_inputs(
            net.layout(),
            Some(x_t),
            cov.as_ref(),
            time_col.as_deref(),
            Some(&eps),
        )?;
        net.forward(&inputs)
    }
}

/// Reverse Markov generation: start at q*, apply the reverse steps
/// `t = T, ..., 1`, return the batch of final states.
pub fn reverse_markov_sample(
    sampler: &dyn BatchReverseSampler,
    y: Option<&[f64]>,
    n: usize,
    rng: &mut Rng,
) -> Result<SampleBatch> {
    let mut x = sampler.terminal_batch(y, n, rng);
    for t in (1..=sampler.steps()).rev() {
        x = sampler.reverse_step_batch(t, &x, y, rng)?;
    }
    Ok(SampleBatch::new(x))
}

/// Like [`reverse_markov_sample`] but keeps every intermediate batch;
/// index `t` of the result holds the generated marginal at step `t`.
pub fn reverse_markov_sample_trajectory(
    sampler: &dyn BatchReverseSampler,
    y: Option<&[f64]>,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<Matrix>> {
    let steps = sampler.steps();
    let mut states = vec![Matrix::zeros(0, 0); steps + 1];
    states[steps] = sampler.terminal_batch(y, n, rng);
    for t in (1..=steps).rev() {
        states[t - 1] = sampler.reverse_step_batch(t, &states[t], y, rng)?;
    }
    Ok(states)
}

/// The regeneration anchor `s(t)` used by alternating generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Schedule {
    /// `s(t) = t`: plain reverse Markov generation.
    Identity,
    /// `s(t) = 0`: full restart through the forward process each sweep.
    Zero,
    /// Explicit anchors indexed by `t` in `0..=T`; must satisfy `s(t) <= t`.
    Custom(Vec<usize>),
}

impl Schedule {
    pub fn anchor(&self, t: usize) -> usize {
        match self {
            Schedule::Identity => t,
            Schedule::Zero => 0,
            Schedule::Custom(v) => v[t],
        }
    }

    fn validate(&self, steps: usize) -> Result<()> {
        if let Schedule::Custom(v) = self {
            if v.len() != steps + 1 {
                return Err(RmlError::config(format!(
                    "schedule needs {} anchors, got {}",
                    steps + 1,
                    v.len()
                )));
            }
            for (t, &s) in v.iter().enumerate() {
                if s > t {
                    return Err(RmlError::config(format!("anchor s({t}) = {s} exceeds t")));
                }
            }
        }
        Ok(())
    }
}

/// Alternating reverse Markov generation: each sweep walks the reverse
/// chain from `t` down to the anchor `s(t-1)`, then uses the forward
/// process to regenerate the state at `t-1`. With the identity schedule it
/// reduces to plain reverse generation.
pub fn alternating_generate(
    sampler: &dyn BatchReverseSampler,
    bridge: &dyn Bridge,
    schedule: &Schedule,
    y: Option<&[f64]>,
    n: usize,
    rng: &mut Rng,
) -> Result<SampleBatch> {
    let steps = sampler.steps();
    schedule.validate(steps)?;
    for t in 1..=steps {
        let anchor = schedule.anchor(t - 1);
        if !bridge.supports_regeneration(anchor, t - 1) {
            return Err(RmlError::UnsupportedRegeneration {
                from: anchor,
                to: t - 1,
            });
        }
    }
    let mut x = sampler.terminal_batch(y, n, rng);
    for t in (1..=steps).rev() {
        let anchor = schedule.anchor(t - 1);
        let mut inner = x;
        let mut s = t;
        while s > anchor {
            inner = sampler.reverse_step_batch(s, &inner, y, rng)?;
            s -= 1;
        }
        if anchor == t - 1 {
            x = inner;
        } else {
            let mut regen = Matrix::zeros(n, bridge.dim(t - 1));
            for i in 0..n {
                let row = bridge.regenerate(anchor, t - 1, inner.row(i), y, rng)?;
                regen.row_mut(i).copy_from_slice(&row);
            }
            x = regen;
        }
    }
    Ok(SampleBatch::new(x))
}

/// A velocity field for flow-ODE generation.
pub trait FlowField {
    fn dim(&self) -> usize;
    fn velocity_batch(&self, x: &Matrix, y: Option<&[f64]>, s: f64) -> Result<Matrix>;
}

/// Trained flow-matching field: an MLP taking `[x | y | s]`.
pub struct NeuralFlowField<'a> {
    pub net: &'a MlpGenerator,
}

impl FlowField for NeuralFlowField<'_> {
    fn dim(&self) -> usize {
        self.net.output_dim()
    }

    fn velocity_batch(&self, x: &Matrix, y: Option<&[f64]>, s: f64) -> Result<Matrix> {
        let layout = self.net.layout();
        let cov = match (layout.covariate_dim, y) {
            (0, _) => None,
            (d, Some(v)) if v.len() == d => {
                let mut m = Matrix::zeros(x.rows(), d);
                for i in 0..x.rows() {
                    m.row_mut(i).copy_from_slice(v);
                }
                Some(m)
            }
            (d, got) => {
                return Err(RmlError::DimMismatch {
                    context: "flow field covariate",
                    expected: d,
                    got: got.map_or(0, |v| v.len()),
                })
            }
        };
        let time = vec![s; x.rows()];
        let inputs = nn::assemble_inputs(layout, Some(x), cov.as_ref(), Some(&time), None)?;
        self.net.forward(&inputs)
    }
}

impl FlowField for TwoPointFlowField {
    fn dim(&self) -> usize {
        1
    }

    fn velocity_batch(&self, x: &Matrix, _y: Option<&[f64]>, s: f64) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), 1);
        for i in 0..x.rows() {
            out[(i, 0)] = self.velocity(x[(i, 0)], s);
        }
        Ok(out)
    }
}

/// Constant velocity field (analytic checks).
pub struct ConstantField(pub Vec<f64>);

impl FlowField for ConstantField {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn velocity_batch(&self, x: &Matrix, _y: Option<&[f64]>, _s: f64) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), self.0.len());
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&self.0);
        }
        Ok(out)
    }
}

/// Euler rollback of the flow ODE from standard Gaussian terminal draws:
/// `X_{t-1} = X_t - (1/T) g(X_t, y, t/T)` for `t = T, ..., 1`.
pub fn flow_ode_generate(
    field: &dyn FlowField,
    y: Option<&[f64]>,
    t_steps: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<SampleBatch> {
    if t_steps < 1 {
        return Err(RmlError::config("flow ODE needs at least one step"));
    }
    let d = field.dim();
    let mut x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect());
    flow_ode_rollback(field, y, t_steps, &mut x)?;
    Ok(SampleBatch::new(x))
}

/// Rollback from caller-supplied terminal states (stratified or antithetic
/// starts for low-noise error measurements).
pub fn flow_ode_rollback(
    field: &dyn FlowField,
    y: Option<&[f64]>,
    t_steps: usize,
    x: &mut Matrix,
) -> Result<()> {
    if t_steps < 1 {
        return Err(RmlError::config("flow ODE needs at least one step"));
    }
    let step = 1.0 / t_steps as f64;
    for t in (1..=t_steps).rev() {
        let s = t as f64 / t_steps as f64;
        let v = field.velocity_batch(x, y, s)?;
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi -= step * vi;
        }
    }
    Ok(())
}

/// Flow-matching training: regress the field onto `eps - x0` along the
/// linear bridge with per-row uniform times.
pub fn fm_train(
    field: &mut MlpGenerator,
    data: &SampleBatch,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<LossTrace> {
    cfg.validate()?;
    let d = data.dim();
    let layout = field.layout();
    if layout.state_dim != d || layout.time_dim != 1 || layout.noise_dim != 0 {
        return Err(RmlError::config(
            "flow field layout must be [state | covariates | time]",
        ));
    }
    let m = cfg.batch_size;
    let mut adam = AdamState::new(field, cfg.learning_rate);
    let mut entries = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut rows = Vec::with_capacity(m);
        let mut cov = if layout.covariate_dim > 0 {
            Some(Matrix::zeros(m, layout.covariate_dim))
        } else {
            None
        };
        for i in 0..m {
            let idx = rng.gen_range(0..data.len());
            rows.push(data.row(idx).to_vec());
            if let (Some(cm), Some(yv)) = (cov.as_mut(), data.covariate(idx)) {
                cm.row_mut(i).copy_from_slice(yv);
            }
        }
        let x0 = SampleBatch::from_rows(&rows);
        let eps = GeneratorStack::gaussian_matrix(m, d, rng);
        let s: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        let (inputs, target) = scoring::fm_inputs_and_target(layout, &x0, &eps, &s, cov.as_ref())?;
        let trace = field.forward_trace(&inputs)?;
        let (loss, adj) = nn::squared_loss(trace.output(), &target);
        if !loss.is_finite() {
            return Err(RmlError::Diverged { iteration: it, step: 0 });
        }
        let grads = field.backward(&trace, &adj)?;
        adam_step(field, &mut adam, &grads)?;
        entries.push((it, 0, loss));
    }
    Ok(LossTrace { entries })
}

/// Writes a human-readable summary line for a finished training run.
pub fn trace_summary(trace: &LossTrace) -> String {
    let (head, tail) = trace.window_means(200);
    format!(
        "iterations={} first200={} last200={}",
        trace.entries.len(),
        fmt_f64(head),
        fmt_f64(tail)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{ForwardScheme, MatchedMarginalBridge};
    use crate::rng::derive_rng;
    use crate::scoring::energy_distance;

    /// Reverse sampler whose every step is the identity; the output law is
    /// exactly the terminal law.
    struct IdentitySampler {
        steps: usize,
        dim: usize,
    }

    impl BatchReverseSampler for IdentitySampler {
        fn steps(&self) -> usize {
            self.steps
        }

        fn terminal_batch(&self, _y: Option<&[f64]>, n: usize, rng: &mut Rng) -> Matrix {
            GeneratorStack::gaussian_matrix(n, self.dim, rng)
        }

        fn reverse_step_batch(
            &self,
            _t: usize,
            x_t: &Matrix,
            _y: Option<&[f64]>,
            _rng: &mut Rng,
        ) -> Result<Matrix> {
            Ok(x_t.clone())
        }
    }

    #[test]
    fn identity_sampler_reproduces_terminal_law() {
        let s = IdentitySampler { steps: 4, dim: 1 };
        let mut rng = derive_rng(500, &[]);
        let out = reverse_markov_sample(&s, None, 10_000, &mut rng).unwrap();
        let direct = SampleBatch::new(s.terminal_batch(None, 10_000, &mut rng));
        let d = energy_distance(&out, &direct).unwrap();
        assert!(d < 0.02, "energy distance {d}");
    }

    #[test]
    fn untrained_stack_refuses_to_generate() {
        let mut rng = derive_rng(501, &[]);
        let stack = GeneratorStack::new(
            BridgeConfig::XProcess { steps: 2, dim: 1 },
            0,
            &[8],
            None,
            &mut rng,
        )
        .unwrap();
        let err = reverse_markov_sample(&stack, None, 4, &mut rng).unwrap_err();
        assert!(err.to_string().contains("untrained"));
    }

    #[test]
    fn shared_flag_follows_dimensions() {
        let mut rng = derive_rng(502, &[]);
        let equal = GeneratorStack::new(
            BridgeConfig::XProcess { steps: 3, dim: 2 },
            0,
            &[8],
            None,
            &mut rng,
        )
        .unwrap();
        assert!(equal.is_shared());
        let unequal = GeneratorStack::new(
            BridgeConfig::DimensionDrop { dim: 3 },
            0,
            &[8],
            None,
            &mut rng,
        )
        .unwrap();
        assert!(!unequal.is_shared());
        assert!(GeneratorStack::new(
            BridgeConfig::DimensionDrop { dim: 3 },
            0,
            &[8],
            Some(true),
            &mut rng,
        )
        .is_err());
    }

    #[test]
    fn per_step_net_shapes_follow_bridge_dims() {
        let mut rng = derive_rng(503, &[]);
        let stack = GeneratorStack::new(
            BridgeConfig::DimensionDrop { dim: 3 },
            0,
            &[8],
            None,
            &mut rng,
        )
        .unwrap();
        // t=1: 2 <- g(3-dim... state dim(1)=2, noise = dim(0)=3)
        let g1 = stack.net_for_step(1);
        assert_eq!(g1.layout().state_dim, 2);
        assert_eq!(g1.layout().noise_dim, 3);
        assert_eq!(g1.output_dim(), 3);
        let g3 = stack.net_for_step(3);
        assert_eq!(g3.layout().state_dim, 1);
        assert_eq!(g3.output_dim(), 1);
    }

    #[test]
    fn training_point_mass_collapses_generator() {
        let mut rng = derive_rng(504, &[]);
        let c = 0.7;
        let data = SampleBatch::from_scalars(&[c; 256]);
        let mut stack = GeneratorStack::new(
            BridgeConfig::XProcess { steps: 1, dim: 1 },
            0,
            &[16, 16],
            None,
            &mut rng,
        )
        .unwrap();
        let cfg = TrainConfig {
            iterations: 2500,
            batch_size: 32,
            learning_rate: 5e-3,
            seed: 0,
            shared: None,
        };
        let trace = stack.train(&data, &cfg, &mut rng).unwrap();
        assert_eq!(trace.entries.len(), 2500);
        let out = reverse_markov_sample(&stack, None, 500, &mut rng).unwrap();
        let mean_err: f64 =
            out.iter_rows().map(|r| (r[0] - c).abs()).sum::<f64>() / out.len() as f64;
        assert!(mean_err < 0.05, "mean |g - c| = {mean_err}");
        // no divergence over the trace
        let (head, tail) = trace.window_means(200);
        assert!(tail <= head + 0.05, "head {head}, tail {tail}");
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed() {
        let data_rng = &mut derive_rng(505, &[]);
        let vals: Vec<f64> = (0..128)
            .map(|_| data_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let data = SampleBatch::from_scalars(&vals);
        let cfg = TrainConfig {
            iterations: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            shared: None,
        };
        let run = |salt: u64| {
            let mut rng = derive_rng(506, &[salt]);
            let mut stack = GeneratorStack::new(
                BridgeConfig::XProcess { steps: 2, dim: 1 },
                0,
                &[8, 8],
                None,
                &mut rng,
            )
            .unwrap();
            stack.train(&data, &cfg, &mut rng).unwrap();
            stack.net_for_step(1).params_flat()
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn t1_training_is_engression_loss_by_formula() {
        // replay the training rng stream and recompute Eq-style loss directly
        let mut data_rng = derive_rng(507, &[]);
        let vals: Vec<f64> = (0..64)
            .map(|_| data_rng.sample::<f64, _>(StandardNormal))
            .collect();
        let data = SampleBatch::from_scalars(&vals);
        let mut init_rng = derive_rng(508, &[]);
        let mut stack = GeneratorStack::new(
            BridgeConfig::XProcess { steps: 1, dim: 1 },
            0,
            &[8],
            None,
            &mut init_rng,
        )
        .unwrap();
        let net_before = stack.net_for_step(1).clone();
        let cfg = TrainConfig {
            iterations: 1,
            batch_size: 8,
            learning_rate: 1e-4,
            seed: 0,
            shared: None,
        };
        let mut train_rng = derive_rng(509, &[]);
        let trace = stack.train(&data, &cfg, &mut train_rng).unwrap();
        let recorded = trace.entries[0].2;

        // mirror the rng consumption of the single iteration
        let mut replay = derive_rng(509, &[]);
        let t = replay.gen_range(1..=1usize);
        assert_eq!(t, 1);
        let bridge = MatchedMarginalBridge::new(ForwardScheme::XProcess, 1, 1).unwrap();
        let m = 8;
        let mut prev = Matrix::zeros(m, 1);
        let mut cur = Matrix::zeros(m, 1);
        for i in 0..m {
            let idx = replay.gen_range(0..data.len());
            let (p, c) = bridge.sample_pair(1, data.row(idx), None, &mut replay).unwrap();
            prev.row_mut(i).copy_from_slice(&p);
            cur.row_mut(i).copy_from_slice(&c);
        }
        let eps = GeneratorStack::gaussian_matrix(m, 1, &mut replay);
        let eps2 = GeneratorStack::gaussian_matrix(m, 1, &mut replay);
        let time = vec![1.0; m];
        let layout = net_before.layout();
        let u = net_before
            .forward(&nn::assemble_inputs(layout, Some(&cur), None, Some(&time), Some(&eps)).unwrap())
            .unwrap();
        let v = net_before
            .forward(&nn::assemble_inputs(layout, Some(&cur), None, Some(&time), Some(&eps2)).unwrap())
            .unwrap();
        let (loss, _, _) = scoring::energy_loss_parts(&prev, &u, &v);
        assert_eq!(loss.to_bits(), recorded.to_bits());
    }

    #[test]
    fn alternating_identity_schedule_matches_plain_generation() {
        let oracle = GmmReverseOracle::new(ForwardScheme::XProcess, 0.25, 5).unwrap();
        let bridge = MatchedMarginalBridge::new(ForwardScheme::XProcess, 5, 1).unwrap();
        let mut rng = derive_rng(510, &[]);
        let n = 10_000;
        let plain = reverse_markov_sample(&oracle, None, n, &mut rng).unwrap();
        let alt =
            alternating_generate(&oracle, &bridge, &Schedule::Identity, None, n, &mut rng).unwrap();
        let d = energy_distance(&plain, &alt).unwrap();
        assert!(d < 0.02, "energy distance {d}");
    }

    #[test]
    fn alternating_zero_schedule_with_oracle_hits_target() {
        let sigma = 0.25;
        let oracle = GmmReverseOracle::new(ForwardScheme::XProcess, sigma, 5).unwrap();
        let bridge = MatchedMarginalBridge::new(ForwardScheme::XProcess, 5, 1).unwrap();
        let mut rng = derive_rng(511, &[]);
        let n = 10_000;
        let out = alternating_generate(&oracle, &bridge, &Schedule::Zero, None, n, &mut rng).unwrap();
        let spec = crate::gmm::GmmSpec::symmetric_1d(sigma).unwrap();
        let truth = spec.sample(n, &mut rng);
        let d = energy_distance(&out, &truth).unwrap();
        assert!(d < 0.02, "energy distance {d}");
    }

    #[test]
    fn alternating_rejects_unsupported_regeneration() {
        let mut rng = derive_rng(512, &[]);
        let mut stack = GeneratorStack::new(
            BridgeConfig::DimensionDrop { dim: 3 },
            0,
            &[4],
            None,
            &mut rng,
        )
        .unwrap();
        stack.assume_trained();
        let bridge = crate::bridge::DimensionDropBridge::new(3).unwrap();
        let err = alternating_generate(&stack, &bridge, &Schedule::Zero, None, 4, &mut rng)
            .unwrap_err();
        assert!(matches!(err, RmlError::UnsupportedRegeneration { .. }));
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::Custom(vec![0, 1, 2]).validate(2).is_ok());
        assert!(Schedule::Custom(vec![0, 2, 2]).validate(2).is_err());
        assert!(Schedule::Custom(vec![0, 1]).validate(2).is_err());
    }

    #[test]
    fn constant_field_shifts_by_exactly_c() {
        let field = ConstantField(vec![2.5, -1.0]);
        let mut rng = derive_rng(513, &[]);
        let n = 50;
        let mut x = GeneratorStack::gaussian_matrix(n, 2, &mut rng);
        let before = x.clone();
        flow_ode_rollback(&field, None, 5, &mut x).unwrap();
        for i in 0..n {
            assert!((x[(i, 0)] - (before[(i, 0)] - 2.5)).abs() < 1e-12);
            assert!((x[(i, 1)] - (before[(i, 1)] + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_ode_rejects_zero_steps() {
        let field = ConstantField(vec![0.0]);
        let mut rng = derive_rng(514, &[]);
        assert!(flow_ode_generate(&field, None, 0, 4, &mut rng).is_err());
    }

    #[test]
    fn stack_checkpoint_roundtrip() {
        let mut rng = derive_rng(515, &[]);
        let mut stack = GeneratorStack::new(
            BridgeConfig::XProcess { steps: 3, dim: 2 },
            0,
            &[8],
            None,
            &mut rng,
        )
        .unwrap();
        stack.assume_trained();
        let dir = std::env::temp_dir().join("rml_stack_ckpt_test");
        stack.save(&dir).unwrap();
        let back = GeneratorStack::load(&dir).unwrap();
        assert_eq!(back.steps(), 3);
        assert!(back.is_shared());
        assert_eq!(
            stack.net_for_step(1).params_flat(),
            back.net_for_step(1).params_flat()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn covariate_conditional_engression_learns_shift() {
        // X | Y=y ~ N(2y, 0.05^2); a T=1 stack with covariates should place
        // its conditional mass near 2y
        let mut rng = derive_rng(516, &[]);
        let n = 512;
        let mut rows = Vec::with_capacity(n);
        let mut covs = Vec::with_capacity(n);
        for _ in 0..n {
            let y: f64 = rng.gen_range(-1.0..1.0);
            let x = 2.0 * y + 0.05 * rng.sample::<f64, _>(StandardNormal);
            rows.push(vec![x]);
            covs.push(vec![y]);
        }
        let data =
            SampleBatch::with_covariates(Matrix::from_rows(&rows), Matrix::from_rows(&covs));
        let mut stack = GeneratorStack::new(
            BridgeConfig::XProcess { steps: 1, dim: 1 },
            1,
            &[16, 16],
            None,
            &mut rng,
        )
        .unwrap();
        let cfg = TrainConfig {
            iterations: 3000,
            batch_size: 32,
            learning_rate: 5e-3,
            seed: 0,
            shared: None,
        };
        stack.train(&data, &cfg, &mut rng).unwrap();
        for &y in &[-0.5, 0.0, 0.5] {
            let out = reverse_markov_sample(&stack, Some(&[y]), 400, &mut rng).unwrap();
            let mean: f64 = out.iter_rows().map(|r| r[0]).sum::<f64>() / out.len() as f64;
            assert!(
                (mean - 2.0 * y).abs() < 0.15,
                "y={y}: generated mean {mean}"
            );
        }
    }
}
