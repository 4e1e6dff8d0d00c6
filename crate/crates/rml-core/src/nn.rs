//! Minimal dense feed-forward generator with reverse-mode gradients and Adam.
//!
//! This is all the differentiable machinery the desk-scale experiments need:
//! batched forward, a cached trace for the backward pass, parameter-shaped
//! gradients and a standard bias-corrected Adam update. Hidden layers use
//! ReLU, the output layer is linear. Weights start as He-scaled Gaussians,
//! biases at zero.
//!
//! Training is single-threaded and deterministic: the same seed and
//! configuration reproduce bitwise-identical parameter trajectories.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RmlError};
use crate::linalg::{axpy, dot, Matrix};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// How a generator input row is assembled: state `x_t`, covariates `y`,
/// optional scalar time embedding `t/T`, then the noise draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub state_dim: usize,
    pub covariate_dim: usize,
    pub time_dim: usize,
    pub noise_dim: usize,
}

impl InputLayout {
    pub fn plain(dim: usize) -> Self {
        InputLayout {
            state_dim: dim,
            covariate_dim: 0,
            time_dim: 0,
            noise_dim: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.state_dim + self.covariate_dim + self.time_dim + self.noise_dim
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Layer {
    /// Row-major, shape (out_dim, in_dim).
    w: Matrix,
    b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpGenerator {
    widths: Vec<usize>,
    activation: Activation,
    layout: InputLayout,
    layers: Vec<Layer>,
}

/// Cached activations from a forward pass; consumed by [`MlpGenerator::backward`].
pub struct ForwardTrace {
    /// `acts[l]` is the input of layer `l`; `acts[L]` is the network output.
    acts: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("trace has at least one activation")
    }
}

/// Parameter-shaped gradient (same block structure as the network).
#[derive(Debug, Clone)]
pub struct Gradients {
    layers: Vec<Layer>,
}

impl Gradients {
    fn zeros_like(net: &MlpGenerator) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    w: Matrix::zeros(l.w.rows(), l.w.cols()),
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, alpha: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            axpy(alpha, b.w.data(), a.w.data_mut());
            axpy(alpha, &b.b, &mut a.b);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        out
    }
}

impl MlpGenerator {
    /// A network with the given layer widths `[in, hidden.., out]`.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        assert!(widths.iter().all(|&w| w > 0), "widths must be positive");
        let layers = widths
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let mut w = Matrix::zeros(fan_out, fan_in);
                for v in w.data_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = std * z;
                }
                Layer {
                    w,
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        MlpGenerator {
            widths: widths.to_vec(),
            activation,
            layout: InputLayout::plain(widths[0]),
            layers,
        }
    }

    /// Generator network for a given input layout and hidden widths.
    pub fn generator(
        layout: InputLayout,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(layout.total());
        widths.extend_from_slice(hidden);
        widths.push(out_dim);
        let mut net = MlpGenerator::new(&widths, Activation::Relu, rng);
        net.layout = layout;
        net
    }

    pub fn layout(&self) -> InputLayout {
        self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(RmlError::DimMismatch {
                context: "mlp forward input",
                expected: self.input_dim(),
                got: batch.cols(),
            });
        }
        Ok(())
    }

    /// Batched forward pass; rows in, rows out.
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        let mut trace = self.forward_trace(batch)?;
        Ok(trace.acts.pop().expect("non-empty trace"))
    }

    /// Forward pass that keeps every layer input for the backward pass.
    pub fn forward_trace(&self, batch: &Matrix) -> Result<ForwardTrace> {
        self.check_input(batch)?;
        let nlayers = self.layers.len();
        let mut acts = Vec::with_capacity(nlayers + 1);
        acts.push(batch.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = acts.last().unwrap();
            let mut z = prev.mul_transposed(&layer.w);
            for i in 0..z.rows() {
                let row = z.row_mut(i);
                for (v, b) in row.iter_mut().zip(&layer.b) {
                    *v += b;
                }
            }
            let is_hidden = l + 1 < nlayers;
            if is_hidden && self.activation == Activation::Relu {
                for v in z.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(z);
        }
        Ok(ForwardTrace { acts })
    }

    /// Gradient of a scalar loss w.r.t. every parameter, given the adjoint
    /// `dL/d(output)` of a forward trace produced by this network.
    pub fn backward(&self, trace: &ForwardTrace, adjoint: &Matrix) -> Result<Gradients> {
        let out = trace.output();
        if adjoint.rows() != out.rows() || adjoint.cols() != out.cols() {
            return Err(RmlError::DimMismatch {
                context: "backward adjoint shape",
                expected: out.cols(),
                got: adjoint.cols(),
            });
        }
        let nlayers = self.layers.len();
        let mut grads = Gradients::zeros_like(self);
        let mut g = adjoint.clone();
        for l in (0..nlayers).rev() {
            let is_hidden = l + 1 < nlayers;
            if is_hidden && self.activation == Activation::Relu {
                // relu(z) > 0 iff z > 0, so the stored activation is the mask
                let act = &trace.acts[l + 1];
                for (gv, av) in g.data_mut().iter_mut().zip(act.data()) {
                    if *av <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let input = &trace.acts[l];
            let gl = &mut grads.layers[l];
            for i in 0..g.rows() {
                let grow = g.row(i);
                let irow = input.row(i);
                for (o, &gv) in grow.iter().enumerate() {
                    if gv != 0.0 {
                        axpy(gv, irow, gl.w.row_mut(o));
                    }
                    gl.b[o] += gv;
                }
            }
            if l > 0 {
                let w = &self.layers[l].w;
                let mut gnext = Matrix::zeros(g.rows(), w.cols());
                for i in 0..g.rows() {
                    let grow = g.row(i);
                    let orow = gnext.row_mut(i);
                    for (o, &gv) in grow.iter().enumerate() {
                        if gv != 0.0 {
                            axpy(gv, w.row(o), orow);
                        }
                    }
                }
                g = gnext;
            }
        }
        Ok(grads)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.data().len() + l.b.len())
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count());
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.w.data().len();
            l.w.data_mut().copy_from_slice(&params[off..off + wn]);
            off += wn;
            let bn = l.b.len();
            l.b.copy_from_slice(&params[off..off + bn]);
            off += bn;
        }
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.is_finite() && l.b.iter().all(|v| v.is_finite()))
    }

    /// Overwrites layer `l` with an explicit weight matrix and bias (tests
    /// and analytic constructions).
    pub fn set_layer(&mut self, l: usize, w: Matrix, b: Vec<f64>) {
        assert_eq!(w.rows(), self.widths[l + 1]);
        assert_eq!(w.cols(), self.widths[l]);
        assert_eq!(b.len(), self.widths[l + 1]);
        self.layers[l] = Layer { w, b };
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let net: MlpGenerator = serde_json::from_str(&json)?;
        if net.widths.len() < 2 || net.layers.len() + 1 != net.widths.len() {
            return Err(RmlError::config("checkpoint widths are inconsistent"));
        }
        for (l, layer) in net.layers.iter().enumerate() {
            if layer.w.rows() != net.widths[l + 1]
                || layer.w.cols() != net.widths[l]
                || layer.b.len() != net.widths[l + 1]
            {
                return Err(RmlError::config(format!(
                    "checkpoint layer {l} has inconsistent shape"
                )));
            }
        }
        Ok(net)
    }
}

/// Builds generator input rows `[state | covariates | time | noise]`
/// according to a layout; every present part must agree on the row count.
pub fn assemble_inputs(
    layout: InputLayout,
    state: Option<&Matrix>,
    covariates: Option<&Matrix>,
    time: Option<&[f64]>,
    noise: Option<&Matrix>,
) -> Result<Matrix> {
    let mut n = None;
    let mut check = |rows: usize, cols: usize, want: usize, what: &'static str| -> Result<()> {
        if cols != want {
            return Err(RmlError::DimMismatch {
                context: what,
                expected: want,
                got: cols,
            });
        }
        match n {
            None => n = Some(rows),
            Some(r) if r == rows => {}
            Some(r) => {
                return Err(RmlError::DimMismatch {
                    context: "input part row count",
                    expected: r,
                    got: rows,
                })
            }
        }
        Ok(())
    };
    match (layout.state_dim, state) {
        (0, _) => {}
        (d, Some(m)) => check(m.rows(), m.cols(), d, "state part")?,
        (d, None) => {
            return Err(RmlError::DimMismatch {
                context: "state part",
                expected: d,
                got: 0,
            })
        }
    }
    match (layout.covariate_dim, covariates) {
        (0, _) => {}
        (d, Some(m)) => check(m.rows(), m.cols(), d, "covariate part")?,
        (d, None) => {
            return Err(RmlError::DimMismatch {
                context: "covariate part",
                expected: d,
                got: 0,
            })
        }
    }
    match (layout.time_dim, time) {
        (0, _) => {}
        (1, Some(t)) => check(t.len(), 1, 1, "time part")?,
        (d, _) => {
            return Err(RmlError::DimMismatch {
                context: "time part",
                expected: d,
                got: 0,
            })
        }
    }
    match (layout.noise_dim, noise) {
        (0, _) => {}
        (d, Some(m)) => check(m.rows(), m.cols(), d, "noise part")?,
        (d, None) => {
            return Err(RmlError::DimMismatch {
                context: "noise part",
                expected: d,
                got: 0,
            })
        }
    }
    let rows = n.unwrap_or(0);
    let mut out = Matrix::zeros(rows, layout.total());
    for i in 0..rows {
        let row = out.row_mut(i);
        let mut off = 0;
        if layout.state_dim > 0 {
            row[off..off + layout.state_dim].copy_from_slice(state.unwrap().row(i));
            off += layout.state_dim;
        }
        if layout.covariate_dim > 0 {
            row[off..off + layout.covariate_dim].copy_from_slice(covariates.unwrap().row(i));
            off += layout.covariate_dim;
        }
        if layout.time_dim > 0 {
            row[off] = time.unwrap()[i];
            off += 1;
        }
        if layout.noise_dim > 0 {
            row[off..off + layout.noise_dim].copy_from_slice(noise.unwrap().row(i));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Gradients,
    v: Gradients,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &MlpGenerator, lr: f64) -> Self {
        AdamState {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Non-finite gradients are a hard error
/// naming the offending parameter block; parameters are checked to stay
/// finite after the update.
pub fn adam_step(net: &mut MlpGenerator, state: &mut AdamState, grads: &Gradients) -> Result<()> {
    assert_eq!(grads.layers.len(), net.layers.len(), "gradient shape mismatch");
    for (l, gl) in grads.layers.iter().enumerate() {
        if !gl.w.is_finite() {
            return Err(RmlError::NonFinite(format!("gradient of layer {l} weights")));
        }
        if !gl.b.iter().all(|v| v.is_finite()) {
            return Err(RmlError::NonFinite(format!("gradient of layer {l} biases")));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (l, gl) in grads.layers.iter().enumerate() {
        adam_update_block(
            net.layers[l].w.data_mut(),
            state.m.layers[l].w.data_mut(),
            state.v.layers[l].w.data_mut(),
            gl.w.data(),
            state.lr,
            state.beta1,
            state.beta2,
            state.eps,
            bc1,
            bc2,
        );
        adam_update_block(
            &mut net.layers[l].b,
            &mut state.m.layers[l].b,
            &mut state.v.layers[l].b,
            &gl.b,
            state.lr,
            state.beta1,
            state.beta2,
            state.eps,
            bc1,
            bc2,
        );
    }
    if !net.params_finite() {
        return Err(RmlError::NonFinite("parameters after adam step".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn adam_update_block(
    theta: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    g: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..theta.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        theta[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Scalar Adam on a 1-parameter objective; shares the update rule with the
/// network path so scalar checks exercise the same arithmetic.
pub struct ScalarAdam {
    m: f64,
    v: f64,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        ScalarAdam {
            m: 0.0,
            v: 0.0,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, theta: f64, grad: f64) -> f64 {
        self.step += 1;
        let t = self.step as f64;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad;
        let mhat = self.m / (1.0 - self.beta1.powf(t));
        let vhat = self.v / (1.0 - self.beta2.powf(t));
        theta - self.lr * mhat / (vhat.sqrt() + self.eps)
    }
}

/// Mean squared error `mean_i ||out_i - target_i||^2` and its adjoint.
pub fn squared_loss(out: &Matrix, target: &Matrix) -> (f64, Matrix) {
    assert_eq!(out.rows(), target.rows());
    assert_eq!(out.cols(), target.cols());
    let n = out.rows() as f64;
    let mut adj = Matrix::zeros(out.rows(), out.cols());
    let mut loss = 0.0;
    for i in 0..out.rows() {
        let (o, t) = (out.row(i), target.row(i));
        let arow = adj.row_mut(i);
        for j in 0..o.len() {
            let d = o[j] - t[j];
            loss += d * d;
            arow[j] = 2.0 * d / n;
        }
    }
    (loss / n, adj)
}

pub fn l2_distance_rows(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.rows(), b.rows());
    let mut acc = 0.0;
    for i in 0..a.rows() {
        acc += dot(a.row(i), a.row(i)) - 2.0 * dot(a.row(i), b.row(i)) + dot(b.row(i), b.row(i));
    }
    acc.max(0.0).sqrt()
}
