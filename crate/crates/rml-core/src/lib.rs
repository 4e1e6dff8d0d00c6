//! Reverse Markov learning laboratory.
//!
//! Multi-step generative models trained with the energy score: a forward
//! bridging process carries data to a known distribution, and one engression
//! generator per step learns the reverse conditional. The crate bundles the
//! generators and training loops together with the analytic oracles,
//! estimation studies and two-sample tests used to validate them, plus an
//! experiment runner (`rml` binary) that writes CSV/SVG/JSON artifacts.
//!
//! Layout:
//! - [`nn`]: minimal dense MLP with reverse-mode gradients and Adam.
//! - [`scoring`]: energy score/distance, engression and flow-matching losses.
//! - [`bridge`]: forward bridging processes (diffusion, interpolation,
//!   matched-marginal trio, dimension drop, average pooling).
//! - [`engine`]: generator stacks, training, reverse/alternating/ODE sampling.
//! - [`gmm`]: Gaussian-mixture ground truth and closed-form reverse conditionals.
//! - [`sem`]: linear SEM estimators and efficiency studies.
//! - [`twosample`]: energy-distance tests, plain and multi-step-enhanced.
//! - [`metrics`]: Wasserstein distances and rank histograms.
//! - [`spatial`]: synthetic spatial fields and the pooling study.
//! - [`config`] / [`experiments`]: the file-driven experiment surface.

pub mod bridge;
pub mod engine;
pub mod error;
pub mod gauss;
pub mod gmm;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod rng;
pub mod sample;
pub mod sem;
pub mod twosample;
pub mod scoring;

pub use error::{Result, RmlError};
pub use sample::SampleBatch;
