//! Global variational parameters and the generic stochastic update machinery.
//!
//! Everything here is model-agnostic: the global parameter is a dense
//! positive matrix updated by convex combination with a noisy estimate
//! (equivalently, by a step along a stochastic natural gradient), and the
//! learning rate follows a Robbins-Monro power schedule. All operations are
//! pure functions of their inputs and safe to copy between threads.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Global variational parameter: a strictly positive dense matrix (one row
/// per topic for LDA) plus a monotone update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams {
    values: Array2<f64>,
    version: u64,
}

impl GlobalParams {
    /// Builds a version-0 parameter, rejecting non-positive or non-finite
    /// entries.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("global parameters must be non-empty"));
        }
        if let Some(((row, col), &value)) =
            values.indexed_iter().find(|(_, v)| !(**v > 0.0) || !v.is_finite())
        {
            return Err(Error::domain(format!(
                "global parameter entry ({row}, {col}) = {value} is not strictly positive"
            )));
        }
        Ok(GlobalParams { values, version: 0 })
    }

    pub(crate) fn from_parts(values: Array2<f64>, version: u64) -> Self {
        GlobalParams { values, version }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// (rows, columns) of the parameter matrix.
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Maximum relative elementwise discrepancy against another parameter of
    /// the same shape. Used by equivalence tests between drivers.
    pub fn max_relative_diff(&self, other: &GlobalParams) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| {
                let scale = a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
                (a - b).abs() / scale
            })
            .fold(0.0, f64::max)
    }
}

/// Fixed model hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    /// Document-topic Dirichlet concentration.
    pub alpha: f64,
    /// Topic-word Dirichlet concentration.
    pub eta: f64,
    /// Number of topics K.
    pub num_topics: usize,
    /// Population size D used for gradient scaling.
    pub corpus_size: usize,
}

impl HyperParams {
    pub fn new(alpha: f64, eta: f64, num_topics: usize, corpus_size: usize) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::config(format!("alpha must be positive, got {alpha}")));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::config(format!("eta must be positive, got {eta}")));
        }
        if num_topics == 0 {
            return Err(Error::config("num_topics must be at least 1"));
        }
        if corpus_size == 0 {
            return Err(Error::config("corpus_size must be at least 1"));
        }
        Ok(HyperParams { alpha, eta, num_topics, corpus_size })
    }
}

/// Learning-rate schedule ρ_t = (τ0 + t)^(−κ).
///
/// κ in (0.5, 1] satisfies the Robbins-Monro conditions (Σρ = ∞, Σρ² < ∞);
/// κ = 0.5 is additionally accepted because it is a standard setting in
/// published online-LDA configurations, at the edge of the guarantee.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningSchedule {
    pub tau0: f64,
    pub kappa: f64,
}

impl LearningSchedule {
    pub fn new(tau0: f64, kappa: f64) -> Result<Self> {
        if !(tau0 >= 0.0) || !tau0.is_finite() {
            return Err(Error::config(format!("tau0 must be non-negative, got {tau0}")));
        }
        if !(0.5..=1.0).contains(&kappa) {
            return Err(Error::config(format!("kappa must lie in [0.5, 1], got {kappa}")));
        }
        Ok(LearningSchedule { tau0, kappa })
    }
}

/// A stochastic natural gradient tagged with the parameter version it was
/// computed against (the staleness carrier) and how many documents it
/// summarises.
#[derive(Debug, Clone)]
pub struct NaturalGradient {
    pub values: Array2<f64>,
    /// Version of the global parameter this gradient was evaluated at.
    pub base_version: u64,
    /// Number of documents in the mini-batch behind this gradient.
    pub batch_size: usize,
}

/// ρ_t = (τ0 + t)^(−κ). Strictly decreasing in t; at most 1 whenever
/// τ0 + t ≥ 1.
pub fn learning_rate(t: u64, sched: &LearningSchedule) -> f64 {
    (sched.tau0 + t as f64).powf(-sched.kappa)
}

/// One stochastic update: λ' = (1 − ρ)λ + ρ λ̂, version bumped by one.
pub fn svi_step(lambda: &GlobalParams, lambda_hat: &Array2<f64>, rho: f64) -> Result<GlobalParams> {
    if lambda.values.dim() != lambda_hat.dim() {
        return Err(Error::ShapeMismatch {
            expected: lambda.values.dim(),
            got: lambda_hat.dim(),
        });
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config(format!("step size rho must lie in [0, 1], got {rho}")));
    }
    let values = lambda.values.mapv(|v| v * (1.0 - rho)) + lambda_hat.mapv(|v| v * rho);
    Ok(GlobalParams::from_parts(values, lambda.version + 1))
}

/// Gradient form of the same update: λ' = λ + ρ G.
///
/// Fails with a [`Error::Divergence`] naming the offending index if any
/// resulting entry is non-positive; entries are never clamped, because a
/// clamped parameter would silently leave the Dirichlet domain.
pub fn apply_gradient(
    lambda: &GlobalParams,
    gradient: &NaturalGradient,
    rho: f64,
) -> Result<GlobalParams> {
    if lambda.values.dim() != gradient.values.dim() {
        return Err(Error::ShapeMismatch {
            expected: lambda.values.dim(),
            got: gradient.values.dim(),
        });
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config(format!("step size rho must lie in [0, 1], got {rho}")));
    }
    let values = &lambda.values + &gradient.values.mapv(|g| g * rho);
    if let Some(((row, col), &value)) = values.indexed_iter().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::Divergence { row, col, value, iteration: lambda.version });
    }
    Ok(GlobalParams::from_parts(values, lambda.version + 1))
}

/// Elementwise mean of M gradients. The result carries the smallest (most
/// stale) base version of its inputs and the total document count.
pub fn aggregate_gradients(msgs: &[NaturalGradient]) -> Result<NaturalGradient> {
    let first = msgs
        .first()
        .ok_or_else(|| Error::usage("aggregate_gradients needs at least one gradient"))?;
    let shape = first.values.dim();
    for msg in &msgs[1..] {
        if msg.values.dim() != shape {
            return Err(Error::ShapeMismatch { expected: shape, got: msg.values.dim() });
        }
    }
    let mut values = Array2::<f64>::zeros(shape);
    for msg in msgs {
        values += &msg.values;
    }
    let scale = 1.0 / msgs.len() as f64;
    values.mapv_inplace(|v| v * scale);
    Ok(NaturalGradient {
        values,
        base_version: msgs.iter().map(|m| m.base_version).min().expect("non-empty"),
        batch_size: msgs.iter().map(|m| m.batch_size).sum(),
    })
}
