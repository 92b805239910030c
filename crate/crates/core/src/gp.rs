//! Gaussian-process estimate of the residual dynamics `d(x)`.
//!
//! One independent GP per modelled state dimension, all sharing the same
//! inputs and squared-exponential kernel, so a single Cholesky factor of
//! `K + σ_n²I` serves every output.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, Cholesky, LinalgError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("expected a {expected}-dimensional {what}, got {got}")]
    Dim { what: &'static str, expected: usize, got: usize },
    #[error("non-finite query point")]
    NonFinite,
    #[error("kernel factorization failed: {0}")]
    Factor(#[from] LinalgError),
    #[error("invalid GP hyperparameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpParams {
    pub signal_var: f64,
    pub length_scale: f64,
    pub noise_var: f64,
    pub capacity: usize,
    /// Stop refitting after this many episodes.
    pub freeze_after_episodes: usize,
    pub jitter: f64,
}

impl Default for GpParams {
    fn default() -> Self {
        Self {
            signal_var: 1.0,
            length_scale: 1.0,
            noise_var: 1e-4,
            capacity: 200,
            freeze_after_episodes: 20,
            jitter: 1e-9,
        }
    }
}

impl GpParams {
    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.signal_var > 0.0) {
            return Err(GpError::Parameter(format!("signal_var = {}", self.signal_var)));
        }
        if !(self.length_scale > 0.0) {
            return Err(GpError::Parameter(format!("length_scale = {}", self.length_scale)));
        }
        if !(self.noise_var >= 0.0) {
            return Err(GpError::Parameter(format!("noise_var = {}", self.noise_var)));
        }
        if self.capacity == 0 {
            return Err(GpError::Parameter("capacity = 0".into()));
        }
        Ok(())
    }
}

/// Posterior mean and variance over the full state; unmodelled dimensions
/// report zero for both.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GpPrediction {
    /// Euclidean norm of the per-dimension standard deviations.
    pub fn std_norm(&self) -> f64 {
        self.variance.iter().map(|v| v.max(0.0)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct GpResidualModel {
    signal_var: f64,
    length_scales: Vec<f64>,
    noise_var: f64,
    capacity: usize,
    jitter: f64,
    state_dim: usize,
    output_dims: Vec<usize>,
    inputs: VecDeque<Vec<f64>>,
    targets: VecDeque<Vec<f64>>,
    frozen: bool,
    factor: Option<Cholesky>,
    /// `(K + σ_n²I)⁻¹ y` for each modelled output.
    weights: Vec<Vec<f64>>,
}

impl GpResidualModel {
    pub fn new(params: &GpParams, state_dim: usize, output_dims: Vec<usize>) -> Result<Self, GpError> {
        params.validate()?;
        if let Some(&d) = output_dims.iter().find(|&&d| d >= state_dim) {
            return Err(GpError::Parameter(format!("output dimension {d} outside a {state_dim}-dimensional state")));
        }
        Ok(Self {
            signal_var: params.signal_var,
            length_scales: vec![params.length_scale; state_dim],
            noise_var: params.noise_var,
            capacity: params.capacity,
            jitter: params.jitter,
            state_dim,
            output_dims,
            inputs: VecDeque::new(),
            targets: VecDeque::new(),
            frozen: false,
            factor: None,
            weights: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn signal_var(&self) -> f64 {
        self.signal_var
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.output_dims
    }

    /// Training inputs, oldest first.
    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.inputs.iter().map(Vec::as_slice)
    }

    /// Stored targets (modelled dimensions only), aligned with [`inputs`](Self::inputs).
    pub fn targets(&self) -> impl Iterator<Item = &[f64]> {
        self.targets.iter().map(Vec::as_slice)
    }

    /// Replaces the dataset with previously exported inputs and targets.
    pub fn restore(&mut self, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, frozen: bool) -> Result<(), GpError> {
        if inputs.len() != targets.len() || inputs.len() > self.capacity {
            return Err(GpError::Parameter(format!(
                "{} inputs and {} targets for capacity {}",
                inputs.len(),
                targets.len(),
                self.capacity
            )));
        }
        for x in &inputs {
            if x.len() != self.state_dim {
                return Err(GpError::Dim { what: "input", expected: self.state_dim, got: x.len() });
            }
        }
        for t in &targets {
            if t.len() != self.output_dims.len() {
                return Err(GpError::Dim { what: "target", expected: self.output_dims.len(), got: t.len() });
            }
        }
        if inputs.iter().chain(&targets).flatten().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite);
        }
        self.inputs = inputs.into();
        self.targets = targets.into();
        self.frozen = frozen;
        self.refresh()
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.length_scales)
            .map(|((x, y), l)| ((x - y) / l).powi(2))
            .sum();
        self.signal_var * (-0.5 * r2).exp()
    }

    /// Appends `(state, residual)` pairs (residuals span the full state),
    /// evicting the oldest points beyond capacity, and refactors the kernel.
    /// Returns the number of pairs accepted; a frozen model accepts none.
    pub fn fit(&mut self, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<usize, GpError> {
        if self.frozen {
            log::debug!("GP frozen; ignoring {} new pairs", pairs.len());
            return Ok(0);
        }
        for (x, r) in pairs {
            if x.len() != self.state_dim {
                return Err(GpError::Dim { what: "input", expected: self.state_dim, got: x.len() });
            }
            if r.len() != self.state_dim {
                return Err(GpError::Dim { what: "residual", expected: self.state_dim, got: r.len() });
            }
        }
        for (x, r) in pairs {
            self.inputs.push_back(x.clone());
            self.targets.push_back(self.output_dims.iter().map(|&d| r[d]).collect());
            if self.inputs.len() > self.capacity {
                self.inputs.pop_front();
                self.targets.pop_front();
            }
        }
        self.refresh()?;
        Ok(pairs.len())
    }

    fn refresh(&mut self) -> Result<(), GpError> {
        let n = self.inputs.len();
        if n == 0 {
            self.factor = None;
            self.weights.clear();
            return Ok(());
        }
        let mut k = crate::linalg::Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.kernel(&self.inputs[i], &self.inputs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += self.noise_var;
        }
        let (factor, jitter) = Cholesky::factor_with_jitter(&k, self.jitter, 12)?;
        if jitter > 0.0 {
            log::debug!("GP kernel needed jitter {jitter:e}");
        }
        self.weights = (0..self.output_dims.len())
            .map(|o| {
                let y: Vec<f64> = self.targets.iter().map(|t| t[o]).collect();
                factor.solve(&y)
            })
            .collect();
        self.factor = Some(factor);
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<GpPrediction, GpError> {
        if x.len() != self.state_dim {
            return Err(GpError::Dim { what: "query", expected: self.state_dim, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite);
        }
        let mut mean = vec![0.0; self.state_dim];
        let mut variance = vec![0.0; self.state_dim];
        let Some(factor) = &self.factor else {
            for &d in &self.output_dims {
                variance[d] = self.signal_var;
            }
            return Ok(GpPrediction { mean, variance });
        };
        let kstar: Vec<f64> = self.inputs.iter().map(|xi| self.kernel(x, xi)).collect();
        let v = factor.solve_lower(&kstar);
        let var = (self.signal_var - dot(&v, &v)).max(0.0);
        for (o, &d) in self.output_dims.iter().enumerate() {
            mean[d] = dot(&kstar, &self.weights[o]);
            variance[d] = var;
        }
        Ok(GpPrediction { mean, variance })
    }

    /// Posterior mean only (cheaper than [`predict`](Self::predict)).
    pub fn mean(&self, x: &[f64]) -> Result<Vec<f64>, GpError> {
        if x.len() != self.state_dim {
            return Err(GpError::Dim { what: "query", expected: self.state_dim, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite);
        }
        let mut mean = vec![0.0; self.state_dim];
        if self.factor.is_some() {
            let kstar: Vec<f64> = self.inputs.iter().map(|xi| self.kernel(x, xi)).collect();
            for (o, &d) in self.output_dims.iter().enumerate() {
                mean[d] = dot(&kstar, &self.weights[o]);
            }
        }
        Ok(mean)
    }
}
