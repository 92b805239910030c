//! Per-sample CBF/CLF constraint residuals and the QP backup controller.

mod qp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use qp::{QpSolution, SlackQp, FEASIBILITY_TOL};

use crate::envs::{BarrierSpec, EnvError, Environment};
use crate::gp::{GpError, GpResidualModel};
use crate::linalg::{dot, min_symmetric_eigenvalue, norm, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyError {
    #[error("invalid backup problem: {0}")]
    Problem(String),
    #[error("backup QP has no finite minimiser")]
    NoSolution,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// A scalar function of the state with a state gradient; the learned
/// Lyapunov function implements this.
pub trait ValueFunction {
    fn value(&self, x: &[f64]) -> f64;
    fn state_gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// `x̂' = f(x) + g(x)·u + d̂(x)` with `d̂` the GP posterior mean.
pub fn predict_next(
    env: &dyn Environment,
    gp: &GpResidualModel,
    x: &[f64],
    u: &[f64],
) -> Result<Vec<f64>, SafetyError> {
    env.spec().check_state(x)?;
    let mut next = env.nominal_step(x, u);
    for (v, d) in next.iter_mut().zip(gp.mean(x)?) {
        *v += d;
    }
    Ok(next)
}

/// `max(0, h(x) − h(x̂') − η·h(x))`
pub fn cbf_residual(barrier: &BarrierSpec, x: &[f64], predicted: &[f64]) -> f64 {
    let hx = barrier.value(x);
    (hx - barrier.value(predicted) - barrier.eta * hx).max(0.0)
}

/// The inequality form `h(x̂') − h(x) ≥ −η·h(x)`.
pub fn cbf_condition_holds(barrier: &BarrierSpec, x: &[f64], predicted: &[f64]) -> bool {
    let hx = barrier.value(x);
    barrier.value(predicted) - hx >= -barrier.eta * hx
}

/// `max(0, L(x̂') − L(x) + β·L(x))`
pub fn clf_residual(lyapunov: &dyn ValueFunction, x: &[f64], predicted: &[f64], beta: f64) -> f64 {
    let lx = lyapunov.value(x);
    (lyapunov.value(predicted) - lx + beta * lx).max(0.0)
}

/// The inequality form `L(x̂') − L(x) ≤ −β·L(x)`.
pub fn clf_condition_holds(lyapunov: &dyn ValueFunction, x: &[f64], predicted: &[f64], beta: f64) -> bool {
    let lx = lyapunov.value(x);
    lyapunov.value(predicted) - lx <= -beta * lx
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintResiduals {
    pub cbf: Vec<f64>,
    pub clf: Option<f64>,
    pub predicted: Vec<f64>,
}

/// Residuals of every barrier (and the Lyapunov decrease, when given) for
/// applying `u` at `x`.
pub fn constraint_residuals(
    env: &dyn Environment,
    gp: &GpResidualModel,
    lyapunov: Option<&dyn ValueFunction>,
    x: &[f64],
    u: &[f64],
    beta: f64,
) -> Result<ConstraintResiduals, SafetyError> {
    let predicted = predict_next(env, gp, x, u)?;
    let cbf = env.spec().barriers.iter().map(|b| cbf_residual(b, x, &predicted)).collect();
    let clf = lyapunov.map(|l| clf_residual(l, x, &predicted, beta));
    Ok(ConstraintResiduals { cbf, clf, predicted })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackupParams {
    /// Diagonal of `Q`; empty means identity.
    pub q_diag: Vec<f64>,
    /// Slack penalty. Constraint rows scale with `dt·|∇h|`, so this has to
    /// be large before moving the control beats paying for slack.
    pub slack_weight: f64,
    pub kappa: f64,
    /// Scale of the GP-uncertainty tightening of each barrier bound.
    pub k_sigma: f64,
}

impl Default for BackupParams {
    fn default() -> Self {
        Self { q_diag: Vec::new(), slack_weight: 1e4, kappa: 0.1, k_sigma: 1.0 }
    }
}

/// Weights of the backup QP for one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct BackupProblem {
    q: Matrix,
    slack_weights: Vec<f64>,
    kappa: f64,
    k_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackupSolution {
    pub u_modi: Vec<f64>,
    /// `u_nominal − u_modi`, clipped to the control box.
    pub u_actual: Vec<f64>,
    pub slack: Vec<f64>,
    pub objective: f64,
    pub active: Vec<usize>,
    /// The linearised QP that was solved.
    pub qp: SlackQp,
}

impl BackupProblem {
    pub fn new(q: Matrix, slack_weights: Vec<f64>, kappa: f64, k_sigma: f64) -> Result<Self, SafetyError> {
        if !q.is_symmetric(1e-12) {
            return Err(SafetyError::Problem("Q must be symmetric".into()));
        }
        let min_eig = min_symmetric_eigenvalue(&q);
        if min_eig < -1e-10 {
            return Err(SafetyError::Problem(format!("Q is not positive semidefinite (eigenvalue {min_eig:e})")));
        }
        if slack_weights.iter().any(|&k| !(k > 0.0)) {
            return Err(SafetyError::Problem("slack penalties must be positive".into()));
        }
        if !(kappa >= 0.0) || !(k_sigma >= 0.0) {
            return Err(SafetyError::Problem("kappa and k_sigma must be nonnegative".into()));
        }
        Ok(Self { q, slack_weights, kappa, k_sigma })
    }

    pub fn from_params(params: &BackupParams, control_dim: usize, barriers: usize) -> Result<Self, SafetyError> {
        let q = if params.q_diag.is_empty() {
            Matrix::identity(control_dim)
        } else if params.q_diag.len() == control_dim {
            let mut q = Matrix::zeros(control_dim, control_dim);
            for (i, v) in params.q_diag.iter().enumerate() {
                q[(i, i)] = *v;
            }
            q
        } else {
            return Err(SafetyError::Problem(format!(
                "q_diag has {} entries for a {control_dim}-dimensional control",
                params.q_diag.len()
            )));
        };
        Self::new(q, vec![params.slack_weight; barriers], params.kappa, params.k_sigma)
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Builds the QP in `(u_modi, ε)` for state `x`. Each barrier is
    /// linearised around `u_modi = 0`, i.e. around the predicted state under
    /// the nominal control, and its bound is tightened by
    /// `k_σ·‖∇h(x̂')‖·‖σ̂(x)‖`.
    pub fn linearize(
        &self,
        env: &dyn Environment,
        gp: &GpResidualModel,
        lyapunov: &dyn ValueFunction,
        x: &[f64],
        u_nominal: &[f64],
    ) -> Result<SlackQp, SafetyError> {
        let spec = env.spec();
        spec.check_state(x)?;
        if u_nominal.len() != spec.control_dim || self.q.rows() != spec.control_dim {
            return Err(SafetyError::Problem("control dimension mismatch".into()));
        }
        if self.slack_weights.len() != spec.barriers.len() {
            return Err(SafetyError::Problem(format!(
                "{} slack penalties for {} barriers",
                self.slack_weights.len(),
                spec.barriers.len()
            )));
        }
        let gain = env.control_gain(x);
        let prediction = gp.predict(x)?;
        let sigma = prediction.std_norm();
        let mut nominal_next = env.nominal_step(x, u_nominal);
        for (v, d) in nominal_next.iter_mut().zip(&prediction.mean) {
            *v += d;
        }
        let mut rows = Vec::with_capacity(spec.barriers.len());
        let mut bounds = Vec::with_capacity(spec.barriers.len());
        for b in &spec.barriers {
            let grad = b.gradient(&nominal_next);
            // d h / d u_modi = −∇hᵀ g, so the constraint reads aᵀu_modi − ε ≤ c
            let a: Vec<f64> = (0..spec.control_dim).map(|k| dot(&grad, &gain.column(k))).collect();
            let c = b.value(&nominal_next) - (1.0 - b.eta) * b.value(x) - self.k_sigma * norm(&grad) * sigma;
            rows.push(a);
            bounds.push(c);
        }
        let lgrad = lyapunov.state_gradient(x);
        let linear = (0..spec.control_dim).map(|k| self.kappa * dot(&lgrad, &gain.column(k))).collect();
        Ok(SlackQp { hessian: self.q.clone(), linear, rows, bounds, slack_weights: self.slack_weights.clone() })
    }

    /// Solves the backup QP at `x` and returns the control to apply.
    pub fn solve(
        &self,
        env: &dyn Environment,
        gp: &GpResidualModel,
        lyapunov: &dyn ValueFunction,
        x: &[f64],
        u_nominal: &[f64],
    ) -> Result<BackupSolution, SafetyError> {
        let qp = self.linearize(env, gp, lyapunov, x, u_nominal)?;
        let sol = qp.solve()?;
        let raw: Vec<f64> = u_nominal.iter().zip(&sol.u).map(|(n, m)| n - m).collect();
        Ok(BackupSolution {
            u_actual: env.spec().clip_control(&raw),
            u_modi: sol.u,
            slack: sol.slack,
            objective: sol.objective,
            active: sol.active,
            qp,
        })
    }
}
