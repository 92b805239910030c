//! Exact solver for the small slack-relaxed QPs of the backup controller.
//!
//! ```text
//! minimise   ½ uᵀQu − qᵀu + Σᵢ kᵢ εᵢ²
//! subject to aᵢᵀu − εᵢ ≤ cᵢ        for every constraint i
//! ```
//!
//! Every subset of constraints is tried as the active set; each candidate is
//! the solution of one equality-constrained KKT system, and the feasible
//! candidate with the lowest objective is the global minimiser (the problem
//! is convex and the optimum is the equality-constrained minimiser of its own
//! active set). With at most a handful of constraints this is cheap and exact.

use crate::linalg::{dot, solve_dense, Matrix};

use super::SafetyError;

/// Feasibility tolerance used when screening candidates.
pub const FEASIBILITY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SlackQp {
    /// `Q`, symmetric positive semidefinite.
    pub hessian: Matrix,
    /// `q`; enters the objective as `−qᵀu`.
    pub linear: Vec<f64>,
    /// Constraint rows `aᵢ`.
    pub rows: Vec<Vec<f64>>,
    /// Right-hand sides `cᵢ`.
    pub bounds: Vec<f64>,
    /// Slack penalties `kᵢ > 0`.
    pub slack_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: Vec<f64>,
    pub slack: Vec<f64>,
    pub objective: f64,
    /// Indices of constraints held with equality.
    pub active: Vec<usize>,
    /// Multipliers for every constraint (zero for inactive ones).
    pub multipliers: Vec<f64>,
}

impl SlackQp {
    pub fn dims(&self) -> (usize, usize) {
        (self.linear.len(), self.rows.len())
    }

    pub fn objective(&self, u: &[f64], slack: &[f64]) -> f64 {
        let qu = self.hessian.matmul(&Matrix::column_vector(u));
        0.5 * dot(u, qu.as_slice()) - dot(&self.linear, u)
            + slack.iter().zip(&self.slack_weights).map(|(e, k)| k * e * e).sum::<f64>()
    }

    /// `aᵢᵀu − εᵢ − cᵢ`; nonpositive when constraint `i` holds.
    pub fn constraint_violation(&self, i: usize, u: &[f64], slack: &[f64]) -> f64 {
        dot(&self.rows[i], u) - slack[i] - self.bounds[i]
    }

    /// Slack that is optimal for a fixed `u`: `max(0, aᵢᵀu − cᵢ)`.
    pub fn best_slack(&self, u: &[f64]) -> Vec<f64> {
        self.rows.iter().zip(&self.bounds).map(|(a, c)| (dot(a, u) - c).max(0.0)).collect()
    }

    fn check(&self) -> Result<(), SafetyError> {
        let (m, k) = self.dims();
        if self.hessian.shape() != (m, m) {
            return Err(SafetyError::Problem(format!("Q is {:?}, expected {m}x{m}", self.hessian.shape())));
        }
        if self.bounds.len() != k || self.slack_weights.len() != k || self.rows.iter().any(|r| r.len() != m) {
            return Err(SafetyError::Problem("constraint arrays disagree in size".into()));
        }
        if self.slack_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(SafetyError::Problem("slack penalties must be positive".into()));
        }
        if k > 16 {
            return Err(SafetyError::Problem(format!("{k} constraints is too many for active-set enumeration")));
        }
        Ok(())
    }

    fn solve_active(&self, active: &[usize]) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (m, k) = self.dims();
        let n = m + k;
        let s = active.len();
        let mut kkt = Matrix::zeros(n + s, n + s);
        let mut rhs = vec![0.0; n + s];
        for i in 0..m {
            for j in 0..m {
                kkt[(i, j)] = self.hessian[(i, j)];
            }
            rhs[i] = self.linear[i];
        }
        for i in 0..k {
            kkt[(m + i, m + i)] = 2.0 * self.slack_weights[i];
        }
        for (r, &c) in active.iter().enumerate() {
            for j in 0..m {
                kkt[(n + r, j)] = self.rows[c][j];
                kkt[(j, n + r)] = self.rows[c][j];
            }
            kkt[(n + r, m + c)] = -1.0;
            kkt[(m + c, n + r)] = -1.0;
            rhs[n + r] = self.bounds[c];
        }
        let z = solve_dense(&kkt, &rhs, 1e-13).ok()?;
        let u = z[..m].to_vec();
        let slack = z[m..n].to_vec();
        let mut multipliers = vec![0.0; k];
        for (r, &c) in active.iter().enumerate() {
            multipliers[c] = z[n + r];
        }
        Some((u, slack, multipliers))
    }

    pub fn solve(&self) -> Result<QpSolution, SafetyError> {
        self.check()?;
        let (_, k) = self.dims();
        let mut best: Option<QpSolution> = None;
        for mask in 0u32..(1u32 << k) {
            let active: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            let Some((u, slack, multipliers)) = self.solve_active(&active) else { continue };
            if !u.iter().chain(&slack).all(|v| v.is_finite()) {
                continue;
            }
            let feasible = (0..k).all(|i| {
                let scale = 1.0 + self.bounds[i].abs() + dot(&self.rows[i], &u).abs() + slack[i].abs();
                self.constraint_violation(i, &u, &slack) <= FEASIBILITY_TOL * scale
            });
            if !feasible {
                continue;
            }
            let objective = self.objective(&u, &slack);
            if best.as_ref().is_none_or(|b| objective < b.objective) {
                best = Some(QpSolution { u, slack, objective, active, multipliers });
            }
        }
        best.ok_or(SafetyError::NoSolution)
    }
}
