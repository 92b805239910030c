//! Tape builders for the learner's objectives. Every function here only
//! records operations; callers decide which leaves are trainable.

use crate::diff::{Graph, Var};
use crate::envs::Environment;
use crate::linalg::Matrix;
use crate::mlp::Mlp;

use super::Ablation;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Affine map between `[−1, 1]^m` and the control box.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBox {
    pub mid: Vec<f64>,
    pub half: Vec<f64>,
}

impl ControlBox {
    pub fn new(low: &[f64], high: &[f64]) -> Self {
        Self {
            mid: low.iter().zip(high).map(|(l, h)| 0.5 * (l + h)).collect(),
            half: low.iter().zip(high).map(|(l, h)| 0.5 * (h - l)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mid.len()
    }

    pub fn to_box(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.mid).zip(&self.half).map(|((y, m), h)| m + h * y).collect()
    }

    pub fn from_box(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.mid).zip(&self.half).map(|((u, m), h)| (u - m) / h).collect()
    }

    /// `Σ ln(half-width)`, the log-determinant of the box rescaling.
    pub fn log_scale(&self) -> f64 {
        self.half.iter().map(|h| h.ln()).sum()
    }
}

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Reparameterised draw from the squashed Gaussian policy.
#[derive(Debug, Clone, Copy)]
pub struct PolicySample {
    /// Control in box units, `B×m`.
    pub control: Var,
    /// `tanh` output in `[−1, 1]`, `B×m`; this is what critics consume.
    pub squashed: Var,
    /// Log-density of `control`, `B×1`.
    pub log_prob: Var,
}

/// `u = box(tanh(μ + σ⊙ξ))` with its log-density. `noise` is `B×m`.
pub fn policy_sample(
    g: &mut Graph,
    policy: &Mlp,
    params: &[Var],
    obs: Var,
    noise: Var,
    cbox: &ControlBox,
) -> PolicySample {
    let m = cbox.dim();
    let out = policy.forward(g, params, obs);
    let mu = g.cols(out, 0, m);
    let log_std = g.cols(out, m, m);
    let log_std = g.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
    let std = g.exp(log_std);
    let spread = g.mul(std, noise);
    let pre = g.add(mu, spread);
    let squashed = g.tanh(pre);
    let control = g.col_affine(squashed, &cbox.half, &cbox.mid);

    // log(1 − tanh²a) = 2(ln 2 − a − softplus(−2a))
    let neg2 = g.scale(pre, -2.0);
    let sp = g.softplus(neg2);
    let t = g.add(pre, sp);
    let t = g.shift(t, -std::f64::consts::LN_2);
    let log_jac = g.scale(t, -2.0);
    let xi = g.value(noise).map(|v| -0.5 * v * v - HALF_LN_2PI);
    let gauss = g.constant(xi);
    let per_dim = g.sub(gauss, log_std);
    let per_dim = g.sub(per_dim, log_jac);
    let lp = g.sum_cols(per_dim);
    let log_prob = g.shift(lp, -cbox.log_scale());
    PolicySample { control, squashed, log_prob }
}

/// `box(tanh(μ))`
pub fn policy_mean_action(g: &mut Graph, policy: &Mlp, params: &[Var], obs: Var, cbox: &ControlBox) -> Var {
    let out = policy.forward(g, params, obs);
    let mu = g.cols(out, 0, cbox.dim());
    let y = g.tanh(mu);
    g.col_affine(y, &cbox.half, &cbox.mid)
}

pub fn critic_value(g: &mut Graph, critic: &Mlp, params: &[Var], obs: Var, squashed: Var) -> Var {
    let input = g.concat(&[obs, squashed]);
    critic.forward(g, params, input)
}

/// `mean((pred − target)²)` with `target` outside the tape.
pub fn mse_to_target(g: &mut Graph, pred: Var, target: &[f64]) -> Var {
    let t = g.constant(Matrix::column_vector(target));
    let d = g.sub(pred, t);
    let sq = g.square(d);
    g.mean(sq)
}

/// Soft Bellman targets `r + γ(min_j Q_targ,j(x', ũ') − α·logπ(ũ'|x'))`.
pub fn q_targets(min_target_q: &[f64], log_prob_next: &[f64], rewards: &[f64], gamma: f64, alpha: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(min_target_q)
        .zip(log_prob_next)
        .map(|((r, q), lp)| r + gamma * (q - alpha * lp))
        .collect()
}

/// `c + γ_c·L_targ(x')`
pub fn lyapunov_targets(costs: &[f64], target_next: &[f64], gamma_c: f64) -> Vec<f64> {
    costs.iter().zip(target_next).map(|(c, l)| c + gamma_c * l).collect()
}

/// `J_α = −α·mean(logπ + ℋ)` as a function of the trainable `log_alpha`
/// (1×1); `log_prob` values are treated as data.
pub fn alpha_loss(g: &mut Graph, log_alpha: Var, log_prob: &[f64], entropy_target: f64) -> Var {
    let mean = log_prob.iter().sum::<f64>() / log_prob.len() as f64;
    let alpha = g.exp(log_alpha);
    g.scale(alpha, -(mean + entropy_target))
}

/// Frozen networks and multipliers entering the augmented Lagrangian.
#[derive(Debug, Clone, Copy)]
pub struct LagrangianInputs<'a> {
    pub critics: [&'a Mlp; 2],
    pub lyapunov: &'a Mlp,
    pub alpha: f64,
    pub beta: f64,
    pub lambdas: &'a [f64],
    pub rho_lambda: &'a [f64],
    pub zeta: f64,
    pub rho_zeta: f64,
    pub ablation: Ablation,
}

/// Per-sample data the augmented Lagrangian needs besides the policy.
#[derive(Debug, Clone)]
pub struct LagrangianBatch {
    /// `B×n` states.
    pub states: Matrix,
    /// `B×n` rows of `f(x) + d̂(x)`.
    pub drift: Matrix,
    /// `B×(n·m)` rows holding `g(x)` flattened row-major.
    pub gains: Matrix,
    /// `B×m` standard-normal draws.
    pub noise: Matrix,
}

#[derive(Debug, Clone)]
pub struct LagrangianTape {
    pub value: Var,
    /// Policy sample used for both the value and the residuals.
    pub sample: PolicySample,
    pub neg_value: Var,
    pub cbf_means: Vec<Var>,
    pub clf_mean: Option<Var>,
}

/// `−V + Σ_i [λ_i R̄_i + ρ_i/2·R̄_i²] + ζ S̄ + ρ_ζ/2·S̄²`, differentiable in
/// whatever `policy_params` are trainable.
pub fn augmented_lagrangian(
    g: &mut Graph,
    env: &dyn Environment,
    policy: &Mlp,
    policy_params: &[Var],
    cbox: &ControlBox,
    inputs: &LagrangianInputs<'_>,
    batch: &LagrangianBatch,
) -> LagrangianTape {
    let n = batch.states.cols();
    let x = g.constant(batch.states.clone());
    let obs = env.observe_tape(g, x);
    let noise = g.constant(batch.noise.clone());
    let sample = policy_sample(g, policy, policy_params, obs, noise, cbox);

    let q_params: Vec<Vec<Var>> = inputs.critics.iter().map(|c| c.bind(g, false)).collect();
    let q1 = critic_value(g, inputs.critics[0], &q_params[0], obs, sample.squashed);
    let q2 = critic_value(g, inputs.critics[1], &q_params[1], obs, sample.squashed);
    let q = g.min(q1, q2);
    let ent = g.scale(sample.log_prob, inputs.alpha);
    let neg_v = g.sub(ent, q);
    let neg_value = g.mean(neg_v);
    let mut total = neg_value;

    let mut cbf_means = Vec::new();
    let mut clf_mean = None;
    if inputs.ablation != Ablation::Sac {
        let drift = g.constant(batch.drift.clone());
        let moved = g.row_linear(sample.control, batch.gains.clone(), n);
        let predicted = g.add(drift, moved);
        for (i, b) in env.spec().barriers.iter().enumerate() {
            let h_now = b.value_tape(g, x);
            let h_next = b.value_tape(g, predicted);
            let d = g.sub(h_now, h_next);
            let lhs = g.scale(h_now, b.eta);
            let d = g.sub(d, lhs);
            let r = g.relu(d);
            let mean = g.mean(r);
            cbf_means.push(mean);
            let sq = g.square(mean);
            let lin = g.scale(mean, inputs.lambdas[i]);
            let quad = g.scale(sq, 0.5 * inputs.rho_lambda[i]);
            total = g.add(total, lin);
            total = g.add(total, quad);
        }
        if inputs.ablation == Ablation::Blac {
            let lp = inputs.lyapunov.bind(g, false);
            let l_now = inputs.lyapunov.forward(g, &lp, obs);
            let obs_next = env.observe_tape(g, predicted);
            let l_next = inputs.lyapunov.forward(g, &lp, obs_next);
            let d = g.sub(l_next, l_now);
            let decay = g.scale(l_now, inputs.beta);
            let d = g.add(d, decay);
            let s = g.relu(d);
            let mean = g.mean(s);
            clf_mean = Some(mean);
            let sq = g.square(mean);
            let lin = g.scale(mean, inputs.zeta);
            let quad = g.scale(sq, 0.5 * inputs.rho_zeta);
            total = g.add(total, lin);
            total = g.add(total, quad);
        }
    }
    LagrangianTape { value: total, sample, neg_value, cbf_means, clf_mean }
}
