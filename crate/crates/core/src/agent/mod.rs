//! The constrained soft actor-critic learner.

pub mod losses;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::Transition;
use crate::diff::Graph;
use crate::envs::{EnvError, Environment};
use crate::gp::{GpError, GpResidualModel};
use crate::linalg::Matrix;
use crate::mlp::{Activation, Mlp, MlpError};
use crate::optim::Adam;
use crate::safety::ValueFunction;

pub use losses::{ControlBox, LagrangianBatch, LagrangianInputs, PolicySample, LOG_STD_MAX, LOG_STD_MIN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error("invalid learner parameter: {0}")]
    Parameter(String),
    #[error("negative residual mean {0} passed to the dual update")]
    NegativeResidual(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Which constraint terms the learner optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// CBF and CLF terms, backup controller enabled.
    Blac,
    /// CBF terms only.
    Bac,
    /// Plain soft actor-critic, no constraints and no backup controller.
    Sac,
}

impl Ablation {
    pub fn uses_barriers(self) -> bool {
        self != Ablation::Sac
    }

    pub fn uses_clf(self) -> bool {
        self == Ablation::Blac
    }

    /// The Lyapunov net feeds the CLF term and the backup controller.
    pub fn trains_lyapunov(self) -> bool {
        self != Ablation::Sac
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Blac => "blac",
            Ablation::Bac => "bac",
            Ablation::Sac => "sac",
        })
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blac" => Ok(Ablation::Blac),
            "bac" => Ok(Ablation::Bac),
            "sac" => Ok(Ablation::Sac),
            other => Err(format!("unknown ablation {other:?} (expected blac, bac or sac)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentParams {
    pub hidden: Vec<usize>,
    /// Critics and Lyapunov net.
    pub lr_critic: f64,
    /// Policy and temperature.
    pub lr_policy: f64,
    pub lr_dual: f64,
    pub gamma: f64,
    /// Cost discount of the Lyapunov net; short horizons keep its scale, and
    /// with it the CLF residual at non-zero cost, small.
    pub gamma_c: f64,
    pub tau: f64,
    pub beta: f64,
    pub alpha_init: f64,
    /// Defaults to `−m` when absent.
    pub entropy_target: Option<f64>,
    pub lambda_init: f64,
    pub zeta_init: f64,
    pub rho_init: f64,
    pub rho_growth: f64,
    pub rho_max: f64,
    /// Initial output bias of the Lyapunov net, keeping its output rectifier
    /// active at the start of training.
    pub lyapunov_bias: f64,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lr_critic: 3e-4,
            lr_policy: 3e-4,
            lr_dual: 1e-3,
            gamma: 0.99,
            gamma_c: 0.9,
            tau: 0.005,
            beta: 0.1,
            alpha_init: 0.2,
            entropy_target: None,
            lambda_init: 0.0,
            zeta_init: 0.0,
            rho_init: 1.0,
            rho_growth: 1.0005,
            rho_max: 1e3,
            lyapunov_bias: 1.0,
        }
    }
}

impl AgentParams {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Parameter(m.to_string()));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be nonempty and positive");
        }
        for (name, v) in [("lr_critic", self.lr_critic), ("lr_policy", self.lr_policy), ("lr_dual", self.lr_dual)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..1.0).contains(&self.gamma_c) {
            return bad("discount factors must lie in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if !(self.alpha_init > 0.0) || !self.alpha_init.is_finite() {
            return bad("alpha_init must be positive");
        }
        if !(self.lambda_init >= 0.0) || !(self.zeta_init >= 0.0) {
            return bad("initial multipliers must be nonnegative");
        }
        if !(self.rho_init > 0.0) || !(self.rho_growth >= 1.0) || !(self.rho_max >= self.rho_init) {
            return bad("need rho_init > 0, rho_growth >= 1 and rho_max >= rho_init");
        }
        if !self.rho_max.is_finite() {
            return bad("rho_max must be finite");
        }
        Ok(())
    }
}

/// Multipliers and penalty coefficients of the augmented Lagrangian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambdas: Vec<f64>,
    pub zeta: f64,
    pub rho_lambda: Vec<f64>,
    pub rho_zeta: f64,
    pub growth: f64,
    pub rho_max: f64,
    pub step_size: f64,
}

impl LagrangianState {
    pub fn new(barriers: usize, params: &AgentParams) -> Self {
        Self {
            lambdas: vec![params.lambda_init; barriers],
            zeta: params.zeta_init,
            rho_lambda: vec![params.rho_init; barriers],
            rho_zeta: params.rho_init,
            growth: params.rho_growth,
            rho_max: params.rho_max,
            step_size: params.lr_dual,
        }
    }

    /// Ascent on the multipliers followed by penalty growth. `clf_mean` is
    /// `None` when the CLF term is absent, in which case `ζ` and `ρ_ζ` are
    /// left alone.
    pub fn dual_update(&mut self, cbf_means: &[f64], clf_mean: Option<f64>) -> Result<(), AgentError> {
        if cbf_means.len() != self.lambdas.len() {
            return Err(AgentError::Parameter(format!(
                "{} residual means for {} multipliers",
                cbf_means.len(),
                self.lambdas.len()
            )));
        }
        for &r in cbf_means.iter().chain(clf_mean.iter()) {
            if !(r >= 0.0) {
                return Err(AgentError::NegativeResidual(r));
            }
        }
        for ((l, rho), r) in self.lambdas.iter_mut().zip(&mut self.rho_lambda).zip(cbf_means) {
            *l += self.step_size * r;
            *rho = (self.growth * *rho).min(self.rho_max);
        }
        if let Some(s) = clf_mean {
            self.zeta += self.step_size * s;
            self.rho_zeta = (self.growth * self.rho_zeta).min(self.rho_max);
        }
        Ok(())
    }
}

/// Entropy temperature `α = exp(log α)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTemp {
    log_alpha: Matrix,
    pub target: f64,
    opt: Adam,
}

impl EntropyTemp {
    pub fn new(alpha: f64, target: f64, lr: f64) -> Self {
        Self { log_alpha: Matrix::scalar(alpha.ln()), target, opt: Adam::new(lr) }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.item().exp()
    }

    pub fn log_alpha(&self) -> f64 {
        self.log_alpha.item()
    }

    pub fn set_log_alpha(&mut self, v: f64) {
        self.log_alpha = Matrix::scalar(v);
    }

    /// Returns `(J_α, dJ_α/d log α)` and takes one descent step.
    pub fn update(&mut self, log_prob: &[f64]) -> (f64, f64) {
        let (loss, grads) = crate::diff::value_and_grad(std::slice::from_ref(&self.log_alpha), |g, p| {
            losses::alpha_loss(g, p[0], log_prob, self.target)
        });
        let grad = grads[0].item();
        self.opt.step(std::slice::from_mut(&mut self.log_alpha), &grads);
        (loss, grad)
    }
}

/// `target ← (1 − τ)·target + τ·online`
pub fn polyak_update(online: &Mlp, target: &mut Mlp, tau: f64) -> Result<(), AgentError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(AgentError::Parameter(format!("tau {tau} outside (0, 1]")));
    }
    Ok(target.polyak_from(online, tau)?)
}

/// Columns of a sampled minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Matrix,
    pub controls: Matrix,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub next_states: Matrix,
}

impl Batch {
    pub fn from_transitions(items: &[&Transition]) -> Result<Self, AgentError> {
        let first = items.first().ok_or(AgentError::EmptyBatch)?;
        let rows = |f: &dyn Fn(&Transition) -> &[f64], w: usize| {
            let mut data = Vec::with_capacity(items.len() * w);
            for t in items {
                data.extend_from_slice(f(t));
            }
            Matrix::from_vec(items.len(), w, data).map_err(|e| AgentError::Parameter(e.to_string()))
        };
        Ok(Self {
            states: rows(&|t| &t.state, first.state.len())?,
            controls: rows(&|t| &t.control, first.control.len())?,
            rewards: items.iter().map(|t| t.reward).collect(),
            costs: items.iter().map(|t| t.cost).collect(),
            next_states: rows(&|t| &t.next_state, first.next_state.len())?,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Diagnostics of one learner update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub q_loss: [f64; 2],
    pub lyapunov_loss: Option<f64>,
    pub lagrangian: f64,
    pub neg_value: f64,
    pub cbf_means: Vec<f64>,
    pub clf_mean: Option<f64>,
    pub alpha_loss: f64,
    pub alpha: f64,
}

/// The learned Lyapunov net evaluated on raw states.
#[derive(Debug, Clone, Copy)]
pub struct LyapunovView<'a> {
    pub net: &'a Mlp,
    pub env: &'a dyn Environment,
}

impl ValueFunction for LyapunovView<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let obs = self.env.observe(x);
        self.net.apply(&obs).map(|v| v[0]).unwrap_or(f64::NAN)
    }

    fn state_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let xs = g.param(Matrix::row_vector(x));
        let obs = self.env.observe_tape(&mut g, xs);
        let p = self.net.bind(&mut g, false);
        let out = self.net.forward(&mut g, &p, obs);
        let root = g.sum(out);
        g.backward(root).get_or_zeros(xs, &Matrix::row_vector(x)).into_vec()
    }
}

/// Networks, optimisers and dual state of one learner.
#[derive(Debug, Clone)]
pub struct Agent {
    pub params: AgentParams,
    pub ablation: Ablation,
    pub cbox: ControlBox,
    pub policy: Mlp,
    pub critics: [Mlp; 2],
    pub target_critics: [Mlp; 2],
    pub lyapunov: Mlp,
    pub target_lyapunov: Mlp,
    pub lagrangian: LagrangianState,
    pub temperature: EntropyTemp,
    policy_opt: Adam,
    critic_opts: [Adam; 2],
    lyapunov_opt: Adam,
    updates: u64,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        env: &dyn Environment,
        params: AgentParams,
        ablation: Ablation,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        params.validate()?;
        let spec = env.spec();
        let m = spec.control_dim;
        let obs = env.observation_dim();
        let widths = |input: usize, output: usize| {
            let mut w = vec![input];
            w.extend_from_slice(&params.hidden);
            w.push(output);
            w
        };
        let policy = Mlp::new(&widths(obs, 2 * m), Activation::Relu, Activation::Identity, rng)?;
        let c1 = Mlp::new(&widths(obs + m, 1), Activation::Relu, Activation::Identity, rng)?;
        let c2 = Mlp::new(&widths(obs + m, 1), Activation::Relu, Activation::Identity, rng)?;
        let mut lyapunov = Mlp::new(&widths(obs, 1), Activation::Relu, Activation::Relu, rng)?;
        let last = lyapunov.params().len() - 1;
        lyapunov.params_mut()[last] = Matrix::scalar(params.lyapunov_bias);
        let target = params.entropy_target.unwrap_or(-(m as f64));
        Ok(Self {
            cbox: ControlBox::new(&spec.control_low, &spec.control_high),
            target_critics: [c1.clone(), c2.clone()],
            critics: [c1, c2],
            target_lyapunov: lyapunov.clone(),
            lyapunov,
            policy,
            lagrangian: LagrangianState::new(spec.barriers.len(), &params),
            temperature: EntropyTemp::new(params.alpha_init, target, params.lr_policy),
            policy_opt: Adam::new(params.lr_policy),
            critic_opts: [Adam::new(params.lr_critic), Adam::new(params.lr_critic)],
            lyapunov_opt: Adam::new(params.lr_critic),
            updates: 0,
            ablation,
            params,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn lyapunov_view<'a>(&'a self, env: &'a dyn Environment) -> LyapunovView<'a> {
        LyapunovView { net: &self.lyapunov, env }
    }

    /// Stochastic action for one state with the given noise draw.
    pub fn act_with_noise(&self, env: &dyn Environment, x: &[f64], noise: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let xs = g.constant(Matrix::row_vector(x));
        let obs = env.observe_tape(&mut g, xs);
        let p = self.policy.bind(&mut g, false);
        let n = g.constant(Matrix::row_vector(noise));
        let s = losses::policy_sample(&mut g, &self.policy, &p, obs, n, &self.cbox);
        env.spec().clip_control(g.value(s.control).as_slice())
    }

    pub fn act<R: Rng + ?Sized>(&self, env: &dyn Environment, x: &[f64], rng: &mut R) -> Vec<f64> {
        let noise: Vec<f64> = (0..self.cbox.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.act_with_noise(env, x, &noise)
    }

    pub fn act_deterministic(&self, env: &dyn Environment, x: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let xs = g.constant(Matrix::row_vector(x));
        let obs = env.observe_tape(&mut g, xs);
        let p = self.policy.bind(&mut g, false);
        let u = losses::policy_mean_action(&mut g, &self.policy, &p, obs, &self.cbox);
        env.spec().clip_control(g.value(u).as_slice())
    }

    /// Batch data for the augmented Lagrangian: drift plus GP mean, and the
    /// flattened control gains.
    pub fn lagrangian_batch(
        env: &dyn Environment,
        gp: &GpResidualModel,
        states: &Matrix,
        noise: Matrix,
    ) -> Result<LagrangianBatch, AgentError> {
        let (b, n) = states.shape();
        let m = env.spec().control_dim;
        let mut drift = Matrix::zeros(b, n);
        let mut gains = Matrix::zeros(b, n * m);
        for r in 0..b {
            let x = states.row(r);
            let f = env.drift(x);
            let d = gp.mean(x)?;
            for (j, v) in drift.row_mut(r).iter_mut().enumerate() {
                *v = f[j] + d[j];
            }
            gains.row_mut(r).copy_from_slice(env.control_gain(x).as_slice());
        }
        Ok(LagrangianBatch { states: states.clone(), drift, gains, noise })
    }

    fn noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Matrix {
        let m = self.cbox.dim();
        let data = (0..rows * m).map(|_| rng.sample(StandardNormal)).collect();
        Matrix::from_vec(rows, m, data).expect("noise shape")
    }

    /// One learner step: critics and Lyapunov net, then policy and
    /// temperature, then multipliers and penalties, then target networks.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        env: &dyn Environment,
        gp: &GpResidualModel,
        batch: &Batch,
        rng: &mut R,
    ) -> Result<UpdateStats, AgentError> {
        if batch.is_empty() {
            return Err(AgentError::EmptyBatch);
        }
        let b = batch.len();
        let alpha = self.temperature.alpha();
        let next_noise = self.noise(b, rng);
        let policy_noise = self.noise(b, rng);

        // Soft Bellman targets from the target critics.
        let targets = {
            let mut g = Graph::new();
            let xn = g.constant(batch.next_states.clone());
            let obs = env.observe_tape(&mut g, xn);
            let pp = self.policy.bind(&mut g, false);
            let nz = g.constant(next_noise);
            let s = losses::policy_sample(&mut g, &self.policy, &pp, obs, nz, &self.cbox);
            let t1 = self.target_critics[0].bind(&mut g, false);
            let t2 = self.target_critics[1].bind(&mut g, false);
            let q1 = losses::critic_value(&mut g, &self.target_critics[0], &t1, obs, s.squashed);
            let q2 = losses::critic_value(&mut g, &self.target_critics[1], &t2, obs, s.squashed);
            let q = g.min(q1, q2);
            losses::q_targets(g.value(q).as_slice(), g.value(s.log_prob).as_slice(), &batch.rewards, self.params.gamma, alpha)
        };
        let obs_now = env.observe_batch(&batch.states);
        let squashed = {
            let mut y = batch.controls.clone();
            for r in 0..b {
                let row = self.cbox.from_box(batch.controls.row(r));
                y.row_mut(r).copy_from_slice(&row);
            }
            y
        };
        let mut q_loss = [0.0; 2];
        for i in 0..2 {
            let critic = &self.critics[i];
            let (loss, grads) = crate::diff::value_and_grad(critic.params(), |g, p| {
                let o = g.constant(obs_now.clone());
                let a = g.constant(squashed.clone());
                let q = losses::critic_value(g, critic, p, o, a);
                losses::mse_to_target(g, q, &targets)
            });
            self.critic_opts[i].step(self.critics[i].params_mut(), &grads);
            q_loss[i] = loss;
        }

        let lyapunov_loss = if self.ablation.trains_lyapunov() {
            let obs_next = env.observe_batch(&batch.next_states);
            let next = self.target_lyapunov.apply_batch(&obs_next)?;
            let targets = losses::lyapunov_targets(&batch.costs, next.as_slice(), self.params.gamma_c);
            let net = &self.lyapunov;
            let (loss, grads) = crate::diff::value_and_grad(net.params(), |g, p| {
                let o = g.constant(obs_now.clone());
                let l = net.forward(g, p, o);
                losses::mse_to_target(g, l, &targets)
            });
            self.lyapunov_opt.step(self.lyapunov.params_mut(), &grads);
            Some(loss)
        } else {
            None
        };

        let lbatch = Self::lagrangian_batch(env, gp, &batch.states, policy_noise)?;
        let inputs = LagrangianInputs {
            critics: [&self.critics[0], &self.critics[1]],
            lyapunov: &self.lyapunov,
            alpha,
            beta: self.params.beta,
            lambdas: &self.lagrangian.lambdas,
            rho_lambda: &self.lagrangian.rho_lambda,
            zeta: self.lagrangian.zeta,
            rho_zeta: self.lagrangian.rho_zeta,
            ablation: self.ablation,
        };
        let mut g = Graph::new();
        let pp = self.policy.bind(&mut g, true);
        let tape = losses::augmented_lagrangian(&mut g, env, &self.policy, &pp, &self.cbox, &inputs, &lbatch);
        let lagrangian = g.scalar(tape.value);
        if !lagrangian.is_finite() {
            return Err(AgentError::NonFinite("augmented Lagrangian"));
        }
        let grads = g.backward(tape.value);
        let pgrads: Vec<Matrix> =
            pp.iter().zip(self.policy.params()).map(|(v, p)| grads.get_or_zeros(*v, p)).collect();
        let cbf_means: Vec<f64> = tape.cbf_means.iter().map(|v| g.scalar(*v)).collect();
        let clf_mean = tape.clf_mean.map(|v| g.scalar(v));
        let log_prob = g.value(tape.sample.log_prob).as_slice().to_vec();
        let neg_value = g.scalar(tape.neg_value);
        drop(g);
        self.policy_opt.step(self.policy.params_mut(), &pgrads);
        let (alpha_loss, _) = self.temperature.update(&log_prob);

        if self.ablation.uses_barriers() {
            self.lagrangian.dual_update(&cbf_means, clf_mean)?;
        }

        let tau = self.params.tau;
        for i in 0..2 {
            polyak_update(&self.critics[i], &mut self.target_critics[i], tau)?;
        }
        if self.ablation.trains_lyapunov() {
            polyak_update(&self.lyapunov, &mut self.target_lyapunov, tau)?;
        }
        self.updates += 1;
        Ok(UpdateStats {
            q_loss,
            lyapunov_loss,
            lagrangian,
            neg_value,
            cbf_means,
            clf_mean,
            alpha_loss,
            alpha: self.temperature.alpha(),
        })
    }
}
