//! The rollout, store, sample and update loop with backup-controller
//! switching and GP data collection.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Ablation, Agent, AgentError, AgentParams, Batch};
use crate::buffer::{BufferError, ReplayBuffer, Transition};
use crate::envs::{
    lookahead_point, CarFollowing, CarFollowingParams, EnvError, EnvKind, Environment, Unicycle, UnicycleParams,
};
use crate::gp::{GpError, GpParams, GpResidualModel};
use crate::safety::{BackupParams, BackupProblem, SafetyError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("episode {episode}, step {step}: {source}")]
    Step { episode: usize, step: usize, source: Box<TrainError> },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// CBF decay rate `η` shared by every barrier.
    pub eta: f64,
    pub unicycle: UnicycleParams,
    pub car_following: CarFollowingParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::CarFollowing,
            eta: 0.2,
            unicycle: UnicycleParams::default(),
            car_following: CarFollowingParams::default(),
        }
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn Environment>, EnvError> {
        Ok(match self.kind {
            EnvKind::Unicycle => Box::new(Unicycle::new(self.unicycle.clone(), self.eta)?),
            EnvKind::CarFollowing => Box::new(CarFollowing::new(self.car_following.clone(), self.eta)?),
        })
    }

    pub fn episode_len(&self) -> usize {
        match self.kind {
            EnvKind::Unicycle => self.unicycle.episode_len,
            EnvKind::CarFollowing => self.car_following.episode_len,
        }
    }
}

/// Thresholds deciding when the backup controller takes over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerParams {
    /// Steps of history inspected for a trapped unicycle.
    pub trap_window: usize,
    /// Net lookahead-point displacement over the window below which the
    /// unicycle counts as stuck.
    pub trap_displacement: f64,
    /// Stuck only counts as trapped when some barrier value is below this.
    pub trap_margin: f64,
    pub resume_distance: f64,
    pub max_duration: usize,
    /// The rear gap must stay above `δ + car_margin`.
    pub car_margin: f64,
    pub car_hysteresis: f64,
}

impl Default for TriggerParams {
    fn default() -> Self {
        Self {
            trap_window: 20,
            trap_displacement: 0.05,
            trap_margin: 0.1,
            resume_distance: 0.5,
            max_duration: 50,
            car_margin: 1.0,
            car_hysteresis: 0.5,
        }
    }
}

impl TriggerParams {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("trap_displacement", self.trap_displacement),
            ("trap_margin", self.trap_margin),
            ("resume_distance", self.resume_distance),
            ("car_margin", self.car_margin),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TrainError::Config(format!("trigger.{name} must be positive")));
            }
        }
        if !(self.car_hysteresis >= 0.0) {
            return Err(TrainError::Config("trigger.car_hysteresis must be nonnegative".into()));
        }
        if self.trap_window == 0 || self.max_duration == 0 {
            return Err(TrainError::Config("trigger.trap_window and trigger.max_duration must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopParams {
    pub episodes: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub ablation: Ablation,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self { episodes: 150, batch_size: 64, buffer_capacity: 100_000, ablation: Ablation::Blac }
    }
}

/// Everything a single training run depends on besides its seed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train: LoopParams,
    pub env: EnvConfig,
    pub agent: AgentParams,
    pub backup: BackupParams,
    pub trigger: TriggerParams,
    pub gp: GpParams,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.train.episodes == 0 {
            return Err(TrainError::Config("train.episodes must be at least 1".into()));
        }
        if self.train.batch_size == 0 || self.train.buffer_capacity == 0 {
            return Err(TrainError::Config("train.batch_size and train.buffer_capacity must be positive".into()));
        }
        if !(self.env.eta >= 0.0 && self.env.eta <= 1.0) {
            return Err(TrainError::Config(format!("env.eta = {} must lie in [0, 1]", self.env.eta)));
        }
        self.agent.validate().map_err(|e| TrainError::Config(format!("agent: {e}")))?;
        self.gp.validate().map_err(|e| TrainError::Config(format!("gp: {e}")))?;
        self.trigger.validate()?;
        let env = self.env.build().map_err(|e| TrainError::Config(format!("env: {e}")))?;
        BackupProblem::from_params(&self.backup, env.spec().control_dim, env.spec().barriers.len())
            .map_err(|e| TrainError::Config(format!("backup: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub steps: usize,
    pub reward: f64,
    pub violations: usize,
    pub cost: f64,
    pub backup_steps: usize,
    pub final_distance: f64,
}

/// Backup-controller bookkeeping for the current episode.
#[derive(Debug, Clone, PartialEq)]
pub enum BackupMode {
    Off,
    On { trap_point: [f64; 2], steps: usize },
}

/// Environment-specific quantities the trigger rules need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TriggerGeometry {
    Unicycle { lookahead: f64 },
    CarFollowing { delta: f64 },
}

impl TriggerGeometry {
    pub fn from_config(env: &EnvConfig) -> Self {
        match env.kind {
            EnvKind::Unicycle => TriggerGeometry::Unicycle { lookahead: env.unicycle.lookahead },
            EnvKind::CarFollowing => TriggerGeometry::CarFollowing { delta: env.car_following.delta },
        }
    }

    /// The point tracked by the trap detector.
    pub fn anchor(&self, x: &[f64]) -> [f64; 2] {
        match self {
            TriggerGeometry::Unicycle { lookahead } => lookahead_point(x, *lookahead),
            TriggerGeometry::CarFollowing { .. } => [0.0, 0.0],
        }
    }
}

/// Decides whether the backup controller should take over at `x`, and with
/// which nominal control. `window` holds the anchors of recent states,
/// oldest first, ending with `x`'s.
pub fn backup_trigger(
    geometry: TriggerGeometry,
    params: &TriggerParams,
    env: &dyn Environment,
    window: &VecDeque<[f64; 2]>,
    x: &[f64],
) -> Option<Vec<f64>> {
    match geometry {
        TriggerGeometry::Unicycle { .. } => {
            if window.len() <= params.trap_window {
                return None;
            }
            let first = window[window.len() - 1 - params.trap_window];
            let last = window[window.len() - 1];
            let moved = (last[0] - first[0]).hypot(last[1] - first[1]);
            let closest = env.spec().barrier_values(x).into_iter().fold(f64::INFINITY, f64::min);
            (moved < params.trap_displacement && closest < params.trap_margin).then(|| env.spec().control_max())
        }
        TriggerGeometry::CarFollowing { delta } => {
            (CarFollowing::rear_gap(x) < delta + params.car_margin).then(|| vec![0.0; env.spec().control_dim])
        }
    }
}

/// Nominal control while in backup mode.
pub fn backup_nominal(geometry: TriggerGeometry, env: &dyn Environment) -> Vec<f64> {
    match geometry {
        TriggerGeometry::Unicycle { .. } => env.spec().control_max(),
        TriggerGeometry::CarFollowing { .. } => vec![0.0; env.spec().control_dim],
    }
}

/// Whether the learned policy resumes control.
pub fn backup_release(
    geometry: TriggerGeometry,
    params: &TriggerParams,
    x: &[f64],
    trap_point: [f64; 2],
    steps_in_backup: usize,
) -> bool {
    match geometry {
        TriggerGeometry::Unicycle { .. } => {
            let p = geometry.anchor(x);
            let away = (p[0] - trap_point[0]).hypot(p[1] - trap_point[1]);
            away > params.resume_distance || steps_in_backup > params.max_duration
        }
        TriggerGeometry::CarFollowing { delta } => {
            CarFollowing::rear_gap(x) >= delta + params.car_margin + params.car_hysteresis
        }
    }
}

/// Independent random streams of one run.
#[derive(Debug, Clone)]
pub struct RunRngs {
    pub init: ChaCha8Rng,
    pub act: ChaCha8Rng,
    pub update: ChaCha8Rng,
    pub buffer_seed: u64,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self { init: stream(1), act: stream(2), update: stream(3), buffer_seed: seed ^ 0x9e37_79b9_7f4a_7c15 }
    }
}

/// What happened at one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: Vec<f64>,
    pub control: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub violation: bool,
    pub backup: bool,
    pub updated: bool,
}

/// One seeded training run.
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    seed: u64,
    env: Box<dyn Environment>,
    geometry: TriggerGeometry,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub gp: GpResidualModel,
    backup: Option<BackupProblem>,
    rngs: RunRngs,
    mode: BackupMode,
    window: VecDeque<[f64; 2]>,
    pending: Vec<(Vec<f64>, Vec<f64>)>,
    episodes_done: usize,
    /// Overrides the policy with the backup controller on every step.
    pub force_backup: bool,
    /// When false, no transitions are stored, no updates run and the GP
    /// is left unchanged.
    pub learning: bool,
    /// Act with the policy mean instead of sampling.
    pub deterministic: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let env = config.env.build()?;
        let mut rngs = RunRngs::new(seed);
        let spec = env.spec().clone();
        let agent = Agent::new(env.as_ref(), config.agent.clone(), config.train.ablation, &mut rngs.init)?;
        let buffer =
            ReplayBuffer::new(config.train.buffer_capacity, spec.state_dim, spec.control_dim, rngs.buffer_seed)?;
        let gp = GpResidualModel::new(&config.gp, spec.state_dim, env.residual_dims())?;
        let backup = if config.train.ablation.uses_barriers() {
            Some(BackupProblem::from_params(&config.backup, spec.control_dim, spec.barriers.len())?)
        } else {
            None
        };
        Ok(Self {
            geometry: TriggerGeometry::from_config(&config.env),
            config,
            seed,
            env,
            agent,
            buffer,
            gp,
            backup,
            rngs,
            mode: BackupMode::Off,
            window: VecDeque::new(),
            pending: Vec::new(),
            episodes_done: 0,
            force_backup: false,
            learning: true,
            deterministic: false,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn episodes_done(&self) -> usize {
        self.episodes_done
    }

    pub fn mode(&self) -> &BackupMode {
        &self.mode
    }

    /// Clears per-episode controller state and returns the initial state.
    pub fn reset(&mut self) -> Vec<f64> {
        self.mode = BackupMode::Off;
        self.window.clear();
        let x = self.env.initial_state();
        self.window.push_back(self.geometry.anchor(&x));
        x
    }

    fn update_mode(&mut self, x: &[f64]) -> Option<Vec<f64>> {
        self.backup.as_ref()?;
        if self.force_backup {
            return Some(backup_nominal(self.geometry, self.env.as_ref()));
        }
        if let BackupMode::On { trap_point, steps } = self.mode {
            if backup_release(self.geometry, &self.config.trigger, x, trap_point, steps) {
                log::debug!("backup released after {steps} steps");
                self.mode = BackupMode::Off;
                self.window.clear();
                self.window.push_back(self.geometry.anchor(x));
            } else {
                return Some(backup_nominal(self.geometry, self.env.as_ref()));
            }
        }
        let nominal = backup_trigger(self.geometry, &self.config.trigger, self.env.as_ref(), &self.window, x)?;
        self.mode = BackupMode::On { trap_point: self.geometry.anchor(x), steps: 0 };
        Some(nominal)
    }

    fn backup_control(&self, x: &[f64], nominal: &[f64]) -> Vec<f64> {
        let problem = self.backup.as_ref().expect("backup problem present");
        let view = self.agent.lyapunov_view(self.env.as_ref());
        match problem.solve(self.env.as_ref(), &self.gp, &view, x, nominal) {
            Ok(sol) => sol.u_actual,
            Err(e) => {
                log::warn!("backup QP failed ({e}); applying the nominal control");
                self.env.spec().clip_control(nominal)
            }
        }
    }

    /// Advances the environment by one step from `x`.
    pub fn train_step(&mut self, x: &[f64]) -> Result<StepRecord, TrainError> {
        let nominal = self.update_mode(x);
        let backup = nominal.is_some();
        let control = match &nominal {
            Some(n) => self.backup_control(x, n),
            None if self.deterministic => self.agent.act_deterministic(self.env.as_ref(), x),
            None => self.agent.act(self.env.as_ref(), x, &mut self.rngs.act),
        };
        let next = self.env.step(x, &control)?;
        let fb = self.env.feedback(x, &control, &next);

        let predicted = self.env.nominal_step(x, &control);
        let residual: Vec<f64> = next.iter().zip(&predicted).map(|(a, b)| a - b).collect();
        if self.learning && !self.gp.is_frozen() {
            self.pending.push((x.to_vec(), residual));
        }

        let mut updated = false;
        if backup {
            if let BackupMode::On { steps, .. } = &mut self.mode {
                *steps += 1;
            }
        } else if self.learning {
            self.buffer.push(Transition {
                state: x.to_vec(),
                control: control.clone(),
                reward: fb.reward,
                cost: fb.cost,
                next_state: next.clone(),
            })?;
            if self.buffer.len() >= self.config.train.batch_size {
                let idx = self.buffer.sample_indices(self.config.train.batch_size)?;
                let items: Vec<&Transition> = idx.iter().map(|&i| self.buffer.get(i).expect("sampled index")).collect();
                let batch = Batch::from_transitions(&items)?;
                self.agent.update(self.env.as_ref(), &self.gp, &batch, &mut self.rngs.update)?;
                updated = true;
            }
        }
        self.window.push_back(self.geometry.anchor(&next));
        while self.window.len() > self.config.trigger.trap_window + 1 {
            self.window.pop_front();
        }
        Ok(StepRecord {
            state: x.to_vec(),
            control,
            next_state: next,
            reward: fb.reward,
            cost: fb.cost,
            violation: fb.violation,
            backup,
            updated,
        })
    }

    /// Runs one episode of `steps` steps (the configured length when `None`).
    pub fn episode_rollout_for(&mut self, steps: usize) -> Result<EpisodeMetrics, TrainError> {
        let episode = self.episodes_done + 1;
        let mut x = self.reset();
        let mut m = EpisodeMetrics { episode, ..EpisodeMetrics::default() };
        for step in 0..steps {
            let rec = self
                .train_step(&x)
                .map_err(|e| TrainError::Step { episode, step, source: Box::new(e) })?;
            m.steps += 1;
            m.reward += rec.reward;
            m.cost += rec.cost;
            m.violations += usize::from(rec.violation);
            m.backup_steps += usize::from(rec.backup);
            x = rec.next_state;
        }
        m.final_distance = if steps == 0 { 0.0 } else { self.env.tracking_error(&x) };
        self.finish_episode()?;
        Ok(m)
    }

    pub fn episode_rollout(&mut self) -> Result<EpisodeMetrics, TrainError> {
        self.episode_rollout_for(self.config.env.episode_len())
    }

    fn finish_episode(&mut self) -> Result<(), TrainError> {
        self.episodes_done += 1;
        if self.learning && !self.gp.is_frozen() {
            let keep = self.pending.len().saturating_sub(self.gp.capacity());
            self.gp.fit(&self.pending[keep..])?;
            if self.episodes_done >= self.config.gp.freeze_after_episodes {
                self.gp.freeze();
            }
        }
        self.pending.clear();
        Ok(())
    }

    /// Runs every configured episode, calling `on_episode` after each one.
    pub fn run<F>(&mut self, mut on_episode: F) -> Result<Vec<EpisodeMetrics>, TrainError>
    where
        F: FnMut(&EpisodeMetrics, &Trainer) -> Result<(), TrainError>,
    {
        let mut all = Vec::with_capacity(self.config.train.episodes);
        for _ in 0..self.config.train.episodes {
            let m = self.episode_rollout()?;
            log::info!(
                "episode {} reward {:.2} violations {} backup {}",
                m.episode,
                m.reward,
                m.violations,
                m.backup_steps
            );
            on_episode(&m, self)?;
            all.push(m);
        }
        Ok(all)
    }
}
