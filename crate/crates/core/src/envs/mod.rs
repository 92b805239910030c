//! Control-affine environments `x' = f(x) + g(x)·u + d(x)` with a nominal
//! model `(f, g)` exposed to the learner and a residual `d` that only the
//! true step applies.

mod car_following;
mod unicycle;

use std::fmt;

use thiserror::Error;

pub use car_following::{CarFollowing, CarFollowingParams};
pub use unicycle::{Unicycle, UnicycleParams};

use crate::diff::{Graph, Var};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("state has {got} entries, expected {expected}")]
    StateDim { expected: usize, got: usize },
    #[error("control has {got} entries, expected {expected}")]
    ControlDim { expected: usize, got: usize },
    #[error("non-finite state entry at index {0}")]
    NonFinite(usize),
    #[error("control[{index}] = {value} outside [{low}, {high}]")]
    ControlBounds { index: usize, value: f64, low: f64, high: f64 },
    #[error("invalid environment parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Unicycle,
    CarFollowing,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Unicycle => "unicycle",
            EnvKind::CarFollowing => "car_following",
        })
    }
}

/// Geometry of one barrier function.
#[derive(Debug, Clone, PartialEq)]
pub enum BarrierShape {
    /// `½(‖p(x) − center‖² − radius²)` where `p(x)` is the point `lookahead`
    /// ahead of the planar pose `(x[0], x[1], x[2])`.
    Disc { center: [f64; 2], radius: f64, lookahead: f64 },
    /// `x[lead] − x[follow] − min_gap`.
    Gap { lead: usize, follow: usize, min_gap: f64 },
}

/// One discrete-time CBF `h_i` with its decay rate `η`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierSpec {
    pub shape: BarrierShape,
    pub eta: f64,
    pub label: String,
}

/// Point `lookahead` ahead of a planar pose.
pub fn lookahead_point(x: &[f64], lookahead: f64) -> [f64; 2] {
    [x[0] + lookahead * x[2].cos(), x[1] + lookahead * x[2].sin()]
}

impl BarrierSpec {
    pub fn new(shape: BarrierShape, eta: f64, label: impl Into<String>) -> Result<Self, EnvError> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(EnvError::Parameter(format!("barrier decay rate {eta} outside [0, 1]")));
        }
        Ok(Self { shape, eta, label: label.into() })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.shape {
            BarrierShape::Disc { center, radius, lookahead } => {
                let p = lookahead_point(x, *lookahead);
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                0.5 * (dx * dx + dy * dy - radius * radius)
            }
            BarrierShape::Gap { lead, follow, min_gap } => x[*lead] - x[*follow] - min_gap,
        }
    }

    /// Analytic `∇ₓh`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        match &self.shape {
            BarrierShape::Disc { center, lookahead, .. } => {
                let p = lookahead_point(x, *lookahead);
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                let (s, c) = x[2].sin_cos();
                grad[0] = dx;
                grad[1] = dy;
                grad[2] = lookahead * (-dx * s + dy * c);
            }
            BarrierShape::Gap { lead, follow, .. } => {
                grad[*lead] += 1.0;
                grad[*follow] -= 1.0;
            }
        }
        grad
    }

    /// Row-wise `h` of a batch of states, as a column.
    pub fn value_tape(&self, g: &mut Graph, x: Var) -> Var {
        match &self.shape {
            BarrierShape::Disc { center, radius, lookahead } => {
                let x1 = g.col(x, 0);
                let x2 = g.col(x, 1);
                let th = g.col(x, 2);
                let c = g.cos(th);
                let s = g.sin(th);
                let c = g.scale(c, *lookahead);
                let s = g.scale(s, *lookahead);
                let p1 = g.add(x1, c);
                let p2 = g.add(x2, s);
                let d1 = g.shift(p1, -center[0]);
                let d2 = g.shift(p2, -center[1]);
                let q1 = g.square(d1);
                let q2 = g.square(d2);
                let q = g.add(q1, q2);
                let q = g.shift(q, -radius * radius);
                g.scale(q, 0.5)
            }
            BarrierShape::Gap { lead, follow, min_gap } => {
                let a = g.col(x, *lead);
                let b = g.col(x, *follow);
                let d = g.sub(a, b);
                g.shift(d, -min_gap)
            }
        }
    }
}

/// Static description of an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub control_dim: usize,
    pub control_low: Vec<f64>,
    pub control_high: Vec<f64>,
    pub dt: f64,
    pub episode_len: usize,
    pub barriers: Vec<BarrierSpec>,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.dt > 0.0) {
            return Err(EnvError::Parameter(format!("time step {} must be positive", self.dt)));
        }
        if self.control_low.len() != self.control_dim || self.control_high.len() != self.control_dim {
            return Err(EnvError::Parameter("control bounds do not match control dimension".into()));
        }
        if self.control_low.iter().zip(&self.control_high).any(|(l, h)| !(l < h)) {
            return Err(EnvError::Parameter("control box is empty".into()));
        }
        Ok(())
    }

    pub fn check_state(&self, x: &[f64]) -> Result<(), EnvError> {
        if x.len() != self.state_dim {
            return Err(EnvError::StateDim { expected: self.state_dim, got: x.len() });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(EnvError::NonFinite(i));
        }
        Ok(())
    }

    pub fn check_control(&self, u: &[f64]) -> Result<(), EnvError> {
        if u.len() != self.control_dim {
            return Err(EnvError::ControlDim { expected: self.control_dim, got: u.len() });
        }
        for (index, ((&value, &low), &high)) in u.iter().zip(&self.control_low).zip(&self.control_high).enumerate() {
            if !(value >= low - 1e-9 && value <= high + 1e-9) {
                return Err(EnvError::ControlBounds { index, value, low, high });
            }
        }
        Ok(())
    }

    pub fn clip_control(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.control_low)
            .zip(&self.control_high)
            .map(|((v, l), h)| v.clamp(*l, *h))
            .collect()
    }

    /// Upper corner of the control box.
    pub fn control_max(&self) -> Vec<f64> {
        self.control_high.clone()
    }

    pub fn barrier_values(&self, x: &[f64]) -> Vec<f64> {
        self.barriers.iter().map(|b| b.value(x)).collect()
    }
}

/// Everything the environment reports about one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFeedback {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub barrier_values: Vec<f64>,
    pub violation: bool,
}

impl StepFeedback {
    pub(crate) fn new(spec: &EnvSpec, next_state: Vec<f64>, reward: f64, cost: f64) -> Self {
        let barrier_values = spec.barrier_values(&next_state);
        let violation = barrier_values.iter().any(|&h| h < 0.0);
        Self { next_state, reward, cost, barrier_values, violation }
    }
}

/// A simulated control-affine system.
pub trait Environment: fmt::Debug + Send + Sync {
    fn spec(&self) -> &EnvSpec;

    fn initial_state(&self) -> Vec<f64>;

    /// True transition, including the residual hidden from the nominal model.
    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, EnvError>;

    /// Nominal drift `f(x)` (the control-free next state).
    fn drift(&self, x: &[f64]) -> Vec<f64>;

    /// Nominal control gain `g(x)`, `n × m`.
    fn control_gain(&self, x: &[f64]) -> Matrix;

    fn feedback(&self, x: &[f64], u: &[f64], next: &[f64]) -> StepFeedback;

    /// Distance of the tracked quantity from its desired value.
    fn tracking_error(&self, x: &[f64]) -> f64;

    /// Features fed to the networks, built on the tape so gradients can flow
    /// from network outputs back to predicted states.
    fn observe_tape(&self, g: &mut Graph, states: Var) -> Var;

    fn observation_dim(&self) -> usize;

    /// State indices whose residual the GP models.
    fn residual_dims(&self) -> Vec<usize>;

    /// `f(x) + g(x)·u`
    fn nominal_step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut next = self.drift(x);
        let gain = self.control_gain(x);
        for (j, v) in next.iter_mut().enumerate() {
            *v += dot(gain.row(j), u);
        }
        next
    }

    fn observe_batch(&self, states: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let s = g.constant(states.clone());
        let o = self.observe_tape(&mut g, s);
        g.value(o).clone()
    }

    fn observe(&self, x: &[f64]) -> Vec<f64> {
        self.observe_batch(&Matrix::row_vector(x)).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_gradient(b: &BarrierSpec, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (b.value(&xp) - b.value(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn barrier_decay_rate_must_be_in_unit_interval() {
        let shape = BarrierShape::Gap { lead: 0, follow: 1, min_gap: 1.0 };
        assert!(BarrierSpec::new(shape.clone(), 1.2, "x").is_err());
        assert!(BarrierSpec::new(shape, 0.0, "x").is_ok());
    }

    #[test]
    fn disc_gradient_matches_finite_differences() {
        let b = BarrierSpec::new(
            BarrierShape::Disc { center: [1.0, 0.5], radius: 0.3, lookahead: 0.2 },
            0.2,
            "obstacle",
        )
        .unwrap();
        for x in [[0.0, 0.0, 0.3], [2.0, -1.0, 2.5], [1.1, 0.4, -1.0]] {
            let fd = fd_gradient(&b, &x);
            let an = b.gradient(&x);
            for (a, f) in an.iter().zip(&fd) {
                assert!((a - f).abs() <= 1e-5 * a.abs().max(1.0), "{an:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn tape_barrier_matches_direct_value() {
        let b = BarrierSpec::new(
            BarrierShape::Disc { center: [1.0, 0.5], radius: 0.3, lookahead: 0.2 },
            0.2,
            "obstacle",
        )
        .unwrap();
        let xs = Matrix::from_rows(&[[0.0, 0.0, 0.3], [2.0, -1.0, 2.5]]);
        let mut g = Graph::new();
        let v = g.constant(xs.clone());
        let h = b.value_tape(&mut g, v);
        for r in 0..2 {
            assert!((g.value(h)[(r, 0)] - b.value(xs.row(r))).abs() < 1e-14);
        }
    }

    #[test]
    fn control_box_checks() {
        let spec = EnvSpec {
            kind: EnvKind::Unicycle,
            state_dim: 3,
            control_dim: 2,
            control_low: vec![-1.0, -1.0],
            control_high: vec![1.0, 1.0],
            dt: 0.1,
            episode_len: 10,
            barriers: vec![],
        };
        spec.validate().unwrap();
        assert!(spec.check_control(&[0.5, -1.0]).is_ok());
        assert!(matches!(spec.check_control(&[1.5, 0.0]), Err(EnvError::ControlBounds { index: 0, .. })));
        assert!(matches!(spec.check_control(&[0.0]), Err(EnvError::ControlDim { .. })));
        assert_eq!(spec.clip_control(&[3.0, -3.0]), vec![1.0, -1.0]);
        assert!(matches!(spec.check_state(&[0.0, f64::NAN, 0.0]), Err(EnvError::NonFinite(1))));
    }
}
