use serde::{Deserialize, Serialize};

use super::{lookahead_point, BarrierShape, BarrierSpec, EnvError, EnvKind, EnvSpec, Environment, StepFeedback};
use crate::diff::{Graph, Var};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnicycleParams {
    pub dt: f64,
    pub episode_len: usize,
    pub start: [f64; 3],
    pub destination: [f64; 2],
    pub obstacles: Vec<[f64; 2]>,
    /// Minimum clearance between the lookahead point and an obstacle centre.
    pub delta: f64,
    pub lookahead: f64,
    /// Preferred forward speed in the reward.
    pub v_s: f64,
    pub k1: f64,
    pub k2: f64,
    /// Magnitude of the unmodelled forward-speed loss `−c·cos θ`.
    pub residual_speed: f64,
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for UnicycleParams {
    fn default() -> Self {
        Self {
            dt: 0.1,
            episode_len: 500,
            start: [0.0, 0.0, 0.0],
            destination: [2.5, 2.5],
            obstacles: vec![[1.0, 1.0], [1.8, 2.2], [2.2, 1.4]],
            delta: 0.3,
            lookahead: 0.1,
            v_s: 1.0,
            k1: 0.1,
            k2: 30.0,
            residual_speed: 0.1,
            v_max: 2.0,
            omega_max: 3.0,
        }
    }
}

/// Unicycle driving to a destination among disc obstacles.
///
/// State `[x₁, x₂, θ]`, control `[v, ω]`.
#[derive(Debug, Clone)]
pub struct Unicycle {
    params: UnicycleParams,
    spec: EnvSpec,
}

impl Unicycle {
    pub fn new(params: UnicycleParams, eta: f64) -> Result<Self, EnvError> {
        if params.lookahead < 0.0 {
            return Err(EnvError::Parameter(format!("lookahead {} is negative", params.lookahead)));
        }
        if !(params.delta > 0.0) {
            return Err(EnvError::Parameter(format!("obstacle clearance {} must be positive", params.delta)));
        }
        let barriers = params
            .obstacles
            .iter()
            .enumerate()
            .map(|(i, c)| {
                BarrierSpec::new(
                    BarrierShape::Disc { center: *c, radius: params.delta, lookahead: params.lookahead },
                    eta,
                    format!("obstacle {}", i + 1),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let spec = EnvSpec {
            kind: EnvKind::Unicycle,
            state_dim: 3,
            control_dim: 2,
            control_low: vec![-params.v_max, -params.omega_max],
            control_high: vec![params.v_max, params.omega_max],
            dt: params.dt,
            episode_len: params.episode_len,
            barriers,
        };
        spec.validate()?;
        Ok(Self { params, spec })
    }

    pub fn params(&self) -> &UnicycleParams {
        &self.params
    }

    /// `p(x) = [x₁, x₂] + l_p·[cos θ, sin θ]`.
    pub fn lookahead(x: &[f64], l_p: f64) -> Result<[f64; 2], EnvError> {
        if l_p < 0.0 {
            return Err(EnvError::Parameter(format!("lookahead {l_p} is negative")));
        }
        Ok(lookahead_point(x, l_p))
    }

    fn point(&self, x: &[f64]) -> [f64; 2] {
        lookahead_point(x, self.params.lookahead)
    }

    fn distance_to_goal(&self, x: &[f64]) -> f64 {
        let p = self.point(x);
        (p[0] - self.params.destination[0]).hypot(p[1] - self.params.destination[1])
    }

    /// The residual input `u_d = −c·[cos θ, 0]`.
    pub fn residual_control(&self, x: &[f64]) -> [f64; 2] {
        [-self.params.residual_speed * x[2].cos(), 0.0]
    }
}

impl Environment for Unicycle {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn initial_state(&self) -> Vec<f64> {
        self.params.start.to_vec()
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, EnvError> {
        self.spec.check_state(x)?;
        self.spec.check_control(u)?;
        let ud = self.residual_control(x);
        let total = [u[0] + ud[0], u[1] + ud[1]];
        Ok(self.nominal_step(x, &total))
    }

    fn drift(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn control_gain(&self, x: &[f64]) -> Matrix {
        let dt = self.params.dt;
        let (s, c) = x[2].sin_cos();
        Matrix::from_rows(&[[dt * c, 0.0], [dt * s, 0.0], [0.0, dt]])
    }

    /// Reward `−K₁(v − v_s)² + K₂·Δd` with `Δd` the decrease in lookahead
    /// distance to the destination; cost is that distance after the step.
    fn feedback(&self, x: &[f64], u: &[f64], next: &[f64]) -> StepFeedback {
        let p = &self.params;
        let before = self.distance_to_goal(x);
        let after = self.distance_to_goal(next);
        let reward = -p.k1 * (u[0] - p.v_s).powi(2) + p.k2 * (before - after);
        StepFeedback::new(&self.spec, next.to_vec(), reward, after)
    }

    fn tracking_error(&self, x: &[f64]) -> f64 {
        self.distance_to_goal(x)
    }

    fn observe_tape(&self, g: &mut Graph, states: Var) -> Var {
        let pos = g.cols(states, 0, 2);
        let dest = &self.params.destination;
        let rel = g.col_affine(pos, &[1.0, 1.0], &[-dest[0], -dest[1]]);
        let th = g.col(states, 2);
        let c = g.cos(th);
        let s = g.sin(th);
        g.concat(&[rel, c, s])
    }

    fn observation_dim(&self) -> usize {
        4
    }

    fn residual_dims(&self) -> Vec<usize> {
        vec![0, 1, 2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn env() -> Unicycle {
        Unicycle::new(UnicycleParams::default(), 0.2).unwrap()
    }

    #[test]
    fn forward_step_loses_residual_speed() {
        let next = env().step(&[0.0, 0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((next[0] - 0.09).abs() < 1e-15);
        assert_eq!(next[1], 0.0);
        assert_eq!(next[2], 0.0);
    }

    #[test]
    fn residual_vanishes_when_heading_is_vertical() {
        let x = [0.4, -0.2, FRAC_PI_2];
        let next = env().step(&x, &[0.0, 0.0]).unwrap();
        assert!((next[0] - 0.4).abs() < 1e-15);
        assert_eq!(next[2], FRAC_PI_2);
    }

    #[test]
    fn turning_step_from_heading_pi() {
        let next = env().step(&[1.0, 1.0, PI], &[0.0, 1.0]).unwrap();
        assert!((next[2] - (PI + 0.1)).abs() < 1e-15);
        // u_d = −0.1·cos π = +0.1 pushes the unicycle backwards along −x₁
        assert!((next[0] - 0.99).abs() < 1e-15);
        assert!((next[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lookahead_point_cases() {
        assert_eq!(Unicycle::lookahead(&[1.0, 2.0, 0.0], 0.5).unwrap(), [1.5, 2.0]);
        assert_eq!(Unicycle::lookahead(&[1.0, 2.0, 0.7], 0.0).unwrap(), [1.0, 2.0]);
        let q = Unicycle::lookahead(&[0.0, 0.0, FRAC_PI_2], 1.0).unwrap();
        assert!(q[0].abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12);
        assert!(Unicycle::lookahead(&[0.0, 0.0, 0.0], -0.1).is_err());
    }

    #[test]
    fn out_of_box_control_rejected() {
        assert!(matches!(env().step(&[0.0, 0.0, 0.0], &[2.5, 0.0]), Err(EnvError::ControlBounds { .. })));
    }

    #[test]
    fn reward_zero_at_preferred_speed_without_progress() {
        let e = env();
        let x = [0.5, 0.0, 0.0];
        let fb = e.feedback(&x, &[1.0, 0.0], &x);
        assert_eq!(fb.reward, 0.0);
        assert!(fb.cost > 0.0);
    }

    #[test]
    fn lookahead_on_obstacle_is_a_violation() {
        let e = env();
        let l = e.params().lookahead;
        let x = [1.0 - l, 1.0, 0.0];
        let fb = e.feedback(&x, &[0.0, 0.0], &x);
        assert!((fb.barrier_values[0] + 0.5 * 0.3 * 0.3).abs() < 1e-12);
        assert!(fb.violation);
    }
}
