use serde::{Deserialize, Serialize};

use super::{BarrierShape, BarrierSpec, EnvError, EnvKind, EnvSpec, Environment, StepFeedback};
use crate::diff::{Graph, Var};
use crate::linalg::Matrix;

const CARS: usize = 5;
/// Index of the controlled car (the fourth) in `0..CARS`.
const EGO: usize = 3;
const TIME: usize = 2 * CARS;

fn pos(car: usize) -> usize {
    2 * car
}

fn vel(car: usize) -> usize {
    2 * car + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarFollowingParams {
    pub dt: f64,
    pub episode_len: usize,
    pub v_s: f64,
    pub k_v: f64,
    pub k_b: f64,
    /// Unmodelled acceleration gain error `d_i` of the uncontrolled cars.
    pub accel_residual: f64,
    /// Amplitude of the lead car's sinusoidal speed variation.
    pub lead_amplitude: f64,
    /// Cars 2 and 3 brake when closer than this to their predecessor.
    pub brake_gap: f64,
    /// Car 5 brakes when closer than this to car 3.
    pub rear_brake_gap: f64,
    /// Minimum gap enforced by the barriers.
    pub delta: f64,
    /// Initial spacing between consecutive cars.
    pub spacing: f64,
    pub d_desired: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub band_bonus: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for CarFollowingParams {
    fn default() -> Self {
        Self {
            dt: 0.1,
            episode_len: 500,
            v_s: 3.0,
            k_v: 4.0,
            k_b: 20.0,
            accel_residual: 0.1,
            lead_amplitude: 4.0,
            brake_gap: 6.5,
            rear_brake_gap: 13.0,
            delta: 1.5,
            spacing: 9.5,
            d_desired: 9.5,
            band_low: 9.0,
            band_high: 10.0,
            band_bonus: 1.5,
            u_min: 0.0,
            u_max: 6.0,
        }
    }
}

/// Five cars in a line; the agent sets the speed of the fourth.
///
/// State `[p₁, v₁, …, p₅, v₅, t]`, control `[u]` (speed of car 4).
#[derive(Debug, Clone)]
pub struct CarFollowing {
    params: CarFollowingParams,
    spec: EnvSpec,
}

impl CarFollowing {
    pub fn new(params: CarFollowingParams, eta: f64) -> Result<Self, EnvError> {
        if !(params.delta >= 0.0) {
            return Err(EnvError::Parameter(format!("minimum gap {} is negative", params.delta)));
        }
        let barriers = vec![
            BarrierSpec::new(
                BarrierShape::Gap { lead: pos(2), follow: pos(EGO), min_gap: params.delta },
                eta,
                "gap car3-car4",
            )?,
            BarrierSpec::new(
                BarrierShape::Gap { lead: pos(EGO), follow: pos(4), min_gap: params.delta },
                eta,
                "gap car4-car5",
            )?,
        ];
        let spec = EnvSpec {
            kind: EnvKind::CarFollowing,
            state_dim: TIME + 1,
            control_dim: 1,
            control_low: vec![params.u_min],
            control_high: vec![params.u_max],
            dt: params.dt,
            episode_len: params.episode_len,
            barriers,
        };
        spec.validate()?;
        Ok(Self { params, spec })
    }

    pub fn params(&self) -> &CarFollowingParams {
        &self.params
    }

    /// Prescribed lead-car speed at simulation time `t`.
    pub fn lead_speed(&self, t: f64) -> f64 {
        self.params.v_s - self.params.lead_amplitude * t.sin()
    }

    /// Gap between car 4 and car 5.
    pub fn rear_gap(x: &[f64]) -> f64 {
        x[pos(EGO)] - x[pos(4)]
    }

    /// Gap between car 3 and car 4.
    pub fn front_gap(x: &[f64]) -> f64 {
        x[pos(2)] - x[pos(EGO)]
    }

    /// Speed each uncontrolled car uses this step (the lead car's is prescribed).
    fn speeds(&self, x: &[f64]) -> [f64; CARS] {
        let mut v = [0.0; CARS];
        for (car, s) in v.iter_mut().enumerate() {
            *s = x[vel(car)];
        }
        v[0] = self.lead_speed(x[TIME]);
        v
    }

    /// Accelerations of cars 1, 2, 3 and 5 (car 4's entry is unused).
    pub fn accelerations(&self, x: &[f64]) -> [f64; CARS] {
        let p = &self.params;
        let v = self.speeds(x);
        let mut a = [0.0; CARS];
        a[0] = p.k_v * (p.v_s - v[0]);
        for car in [1, 2] {
            let gap = x[pos(car - 1)] - x[pos(car)];
            a[car] = p.k_v * (p.v_s - v[car]);
            if gap.abs() < p.brake_gap {
                a[car] -= p.k_b * gap;
            }
        }
        let gap = x[pos(2)] - x[pos(4)];
        a[4] = p.k_v * (p.v_s - v[4]);
        if gap.abs() < p.rear_brake_gap {
            a[4] -= p.k_b * gap;
        }
        a
    }

    fn advance(&self, x: &[f64], accel_gain: f64) -> Vec<f64> {
        let dt = self.params.dt;
        let v = self.speeds(x);
        let a = self.accelerations(x);
        let mut next = vec![0.0; TIME + 1];
        for car in [0, 1, 2, 4] {
            next[pos(car)] = x[pos(car)] + v[car] * dt;
            next[vel(car)] = v[car] + accel_gain * a[car] * dt;
        }
        next[pos(EGO)] = x[pos(EGO)];
        next[vel(EGO)] = 0.0;
        next[TIME] = x[TIME] + dt;
        next
    }
}

impl Environment for CarFollowing {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn initial_state(&self) -> Vec<f64> {
        let p = &self.params;
        let mut x = vec![0.0; TIME + 1];
        for car in 0..CARS {
            x[pos(car)] = -(car as f64) * p.spacing;
            x[vel(car)] = p.v_s;
        }
        x[vel(0)] = self.lead_speed(0.0);
        x
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, EnvError> {
        self.spec.check_state(x)?;
        self.spec.check_control(u)?;
        let mut next = self.advance(x, 1.0 + self.params.accel_residual);
        next[pos(EGO)] += u[0] * self.params.dt;
        next[vel(EGO)] = u[0];
        Ok(next)
    }

    fn drift(&self, x: &[f64]) -> Vec<f64> {
        self.advance(x, 1.0)
    }

    fn control_gain(&self, _x: &[f64]) -> Matrix {
        let mut g = Matrix::zeros(TIME + 1, 1);
        g[(pos(EGO), 0)] = self.params.dt;
        g[(vel(EGO), 0)] = 1.0;
        g
    }

    /// Reward `−(u − v_s)²` plus the band bonus when the car 3–4 gap lands in
    /// the desired band; cost `|d − d_desired|` after the step.
    fn feedback(&self, _x: &[f64], u: &[f64], next: &[f64]) -> StepFeedback {
        let p = &self.params;
        let d = Self::front_gap(next);
        let mut reward = -(u[0] - p.v_s).powi(2);
        if d >= p.band_low && d <= p.band_high {
            reward += p.band_bonus;
        }
        StepFeedback::new(&self.spec, next.to_vec(), reward, (d - p.d_desired).abs())
    }

    fn tracking_error(&self, x: &[f64]) -> f64 {
        (Self::front_gap(x) - self.params.d_desired).abs()
    }

    fn observe_tape(&self, g: &mut Graph, states: Var) -> Var {
        let v_s = self.params.v_s;
        let mut w = Matrix::zeros(TIME + 1, 9);
        for (k, car) in [0, 1, 2, 4].into_iter().enumerate() {
            w[(pos(car), k)] = 0.1;
            w[(pos(EGO), k)] = -0.1;
        }
        let mut bias = vec![0.0; 9];
        for car in 0..CARS {
            w[(vel(car), 4 + car)] = 1.0 / v_s;
            bias[4 + car] = -1.0;
        }
        let w = g.constant(w);
        let b = g.constant(Matrix::row_vector(&bias));
        let lin = g.matmul(states, w);
        let lin = g.add_row(lin, b);
        let t = g.col(states, TIME);
        let s = g.sin(t);
        let c = g.cos(t);
        g.concat(&[lin, s, c])
    }

    fn observation_dim(&self) -> usize {
        11
    }

    fn residual_dims(&self) -> Vec<usize> {
        vec![pos(EGO), vel(EGO)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> CarFollowing {
        CarFollowing::new(CarFollowingParams::default(), 0.2).unwrap()
    }

    #[test]
    fn controlled_car_moves_at_commanded_speed() {
        let e = env();
        let mut x = e.initial_state();
        x[pos(EGO)] = 0.0;
        x[vel(EGO)] = 5.0;
        x[pos(2)] = 50.0;
        let next = e.step(&x, &[2.0]).unwrap();
        assert!((next[pos(EGO)] - 0.2).abs() < 1e-15);
        assert_eq!(next[vel(EGO)], 2.0);
    }

    #[test]
    fn close_follower_brakes_proportionally_to_gap() {
        let e = env();
        let mut x = e.initial_state();
        x[pos(0)] = 100.0;
        x[pos(1)] = 20.0;
        x[vel(1)] = 3.0;
        x[pos(2)] = 15.0;
        x[vel(2)] = 3.0;
        let a = e.accelerations(&x);
        assert_eq!(a[2], -100.0);
        assert_eq!(a[1], 0.0);
    }

    #[test]
    fn distant_rear_car_cruises() {
        let e = env();
        let mut x = e.initial_state();
        x[pos(2)] = 40.0;
        x[pos(4)] = 20.0;
        x[vel(4)] = 3.0;
        assert_eq!(e.accelerations(&x)[4], 0.0);
    }

    #[test]
    fn band_bonus_at_desired_gap_and_preferred_speed() {
        let e = env();
        let x = e.initial_state();
        let next = e.step(&x, &[3.0]).unwrap();
        let mut at_target = next.clone();
        at_target[pos(2)] = at_target[pos(EGO)] + 9.5;
        let fb = e.feedback(&x, &[3.0], &at_target);
        assert_eq!(fb.reward, 1.5);
        assert_eq!(fb.cost, 0.0);
    }

    #[test]
    fn lead_speed_follows_sinusoid() {
        let e = env();
        assert_eq!(e.lead_speed(0.0), 3.0);
        assert!((e.lead_speed(std::f64::consts::FRAC_PI_2) + 1.0).abs() < 1e-12);
        let x = e.initial_state();
        let next = e.step(&x, &[3.0]).unwrap();
        assert!((next[TIME] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn barriers_are_gap_minus_delta() {
        let e = env();
        let x = e.initial_state();
        let h = e.spec().barrier_values(&x);
        assert_eq!(h, vec![8.0, 8.0]);
    }
}
