//! Oracle checks shared by the acceptance runner and the ordinary test files.
#![allow(dead_code)]

use blac_core::agent::losses::{self, LagrangianInputs};
use blac_core::agent::{Ablation, Agent, AgentParams, ControlBox, LyapunovView};
use blac_core::diff::{Graph, Var};
use blac_core::envs::{CarFollowing, CarFollowingParams, EnvKind, Environment, Unicycle, UnicycleParams};
use blac_core::gp::{GpParams, GpResidualModel};
use blac_core::linalg::Matrix;
use blac_core::mlp::{Activation, Mlp};
use blac_core::safety::{self, BackupParams, BackupProblem, SlackQp, ValueFunction};
use blac_core::config::{ExperimentConfig, RunConfig};
use blac_core::experiment;
use blac_core::trainer::{TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

pub fn unicycle() -> Unicycle {
    Unicycle::new(UnicycleParams::default(), 0.2).unwrap()
}

pub fn car() -> CarFollowing {
    CarFollowing::new(CarFollowingParams::default(), 0.2).unwrap()
}

/// A state somewhere in the region the agent visits.
pub fn random_state(env: &dyn Environment, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if env.spec().state_dim == 3 {
        vec![rng.gen_range(-0.5..3.0), rng.gen_range(-0.5..3.0), rng.gen_range(-3.2..3.2)]
    } else {
        let mut x = env.initial_state();
        for (i, v) in x.iter_mut().enumerate().take(10) {
            *v += if i % 2 == 0 { rng.gen_range(-4.0..4.0) } else { rng.gen_range(-2.0..2.0) };
        }
        x[10] = rng.gen_range(0.0..50.0);
        x
    }
}

pub fn random_control(env: &dyn Environment, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = env.spec();
    s.control_low.iter().zip(&s.control_high).map(|(l, h)| rng.gen_range(*l..*h)).collect()
}

fn states_matrix(env: &dyn Environment, rng: &mut ChaCha8Rng, rows: usize) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..rows).map(|_| random_state(env, rng)).collect();
    Matrix::from_rows(&rows)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-3;

/// Tape value, analytic gradient and kink margin of `f` at `params`.
fn tape_eval<F>(params: &[Matrix], f: &F) -> (f64, Vec<Matrix>, f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars);
    let grads = g.backward(root);
    let out = vars.iter().zip(params).map(|(v, p)| grads.get_or_zeros(*v, p)).collect();
    (g.scalar(root), out, g.kink_margin())
}

/// Relative error between the analytic gradient and central differences,
/// or `None` when the point sits too close to a kink to difference across.
pub fn fd_relative_error<F>(params: &[Matrix], f: F) -> Option<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let (_, analytic, margin) = tape_eval(params, &f);
    if margin < KINK_MARGIN {
        return None;
    }
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].as_mut_slice()[k] += FD_STEP;
            let mut minus = params.to_vec();
            minus[pi].as_mut_slice()[k] -= FD_STEP;
            let (fp, _, mp) = tape_eval(&plus, &f);
            let (fm, _, mm) = tape_eval(&minus, &f);
            if mp < KINK_MARGIN * 0.5 || mm < KINK_MARGIN * 0.5 {
                return None;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[pi].as_slice()[k];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    Some(diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-8))
}

fn small_net(input: usize, output: usize, out_act: Activation, rng: &mut ChaCha8Rng) -> Mlp {
    Mlp::new(&[input, 6, 6, output], Activation::Relu, out_act, rng).unwrap()
}

fn env_for(i: usize) -> Box<dyn Environment> {
    if i.is_multiple_of(2) {
        Box::new(unicycle())
    } else {
        Box::new(car())
    }
}

fn critic_instance(i: usize, rng: &mut ChaCha8Rng) -> Option<f64> {
    let env = env_for(i);
    let m = env.spec().control_dim;
    let critic = small_net(env.observation_dim() + m, 1, Activation::Identity, rng);
    let states = states_matrix(env.as_ref(), rng, 4);
    let actions = Matrix::from_vec(4, m, (0..4 * m).map(|_| rng.gen_range(-0.99..0.99)).collect()).unwrap();
    let targets: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
    fd_relative_error(critic.params(), |g, p| {
        let x = g.constant(states.clone());
        let obs = env.observe_tape(g, x);
        let a = g.constant(actions.clone());
        let q = losses::critic_value(g, &critic, p, obs, a);
        losses::mse_to_target(g, q, &targets)
    })
}

fn lyapunov_instance(i: usize, rng: &mut ChaCha8Rng) -> Option<f64> {
    let env = env_for(i);
    let mut net = small_net(env.observation_dim(), 1, Activation::Relu, rng);
    let last = net.params().len() - 1;
    net.params_mut()[last] = Matrix::scalar(1.0);
    let states = states_matrix(env.as_ref(), rng, 4);
    let targets: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..5.0)).collect();
    fd_relative_error(net.params(), |g, p| {
        let x = g.constant(states.clone());
        let obs = env.observe_tape(g, x);
        let l = net.forward(g, p, obs);
        losses::mse_to_target(g, l, &targets)
    })
}

fn alpha_instance(rng: &mut ChaCha8Rng) -> Option<f64> {
    let log_alpha = Matrix::scalar(rng.gen_range(-3.0..1.0));
    let log_prob: Vec<f64> = (0..4).map(|_| rng.gen_range(-4.0..2.0)).collect();
    let target = -(rng.gen_range(1..=2) as f64);
    fd_relative_error(&[log_alpha], |g, p| losses::alpha_loss(g, p[0], &log_prob, target))
}

fn lagrangian_instance(i: usize, rng: &mut ChaCha8Rng) -> Option<f64> {
    let env = env_for(i);
    let m = env.spec().control_dim;
    let k = env.spec().barriers.len();
    let obs = env.observation_dim();
    let policy = small_net(obs, 2 * m, Activation::Identity, rng);
    let critics = [small_net(obs + m, 1, Activation::Identity, rng), small_net(obs + m, 1, Activation::Identity, rng)];
    let mut lyap = small_net(obs, 1, Activation::Relu, rng);
    let last = lyap.params().len() - 1;
    lyap.params_mut()[last] = Matrix::scalar(1.0);
    let gp = GpResidualModel::new(&GpParams::default(), env.spec().state_dim, env.residual_dims()).unwrap();
    let states = states_matrix(env.as_ref(), rng, 4);
    let noise = normal_matrix(rng, 4, m);
    let batch = Agent::lagrangian_batch(env.as_ref(), &gp, &states, noise).unwrap();
    let lambdas: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..2.0)).collect();
    let rho: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..5.0)).collect();
    let cbox = ControlBox::new(&env.spec().control_low, &env.spec().control_high);
    let inputs = LagrangianInputs {
        critics: [&critics[0], &critics[1]],
        lyapunov: &lyap,
        alpha: rng.gen_range(0.05..0.5),
        beta: 0.1,
        lambdas: &lambdas,
        rho_lambda: &rho,
        zeta: rng.gen_range(0.0..2.0),
        rho_zeta: rng.gen_range(0.5..5.0),
        ablation: Ablation::Blac,
    };
    fd_relative_error(policy.params(), |g, p| {
        losses::augmented_lagrangian(g, env.as_ref(), &policy, p, &cbox, &inputs, &batch).value
    })
}

/// Runs `instance` until `want` non-kink instances were checked.
fn gradient_family(name: &str, want: usize, mut instance: impl FnMut(usize) -> Option<f64>) -> (bool, String) {
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    let mut i = 0;
    while checked < want && i < want * 5 {
        match instance(i) {
            Some(e) => {
                checked += 1;
                worst = worst.max(e);
            }
            None => skipped += 1,
        }
        i += 1;
    }
    let pass = checked == want && worst <= GRAD_TOL;
    (pass, format!("{name}: {checked} checked, {skipped} kink-skipped, worst rel err {worst:.2e}"))
}

pub fn gradient_oracle(instances: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut parts = Vec::new();
    let mut pass = true;
    let mut run = |name: &str, f: &mut dyn FnMut(usize, &mut ChaCha8Rng) -> Option<f64>| {
        let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
        let (ok, d) = gradient_family(name, instances, |i| f(i, &mut local));
        pass &= ok;
        parts.push(d);
    };
    run("J_Q", &mut |i, r| critic_instance(i, r));
    run("J_L", &mut |i, r| lyapunov_instance(i, r));
    run("J_alpha", &mut |_, r| alpha_instance(r));
    run("L_A", &mut |i, r| lagrangian_instance(i, r));
    Outcome::new(pass, parts.join("; "))
}

// ----------------------------------------------------------------------- QP

fn random_qp(rng: &mut ChaCha8Rng) -> SlackQp {
    let m = rng.gen_range(1..=2);
    let k = rng.gen_range(1..=3);
    let a = Matrix::from_vec(m, m, (0..m * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut q = a.transpose().matmul(&a);
    for d in 0..m {
        q[(d, d)] += rng.gen_range(0.2..2.0);
    }
    SlackQp {
        hessian: q,
        linear: (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        rows: (0..k).map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        bounds: (0..k).map(|_| rng.gen_range(-1.5..1.0)).collect(),
        slack_weights: (0..k).map(|_| rng.gen_range(1.0..10.0)).collect(),
    }
}

/// Minimum of the QP over the box `[−5, 5]^(m+k)`, on a lattice of spacing
/// `1e-3`. Each slack is eliminated exactly (`max(0, aᵀu − c)` is optimal
/// for fixed `u`), and the `u` lattice is scanned coarse-to-fine: a `1e-2`
/// pass followed by `1e-3` passes around the incumbent, re-centred until the
/// incumbent is interior. Convexity makes this equal to the full lattice.
pub fn grid_minimum(qp: &SlackQp) -> Option<f64> {
    let m = qp.linear.len();
    let value = |u: &[f64]| -> Option<f64> {
        let s = qp.best_slack(u);
        if s.iter().any(|v| *v > 5.0) {
            return None;
        }
        Some(qp.objective(u, &s))
    };
    let scan = |center: &[f64], step: f64, half: i64| -> Option<(Vec<f64>, f64, bool)> {
        let mut best: Option<(Vec<f64>, f64, bool)> = None;
        let mut idx = vec![-half; m];
        loop {
            let u: Vec<f64> =
                (0..m).map(|d| ((center[d] / step).round() + idx[d] as f64) * step).collect();
            if u.iter().all(|v| v.abs() <= 5.0 + 1e-12) {
                if let Some(f) = value(&u) {
                    if best.as_ref().is_none_or(|b| f < b.1) {
                        let edge = idx.iter().zip(&u).any(|(i, v)| i.abs() == half && v.abs() < 5.0 - step);
                        best = Some((u, f, edge));
                    }
                }
            }
            let mut d = 0;
            while d < m {
                idx[d] += 1;
                if idx[d] <= half {
                    break;
                }
                idx[d] = -half;
                d += 1;
            }
            if d == m {
                break;
            }
        }
        best
    };
    let (mut center, _, _) = scan(&vec![0.0; m], 1e-2, 500)?;
    loop {
        let (u, f, edge) = scan(&center, 1e-3, 30)?;
        if !edge {
            return Some(f);
        }
        center = u;
    }
}

pub fn qp_oracle(instances: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_gap, mut worst_viol, mut n, mut redrawn) = (0.0f64, 0.0f64, 0, 0);
    while n < instances {
        let qp = random_qp(&mut rng);
        let sol = match qp.solve() {
            Ok(s) => s,
            Err(e) => return Outcome::new(false, format!("solver error {e}")),
        };
        if sol.u.iter().chain(&sol.slack).any(|v| v.abs() > 5.0) {
            // the lattice only covers the box; draw again
            redrawn += 1;
            continue;
        }
        let Some(grid) = grid_minimum(&qp) else {
            redrawn += 1;
            continue;
        };
        worst_gap = worst_gap.max((sol.objective - grid).abs());
        for i in 0..qp.rows.len() {
            worst_viol = worst_viol.max(qp.constraint_violation(i, &sol.u, &sol.slack));
        }
        n += 1;
    }
    let pass = worst_gap <= 1e-4 && worst_viol <= 1e-8;
    Outcome::new(
        pass,
        format!("{n} instances ({redrawn} redrawn outside box): max |obj − grid| {worst_gap:.2e}, max violation {worst_viol:.2e}"),
    )
}

// ----------------------------------------------------------------------- GP

fn se(a: &[f64], b: &[f64], sf2: f64, l: f64) -> f64 {
    let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    sf2 * (-0.5 * r2 / (l * l)).exp()
}

pub fn gp_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_two = 0.0f64;
    for _ in 0..100 {
        let p = GpParams {
            signal_var: rng.gen_range(0.5..2.0),
            length_scale: rng.gen_range(0.3..2.0),
            noise_var: rng.gen_range(1e-4..0.1),
            ..GpParams::default()
        };
        let mut gp = GpResidualModel::new(&p, 3, vec![0, 2]).unwrap();
        let xs: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        gp.fit(&[(xs[0].clone(), ys[0].clone()), (xs[1].clone(), ys[1].clone())]).unwrap();
        let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let pred = gp.predict(&q).unwrap();
        // [a b; b d]⁻¹ = [d −b; −b a] / (ad − b²)
        let a = se(&xs[0], &xs[0], p.signal_var, p.length_scale) + p.noise_var;
        let d = se(&xs[1], &xs[1], p.signal_var, p.length_scale) + p.noise_var;
        let b = se(&xs[0], &xs[1], p.signal_var, p.length_scale);
        let det = a * d - b * b;
        let k = [se(&q, &xs[0], p.signal_var, p.length_scale), se(&q, &xs[1], p.signal_var, p.length_scale)];
        let w = [(d * k[0] - b * k[1]) / det, (a * k[1] - b * k[0]) / det];
        let var = p.signal_var - (k[0] * w[0] + k[1] * w[1]);
        for dim in [0, 2] {
            let mean = w[0] * ys[0][dim] + w[1] * ys[1][dim];
            worst_two = worst_two.max((pred.mean[dim] - mean).abs());
            worst_two = worst_two.max((pred.variance[dim] - var).abs());
        }
        worst_two = worst_two.max(pred.mean[1].abs()).max(pred.variance[1].abs());
    }

    let p = GpParams { noise_var: 0.0, length_scale: 0.5, ..GpParams::default() };
    let mut gp = GpResidualModel::new(&p, 3, vec![0, 1, 2]).unwrap();
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..30)
        .map(|_| {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y = vec![x[0].sin(), x[1] * x[2], -0.1 * x[2].cos()];
            (x, y)
        })
        .collect();
    gp.fit(&pairs).unwrap();
    let mut worst_interp = 0.0f64;
    for (x, y) in &pairs {
        let m = gp.mean(x).unwrap();
        for d in 0..3 {
            worst_interp = worst_interp.max((m[d] - y[d]).abs());
        }
    }
    let mut worst_var_excess = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let q: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let pred = gp.predict(&q).unwrap();
        for v in pred.variance {
            worst_var_excess = worst_var_excess.max(v - p.signal_var);
        }
    }
    let pass = worst_two <= 1e-8 && worst_interp <= 1e-6 && worst_var_excess <= 0.0;
    Outcome::new(
        pass,
        format!(
            "two-point max err {worst_two:.2e}; interpolation max err {worst_interp:.2e}; max(var − prior) {worst_var_excess:.2e}"
        ),
    )
}

// ------------------------------------------------------ constraint equivalence

/// Barrier value from the geometry alone, without the library's evaluator.
fn hand_barrier(env: &dyn Environment, i: usize, x: &[f64]) -> f64 {
    if env.spec().state_dim == 3 {
        let p = UnicycleParams::default();
        let c = p.obstacles[i];
        let px = x[0] + p.lookahead * x[2].cos();
        let py = x[1] + p.lookahead * x[2].sin();
        0.5 * ((px - c[0]).powi(2) + (py - c[1]).powi(2) - p.delta * p.delta)
    } else {
        let delta = CarFollowingParams::default().delta;
        // car 3 − car 4, then car 4 − car 5
        if i == 0 {
            x[4] - x[6] - delta
        } else {
            x[6] - x[8] - delta
        }
    }
}

pub fn constraint_equivalence(pairs: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, env) in [("unicycle", env_for(0)), ("car", env_for(1))] {
        let params = AgentParams { hidden: vec![16, 16], ..AgentParams::default() };
        let agent = Agent::new(env.as_ref(), params, Ablation::Blac, &mut rng).unwrap();
        let lyap = agent.lyapunov_view(env.as_ref());
        let gp = GpResidualModel::new(&GpParams::default(), env.spec().state_dim, env.residual_dims()).unwrap();
        let beta = 0.1;
        let (mut mismatches, mut holds, mut fails) = (0, 0, 0);
        for _ in 0..pairs {
            let x = random_state(env.as_ref(), &mut rng);
            let u = random_control(env.as_ref(), &mut rng);
            let res = safety::constraint_residuals(env.as_ref(), &gp, Some(&lyap), &x, &u, beta).unwrap();
            let pred = &res.predicted;
            for (i, b) in env.spec().barriers.iter().enumerate() {
                let (h0, h1) = (hand_barrier(env.as_ref(), i, &x), hand_barrier(env.as_ref(), i, pred));
                let inequality = h1 - h0 >= -b.eta * h0;
                if inequality {
                    holds += 1;
                } else {
                    fails += 1;
                }
                if (res.cbf[i] == 0.0) != inequality {
                    mismatches += 1;
                }
            }
            let (l0, l1) = (lyap.value(&x), lyap.value(pred));
            let inequality = l1 - l0 <= -beta * l0;
            if (res.clf.unwrap() == 0.0) != inequality {
                mismatches += 1;
            }
            if inequality {
                holds += 1;
            } else {
                fails += 1;
            }
        }
        pass &= mismatches == 0 && holds > 0 && fails > 0;
        parts.push(format!("{name}: {pairs} pairs, {mismatches} mismatches ({holds} hold, {fails} violated)"));
    }
    Outcome::new(pass, parts.join("; "))
}

// ------------------------------------------------------ backup invariance

/// Steers the lookahead point straight at `target` at full speed.
fn go_to(x: &[f64], target: [f64; 2]) -> Vec<f64> {
    let p = UnicycleParams::default();
    let heading = (target[1] - x[1]).atan2(target[0] - x[0]);
    let mut err = heading - x[2];
    while err > std::f64::consts::PI {
        err -= 2.0 * std::f64::consts::PI;
    }
    while err < -std::f64::consts::PI {
        err += 2.0 * std::f64::consts::PI;
    }
    vec![p.v_max, (4.0 * err).clamp(-p.omega_max, p.omega_max)]
}

/// GP fitted on 100 true unicycle residuals, with its prior scale matched
/// to the data (the mean squared residual).
pub fn pretrained_unicycle_gp(env: &Unicycle, rng: &mut ChaCha8Rng) -> (GpParams, GpResidualModel) {
    let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..100)
        .map(|_| {
            let x = random_state(env, rng);
            let u = random_control(env, rng);
            let next = env.step(&x, &u).unwrap();
            let nominal = env.nominal_step(&x, &u);
            (x, next.iter().zip(&nominal).map(|(a, b)| a - b).collect())
        })
        .collect();
    let dims = env.residual_dims();
    let power = samples.iter().flat_map(|(_, r)| dims.iter().map(move |&d| r[d] * r[d])).sum::<f64>()
        / (samples.len() * dims.len()) as f64;
    let params = GpParams { signal_var: power, noise_var: 1e-4 * power, ..GpParams::default() };
    let mut gp = GpResidualModel::new(&params, 3, dims).unwrap();
    gp.fit(&samples).unwrap();
    (params, gp)
}

/// Drives the unicycle through the obstacle field for `steps` steps with
/// every control passing through the backup QP, from several starts whose
/// nominal controller aims at an obstacle. Returns the lowest barrier value
/// seen, the bound `−0.05·δ²` and the number of QP failures.
pub fn backup_trajectory_min(steps: usize, params: &BackupParams) -> (f64, f64, usize) {
    let env = unicycle();
    let p = env.params().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (_, gp) = pretrained_unicycle_gp(&env, &mut rng);
    let agent = Agent::new(&env, AgentParams::default(), Ablation::Blac, &mut rng).unwrap();
    let lyap: LyapunovView<'_> = agent.lyapunov_view(&env);
    let problem = BackupProblem::from_params(params, 2, p.obstacles.len()).unwrap();

    let starts = [([0.0, 0.0, 0.0], p.obstacles[0]), ([2.4, 0.4, 1.6], p.obstacles[2]), ([1.0, 2.6, -0.5], p.obstacles[1])];
    let mut min_h = f64::INFINITY;
    let mut fallbacks = 0;
    for (start, target) in starts {
        let mut x = start.to_vec();
        for t in 0..steps {
            // aim at the obstacle for the first half, then at the far corner through the field
            let aim = if t < steps / 2 { target } else { [3.0 - target[0], 3.0 - target[1]] };
            let nominal = go_to(&x, aim);
            let u = match problem.solve(&env, &gp, &lyap, &x, &nominal) {
                Ok(s) => s.u_actual,
                Err(_) => {
                    fallbacks += 1;
                    env.spec().clip_control(&nominal)
                }
            };
            x = env.step(&x, &u).unwrap();
            min_h = env.spec().barrier_values(&x).into_iter().fold(min_h, f64::min);
        }
    }
    (min_h, -0.05 * p.delta * p.delta, fallbacks)
}

/// The trainer with its trigger forced on, so every step goes through the
/// backup controller with the configured nominal control.
pub fn forced_backup_run_min(steps: usize) -> f64 {
    let env = unicycle();
    let mut rng = ChaCha8Rng::seed_from_u64(506);
    let (gp_params, gp) = pretrained_unicycle_gp(&env, &mut rng);
    let mut cfg = TrainConfig::default();
    cfg.env.kind = EnvKind::Unicycle;
    cfg.gp = gp_params;
    let mut t = Trainer::new(cfg, 0).unwrap();
    t.gp = gp;
    t.force_backup = true;
    t.learning = false;
    let mut x = t.reset();
    let mut min_h = f64::INFINITY;
    for _ in 0..steps {
        let rec = t.train_step(&x).unwrap();
        assert!(rec.backup);
        min_h = env.spec().barrier_values(&rec.next_state).into_iter().fold(min_h, f64::min);
        x = rec.next_state;
    }
    min_h
}

pub fn backup_invariance() -> Outcome {
    let (aimed, bound, fallbacks) = backup_trajectory_min(500, &BackupParams::default());
    let forced = forced_backup_run_min(500);
    Outcome::new(
        aimed >= bound && forced >= bound,
        format!(
            "min h {aimed:.5} over 3×500 steps aimed at obstacles ({fallbacks} QP fallbacks), {forced:.5} with the trigger forced on; bound {bound:.5}"
        ),
    )
}

// ------------------------------------------------------------- invariants

pub type Check = Result<String, String>;

type Trace = Vec<(Vec<f64>, Vec<f64>, f64)>;
type NamedCheck = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// A short car-following configuration with small networks.
pub fn quick_config(ablation: Ablation, episodes: usize, len: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.env.kind = EnvKind::CarFollowing;
    c.env.car_following.episode_len = len;
    c.train.episodes = episodes;
    c.train.batch_size = 16;
    c.train.ablation = ablation;
    c.agent.hidden = vec![16, 16];
    // fast penalty growth so the cap is reached inside a short run
    c.agent.rho_growth = 1.05;
    c.agent.rho_max = 20.0;
    c
}

/// λ, ζ and ρ never decrease, stay nonnegative, and ρ never passes its cap,
/// across every update of a short run.
pub fn multipliers_monotone() -> Check {
    let cfg = quick_config(Ablation::Blac, 2, 120);
    let cap = cfg.agent.rho_max;
    let mut t = Trainer::new(cfg, 7).map_err(|e| e.to_string())?;
    let mut prev = t.agent.lagrangian.clone();
    let mut updates = 0;
    for _ in 0..2 {
        let mut x = t.reset();
        for _ in 0..120 {
            let rec = t.train_step(&x).map_err(|e| e.to_string())?;
            let cur = t.agent.lagrangian.clone();
            let pairs = cur.lambdas.iter().zip(&prev.lambdas).chain(cur.rho_lambda.iter().zip(&prev.rho_lambda));
            for (a, b) in pairs.chain([(&cur.zeta, &prev.zeta), (&cur.rho_zeta, &prev.rho_zeta)]) {
                ensure(a >= b && *a >= 0.0, || format!("multiplier went from {b} to {a}"))?;
            }
            for rho in cur.rho_lambda.iter().chain([&cur.rho_zeta]) {
                ensure(*rho <= cap, || format!("penalty {rho} above cap {cap}"))?;
            }
            updates += usize::from(rec.updated);
            prev = cur;
            x = rec.next_state;
        }
    }
    ensure(prev.rho_zeta == cap, || format!("cap never reached: ρ_ζ = {}", prev.rho_zeta))?;
    Ok(format!("{updates} updates, ρ capped at {cap}"))
}

/// The Lyapunov net is nonnegative everywhere we look, before and after
/// training.
pub fn lyapunov_nonnegative() -> Check {
    let mut t = Trainer::new(quick_config(Ablation::Blac, 2, 80), 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut lowest = f64::INFINITY;
    for round in 0..2 {
        if round == 1 {
            t.run(|_, _| Ok(())).map_err(|e| e.to_string())?;
        }
        let env = t.env();
        let view = t.agent.lyapunov_view(env);
        for _ in 0..500 {
            let x = random_state(env, &mut rng);
            lowest = lowest.min(view.value(&x));
        }
    }
    ensure(lowest >= 0.0, || format!("L = {lowest}"))?;
    Ok(format!("min L over 1000 states {lowest:.3e}"))
}

/// Every control the policy emits lies inside the box, including under
/// extreme noise and after training.
pub fn actions_in_box() -> Check {
    let mut checked = 0;
    for (env, seed) in [(env_for(0), 1u64), (env_for(1), 2)] {
        let spec = env.spec().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent = Agent::new(env.as_ref(), AgentParams { hidden: vec![16, 16], ..AgentParams::default() }, Ablation::Blac, &mut rng)
            .map_err(|e| e.to_string())?;
        for _ in 0..500 {
            let x = random_state(env.as_ref(), &mut rng);
            let noise: Vec<f64> = (0..spec.control_dim).map(|_| rng.gen_range(-50.0..50.0)).collect();
            for u in [agent.act_with_noise(env.as_ref(), &x, &noise), agent.act_deterministic(env.as_ref(), &x)] {
                ensure(spec.check_control(&u).is_ok(), || format!("{u:?} outside the box"))?;
                checked += 1;
            }
        }
    }
    let mut t = Trainer::new(quick_config(Ablation::Blac, 2, 100), 5).map_err(|e| e.to_string())?;
    for _ in 0..2 {
        let mut x = t.reset();
        for _ in 0..100 {
            let rec = t.train_step(&x).map_err(|e| e.to_string())?;
            ensure(t.env().spec().check_control(&rec.control).is_ok(), || format!("{:?} applied", rec.control))?;
            checked += 1;
            x = rec.next_state;
        }
    }
    Ok(format!("{checked} controls inside the box"))
}

/// Two trainers with the same seed produce identical step records; a
/// different seed does not.
pub fn replay_determinism() -> Check {
    let cfg = quick_config(Ablation::Blac, 1, 60);
    let trace = |seed: u64| -> Result<Trace, String> {
        let mut t = Trainer::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
        let mut x = t.reset();
        let mut out = Vec::new();
        for _ in 0..60 {
            let rec = t.train_step(&x).map_err(|e| e.to_string())?;
            out.push((rec.control.clone(), rec.next_state.clone(), rec.reward));
            x = rec.next_state;
        }
        Ok(out)
    };
    let (a, b, c) = (trace(4)?, trace(4)?, trace(5)?);
    ensure(a == b, || "same seed diverged".into())?;
    ensure(a != c, || "different seeds gave the same trace".into())?;
    Ok(format!("{} identical steps", a.len()))
}

/// Stochastic evaluation of a checkpoint replays the trainer's episode when
/// nothing was learned (batch larger than the episode) and the seed matches.
pub fn eval_replays_training() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = quick_config(Ablation::Sac, 1, 50);
    cfg.train.batch_size = 1000;
    let mut t = Trainer::new(cfg, 8).map_err(|e| e.to_string())?;
    let trained = t.run(|_, _| Ok(())).map_err(|e| e.to_string())?;
    ensure(t.agent.updates() == 0, || "trainer updated".into())?;
    let ckpt = dir.path().join("ckpt");
    experiment::save_checkpoint(&t, &ckpt).map_err(|e| e.to_string())?;
    let eval = experiment::eval_policy(&ckpt, 1, false, Some(dir.path())).map_err(|e| e.to_string())?;
    let (r_train, r_eval) = (trained[0].reward, eval.per_seed[0].1[0].reward);
    ensure(r_train == r_eval, || format!("train reward {r_train} vs eval {r_eval}"))?;
    let det1 = experiment::eval_policy(&ckpt, 2, true, Some(dir.path())).map_err(|e| e.to_string())?;
    let det2 = experiment::eval_policy(&ckpt, 2, true, Some(dir.path())).map_err(|e| e.to_string())?;
    ensure(det1 == det2, || "deterministic evaluations differ".into())?;
    Ok(format!("episode reward {r_train:.4} replayed exactly"))
}

/// Running the same experiment config twice yields byte-identical metric
/// files.
pub fn seed_reproducibility() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let cfg = ExperimentConfig {
            run: RunConfig { out_dir: root.path().join(run), seeds: vec![1, 2], ..RunConfig::default() },
            train: quick_config(Ablation::Blac, 3, 40),
        };
        experiment::run_experiment(&cfg).map_err(|e| e.to_string())?;
        let mut files = Vec::new();
        for name in ["seed_1.csv", "seed_2.csv", "summary.csv"] {
            files.push(std::fs::read(cfg.run.out_dir.join(name)).map_err(|e| e.to_string())?);
        }
        bytes.push(files);
    }
    ensure(bytes[0] == bytes[1], || "metric files differ between identical runs".into())?;
    Ok("2 seeds × 3 episodes reproduced byte for byte".into())
}

pub fn invariant_suite() -> Outcome {
    let checks: [NamedCheck; 6] = [
        ("multipliers", multipliers_monotone),
        ("lyapunov", lyapunov_nonnegative),
        ("action box", actions_in_box),
        ("replay", replay_determinism),
        ("eval replay", eval_replays_training),
        ("reproducibility", seed_reproducibility),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, f) in checks {
        match f() {
            Ok(d) => parts.push(format!("{name} ok ({d})")),
            Err(e) => {
                pass = false;
                parts.push(format!("{name} FAILED: {e}"));
            }
        }
    }
    Outcome::new(pass, parts.join("; "))
}
