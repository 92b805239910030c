//! Barrier-Lyapunov actor-critic: a soft actor-critic learner whose policy
//! update is constrained by discrete-time control barrier functions (safety)
//! and a learned control Lyapunov function (stability) through an augmented
//! Lagrangian, with a Gaussian-process residual model and a QP backup
//! controller for states where the learned policy cannot satisfy both.

// `!(x > 0.0)` is how parameter checks reject NaN along with bad values,
// and index loops read closer to the maths in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agent;
pub mod buffer;
pub mod config;
pub mod diff;
pub mod envs;
pub mod experiment;
pub mod gp;
pub mod linalg;
pub mod mlp;
pub mod optim;
pub mod safety;
pub mod trainer;
