#![allow(dead_code)]

use pbsd_lab::policy::{Backend, PolicyParams};
use pbsd_lab::tasks::{generate_task, TaskConfig, TaskInstance};
use pbsd_lab::trainer::{Method, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-6;
/// Components below this magnitude are dominated by rounding in the difference
/// quotient and are compared absolutely against [`FD_ABS_TOL`].
pub const FD_SMALL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-9;

#[derive(Debug)]
pub struct FdCheck {
    pub checked: usize,
    pub significant: usize,
    pub max_rel_err: f64,
    pub max_abs_err_small: f64,
}

impl FdCheck {
    pub fn passes(&self) -> bool {
        self.max_rel_err <= FD_REL_TOL && self.max_abs_err_small <= FD_ABS_TOL
    }
}

/// Central differences of `sum_k f(theta, k)` on `coords`, compared with `analytic`.
/// Each term is differenced separately so terms untouched by a coordinate cancel exactly.
pub fn fd_check(
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
    terms: usize,
    f: impl Fn(&[f64], usize) -> f64,
) -> FdCheck {
    let mut out = FdCheck { checked: 0, significant: 0, max_rel_err: 0.0, max_abs_err_small: 0.0 };
    let mut up = theta.to_vec();
    let mut down = theta.to_vec();
    for &i in coords {
        up[i] = theta[i] + FD_STEP;
        down[i] = theta[i] - FD_STEP;
        let diff: f64 = (0..terms).map(|k| f(&up, k) - f(&down, k)).sum();
        up[i] = theta[i];
        down[i] = theta[i];
        let numeric = diff / (2.0 * FD_STEP);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        out.checked += 1;
        if scale >= FD_SMALL {
            out.significant += 1;
            out.max_rel_err = out.max_rel_err.max((a - numeric).abs() / scale);
        } else {
            out.max_abs_err_small = out.max_abs_err_small.max((a - numeric).abs());
        }
    }
    out
}

pub fn small_task(seed: u64, num_prompts: usize) -> TaskInstance {
    let cfg = TaskConfig { num_prompts, ..TaskConfig::default() };
    generate_task(seed, &cfg).unwrap()
}

/// Parameters with O(1) Gaussian entries so gradients are far from degenerate.
pub fn random_params(task: &TaskInstance, backend: Backend, seed: u64, scale: f64) -> PolicyParams<f64> {
    let mut params = PolicyParams::for_task(backend, task).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).unwrap();
    params.theta.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
    params
}

pub fn with_theta(params: &PolicyParams<f64>, theta: &[f64]) -> PolicyParams<f64> {
    PolicyParams { backend: params.backend, shape: params.shape, theta: theta.to_vec() }
}

pub fn random_response(rng: &mut impl Rng, task: &TaskInstance) -> Vec<usize> {
    (0..task.response_length).map(|_| rng.random_range(0..task.vocab_size())).collect()
}

/// The reference PBSD configuration on the keyed-substitution task.
pub fn golden_config() -> TrainConfig {
    TrainConfig { run_seed: 7, ..TrainConfig::new(Method::Pbsd, 7) }
}

/// A few-step config for tests that only need the loop to run.
pub fn quick_config(method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        steps: 20,
        eval_every: 5,
        batch_size: 8,
        run_seed: seed,
        task: TaskConfig { num_prompts: 4, ..TaskConfig::default() },
        ..TrainConfig::new(method, seed)
    }
}
