//! Exact reward-regularized objective, its reward-tilted optimum, and checks.
//!
//! For a fixed prompt with teacher distribution `t`, reward vector `r` and
//! `beta > 0`, the objective `F(p) = E_p[r] - beta * KL(p || t)` is maximized by
//! `p*_i = t_i exp(r_i / beta) / Z` with `Z = sum_j t_j exp(r_j / beta)`, and
//! `F(p*) = beta * log Z >= E_t[r] = F(t)`. Everything here works on explicit
//! probability vectors over an enumerated response space.

pub mod simplex;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::rng::{stream_rng, Stream};
use crate::scalar::{l1_distance, log_sum_exp, Scalar};

/// Reward variance on the teacher support above which Jensen's inequality is strict.
pub const STRICT_VARIANCE_THRESHOLD: f64 = 1e-18;
pub const OPTIMUM_L1_TOL: f64 = 1e-6;
pub const OPTIMUM_F_TOL: f64 = 1e-9;
pub const IMPROVEMENT_TOL: f64 = 1e-12;
pub const IMPLIED_REWARD_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TiltedTarget<S> {
    pub prompt: Option<usize>,
    pub probs: Vec<S>,
    pub z: S,
    pub log_z: S,
    pub beta: S,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveReport<S> {
    pub f_value: S,
    pub expected_reward: S,
    pub kl_term: S,
    pub beta: S,
}

fn normalization_tol<S: Scalar>(n: usize) -> S {
    S::lit(1e-9).max(S::epsilon() * S::from_usize(4 * n.max(1)).unwrap())
}

fn check_distribution<S: Scalar>(name: &str, p: &[S]) -> Result<()> {
    if p.iter().any(|&v| !v.is_finite() || v < S::zero()) {
        return Err(LabError::Domain(format!("{name} has negative or non-finite entries")));
    }
    let total: S = p.iter().copied().sum();
    if (total - S::one()).abs() > normalization_tol::<S>(p.len()) {
        return Err(LabError::Domain(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

fn check_beta<S: Scalar>(beta: S) -> Result<()> {
    if !(beta > S::zero() && beta.is_finite()) {
        return Err(LabError::Config(format!("beta must be > 0, got {beta}")));
    }
    Ok(())
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(LabError::Domain(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// `KL(p || q)` with `0 log 0 = 0`.
pub fn kl_divergence<S: Scalar>(p: &[S], q: &[S]) -> Result<S> {
    check_lengths(p.len(), q.len())?;
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    let mut total = S::zero();
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > S::zero() {
            if qi <= S::zero() {
                return Err(LabError::Domain(format!("p[{i}] = {pi} > 0 but q[{i}] = 0")));
            }
            total = total + pi * (pi / qi).ln();
        }
    }
    Ok(total)
}

/// Half the L1 distance.
pub fn total_variation<S: Scalar>(p: &[S], q: &[S]) -> S {
    l1_distance(p, q) * S::lit(0.5)
}

/// Reward-tilted teacher distribution, computed in log space.
pub fn tilted_policy<S: Scalar>(teacher: &[S], rewards: &[S], beta: S) -> Result<TiltedTarget<S>> {
    check_beta(beta)?;
    check_lengths(teacher.len(), rewards.len())?;
    check_distribution("teacher", teacher)?;
    let log_w: Vec<S> = teacher
        .iter()
        .zip(rewards)
        .map(|(&t, &r)| if t > S::zero() { t.ln() + r / beta } else { S::neg_infinity() })
        .collect();
    let log_z = log_sum_exp(&log_w);
    let probs = log_w.iter().map(|&lw| (lw - log_z).exp()).collect();
    Ok(TiltedTarget { prompt: None, probs, z: log_z.exp(), log_z, beta })
}

/// `F = E_candidate[r] - beta * KL(candidate || teacher)`.
pub fn objective_f<S: Scalar>(candidate: &[S], teacher: &[S], rewards: &[S], beta: S) -> Result<ObjectiveReport<S>> {
    check_lengths(candidate.len(), rewards.len())?;
    let kl_term = kl_divergence(candidate, teacher)?;
    let expected_reward: S = candidate.iter().zip(rewards).map(|(&p, &r)| p * r).sum();
    Ok(ObjectiveReport { f_value: expected_reward - beta * kl_term, expected_reward, kl_term, beta })
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimumReport {
    pub trials: usize,
    pub max_l1: f64,
    /// `max_trials F(found) - F(tilted)`; positive means the oracle beat the closed form.
    pub f_gap: f64,
    pub max_residual: f64,
    pub converged: bool,
    pub pass: bool,
}

/// Maximizes `F` numerically from `trials` random interior starts and
/// compares every maximizer with [`tilted_policy`].
pub fn verify_tilted_optimum<S: Scalar>(teacher: &[S], rewards: &[S], beta: S, trials: usize, seed: u64) -> Result<OptimumReport> {
    let tilted = tilted_policy(teacher, rewards, beta)?;
    let f_star = objective_f(&tilted.probs, teacher, rewards, beta)?.f_value;

    let support: Vec<usize> = (0..teacher.len()).filter(|&i| teacher[i] > S::zero()).collect();
    let t: Vec<S> = support.iter().map(|&i| teacher[i]).collect();
    let r: Vec<S> = support.iter().map(|&i| rewards[i]).collect();
    let n = support.len();

    let mut rng = stream_rng(seed, Stream::Instance, &[0x5052_4f50]);
    let gamma = Gamma::new(1.0, 1.0).expect("valid gamma");
    let mut max_l1 = 0.0f64;
    let mut best_f = f64::NEG_INFINITY;
    let mut max_residual = 0.0f64;
    for _ in 0..trials.max(1) {
        let raw: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = raw.iter().sum();
        let start: Vec<S> = raw.iter().map(|&g| S::lit(0.5 * g / total + 0.5 / n as f64)).collect();
        let found = simplex::maximize(&start, &t, &r, beta);
        let mut full = vec![S::zero(); teacher.len()];
        for (&i, &v) in support.iter().zip(&found.point) {
            full[i] = v;
        }
        max_l1 = max_l1.max(l1_distance(&full, &tilted.probs).as_f64());
        best_f = best_f.max(objective_f(&full, teacher, rewards, beta)?.f_value.as_f64());
        max_residual = max_residual.max(found.residual.as_f64());
    }
    let f_gap = best_f - f_star.as_f64();
    let converged = max_residual <= 1e-9;
    Ok(OptimumReport {
        trials: trials.max(1),
        max_l1,
        f_gap,
        max_residual,
        converged,
        pass: converged && max_l1 <= OPTIMUM_L1_TOL && f_gap <= OPTIMUM_F_TOL,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ImprovementReport {
    /// `F(tilted) - F(teacher) = beta log Z - E_teacher[r]`.
    pub gap: f64,
    pub strict_expected: bool,
    pub pass: bool,
}

/// Reward variance under `teacher`, restricted to its support.
pub fn support_reward_variance<S: Scalar>(teacher: &[S], rewards: &[S]) -> S {
    let mean: S = teacher.iter().zip(rewards).map(|(&t, &r)| t * r).sum();
    teacher
        .iter()
        .zip(rewards)
        .filter(|(&t, _)| t > S::zero())
        .map(|(&t, &r)| t * (r - mean) * (r - mean))
        .sum()
}

pub fn verify_teacher_improvement<S: Scalar>(teacher: &[S], rewards: &[S], beta: S) -> Result<ImprovementReport> {
    check_beta(beta)?;
    check_lengths(teacher.len(), rewards.len())?;
    check_distribution("teacher", teacher)?;
    let mean: S = teacher.iter().zip(rewards).map(|(&t, &r)| t * r).sum();
    // beta log Z - mean, with the mean pulled inside the exponent
    let shifted: Vec<S> = teacher
        .iter()
        .zip(rewards)
        .map(|(&t, &r)| if t > S::zero() { t.ln() + (r - mean) / beta } else { S::neg_infinity() })
        .collect();
    let gap = (beta * log_sum_exp(&shifted)).as_f64();
    let strict_expected = support_reward_variance(teacher, rewards).as_f64() > STRICT_VARIANCE_THRESHOLD;
    let pass = gap >= -IMPROVEMENT_TOL && if strict_expected { gap > IMPROVEMENT_TOL } else { gap <= IMPROVEMENT_TOL };
    Ok(ImprovementReport { gap, strict_expected, pass })
}

/// `beta log(optimal / teacher)` on the teacher support, zero elsewhere.
pub fn implied_reward_uncentered<S: Scalar>(optimal: &[S], teacher: &[S], beta: S) -> Result<Vec<S>> {
    check_beta(beta)?;
    check_lengths(optimal.len(), teacher.len())?;
    optimal
        .iter()
        .zip(teacher)
        .enumerate()
        .map(|(i, (&o, &t))| match (o > S::zero(), t > S::zero()) {
            (true, true) => Ok(beta * (o / t).ln()),
            (false, false) => Ok(S::zero()),
            _ => Err(LabError::Domain(format!("supports differ at index {i}"))),
        })
        .collect()
}

/// Subtracts the unweighted mean over the support mask.
pub fn center_on_support<S: Scalar>(values: &[S], support: &[S]) -> Vec<S> {
    let count = support.iter().filter(|&&t| t > S::zero()).count();
    if count == 0 {
        return values.to_vec();
    }
    let mean = values
        .iter()
        .zip(support)
        .filter(|(_, &t)| t > S::zero())
        .map(|(&v, _)| v)
        .sum::<S>()
        / S::from_usize(count).unwrap();
    values
        .iter()
        .zip(support)
        .map(|(&v, &t)| if t > S::zero() { v - mean } else { S::zero() })
        .collect()
}

/// Reward recovered from an optimum, centered to zero mean on the support.
pub fn implied_reward<S: Scalar>(optimal: &[S], teacher: &[S], beta: S) -> Result<Vec<S>> {
    let raw = implied_reward_uncentered(optimal, teacher, beta)?;
    Ok(center_on_support(&raw, teacher))
}

/// A random verification instance.
#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub teacher: Vec<f64>,
    pub rewards: Vec<f64>,
    pub beta: f64,
}

pub const INSTANCE_BETAS: [f64; 3] = [0.1, 0.5, 1.0];

/// Teacher from softmax of Gaussian logits, rewards uniform in `[-1, 1]`.
/// Every fifth seed gets a constant reward and every seventh a teacher with
/// zero-mass entries.
pub fn random_instance(seed: u64, max_size: usize) -> Instance {
    let mut rng = stream_rng(seed, Stream::Instance, &[]);
    let n = rng.random_range(2..=max_size.max(2));
    let normal = rand_distr::StandardNormal;
    let logits: Vec<f64> = (0..n).map(|_| 1.5 * Distribution::<f64>::sample(&normal, &mut rng)).collect();
    let mut teacher: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
    if seed % 7 == 3 && n > 2 {
        for i in (0..n).step_by(3).skip(1) {
            teacher[i] = 0.0;
        }
    }
    let total: f64 = teacher.iter().sum();
    teacher.iter_mut().for_each(|t| *t /= total);
    let rewards = if seed.is_multiple_of(5) {
        let c = rng.random_range(-1.0..=1.0);
        vec![c; n]
    } else {
        (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()
    };
    let beta = INSTANCE_BETAS[(seed % 3) as usize];
    Instance { seed, teacher, rewards, beta }
}

/// One line of the `verify` output.
#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub check: &'static str,
    pub instance_seed: u64,
    pub gap: f64,
    pub max_l1: Option<f64>,
    pub pass: bool,
}

/// Random starts used per instance by [`check_instance`].
pub const OPTIMUM_TRIALS: usize = 2;

/// Closed-form optimum, improvement gap and reward recovery on one instance.
pub fn check_instance(inst: &Instance) -> Result<[CheckLine; 3]> {
    let optimum = verify_tilted_optimum(&inst.teacher, &inst.rewards, inst.beta, OPTIMUM_TRIALS, inst.seed)?;
    let improvement = verify_teacher_improvement(&inst.teacher, &inst.rewards, inst.beta)?;
    let tilted = tilted_policy(&inst.teacher, &inst.rewards, inst.beta)?;
    let recovered = implied_reward(&tilted.probs, &inst.teacher, inst.beta)?;
    let truth = center_on_support(&inst.rewards, &inst.teacher);
    let recovery_err = recovered.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok([
        CheckLine { check: "tilted_optimum", instance_seed: inst.seed, gap: optimum.f_gap, max_l1: Some(optimum.max_l1), pass: optimum.pass },
        CheckLine { check: "teacher_improvement", instance_seed: inst.seed, gap: improvement.gap, max_l1: None, pass: improvement.pass },
        CheckLine { check: "implied_reward", instance_seed: inst.seed, gap: recovery_err, max_l1: None, pass: recovery_err <= IMPLIED_REWARD_TOL },
    ])
}
