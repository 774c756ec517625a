//! Synthetic pairwise-MLE rate experiment.
//!
//! Pairs are represented directly by their gap features `x_i`, so the margin
//! of a linear-logit policy family is `beta <x_i, theta>`. Outcomes follow the
//! Bradley-Terry probability at a planted `theta*`; a pair whose outcome
//! prefers the second response is stored with its gap negated. The MLE is
//! fitted by Newton's method on the convex negative log-likelihood.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{information_from_gaps, min_eigenvalue};
use crate::error::{LabError, Result};
use crate::losses::{curvature_weight, sigmoid, softplus};
use crate::rng::{stream_rng, LabRng, Stream};
use crate::scalar::{dot, l2_norm};

pub const MAX_DIM: usize = 20;
pub const SLOPE_BAND: (f64, f64) = (-0.65, -0.35);
pub const GRADIENT_TOL: f64 = 1e-10;
const NEWTON_MAX_ITERATIONS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// Gap features spread over all directions.
    Rich,
    /// Gap features concentrated near a low-dimensional subspace.
    Narrow,
}

impl Design {
    pub fn name(self) -> &'static str {
        match self {
            Design::Rich => "rich",
            Design::Narrow => "narrow",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateConfig {
    pub dim: usize,
    pub n_grid: Vec<usize>,
    pub beta: f64,
    pub design: Design,
    pub seeds: usize,
    /// Dimension of the identified subspace in the narrow design.
    pub narrow_rank: usize,
    /// Scale of the isotropic noise added to narrow-design features.
    pub narrow_noise: f64,
    pub theta_norm: f64,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            n_grid: (7..=14).map(|k| 1usize << k).collect(),
            beta: 1.0,
            design: Design::Rich,
            seeds: 16,
            narrow_rank: 3,
            narrow_noise: 0.05,
            theta_norm: 1.0,
        }
    }
}

impl RateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(LabError::Config(format!("dim must be in 1..={MAX_DIM}, got {}", self.dim)));
        }
        if self.n_grid.is_empty() || self.n_grid[0] == 0 {
            return Err(LabError::Config("n_grid must be non-empty with positive sizes".into()));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LabError::Config("n_grid must be strictly ascending".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LabError::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.seeds == 0 {
            return Err(LabError::Config("seeds must be >= 1".into()));
        }
        if self.narrow_rank == 0 || self.narrow_rank > self.dim {
            return Err(LabError::Config("narrow_rank must be in 1..=dim".into()));
        }
        if !(self.narrow_noise > 0.0 && self.narrow_noise.is_finite()) {
            return Err(LabError::Config("narrow_noise must be > 0".into()));
        }
        if !(self.theta_norm > 0.0 && self.theta_norm.is_finite()) {
            return Err(LabError::Config("theta_norm must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub n: usize,
    pub seed: u64,
    pub error_l2: f64,
    pub lambda_min: f64,
    pub design: Design,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateOutcome {
    pub design: Design,
    /// Ordered by `n`, then seed.
    pub records: Vec<RateRecord>,
    /// `(n, mean error over seeds)`.
    pub mean_errors: Vec<(usize, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub band_pass: bool,
    /// Median over seeds and consecutive grid points of `error(n_next) / error(n)`.
    pub median_doubling_ratio: f64,
}

#[derive(Serialize)]
struct Summary {
    slope: f64,
    intercept: f64,
    band_pass: bool,
}

impl RateOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,seed,error_l2,lambda_min,design\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{}\n", r.n, r.seed, r.error_l2, r.lambda_min, r.design.name()));
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        let s = Summary { slope: self.slope, intercept: self.intercept, band_pass: self.band_pass };
        Ok(serde_json::to_string(&s)? + "\n")
    }

    pub fn records_for_seed(&self, seed: u64) -> impl Iterator<Item = &RateRecord> {
        self.records.iter().filter(move |r| r.seed == seed)
    }
}

fn uniform_box(rng: &mut LabRng) -> f64 {
    // unit variance, bounded by sqrt(3)
    (rng.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt()
}

fn random_unit(rng: &mut LabRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = l2_norm(&v);
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `k` orthonormal columns in `R^d`, by Gram-Schmidt on Gaussian draws.
fn random_basis(rng: &mut LabRng, dim: usize, k: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = random_unit(rng, dim);
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let norm = l2_norm(&v);
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

struct Problem {
    theta_star: Vec<f64>,
    basis: Option<Vec<Vec<f64>>>,
}

fn planted_problem(base_seed: u64, cfg: &RateConfig, seed: u64) -> Problem {
    let mut rng = stream_rng(base_seed, Stream::Rate, &[seed, cfg.design as u64, 0]);
    match cfg.design {
        Design::Rich => Problem {
            theta_star: random_unit(&mut rng, cfg.dim).into_iter().map(|x| x * cfg.theta_norm).collect(),
            basis: None,
        },
        Design::Narrow => {
            let basis = random_basis(&mut rng, cfg.dim, cfg.narrow_rank);
            let coef = random_unit(&mut rng, cfg.narrow_rank);
            let mut theta = vec![0.0; cfg.dim];
            for (c, b) in coef.iter().zip(&basis) {
                theta.iter_mut().zip(b).for_each(|(t, x)| *t += cfg.theta_norm * c * x);
            }
            Problem { theta_star: theta, basis: Some(basis) }
        }
    }
}

/// Labelled gap features (sign folded in) for one `(seed, n)` cell.
fn sample_pairs(base_seed: u64, cfg: &RateConfig, problem: &Problem, seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(base_seed, Stream::Rate, &[seed, cfg.design as u64, 1, n as u64]);
    (0..n)
        .map(|_| {
            let mut x: Vec<f64> = match &problem.basis {
                None => (0..cfg.dim).map(|_| uniform_box(&mut rng)).collect(),
                Some(basis) => {
                    let mut x: Vec<f64> = (0..cfg.dim).map(|_| cfg.narrow_noise * uniform_box(&mut rng)).collect();
                    for b in basis {
                        let z = uniform_box(&mut rng);
                        x.iter_mut().zip(b).for_each(|(xi, bi)| *xi += z * bi);
                    }
                    x
                }
            };
            let p_first = sigmoid(cfg.beta * dot(&x, &problem.theta_star));
            if rng.random::<f64>() >= p_first {
                x.iter_mut().for_each(|v| *v = -*v);
            }
            x
        })
        .collect()
}

fn neg_log_likelihood(pairs: &[Vec<f64>], theta: &[f64], beta: f64) -> f64 {
    pairs.iter().map(|x| softplus(-beta * dot(x, theta))).sum::<f64>() / pairs.len() as f64
}

/// In-place Cholesky of a row-major SPD matrix; `None` when a pivot is not positive.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= scale * 1e-14 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// Pairwise logistic MLE from `theta = 0`, iterated until the gradient norm is at most `GRADIENT_TOL`.
pub fn fit_mle(pairs: &[Vec<f64>], beta: f64, seed: u64) -> Result<Vec<f64>> {
    let n = pairs.len();
    let dim = pairs.first().map_or(0, Vec::len);
    let singular = |detail: String| LabError::SingularDesign { n, seed, detail };
    let mut theta = vec![0.0; dim];
    for _ in 0..NEWTON_MAX_ITERATIONS {
        let margins: Vec<f64> = pairs.iter().map(|x| beta * dot(x, &theta)).collect();
        let mut grad = vec![0.0; dim];
        for (x, &m) in pairs.iter().zip(&margins) {
            let w = -beta * sigmoid(-m) / n as f64;
            grad.iter_mut().zip(x).for_each(|(g, xi)| *g += w * xi);
        }
        if l2_norm(&grad) <= GRADIENT_TOL {
            // every pair ranked correctly means the data is separable and
            // the small gradient comes from running off to infinity
            if margins.iter().all(|&m| m > 0.0) {
                return Err(singular("pairs are linearly separable; no finite MLE".into()));
            }
            return Ok(theta);
        }
        let info = information_from_gaps(pairs, &margins, beta, dim)?;
        let l = cholesky(&info.matrix, dim)
            .ok_or_else(|| singular("pairwise Hessian is not positive definite".into()))?;
        let step: Vec<f64> = cholesky_solve(&l, dim, &grad).into_iter().map(|v| -v).collect();
        let slope = dot(&grad, &step);
        // once the Newton decrement is below float resolution of the loss, line
        // search cannot see progress; the iterate is in the quadratic basin
        if -slope <= 1e-12 {
            theta.iter_mut().zip(&step).for_each(|(t, s)| *t += s);
            continue;
        }
        let f0 = neg_log_likelihood(pairs, &theta, beta);
        let mut alpha = 1.0;
        loop {
            let trial: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + alpha * s).collect();
            if neg_log_likelihood(pairs, &trial, beta) <= f0 + 1e-4 * alpha * slope {
                theta = trial;
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                return Err(singular("line search failed".into()));
            }
        }
    }
    Err(singular(format!("MLE gradient did not reach {GRADIENT_TOL} (possibly separable data)")))
}

fn run_seed(base_seed: u64, cfg: &RateConfig, seed: u64) -> Result<Vec<RateRecord>> {
    let problem = planted_problem(base_seed, cfg, seed);
    cfg.n_grid
        .iter()
        .map(|&n| {
            let pairs = sample_pairs(base_seed, cfg, &problem, seed, n);
            let theta_hat = fit_mle(&pairs, cfg.beta, seed)?;
            let diff: Vec<f64> = theta_hat.iter().zip(&problem.theta_star).map(|(a, b)| a - b).collect();
            let star_margins: Vec<f64> = pairs.iter().map(|x| cfg.beta * dot(x, &problem.theta_star)).collect();
            let info = information_from_gaps(&pairs, &star_margins, cfg.beta, MAX_DIM)?;
            debug_assert!(info.per_pair_weights.iter().all(|&w| w <= curvature_weight(0.0)));
            Ok(RateRecord { n, seed, error_l2: l2_norm(&diff), lambda_min: min_eigenvalue(&info)?.max(0.0), design: cfg.design })
        })
        .collect()
}

/// Least-squares `(slope, intercept)` of `y` on `x`.
pub fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Runs every seed in parallel; results are merged in seed order.
pub fn rate_experiment(base_seed: u64, cfg: &RateConfig) -> Result<RateOutcome> {
    cfg.validate()?;
    let per_seed: Vec<Vec<RateRecord>> =
        (0..cfg.seeds as u64).into_par_iter().map(|s| run_seed(base_seed, cfg, s)).collect::<Result<_>>()?;

    let mean_errors: Vec<(usize, f64)> = cfg
        .n_grid
        .iter()
        .enumerate()
        .map(|(k, &n)| (n, per_seed.iter().map(|recs| recs[k].error_l2).sum::<f64>() / cfg.seeds as f64))
        .collect();
    let log_n: Vec<f64> = mean_errors.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let log_e: Vec<f64> = mean_errors.iter().map(|&(_, e)| e.ln()).collect();
    let (slope, intercept) = least_squares(&log_n, &log_e);

    let ratios: Vec<f64> = per_seed
        .iter()
        .flat_map(|recs| recs.windows(2).map(|w| w[1].error_l2 / w[0].error_l2))
        .collect();

    let mut records: Vec<RateRecord> = Vec::with_capacity(cfg.seeds * cfg.n_grid.len());
    for k in 0..cfg.n_grid.len() {
        records.extend(per_seed.iter().map(|recs| recs[k].clone()));
    }
    Ok(RateOutcome {
        design: cfg.design,
        records,
        mean_errors,
        slope,
        intercept,
        band_pass: slope >= SLOPE_BAND.0 && slope <= SLOPE_BAND.1,
        median_doubling_ratio: median(ratios),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_squares_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let (s, b) = least_squares(&x, &y);
        assert!((s + 0.5).abs() < 1e-14 && (b - 2.0).abs() < 1e-14);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let x = cholesky_solve(&l, 2, &[2.0, 1.0]);
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-14);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-14);
        assert!(cholesky(&[1.0, 1.0, 1.0, 1.0], 2).is_none());
    }

    #[test]
    fn mle_gradient_vanishes() {
        let cfg = RateConfig::default();
        let problem = planted_problem(3, &cfg, 0);
        let pairs = sample_pairs(3, &cfg, &problem, 0, 512);
        let theta = fit_mle(&pairs, 1.0, 0).unwrap();
        let mut grad = vec![0.0; cfg.dim];
        for x in &pairs {
            let w = -sigmoid(-dot(x, &theta)) / pairs.len() as f64;
            grad.iter_mut().zip(x).for_each(|(g, xi)| *g += w * xi);
        }
        assert!(l2_norm(&grad) <= GRADIENT_TOL);
    }

    #[test]
    fn separable_data_is_reported() {
        let pairs = vec![vec![1.0, 0.0], vec![2.0, 0.5], vec![0.5, -0.3]];
        let err = fit_mle(&pairs, 1.0, 9).unwrap_err();
        assert!(matches!(err, LabError::SingularDesign { n: 3, seed: 9, .. }));
    }

    #[test]
    fn narrow_theta_lies_in_subspace() {
        let cfg = RateConfig { design: Design::Narrow, ..RateConfig::default() };
        let p = planted_problem(1, &cfg, 2);
        let basis = p.basis.unwrap();
        let proj: f64 = basis.iter().map(|b| dot(b, &p.theta_star).powi(2)).sum();
        assert!((proj - cfg.theta_norm.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = RateConfig { n_grid: vec![256, 128], ..RateConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = RateConfig { dim: 21, ..RateConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
