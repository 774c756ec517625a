//! Independent maximizer of `F(p) = <p, r> - beta * KL(p || t)` over the simplex.
//!
//! Only the gradient and Hessian of `F` are used; the closed-form optimum is
//! never consulted. Phase one is Euclidean projected gradient ascent with step
//! `0.1 / sqrt(k)`. Its iterates stay on a slightly shrunken simplex so the
//! logarithm stays finite. Phase two polishes with damped Newton steps under
//! the sum-to-one constraint, which the ill-conditioning of the KL term near
//! the boundary makes necessary for tight agreement.

use crate::scalar::Scalar;

pub const PGA_ITERATIONS: usize = 10_000;
pub const PGA_STEP: f64 = 0.1;
const NEWTON_MAX_ITERATIONS: usize = 500;

#[derive(Clone, Debug)]
pub struct SimplexMaximum<S> {
    pub point: Vec<S>,
    pub value: S,
    /// L1 size of the last Newton step; estimates distance to the optimum.
    pub residual: S,
    pub newton_iterations: usize,
}

/// Euclidean projection of `v` onto `{q >= 0, sum q = mass}`.
pub fn project_to_simplex<S: Scalar>(v: &[S], mass: S) -> Vec<S> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite input"));
    let mut cumulative = S::zero();
    let mut threshold = S::zero();
    for (i, &u) in sorted.iter().enumerate() {
        cumulative = cumulative + u;
        let candidate = (cumulative - mass) / S::from_usize(i + 1).unwrap();
        if u - candidate > S::zero() {
            threshold = candidate;
        }
    }
    v.iter().map(|&x| (x - threshold).max(S::zero())).collect()
}

fn objective<S: Scalar>(p: &[S], t: &[S], r: &[S], beta: S) -> S {
    let mut value = S::zero();
    for i in 0..p.len() {
        if p[i] > S::zero() {
            value = value + p[i] * r[i] - beta * p[i] * (p[i] / t[i]).ln();
        }
    }
    value
}

fn gradient<S: Scalar>(p: &[S], t: &[S], r: &[S], beta: S) -> Vec<S> {
    (0..p.len()).map(|i| r[i] - beta * ((p[i] / t[i]).ln() + S::one())).collect()
}

/// Maximizes `F` over the simplex supported on `t > 0`. `t` must be strictly
/// positive here; callers drop zero-mass coordinates first.
pub fn maximize<S: Scalar>(start: &[S], t: &[S], r: &[S], beta: S) -> SimplexMaximum<S> {
    let n = t.len();
    let floor = S::epsilon().sqrt() * S::lit(1e-4);
    let free_mass = S::one() - floor * S::from_usize(n).unwrap();

    let mut p = start.to_vec();
    for k in 1..=PGA_ITERATIONS {
        let step = S::lit(PGA_STEP / (k as f64).sqrt());
        let g = gradient(&p, t, r, beta);
        let moved: Vec<S> = p.iter().zip(&g).map(|(&pi, &gi)| pi + step * gi - floor).collect();
        p = project_to_simplex(&moved, free_mass).into_iter().map(|q| q + floor).collect();
    }

    let mut residual = S::infinity();
    let mut iterations = 0;
    for _ in 0..NEWTON_MAX_ITERATIONS {
        iterations += 1;
        let g = gradient(&p, t, r, beta);
        // Newton direction for a separable concave objective with Hessian
        // -beta/p_i under sum(d) = 0: d_i = p_i (g_i - nu) / beta.
        let mass: S = p.iter().copied().sum();
        let nu = p.iter().zip(&g).map(|(&a, &b)| a * b).sum::<S>() / mass;
        let d: Vec<S> = p.iter().zip(&g).map(|(&pi, &gi)| pi * (gi - nu) / beta).collect();
        residual = d.iter().map(|x| x.abs()).sum();
        // Equals d.g since sum(d) = 0, but stays nonnegative when g has a large constant part.
        let slope: S = d.iter().zip(&g).map(|(&a, &b)| a * (b - nu)).sum();
        if slope <= S::zero() || residual <= S::epsilon() {
            break;
        }
        let mut alpha = S::one();
        for (&pi, &di) in p.iter().zip(&d) {
            if di < S::zero() {
                alpha = alpha.min(S::lit(0.99) * (-pi / di));
            }
        }
        // Close to the optimum F changes below rounding, so Armijo cannot
        // discriminate; the full Newton step is safe there.
        if residual <= S::lit(1e-6) && alpha == S::one() {
            p = p.iter().zip(&d).map(|(&pi, &di)| pi + di).collect();
            continue;
        }
        let f0 = objective(&p, t, r, beta);
        let mut accepted = None;
        while alpha > S::lit(1e-12) {
            let trial: Vec<S> = p.iter().zip(&d).map(|(&pi, &di)| pi + alpha * di).collect();
            if objective(&trial, t, r, beta) >= f0 + S::lit(0.25) * alpha * slope {
                accepted = Some(trial);
                break;
            }
            alpha = alpha * S::lit(0.5);
        }
        match accepted {
            Some(next) => p = next,
            // No representable ascent left.
            None => break,
        }
    }
    let mass: S = p.iter().copied().sum();
    for v in p.iter_mut() {
        *v = *v / mass;
    }
    let value = objective(&p, t, r, beta);
    SimplexMaximum { point: p, value, residual, newton_iterations: iterations }
}
