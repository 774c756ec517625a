//! Gauss-Newton information of the pairwise loss.
//!
//! Each pair contributes `beta^2 w(m) d d^T`, where `d` is the score-gap
//! direction (difference of student log-prob gradients of the two responses)
//! and `w(m) = sigmoid(m) (1 - sigmoid(m))` is the curvature weight at the
//! pair's margin. The smallest eigenvalue of the averaged matrix controls the
//! local estimation error of the pairwise MLE.

pub mod diagnostic;
pub mod jacobi;
pub mod rate;

pub use diagnostic::{teacher_gap_diagnostic, DiagnosticReport, TeacherDiagnostic};
pub use rate::{rate_experiment, Design, RateConfig, RateOutcome, RateRecord};

use crate::error::{LabError, Result};
use crate::losses::{curvature_weight, margin, PreferencePair};
use crate::policy::PolicyView;
use crate::scalar::Scalar;
use crate::tasks::Token;

pub const DEFAULT_MATRIX_CAP: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct InfoMatrix<S> {
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub matrix: Vec<S>,
    pub n_pairs: usize,
    pub beta: S,
    pub per_pair_weights: Vec<S>,
}

impl<S: Scalar> InfoMatrix<S> {
    pub fn get(&self, i: usize, j: usize) -> S {
        self.matrix[i * self.dim + j]
    }

    pub fn trace(&self) -> S {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }
}

/// `grad log pi(y+ | x) - grad log pi(y- | x)`.
pub fn score_gap<S: Scalar>(student: &PolicyView<'_, S>, prompt: usize, y_plus: &[Token], y_minus: &[Token]) -> Result<Vec<S>> {
    let plus = student.grad_logprob(prompt, y_plus)?;
    let minus = student.grad_logprob(prompt, y_minus)?;
    Ok(plus.iter().zip(&minus).map(|(&a, &b)| a - b).collect())
}

/// Mean of `w(m)` over a set of margins.
pub fn mean_curvature_weight<S: Scalar>(margins: &[S]) -> S {
    if margins.is_empty() {
        return S::zero();
    }
    margins.iter().map(|&m| curvature_weight(m)).sum::<S>() / S::from_usize(margins.len()).unwrap()
}

fn check_cap(dim: usize, cap: usize) -> Result<()> {
    if dim > cap {
        return Err(LabError::Capacity { what: "information matrix dimension", needed: dim as u128, cap: cap as u128 });
    }
    Ok(())
}

/// `(beta^2 / n) sum_i w(m_i) d_i d_i^T`, accumulated over the nonzero entries of each `d_i`.
pub fn information_from_gaps<S: Scalar>(gaps: &[Vec<S>], margins: &[S], beta: S, cap: usize) -> Result<InfoMatrix<S>> {
    if gaps.is_empty() {
        return Err(LabError::Input("information matrix needs at least one pair".into()));
    }
    if gaps.len() != margins.len() {
        return Err(LabError::Input("one margin per score gap required".into()));
    }
    let dim = gaps[0].len();
    check_cap(dim, cap)?;
    if gaps.iter().any(|g| g.len() != dim) {
        return Err(LabError::Input("score gaps differ in length".into()));
    }
    let weights: Vec<S> = margins.iter().map(|&m| curvature_weight(m)).collect();
    let mut matrix = vec![S::zero(); dim * dim];
    for (gap, &w) in gaps.iter().zip(&weights) {
        let support: Vec<usize> = (0..dim).filter(|&i| gap[i] != S::zero()).collect();
        for &i in &support {
            let wi = w * gap[i];
            for &j in &support {
                matrix[i * dim + j] = matrix[i * dim + j] + wi * gap[j];
            }
        }
    }
    let scale = beta * beta / S::from_usize(gaps.len()).unwrap();
    matrix.iter_mut().for_each(|v| *v = *v * scale);
    Ok(InfoMatrix { dim, matrix, n_pairs: gaps.len(), beta, per_pair_weights: weights })
}

/// Empirical information of the student at the given pairs.
pub fn empirical_hessian<S: Scalar>(
    student: &PolicyView<'_, S>,
    pairs: &[PreferencePair<S>],
    beta: S,
    cap: usize,
) -> Result<InfoMatrix<S>> {
    if pairs.is_empty() {
        return Err(LabError::Input("information matrix needs at least one pair".into()));
    }
    check_cap(student.params.len(), cap)?;
    let mut gaps = Vec::with_capacity(pairs.len());
    let mut margins = Vec::with_capacity(pairs.len());
    for pair in pairs {
        gaps.push(score_gap(student, pair.prompt, &pair.y_plus, &pair.y_minus)?);
        margins.push(margin(student, pair, beta)?);
    }
    information_from_gaps(&gaps, &margins, beta, cap)
}

pub fn min_eigenvalue<S: Scalar>(info: &InfoMatrix<S>) -> Result<S> {
    if info.dim == 0 {
        return Err(LabError::Input("empty matrix".into()));
    }
    Ok(jacobi::symmetric_eigenvalues(&info.matrix, info.dim)?[0])
}
