//! Contextual vs external teacher: margin and curvature diagnostics.
//!
//! Softmax logits are shift invariant, so every score gap is orthogonal to the
//! all-ones vector of each row it touches and the raw information matrix is
//! always singular. When the policy has one row per state, gaps are expressed
//! in an orthonormal basis of each row's sum-zero subspace before the
//! smallest eigenvalue is taken.

use serde::Serialize;

use super::{information_from_gaps, mean_curvature_weight, min_eigenvalue, score_gap, DEFAULT_MATRIX_CAP};
use crate::error::{LabError, Result};
use crate::losses::{margin, PreferencePair};
use crate::policy::{ContextMode, PolicyView};
use crate::rng::{stream_rng, Stream};
use crate::tasks::TaskInstance;

use rand::Rng;

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TeacherDiagnostic {
    pub teacher: String,
    pub margins: Vec<f64>,
    pub margin_mean: f64,
    pub margin_std: f64,
    pub mean_curvature_weight: f64,
    pub lambda_min: f64,
    pub histogram: Vec<HistogramBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticReport {
    pub n_pairs: usize,
    pub beta: f64,
    pub teachers: Vec<TeacherDiagnostic>,
}

impl DiagnosticReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("teacher,margin_mean,margin_std,mean_curvature_weight,lambda_min\n");
        for t in &self.teachers {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                t.teacher, t.margin_mean, t.margin_std, t.mean_curvature_weight, t.lambda_min
            ));
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("teacher,bin_lo,bin_hi,count\n");
        for t in &self.teachers {
            for b in &t.histogram {
                out.push_str(&format!("{},{},{},{}\n", t.teacher, b.lo, b.hi, b.count));
            }
        }
        out
    }
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin { lo: lo + k as f64 * width, hi: lo + (k + 1) as f64 * width, count })
        .collect()
}

/// Orthonormal basis of `{v in R^n : sum v = 0}` (Helmert contrasts), row-major `(n-1) x n`.
fn sum_zero_basis(n: usize) -> Vec<Vec<f64>> {
    (1..n)
        .map(|k| {
            let norm = ((k * (k + 1)) as f64).sqrt();
            (0..n)
                .map(|j| match j.cmp(&k) {
                    std::cmp::Ordering::Less => 1.0 / norm,
                    std::cmp::Ordering::Equal => -(k as f64) / norm,
                    std::cmp::Ordering::Greater => 0.0,
                })
                .collect()
        })
        .collect()
}

/// Coordinates of a student score gap in the identifiable parameter subspace.
fn identifiable_gap(student: &PolicyView<'_, f64>, gap: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let shape = student.params.shape;
    let v = shape.vocab_size;
    let mut out = Vec::with_capacity(shape.num_prompts * shape.response_length * (v - 1));
    for prompt in 0..shape.num_prompts {
        for pos in 0..shape.response_length {
            let (row, _) = student.params.feature(prompt, ContextMode::Student, pos);
            let block = &gap[row * v..(row + 1) * v];
            out.extend(basis.iter().map(|b| b.iter().zip(block).map(|(x, y)| x * y).sum::<f64>()));
        }
    }
    out
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Margin and curvature statistics of `n_pairs` pairs per named teacher.
///
/// Every teacher sees the same prompt and random-number streams, so
/// identical teachers yield identical rows.
pub fn teacher_gap_diagnostic(
    student: &PolicyView<'_, f64>,
    teachers: &[(&str, PolicyView<'_, f64>)],
    task: &TaskInstance,
    n_pairs: usize,
    beta: f64,
    seed: u64,
) -> Result<DiagnosticReport> {
    if n_pairs == 0 {
        return Err(LabError::Config("n_pairs must be >= 1".into()));
    }
    let shape = student.params.shape;
    let project = shape.rows == shape.states() && shape.vocab_size > 1;
    let basis = sum_zero_basis(shape.vocab_size);

    let mut rows = Vec::with_capacity(teachers.len());
    for (name, teacher) in teachers {
        let mut gaps = Vec::with_capacity(n_pairs);
        let mut margins = Vec::with_capacity(n_pairs);
        for i in 0..n_pairs as u64 {
            let prompt = stream_rng(seed, Stream::Diagnostic, &[i, 0]).random_range(0..task.num_prompts());
            let y_plus = teacher.sample(prompt, &mut stream_rng(seed, Stream::Diagnostic, &[i, 1]))?;
            let y_minus = student.sample(prompt, &mut stream_rng(seed, Stream::Diagnostic, &[i, 2]))?;
            let pair = PreferencePair::new(teacher, prompt, y_plus, y_minus)?;
            margins.push(margin(student, &pair, beta)?);
            let gap = score_gap(student, prompt, &pair.y_plus, &pair.y_minus)?;
            gaps.push(if project { identifiable_gap(student, &gap, &basis) } else { gap });
        }
        let info = information_from_gaps(&gaps, &margins, beta, DEFAULT_MATRIX_CAP)?;
        let (margin_mean, margin_std) = mean_std(&margins);
        rows.push(TeacherDiagnostic {
            teacher: name.to_string(),
            margin_mean,
            margin_std,
            mean_curvature_weight: mean_curvature_weight(&margins),
            lambda_min: min_eigenvalue(&info)?,
            histogram: histogram(&margins, HISTOGRAM_BINS),
            margins,
        });
    }
    Ok(DiagnosticReport { n_pairs, beta, teachers: rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn helmert_basis_is_orthonormal_and_sum_zero() {
        let b = sum_zero_basis(6);
        for (i, u) in b.iter().enumerate() {
            assert!(u.iter().sum::<f64>().abs() < 1e-15);
            for (j, w) in b.iter().enumerate() {
                let d: f64 = u.iter().zip(w).map(|(x, y)| x * y).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.5, 1.0, 1.0, 0.25], 4);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(h[3].count, 2);
        assert_eq!(histogram(&[2.0, 2.0], 3)[0].count, 2);
    }
}
