//! Pairwise preference loss and the KL-matching / SFT baselines.
//!
//! A pair holds a teacher sample `y+` and a student sample `y-` for one prompt.
//! With log-ratios `rho(y) = log pi_theta(y|x) - log pi_teach(y|x)`, the margin is
//! `m = beta (rho(y+) - rho(y-))`, the preference probability is `sigmoid(m)` and
//! the loss is `softplus(-m) = -log sigmoid(m)`. The teacher is held fixed, so
//! gradients flow through the student log-probabilities only.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::information::score_gap;
use crate::policy::PolicyView;
use crate::scalar::Scalar;
use crate::tasks::TokenSeq;

pub const DEFAULT_BETA: f64 = 0.1;
pub const BETA_SWEEP: [f64; 4] = [0.05, 0.1, 0.5, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair<S> {
    pub prompt: usize,
    pub y_plus: TokenSeq,
    pub y_minus: TokenSeq,
    pub teacher_logprob_plus: S,
    pub teacher_logprob_minus: S,
}

impl<S: Scalar> PreferencePair<S> {
    /// Caches the teacher log-probabilities of both responses.
    pub fn new(teacher: &PolicyView<'_, S>, prompt: usize, y_plus: TokenSeq, y_minus: TokenSeq) -> Result<Self> {
        let teacher_logprob_plus = teacher.logprob(prompt, &y_plus)?;
        let teacher_logprob_minus = teacher.logprob(prompt, &y_minus)?;
        if !(teacher_logprob_plus.is_finite() && teacher_logprob_minus.is_finite()) {
            return Err(LabError::Input("teacher log-probabilities must be finite".into()));
        }
        Ok(Self { prompt, y_plus, y_minus, teacher_logprob_plus, teacher_logprob_minus })
    }

    pub fn swapped(&self) -> Self {
        Self {
            prompt: self.prompt,
            y_plus: self.y_minus.clone(),
            y_minus: self.y_plus.clone(),
            teacher_logprob_plus: self.teacher_logprob_minus,
            teacher_logprob_minus: self.teacher_logprob_plus,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossReport<S> {
    pub loss: S,
    pub margin: S,
    pub pref_prob: S,
    pub grad_weight: S,
    pub curvature_weight: S,
}

/// Logistic sigmoid, evaluated on the side that cannot overflow.
pub fn sigmoid<S: Scalar>(m: S) -> S {
    if m >= S::zero() {
        S::one() / (S::one() + (-m).exp())
    } else {
        let e = m.exp();
        e / (S::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow or cancellation.
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn pref_prob<S: Scalar>(m: S) -> S {
    sigmoid(m)
}

/// `sigmoid(m) * (1 - sigmoid(m))`, written as `sigmoid(m) * sigmoid(-m)`.
pub fn curvature_weight<S: Scalar>(m: S) -> S {
    sigmoid(m) * sigmoid(-m)
}

fn check_beta<S: Scalar>(beta: S) -> Result<()> {
    if !(beta > S::zero() && beta.is_finite()) {
        return Err(LabError::Config(format!("beta must be > 0, got {beta}")));
    }
    Ok(())
}

pub fn margin<S: Scalar>(student: &PolicyView<'_, S>, pair: &PreferencePair<S>, beta: S) -> Result<S> {
    check_beta(beta)?;
    let plus = student.logprob(pair.prompt, &pair.y_plus)? - pair.teacher_logprob_plus;
    let minus = student.logprob(pair.prompt, &pair.y_minus)? - pair.teacher_logprob_minus;
    Ok(beta * (plus - minus))
}

pub fn report_for_margin<S: Scalar>(m: S) -> LossReport<S> {
    LossReport {
        loss: softplus(-m),
        margin: m,
        pref_prob: sigmoid(m),
        grad_weight: sigmoid(-m),
        curvature_weight: curvature_weight(m),
    }
}

pub fn pbsd_loss<S: Scalar>(student: &PolicyView<'_, S>, pair: &PreferencePair<S>, beta: S) -> Result<LossReport<S>> {
    Ok(report_for_margin(margin(student, pair, beta)?))
}

/// `-beta * sigmoid(-m) * (grad log pi(y+) - grad log pi(y-))`.
pub fn pbsd_grad<S: Scalar>(student: &PolicyView<'_, S>, pair: &PreferencePair<S>, beta: S) -> Result<Vec<S>> {
    Ok(pbsd_loss_and_grad(student, pair, beta)?.1)
}

pub fn pbsd_loss_and_grad<S: Scalar>(
    student: &PolicyView<'_, S>,
    pair: &PreferencePair<S>,
    beta: S,
) -> Result<(LossReport<S>, Vec<S>)> {
    let report = pbsd_loss(student, pair, beta)?;
    let mut g = score_gap(student, pair.prompt, &pair.y_plus, &pair.y_minus)?;
    let scale = -beta * report.grad_weight;
    g.iter_mut().for_each(|v| *v = scale * *v);
    Ok((report, g))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(student || teacher)`.
    Reverse,
    /// `KL(teacher || student)`.
    Forward,
}

/// Exact KL between student and teacher over `responses` for one prompt, with
/// its gradient in the student parameters.
pub fn kl_matching_loss<S: Scalar>(
    student: &PolicyView<'_, S>,
    teacher: &PolicyView<'_, S>,
    prompt: usize,
    direction: KlDirection,
    responses: &[TokenSeq],
) -> Result<(S, Vec<S>)> {
    let mut grad = vec![S::zero(); student.params.len()];
    let log_p: Vec<S> = responses.iter().map(|y| student.logprob(prompt, y)).collect::<Result<_>>()?;
    let log_q: Vec<S> = responses.iter().map(|y| teacher.logprob(prompt, y)).collect::<Result<_>>()?;
    let loss = match direction {
        KlDirection::Reverse => {
            let loss: S = log_p.iter().zip(&log_q).map(|(&lp, &lq)| lp.exp() * (lp - lq)).sum();
            // grad = sum_y p_y (log p_y - log q_y - loss) grad log p_y
            for ((y, &lp), &lq) in responses.iter().zip(&log_p).zip(&log_q) {
                student.accumulate_grad(prompt, y, lp.exp() * (lp - lq - loss), &mut grad)?;
            }
            loss
        }
        KlDirection::Forward => {
            let loss: S = log_p.iter().zip(&log_q).map(|(&lp, &lq)| lq.exp() * (lq - lp)).sum();
            for (y, &lq) in responses.iter().zip(&log_q) {
                student.accumulate_grad(prompt, y, -lq.exp(), &mut grad)?;
            }
            loss
        }
    };
    Ok((loss, grad))
}

/// Mean negative log-likelihood of `(prompt, response)` samples under the student.
pub fn sft_loss<S: Scalar>(student: &PolicyView<'_, S>, batch: &[(usize, TokenSeq)]) -> Result<(S, Vec<S>)> {
    if batch.is_empty() {
        return Err(LabError::Input("sft batch is empty".into()));
    }
    let n = S::from_usize(batch.len()).unwrap();
    let mut grad = vec![S::zero(); student.params.len()];
    let mut total = S::zero();
    for (prompt, y) in batch {
        total = total - student.logprob(*prompt, y)?;
        student.accumulate_grad(*prompt, y, -S::one() / n, &mut grad)?;
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_policy, Backend, ContextMode, PolicyParams};
    use crate::scalar::l2_norm;
    use crate::tasks::{generate_task, TaskConfig};

    #[test]
    fn sigmoid_and_softplus_examples() {
        assert_eq!(pref_prob(0.0), 0.5);
        assert!((pref_prob(2f64.ln()) - 2.0 / 3.0).abs() < 1e-9);
        let tiny = pref_prob(-40.0f64);
        assert!(tiny > 0.0 && tiny <= 1e-17);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(50.0f64) - 50.0).abs() < 1e-6);
        assert!((report_for_margin(2f64.ln()).loss - 0.405465).abs() < 1e-6);
        for m in [-500.0f64, -30.0, 0.0, 30.0, 500.0] {
            let r = report_for_margin(m);
            assert!(r.loss.is_finite() && r.pref_prob.is_finite() && r.curvature_weight.is_finite());
            assert!(r.loss >= 0.0);
        }
    }

    #[test]
    fn curvature_weight_examples() {
        assert_eq!(curvature_weight(0.0f64), 0.25);
        assert!((curvature_weight(2.0f64) - 0.104994).abs() < 1e-6);
        assert_eq!(curvature_weight(2.0f64), curvature_weight(-2.0f64));
        let tail = curvature_weight(40.0f64);
        assert!(tail > 0.0 && tail <= 1e-17);
    }

    #[test]
    fn margin_from_known_ratios() {
        // student/teacher ratio 2 at y+ and 1/2 at y-
        let student = PolicyParams::<f64>::zeros(Backend::Tabular, 1, 1, 4).unwrap();
        let pair = PreferencePair {
            prompt: 0,
            y_plus: vec![0],
            y_minus: vec![1],
            teacher_logprob_plus: 0.25f64.ln() - 2f64.ln(),
            teacher_logprob_minus: 0.25f64.ln() + 2f64.ln(),
        };
        let m = margin(&student.student(), &pair, 0.5).unwrap();
        assert!((m - std::f64::consts::LN_2).abs() < 1e-6);
        let swapped = margin(&student.student(), &pair.swapped(), 0.5).unwrap();
        assert_eq!(swapped, -m);
    }

    #[test]
    fn equal_student_and_teacher_gives_zero_margin() {
        let task = generate_task(1, &TaskConfig::default()).unwrap();
        let params: PolicyParams<f64> = init_policy(&task, Backend::Tabular, 4, 3.0).unwrap();
        let frozen = params.clone();
        let teacher = PolicyView::new(&frozen, ContextMode::Teacher).frozen();
        // student evaluated under the same conditioning as the teacher
        let student = PolicyView::new(&params, ContextMode::Teacher);
        let pair = PreferencePair::new(&teacher, 3, vec![1, 2, 3], vec![0, 0, 5]).unwrap();
        let report = pbsd_loss(&student, &pair, 0.1).unwrap();
        assert_eq!(report.margin, 0.0);
        assert!((report.loss - 2f64.ln()).abs() < 1e-12);
        let g = pbsd_grad(&student, &pair, 0.1).unwrap();
        let d = score_gap(&student, 3, &[1, 2, 3], &[0, 0, 5]).unwrap();
        for (a, b) in g.iter().zip(&d) {
            assert_eq!(*a, -0.1 * 0.5 * b);
        }
    }

    #[test]
    fn identical_responses_give_exact_zero_gradient_and_log2_loss() {
        let task = generate_task(1, &TaskConfig::default()).unwrap();
        let params: PolicyParams<f64> = init_policy(&task, Backend::Tabular, 4, 3.0).unwrap();
        let frozen = params.clone();
        let pair = PreferencePair::new(&frozen.teacher(), 0, vec![2, 2, 2], vec![2, 2, 2]).unwrap();
        for beta in [0.05, 0.1, 1.0, 7.0] {
            let (report, g) = pbsd_loss_and_grad(&params.student(), &pair, beta).unwrap();
            assert!(g.iter().all(|&v| v == 0.0));
            assert!((report.loss - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_weight_identity() {
        let task = generate_task(2, &TaskConfig::default()).unwrap();
        let params: PolicyParams<f64> = init_policy(&task, Backend::Tabular, 4, 3.0).unwrap();
        let frozen = params.clone();
        let pair = PreferencePair::new(&frozen.teacher(), 5, vec![0, 1, 2], vec![3, 4, 5]).unwrap();
        let beta = 0.3;
        let (report, g) = pbsd_loss_and_grad(&params.student(), &pair, beta).unwrap();
        let d = score_gap(&params.student(), 5, &pair.y_plus, &pair.y_minus).unwrap();
        let scaled: Vec<f64> = d.iter().map(|v| -beta * report.grad_weight * v).collect();
        assert_eq!(l2_norm(&g), l2_norm(&scaled));
    }

    #[test]
    fn kl_losses_vanish_when_student_equals_teacher() {
        let task = generate_task(1, &TaskConfig::default()).unwrap();
        let params: PolicyParams<f64> = init_policy(&task, Backend::Tabular, 4, 0.0).unwrap();
        let frozen = params.clone();
        let responses = task.enumerate_responses().unwrap();
        for dir in [KlDirection::Reverse, KlDirection::Forward] {
            let (loss, g) = kl_matching_loss(&params.student(), &frozen.teacher(), 2, dir, &responses).unwrap();
            assert!(loss.abs() < 1e-12);
            assert!(l2_norm(&g) <= 1e-10);
        }
    }

    #[test]
    fn sft_examples() {
        let task = generate_task(1, &TaskConfig::default()).unwrap();
        let uniform = PolicyParams::<f64>::for_task(Backend::Tabular, &task).unwrap();
        let batch = vec![(0, vec![1, 2, 3]), (4, vec![0, 0, 0])];
        let (loss, _) = sft_loss(&uniform.student(), &batch).unwrap();
        assert!((loss - 3.0 * 6f64.ln()).abs() < 1e-12);
        assert!((loss - 5.375278).abs() < 1e-6);

        let mut sharp = uniform.clone();
        for (x, y) in &batch {
            for (t, &tok) in y.iter().enumerate() {
                sharp.row_mut(*x, ContextMode::Student, t).0[tok] = 30.0;
            }
        }
        assert!(sft_loss(&sharp.student(), &batch).unwrap().0 <= 1e-9);
        assert!(matches!(sft_loss(&uniform.student(), &[]), Err(LabError::Input(_))));
    }
}
