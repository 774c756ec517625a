//! Online preference-based self-distillation and its baselines.
//!
//! Each step draws `B` prompts with replacement, samples one student response
//! `y-` and one teacher response `y+` per prompt, computes the per-pair loss
//! and gradient, averages them in index order, clips the global norm and takes
//! a plain SGD step. Baselines swap the per-pair objective and keep the loop
//! and every random stream unchanged.

mod config;
mod eval;
mod rundir;

pub use config::{Method, TeacherMode, TrainConfig, DEFAULT_LEARNING_RATE, DEFAULT_REFRESH_EVERY};
pub use eval::{evaluate, evaluate_view, EvaluationReport, PromptEval, ViewEval};
pub use rundir::{checkpoint_name, run_to_dir, RunFiles, CONFIG_FILE, FINAL_FILE, METRICS_FILE};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::losses::{kl_matching_loss, pbsd_loss_and_grad, sft_loss, PreferencePair};
use crate::oracle::{kl_divergence, tilted_policy, total_variation};
use crate::policy::{init_policy, Checkpoint, PolicyParams, PolicyView};
use crate::rng::{stream_rng, Stream};
use crate::scalar::l2_norm;
use crate::tasks::{generate_task, TaskInstance, TokenSeq};

/// One line of `metrics.jsonl`. Batch statistics average every pair since the
/// previous evaluation and are `null` at step 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_mean: Option<f64>,
    pub margin_mean: Option<f64>,
    pub pref_prob_mean: Option<f64>,
    pub curvature_weight_mean: Option<f64>,
    pub expected_reward_exact: f64,
    pub kl_to_tilted: f64,
    pub tv_to_tilted: f64,
    pub teacher_expected_reward: f64,
    pub grad_norm: Option<f64>,
    pub tokens_generated_cumulative: u64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }
}

/// Scales `grad` so its L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = l2_norm(grad);
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Prompt indices of one step. Depends only on `(run_seed, step)`, never on the method.
pub fn draw_prompts(run_seed: u64, step: u64, batch_size: usize, num_prompts: usize) -> Vec<usize> {
    let mut rng = stream_rng(run_seed, Stream::Prompts, &[step]);
    (0..batch_size).map(|_| rng.random_range(0..num_prompts)).collect()
}

/// Exact quantities used by the metrics, precomputed once per run.
struct ExactEvaluator {
    responses: Vec<TokenSeq>,
    rewards: Vec<Vec<f64>>,
}

struct ExactMetrics {
    expected_reward: f64,
    kl_to_tilted: f64,
    tv_to_tilted: f64,
    teacher_expected_reward: f64,
}

impl ExactEvaluator {
    fn new(task: &TaskInstance) -> Result<Self> {
        let responses = task.enumerate_responses()?;
        let rewards =
            (0..task.num_prompts()).map(|x| task.reward_vector(x, &responses)).collect::<Result<Vec<_>>>()?;
        Ok(Self { responses, rewards })
    }

    fn measure(&self, student: &PolicyView<'_, f64>, teacher: &PolicyView<'_, f64>, beta: f64) -> Result<ExactMetrics> {
        let n = self.rewards.len() as f64;
        let mut m = ExactMetrics { expected_reward: 0.0, kl_to_tilted: 0.0, tv_to_tilted: 0.0, teacher_expected_reward: 0.0 };
        for (x, rewards) in self.rewards.iter().enumerate() {
            let p = student.distribution_over(x, &self.responses)?;
            let q = teacher.distribution_over(x, &self.responses)?;
            let target = tilted_policy(&q, rewards, beta)?;
            m.expected_reward += p.iter().zip(rewards).map(|(a, r)| a * r).sum::<f64>() / n;
            m.teacher_expected_reward += q.iter().zip(rewards).map(|(a, r)| a * r).sum::<f64>() / n;
            m.kl_to_tilted += kl_divergence(&p, &target.probs)? / n;
            m.tv_to_tilted += total_variation(&p, &target.probs) / n;
        }
        Ok(m)
    }
}

struct PairOutcome {
    loss: f64,
    margin: f64,
    pref_prob: f64,
    curvature_weight: f64,
    grad: Vec<f64>,
    pair: PreferencePair<f64>,
}

#[derive(Default)]
struct Window {
    pairs: usize,
    steps: usize,
    loss: f64,
    margin: f64,
    pref_prob: f64,
    curvature: f64,
    grad_norm: f64,
}

/// Receives every evaluation as it is produced.
pub trait RunObserver {
    fn on_eval(&mut self, record: &MetricsRecord, checkpoint: &Checkpoint) -> Result<()>;
}

impl<F: FnMut(&MetricsRecord, &Checkpoint) -> Result<()>> RunObserver for F {
    fn on_eval(&mut self, record: &MetricsRecord, checkpoint: &Checkpoint) -> Result<()> {
        self(record, checkpoint)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub task: TaskInstance,
    pub metrics: Vec<MetricsRecord>,
    pub student: PolicyParams<f64>,
    pub teacher: PolicyParams<f64>,
    pub initial_theta: Vec<f64>,
    pub final_checkpoint: Checkpoint,
}

/// Step indices at which metrics are recorded: 0, every `eval_every`, and the last step.
pub fn eval_steps(config: &TrainConfig) -> Vec<u64> {
    let mut steps: Vec<u64> = (0..=config.steps).step_by(config.eval_every as usize).collect();
    if *steps.last().unwrap() != config.steps {
        steps.push(config.steps);
    }
    steps
}

fn pair_outcome(
    config: &TrainConfig,
    student: &PolicyView<'_, f64>,
    teacher: &PolicyView<'_, f64>,
    responses: &[TokenSeq],
    step: u64,
    index: usize,
    prompt: usize,
) -> Result<PairOutcome> {
    let path = [step, index as u64];
    let y_minus = student.sample_with_temperature(
        prompt,
        &mut stream_rng(config.run_seed, Stream::Student, &path),
        config.student_temperature,
    )?;
    let y_plus = teacher.sample_with_temperature(
        prompt,
        &mut stream_rng(config.run_seed, Stream::Teacher, &path),
        config.teacher_temperature,
    )?;
    let pair = PreferencePair::new(teacher, prompt, y_plus, y_minus)?;
    let (report, pbsd_grad) = pbsd_loss_and_grad(student, &pair, config.beta)?;
    let (loss, grad) = match config.method {
        Method::Pbsd => (report.loss, pbsd_grad),
        Method::ReverseKl | Method::ForwardKl => {
            let dir = config.method.kl_direction().expect("kl method");
            kl_matching_loss(student, teacher, prompt, dir, responses)?
        }
        Method::Sft => sft_loss(student, &[(prompt, pair.y_plus.clone())])?,
    };
    Ok(PairOutcome {
        loss,
        margin: report.margin,
        pref_prob: report.pref_prob,
        curvature_weight: report.curvature_weight,
        grad,
        pair,
    })
}

/// Runs the configured training loop, reporting each evaluation to `observer`.
pub fn run_with(config: &TrainConfig, observer: &mut dyn RunObserver) -> Result<TrainOutcome> {
    config.validate()?;
    let task = generate_task(config.task_seed, &config.task)?;
    task.check_enumerable()?;
    let mut student: PolicyParams<f64> = init_policy(&task, config.backend, config.run_seed, config.teacher_bias)?;
    let mut teacher = student.clone();
    let initial_theta = student.theta.clone();
    let evaluator = ExactEvaluator::new(&task)?;
    let responses = evaluator.responses.clone();
    let evals = eval_steps(config);
    let tokens_per_step = (config.batch_size * 2 * task.response_length) as u64;

    let mut metrics = Vec::with_capacity(evals.len());
    let mut window = Window::default();
    let mut record = |step: u64, window: &mut Window, student: &PolicyParams<f64>, teacher: &PolicyParams<f64>| -> Result<()> {
        let exact = evaluator.measure(&student.student(), &teacher.teacher().frozen(), config.beta)?;
        let mean = |v: f64, n: usize| if n == 0 { None } else { Some(v / n as f64) };
        let rec = MetricsRecord {
            step,
            loss_mean: mean(window.loss, window.pairs),
            margin_mean: mean(window.margin, window.pairs),
            pref_prob_mean: mean(window.pref_prob, window.pairs),
            curvature_weight_mean: mean(window.curvature, window.pairs),
            expected_reward_exact: exact.expected_reward,
            kl_to_tilted: exact.kl_to_tilted,
            tv_to_tilted: exact.tv_to_tilted,
            teacher_expected_reward: exact.teacher_expected_reward,
            grad_norm: mean(window.grad_norm, window.steps),
            tokens_generated_cumulative: step * tokens_per_step,
        };
        let ckpt = Checkpoint::new(student, teacher, config.run_seed, step)?;
        observer.on_eval(&rec, &ckpt)?;
        metrics.push(rec);
        *window = Window::default();
        Ok(())
    };

    record(0, &mut window, &student, &teacher)?;
    let mut next_eval = 1;
    for step in 1..=config.steps {
        let prompts = draw_prompts(config.run_seed, step, config.batch_size, task.num_prompts());
        let outcomes: Vec<Result<PairOutcome>> = {
            let s_view = student.student();
            let t_view = teacher.teacher().frozen();
            prompts
                .par_iter()
                .enumerate()
                .map(|(i, &prompt)| pair_outcome(config, &s_view, &t_view, &responses, step, i, prompt))
                .collect()
        };

        let scale = 1.0 / config.batch_size as f64;
        let mut grad = vec![0.0; student.len()];
        for outcome in outcomes {
            let o = outcome?;
            if !o.loss.is_finite() || o.grad.iter().any(|g| !g.is_finite()) {
                return Err(LabError::NonFinite {
                    step,
                    detail: format!("loss {} or gradient not finite", o.loss),
                    pair: serde_json::to_string(&o.pair)?,
                });
            }
            grad.iter_mut().zip(&o.grad).for_each(|(g, v)| *g += scale * v);
            window.pairs += 1;
            window.loss += o.loss;
            window.margin += o.margin;
            window.pref_prob += o.pref_prob;
            window.curvature += o.curvature_weight;
        }
        window.grad_norm += clip_global_norm(&mut grad, config.grad_clip_norm);
        window.steps += 1;
        if config.learning_rate != 0.0 {
            student.theta.iter_mut().zip(&grad).for_each(|(w, g)| *w -= config.learning_rate * g);
        }
        if !student.is_finite() {
            return Err(LabError::NonFinite {
                step,
                detail: "parameters became non-finite".into(),
                pair: String::from("null"),
            });
        }
        if let TeacherMode::RefreshEvery(k) = config.teacher_mode {
            if step % k == 0 {
                teacher.theta.clone_from(&student.theta);
            }
        }
        if evals.get(next_eval) == Some(&step) {
            record(step, &mut window, &student, &teacher)?;
            next_eval += 1;
        }
    }

    let final_checkpoint = Checkpoint::new(&student, &teacher, config.run_seed, config.steps)?;
    Ok(TrainOutcome { task, metrics, student, teacher, initial_theta, final_checkpoint })
}

/// Runs without side effects, keeping everything in memory.
pub fn run(config: &TrainConfig) -> Result<TrainOutcome> {
    run_with(config, &mut |_: &MetricsRecord, _: &Checkpoint| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(method: Method) -> TrainConfig {
        TrainConfig {
            steps: 6,
            eval_every: 4,
            batch_size: 4,
            task: crate::tasks::TaskConfig { num_prompts: 3, ..Default::default() },
            ..TrainConfig::new(method, 7)
        }
    }

    #[test]
    fn eval_schedule_includes_last_step() {
        assert_eq!(eval_steps(&small(Method::Pbsd)), vec![0, 4, 6]);
        assert_eq!(eval_steps(&TrainConfig::new(Method::Pbsd, 1)).len(), 11);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((l2_norm(&g) - 1.0).abs() < 1e-15);
        let mut h = vec![0.3, 0.4];
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h, vec![0.3, 0.4]);
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let cfg = TrainConfig { learning_rate: 0.0, ..small(Method::Pbsd) };
        let out = run(&cfg).unwrap();
        assert_eq!(out.student.theta, out.initial_theta);
        let first = out.metrics[0].expected_reward_exact;
        assert!(out.metrics.iter().all(|m| m.expected_reward_exact == first));
    }

    #[test]
    fn token_accounting_and_null_step_zero() {
        let out = run(&small(Method::Sft)).unwrap();
        assert!(out.metrics[0].loss_mean.is_none());
        for m in &out.metrics {
            assert_eq!(m.tokens_generated_cumulative, m.step * 4 * 2 * 3);
        }
    }

    #[test]
    fn every_method_runs() {
        for method in [Method::Pbsd, Method::ReverseKl, Method::ForwardKl, Method::Sft] {
            let out = run(&small(method)).unwrap();
            assert_eq!(out.metrics.len(), 3);
            let t0 = out.metrics[0].teacher_expected_reward;
            assert!(out.metrics.iter().all(|m| m.teacher_expected_reward == t0));
        }
    }
}
