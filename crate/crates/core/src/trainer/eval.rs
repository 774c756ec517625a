use serde::Serialize;

use crate::error::Result;
use crate::policy::{Checkpoint, PolicyParams, PolicyView};
use crate::tasks::TaskInstance;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptEval {
    pub prompt: usize,
    pub expected_reward: f64,
    pub target_mass: f64,
    pub greedy_correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewEval {
    pub prompts: Vec<PromptEval>,
    pub mean_expected_reward: f64,
    pub mean_target_mass: f64,
    pub greedy_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub task_id: String,
    pub step: u64,
    pub student: ViewEval,
    pub teacher: ViewEval,
}

/// Exact per-prompt expected reward, mass on the target and greedy correctness of one view.
pub fn evaluate_view(view: &PolicyView<'_, f64>, task: &TaskInstance) -> Result<ViewEval> {
    let responses = task.enumerate_responses()?;
    let mut prompts = Vec::with_capacity(task.num_prompts());
    for x in 0..task.num_prompts() {
        let probs = view.distribution_over(x, &responses)?;
        let rewards = task.reward_vector(x, &responses)?;
        let target = task.target(x)?;
        prompts.push(PromptEval {
            prompt: x,
            expected_reward: probs.iter().zip(&rewards).map(|(p, r)| p * r).sum(),
            target_mass: view.logprob(x, target)?.exp(),
            greedy_correct: &view.greedy(x)? == target,
        });
    }
    let n = prompts.len() as f64;
    Ok(ViewEval {
        mean_expected_reward: prompts.iter().map(|p| p.expected_reward).sum::<f64>() / n,
        mean_target_mass: prompts.iter().map(|p| p.target_mass).sum::<f64>() / n,
        greedy_accuracy: prompts.iter().filter(|p| p.greedy_correct).count() as f64 / n,
        prompts,
    })
}

pub fn evaluate(checkpoint: &Checkpoint, task: &TaskInstance) -> Result<EvaluationReport> {
    let shape = crate::policy::PolicyShape {
        num_prompts: task.num_prompts(),
        response_length: task.response_length,
        vocab_size: task.vocab_size(),
        rows: checkpoint.shape.rows,
    };
    let (student, teacher): (PolicyParams<f64>, PolicyParams<f64>) =
        checkpoint.clone().into_params(checkpoint.backend, &shape)?;
    Ok(EvaluationReport {
        task_id: task.id.clone(),
        step: checkpoint.step,
        student: evaluate_view(&student.student(), task)?,
        teacher: evaluate_view(&teacher.teacher(), task)?,
    })
}
