use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::losses::{KlDirection, DEFAULT_BETA};
use crate::policy::{Backend, DEFAULT_TEACHER_BIAS};
use crate::tasks::TaskConfig;

pub const DEFAULT_LEARNING_RATE: f64 = 1.0;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_STEPS: u64 = 500;
pub const DEFAULT_EVAL_EVERY: u64 = 50;
pub const DEFAULT_GRAD_CLIP_NORM: f64 = 10.0;
pub const DEFAULT_REFRESH_EVERY: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pbsd,
    ReverseKl,
    ForwardKl,
    Sft,
}

impl Method {
    pub fn kl_direction(self) -> Option<KlDirection> {
        match self {
            Method::ReverseKl => Some(KlDirection::Reverse),
            Method::ForwardKl => Some(KlDirection::Forward),
            _ => None,
        }
    }
}

/// `"fixed"` or `{"refresh_every": K}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    Fixed,
    /// Copy the student parameters into the teacher slot every `K` steps.
    RefreshEvery(u64),
}

fn default_backend() -> Backend {
    Backend::Tabular
}
fn default_teacher_bias() -> f64 {
    DEFAULT_TEACHER_BIAS
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_learning_rate() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_steps() -> u64 {
    DEFAULT_STEPS
}
fn default_eval_every() -> u64 {
    DEFAULT_EVAL_EVERY
}
fn default_teacher_mode() -> TeacherMode {
    TeacherMode::Fixed
}
fn default_grad_clip_norm() -> f64 {
    DEFAULT_GRAD_CLIP_NORM
}
fn default_temperature() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub task_seed: u64,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default = "default_backend")]
    pub backend: Backend,
    #[serde(default = "default_teacher_bias")]
    pub teacher_bias: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_teacher_mode")]
    pub teacher_mode: TeacherMode,
    #[serde(default = "default_grad_clip_norm")]
    pub grad_clip_norm: f64,
    /// Seeds policy init, prompt draws and sampling. Overridden by `--seed` on the command line.
    #[serde(default)]
    pub run_seed: u64,
    #[serde(default = "default_temperature")]
    pub student_temperature: f64,
    #[serde(default = "default_temperature")]
    pub teacher_temperature: f64,
}

impl TrainConfig {
    pub fn new(method: Method, task_seed: u64) -> Self {
        Self {
            method,
            task_seed,
            task: TaskConfig::default(),
            backend: default_backend(),
            teacher_bias: DEFAULT_TEACHER_BIAS,
            beta: DEFAULT_BETA,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            steps: DEFAULT_STEPS,
            eval_every: DEFAULT_EVAL_EVERY,
            teacher_mode: TeacherMode::Fixed,
            grad_clip_norm: DEFAULT_GRAD_CLIP_NORM,
            run_seed: 0,
            student_temperature: 1.0,
            teacher_temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(LabError::Config(format!("{name} must be > 0, got {v}")))
            }
        }
        self.task.validate()?;
        positive("beta", self.beta)?;
        positive("grad_clip_norm", self.grad_clip_norm)?;
        positive("student_temperature", self.student_temperature)?;
        positive("teacher_temperature", self.teacher_temperature)?;
        // zero is accepted as an explicit no-op run
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(LabError::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.teacher_bias >= 0.0 && self.teacher_bias.is_finite()) {
            return Err(LabError::Config(format!("teacher_bias must be >= 0, got {}", self.teacher_bias)));
        }
        if self.batch_size == 0 {
            return Err(LabError::Config("batch_size must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(LabError::Config("steps must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(LabError::Config("eval_every must be >= 1".into()));
        }
        if self.teacher_mode == TeacherMode::RefreshEvery(0) {
            return Err(LabError::Config("teacher_mode refresh_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = TrainConfig::from_json(r#"{"method": "pbsd", "task_seed": 7}"#).unwrap();
        assert_eq!(cfg, TrainConfig::new(Method::Pbsd, 7));
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.steps, 500);
        assert_eq!(cfg.eval_every, 50);
        assert_eq!(cfg.grad_clip_norm, 10.0);
    }

    #[test]
    fn negative_beta_names_field() {
        let err = TrainConfig::from_json(r#"{"method": "pbsd", "task_seed": 7, "beta": -1}"#).unwrap_err();
        assert!(matches!(&err, LabError::Config(m) if m.contains("beta")), "{err}");
    }

    #[test]
    fn strict_parsing() {
        let unknown = TrainConfig::from_json(r#"{"method": "pbsd", "task_seed": 7, "betta": 1}"#).unwrap_err();
        assert!(unknown.to_string().contains("betta"));
        let dup = TrainConfig::from_json(r#"{"method": "pbsd", "task_seed": 7, "beta": 1, "beta": 2}"#).unwrap_err();
        assert!(dup.to_string().contains("duplicate"), "{dup}");
        let missing = TrainConfig::from_json(r#"{"method": "pbsd"}"#).unwrap_err();
        assert!(missing.to_string().contains("task_seed"));
    }

    #[test]
    fn teacher_mode_forms() {
        let cfg =
            TrainConfig::from_json(r#"{"method": "sft", "task_seed": 1, "teacher_mode": {"refresh_every": 5}}"#).unwrap();
        assert_eq!(cfg.teacher_mode, TeacherMode::RefreshEvery(DEFAULT_REFRESH_EVERY));
        let cfg = TrainConfig::from_json(r#"{"method": "reverse_kl", "task_seed": 1, "teacher_mode": "fixed"}"#).unwrap();
        assert_eq!(cfg.teacher_mode, TeacherMode::Fixed);
    }
}
