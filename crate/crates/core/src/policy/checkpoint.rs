use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendKind, PolicyParams, PolicyShape};
use crate::error::{LabError, Result};

/// On-disk policy state: student theta plus the frozen teacher snapshot.
///
/// Doubles are written with the shortest decimal that round-trips exactly,
/// so save -> load -> save is byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub backend: BackendKind,
    pub shape: PolicyShape,
    pub theta: Vec<f64>,
    pub frozen_teacher_theta: Vec<f64>,
    pub seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(student: &PolicyParams<f64>, teacher: &PolicyParams<f64>, seed: u64, step: u64) -> Result<Self> {
        if student.shape != teacher.shape || student.backend != teacher.backend {
            return Err(LabError::Schema("student and teacher params differ in shape".into()));
        }
        Ok(Self {
            backend: student.backend,
            shape: student.shape,
            theta: student.theta.clone(),
            frozen_teacher_theta: teacher.theta.clone(),
            seed,
            step,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.shape.param_len();
        if self.theta.len() != n || self.frozen_teacher_theta.len() != n {
            return Err(LabError::Schema(format!(
                "theta lengths {} / {} do not match shape ({n})",
                self.theta.len(),
                self.frozen_teacher_theta.len()
            )));
        }
        if self.backend == BackendKind::Tabular && self.shape.rows != self.shape.states() {
            return Err(LabError::Schema("tabular checkpoint must have one row per state".into()));
        }
        if self.theta.iter().chain(&self.frozen_teacher_theta).any(|v| !v.is_finite()) {
            return Err(LabError::Schema("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| LabError::Schema(format!("checkpoint: {e}")))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Student and frozen teacher params, checked against the expected backend and shape.
    pub fn into_params(
        self,
        backend: BackendKind,
        shape: &PolicyShape,
    ) -> Result<(PolicyParams<f64>, PolicyParams<f64>)> {
        if self.backend != backend || &self.shape != shape {
            return Err(LabError::Schema(format!(
                "checkpoint is {:?} {:?}, expected {:?} {:?}",
                self.backend, self.shape, backend, shape
            )));
        }
        let student = PolicyParams { backend, shape: *shape, theta: self.theta };
        let teacher = PolicyParams { backend, shape: *shape, theta: self.frozen_teacher_theta };
        Ok((student, teacher))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_policy, Backend};
    use crate::tasks::{generate_task, TaskConfig};

    fn sample() -> Checkpoint {
        let task = generate_task(7, &TaskConfig::default()).unwrap();
        let mut student: PolicyParams<f64> = init_policy(&task, Backend::Tabular, 1, 3.0).unwrap();
        let teacher = student.clone();
        for (i, w) in student.theta.iter_mut().enumerate() {
            *w += (i as f64).sin() / 3.0;
        }
        Checkpoint::new(&student, &teacher, 1, 40).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = sample();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        ckpt.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded, ckpt);
        loaded.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&loaded.frozen_teacher_theta), bits(&ckpt.frozen_teacher_theta));
    }

    #[test]
    fn shape_mismatch_is_schema_error() {
        let ckpt = sample();
        let mut other = ckpt.shape;
        other.vocab_size += 1;
        assert!(matches!(ckpt.clone().into_params(BackendKind::Tabular, &other), Err(LabError::Schema(_))));
        assert!(matches!(ckpt.into_params(BackendKind::Linear, &other), Err(LabError::Schema(_))));

        let mut broken = sample();
        broken.theta.pop();
        let text = serde_json::to_string(&broken).unwrap();
        assert!(matches!(Checkpoint::from_json(&text), Err(LabError::Schema(_))));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = Checkpoint::load(Path::new("/nonexistent/ckpt.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ckpt.json"));
    }
}
