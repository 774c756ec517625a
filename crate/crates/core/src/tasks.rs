//! Synthetic keyed-substitution tasks with a privileged demonstration per prompt.
//!
//! Every prompt is a random token string of length `L`. A per-task random
//! permutation of the vocabulary (the key) maps the prompt position-wise onto
//! its target, and the context handed to the teacher is the target itself.
//! Response spaces are small enough to enumerate, which lets every expectation
//! over responses be computed exactly.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{stream_rng, Stream};

pub type Token = usize;
pub type TokenSeq = Vec<Token>;

pub const DEFAULT_ENUMERATION_CAP: u128 = 50_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(LabError::Config(format!("vocab_size must be >= 2, got {size}")));
        }
        let symbols = (0..size)
            .map(|i| match u8::try_from(i) {
                Ok(b) if b < 26 => char::from(b'a' + b).to_string(),
                _ => format!("t{i}"),
            })
            .collect();
        Ok(Self { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, token: Token) -> Option<&str> {
        self.symbols.get(token).map(String::as_str)
    }

    pub fn render(&self, seq: &[Token]) -> String {
        seq.iter().map(|&t| self.symbol(t).unwrap_or("?")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    PositionMatch,
    ExactMatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub wrong_length_penalty: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self { kind: RewardKind::PositionMatch, wrong_length_penalty: -1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub index: usize,
    pub tokens: TokenSeq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub response_length: usize,
    pub num_prompts: usize,
    pub reward: RewardSpec,
    /// Enumerate responses of every length `0..=L` instead of exactly `L`.
    pub variable_length: bool,
    pub enumeration_cap: u128,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 6,
            response_length: 3,
            num_prompts: 16,
            reward: RewardSpec::default(),
            variable_length: false,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(LabError::Config(format!("vocab_size must be >= 2, got {}", self.vocab_size)));
        }
        if self.response_length < 1 {
            return Err(LabError::Config("response_length must be >= 1".into()));
        }
        if self.num_prompts < 1 {
            return Err(LabError::Config("num_prompts must be >= 1".into()));
        }
        let p = self.reward.wrong_length_penalty;
        if !(-1.0..=1.0).contains(&p) {
            return Err(LabError::Config(format!("wrong_length_penalty must lie in [-1, 1], got {p}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    pub id: String,
    pub seed: u64,
    pub vocabulary: Vocabulary,
    pub prompts: Vec<Prompt>,
    pub response_length: usize,
    pub targets: Vec<TokenSeq>,
    pub contexts: Vec<Option<TokenSeq>>,
    pub reward_spec: RewardSpec,
    pub variable_length: bool,
    pub enumeration_cap: u128,
    /// Substitution key, `None` for tasks loaded from a document.
    pub key: Option<Vec<Token>>,
}

/// Builds a keyed-substitution task. Pure function of `(seed, config)`.
pub fn generate_task(seed: u64, config: &TaskConfig) -> Result<TaskInstance> {
    config.validate()?;
    let vocabulary = Vocabulary::new(config.vocab_size)?;
    let mut rng = stream_rng(seed, Stream::Task, &[]);

    let mut key: Vec<Token> = (0..config.vocab_size).collect();
    key.shuffle(&mut rng);

    let mut prompts = Vec::with_capacity(config.num_prompts);
    let mut targets = Vec::with_capacity(config.num_prompts);
    let mut contexts = Vec::with_capacity(config.num_prompts);
    for index in 0..config.num_prompts {
        let tokens: TokenSeq =
            (0..config.response_length).map(|_| rng.random_range(0..config.vocab_size)).collect();
        let target: TokenSeq = tokens.iter().map(|&t| key[t]).collect();
        contexts.push(Some(target.clone()));
        targets.push(target);
        prompts.push(Prompt { index, tokens });
    }

    Ok(TaskInstance {
        id: format!(
            "keyed-substitution-s{seed}-v{}-l{}-p{}",
            config.vocab_size, config.response_length, config.num_prompts
        ),
        seed,
        vocabulary,
        prompts,
        response_length: config.response_length,
        targets,
        contexts,
        reward_spec: config.reward,
        variable_length: config.variable_length,
        enumeration_cap: config.enumeration_cap,
        key: Some(key),
    })
}

impl TaskInstance {
    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn target(&self, prompt: usize) -> Result<&TokenSeq> {
        self.targets
            .get(prompt)
            .ok_or_else(|| LabError::Input(format!("prompt {prompt} not in task {}", self.id)))
    }

    pub fn check_tokens(&self, y: &[Token]) -> Result<()> {
        let v = self.vocab_size();
        match y.iter().find(|&&t| t >= v) {
            Some(t) => Err(LabError::Input(format!("token {t} outside vocabulary of size {v}"))),
            None => Ok(()),
        }
    }

    /// Bounded reward in `[-1, 1]`.
    pub fn reward(&self, prompt: usize, y: &[Token]) -> Result<f64> {
        self.check_tokens(y)?;
        let target = self.target(prompt)?;
        if y.len() != self.response_length {
            return Ok(self.reward_spec.wrong_length_penalty);
        }
        Ok(match self.reward_spec.kind {
            RewardKind::PositionMatch => {
                let hits = y.iter().zip(target).filter(|(a, b)| a == b).count();
                hits as f64 / self.response_length as f64
            }
            RewardKind::ExactMatch => {
                if y == target.as_slice() {
                    1.0
                } else {
                    0.0
                }
            }
        })
    }

    /// Number of responses the enumeration would produce.
    pub fn response_space_size(&self) -> u128 {
        let v = self.vocab_size() as u128;
        let l = self.response_length as u32;
        if self.variable_length {
            (0..=l).map(|k| v.saturating_pow(k)).fold(0u128, u128::saturating_add)
        } else {
            v.saturating_pow(l)
        }
    }

    pub fn check_enumerable(&self) -> Result<()> {
        let needed = self.response_space_size();
        if needed > self.enumeration_cap {
            return Err(LabError::Capacity {
                what: "response enumeration",
                needed,
                cap: self.enumeration_cap,
            });
        }
        Ok(())
    }

    /// All responses in lexicographic order.
    pub fn enumerate_responses(&self) -> Result<Vec<TokenSeq>> {
        self.check_enumerable()?;
        let v = self.vocab_size();
        let l = self.response_length;
        let mut out = Vec::with_capacity(self.response_space_size() as usize);
        if self.variable_length {
            // preorder walk of the prefix tree gives lexicographic order
            let mut stack: Vec<TokenSeq> = vec![Vec::new()];
            while let Some(seq) = stack.pop() {
                if seq.len() < l {
                    for t in (0..v).rev() {
                        let mut next = seq.clone();
                        next.push(t);
                        stack.push(next);
                    }
                }
                out.push(seq);
            }
        } else {
            let mut seq = vec![0; l];
            loop {
                out.push(seq.clone());
                let mut pos = l;
                loop {
                    if pos == 0 {
                        return Ok(out);
                    }
                    pos -= 1;
                    seq[pos] += 1;
                    if seq[pos] < v {
                        break;
                    }
                    seq[pos] = 0;
                }
            }
        }
        Ok(out)
    }

    /// Base-`V` index of a fixed-length response in the enumeration order.
    pub fn response_index(&self, y: &[Token]) -> Result<usize> {
        if self.variable_length || y.len() != self.response_length {
            return Err(LabError::Input("response_index needs a fixed-length response".into()));
        }
        self.check_tokens(y)?;
        let v = self.vocab_size();
        Ok(y.iter().fold(0, |acc, &t| acc * v + t))
    }

    /// Rewards of every enumerated response for one prompt.
    pub fn reward_vector(&self, prompt: usize, responses: &[TokenSeq]) -> Result<Vec<f64>> {
        responses.iter().map(|y| self.reward(prompt, y)).collect()
    }

    pub fn to_document(&self) -> TaskDocument {
        TaskDocument {
            id: self.id.clone(),
            seed: self.seed,
            vocab_size: self.vocab_size(),
            response_length: self.response_length,
            prompts: self
                .prompts
                .iter()
                .map(|p| PromptDocument {
                    index: p.index,
                    tokens: p.tokens.clone(),
                    context_tokens: self.contexts[p.index].clone(),
                    target_tokens: self.targets[p.index].clone(),
                })
                .collect(),
            reward: self.reward_spec,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TaskDocument = serde_json::from_str(text)?;
        Self::from_document(doc)
    }

    pub fn from_document(doc: TaskDocument) -> Result<Self> {
        let vocabulary = Vocabulary::new(doc.vocab_size)?;
        let l = doc.response_length;
        let mut prompts = Vec::with_capacity(doc.prompts.len());
        let mut targets = Vec::with_capacity(doc.prompts.len());
        let mut contexts = Vec::with_capacity(doc.prompts.len());
        for (i, p) in doc.prompts.into_iter().enumerate() {
            if p.index != i {
                return Err(LabError::Schema(format!("prompt {i} carries index {}", p.index)));
            }
            if p.target_tokens.len() != l {
                return Err(LabError::Schema(format!("target of prompt {i} has length != {l}")));
            }
            let all = p.tokens.iter().chain(&p.target_tokens).chain(p.context_tokens.iter().flatten());
            if let Some(t) = all.clone().find(|&&t| t >= doc.vocab_size) {
                return Err(LabError::Schema(format!("token {t} outside vocabulary in prompt {i}")));
            }
            prompts.push(Prompt { index: i, tokens: p.tokens });
            targets.push(p.target_tokens);
            contexts.push(p.context_tokens);
        }
        if prompts.is_empty() {
            return Err(LabError::Schema("task has no prompts".into()));
        }
        Ok(Self {
            id: doc.id,
            seed: doc.seed,
            vocabulary,
            prompts,
            response_length: l,
            targets,
            contexts,
            reward_spec: doc.reward,
            variable_length: false,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            key: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDocument {
    pub id: String,
    pub seed: u64,
    pub vocab_size: usize,
    pub response_length: usize,
    pub prompts: Vec<PromptDocument>,
    pub reward: RewardSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptDocument {
    pub index: usize,
    pub tokens: TokenSeq,
    pub context_tokens: Option<TokenSeq>,
    pub target_tokens: TokenSeq,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(v: usize, l: usize, p: usize) -> TaskConfig {
        TaskConfig { vocab_size: v, response_length: l, num_prompts: p, ..TaskConfig::default() }
    }

    #[test]
    fn default_task_has_216_responses() {
        let task = generate_task(7, &TaskConfig::default()).unwrap();
        assert_eq!(task.num_prompts(), 16);
        assert_eq!(task.enumerate_responses().unwrap().len(), 216);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_task(7, &TaskConfig::default()).unwrap();
        let b = generate_task(7, &TaskConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn different_seeds_use_different_keys() {
        let a = generate_task(7, &TaskConfig::default()).unwrap();
        let b = generate_task(8, &TaskConfig::default()).unwrap();
        let (ka, kb) = (a.key.unwrap(), b.key.unwrap());
        assert!(ka.iter().zip(&kb).any(|(x, y)| x != y));
    }

    #[test]
    fn target_is_key_applied_to_prompt_and_context_is_target() {
        let task = generate_task(3, &TaskConfig::default()).unwrap();
        let key = task.key.clone().unwrap();
        for p in &task.prompts {
            let expect: TokenSeq = p.tokens.iter().map(|&t| key[t]).collect();
            assert_eq!(task.targets[p.index], expect);
            assert_eq!(task.contexts[p.index].as_ref(), Some(&expect));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [config(1, 3, 4), config(6, 0, 4), config(6, 3, 0)] {
            assert!(matches!(generate_task(1, &c), Err(LabError::Config(_))));
        }
    }

    #[test]
    fn position_match_rewards() {
        let task = generate_task(7, &TaskConfig::default()).unwrap();
        let target = task.targets[0].clone();
        assert_eq!(task.reward(0, &target).unwrap(), 1.0);
        let mut one_hit = target.clone();
        one_hit[1] = (one_hit[1] + 1) % 6;
        one_hit[2] = (one_hit[2] + 1) % 6;
        assert!((task.reward(0, &one_hit).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(task.reward(0, &target[..2]).unwrap(), -1.0);
        assert!(matches!(task.reward(0, &[0, 9, 0]), Err(LabError::Input(_))));
    }

    #[test]
    fn exact_match_rewards() {
        let mut cfg = TaskConfig::default();
        cfg.reward.kind = RewardKind::ExactMatch;
        let task = generate_task(7, &cfg).unwrap();
        let target = task.targets[2].clone();
        assert_eq!(task.reward(2, &target).unwrap(), 1.0);
        let mut off = target.clone();
        off[0] = (off[0] + 1) % 6;
        assert_eq!(task.reward(2, &off).unwrap(), 0.0);
        assert_eq!(task.reward(2, &[]).unwrap(), -1.0);
    }

    #[test]
    fn enumeration_small_case() {
        let task = generate_task(0, &config(2, 2, 1)).unwrap();
        assert_eq!(task.enumerate_responses().unwrap(), vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let task = generate_task(0, &config(10, 6, 1)).unwrap();
        match task.enumerate_responses() {
            Err(LabError::Capacity { cap, needed, .. }) => {
                assert_eq!(cap, 50_000);
                assert_eq!(needed, 1_000_000);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn variable_length_enumeration_is_lexicographic_and_complete() {
        let mut cfg = config(2, 2, 1);
        cfg.variable_length = true;
        let task = generate_task(0, &cfg).unwrap();
        let all = task.enumerate_responses().unwrap();
        assert_eq!(
            all,
            vec![vec![], vec![0], vec![0, 0], vec![0, 1], vec![1], vec![1, 0], vec![1, 1]]
        );
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        let short = &all[1];
        assert_eq!(task.reward(0, short).unwrap(), -1.0);
    }

    #[test]
    fn fixed_length_enumeration_is_base_v_bijection() {
        let task = generate_task(5, &config(3, 4, 2)).unwrap();
        for (i, y) in task.enumerate_responses().unwrap().iter().enumerate() {
            assert_eq!(task.response_index(y).unwrap(), i);
        }
    }

    #[test]
    fn document_round_trip() {
        let task = generate_task(11, &TaskConfig::default()).unwrap();
        let json = task.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        let keys: Vec<_> = value.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["id", "prompts", "response_length", "reward", "seed", "vocab_size"]);
        let p0 = value["prompts"][0].as_object().unwrap();
        assert!(p0.contains_key("context_tokens") && p0.contains_key("target_tokens"));
        assert_eq!(value["reward"]["kind"], "position-match");
        let back = TaskInstance::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);
        assert_eq!(back.targets, task.targets);
    }
}
