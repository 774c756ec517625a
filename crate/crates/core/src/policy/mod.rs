//! Autoregressive policies over the task response space.
//!
//! Both backends store `theta` as a row-major `rows x V` matrix. Each
//! conditioning state `(prompt, context bit, position)` activates exactly one
//! row with a sign, and that row (times the sign) is the logit vector of the
//! per-position categorical. The tabular backend gives every state its own row;
//! the linear backend uses a one-hot feature map over the same states, hashed
//! down to `feature_dim` rows when that is smaller than the number of states.
//!
//! The same parameter object acts as student (context bit 0) and teacher
//! (context bit 1, the demonstration present).

mod checkpoint;

pub use checkpoint::Checkpoint;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::{softmax_into, Scalar};
use crate::tasks::{TaskInstance, Token, TokenSeq};

pub const DEFAULT_TEACHER_BIAS: f64 = 3.0;
pub const INIT_NOISE_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Tabular,
    Linear,
}

/// Backend choice at initialization time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Backend {
    Tabular,
    /// `feature_dim: None` keeps the full one-hot feature map.
    Linear { feature_dim: Option<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyShape {
    pub num_prompts: usize,
    pub response_length: usize,
    pub vocab_size: usize,
    /// Number of parameter rows (`theta.len() == rows * vocab_size`).
    pub rows: usize,
}

impl PolicyShape {
    pub fn states(&self) -> usize {
        self.num_prompts * 2 * self.response_length
    }

    pub fn param_len(&self) -> usize {
        self.rows * self.vocab_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextMode {
    /// Context absent.
    Student,
    /// Context (the demonstration) present.
    Teacher,
}

impl ContextMode {
    fn bit(self) -> usize {
        match self {
            ContextMode::Student => 0,
            ContextMode::Teacher => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<S> {
    pub backend: BackendKind,
    pub shape: PolicyShape,
    pub theta: Vec<S>,
}

impl<S: Scalar> PolicyParams<S> {
    /// All-zero (uniform) parameters.
    pub fn zeros(backend: Backend, num_prompts: usize, response_length: usize, vocab_size: usize) -> Result<Self> {
        if vocab_size < 1 || response_length < 1 || num_prompts < 1 {
            return Err(LabError::Config("policy dimensions must be positive".into()));
        }
        let states = num_prompts * 2 * response_length;
        let (kind, rows) = match backend {
            Backend::Tabular => (BackendKind::Tabular, states),
            Backend::Linear { feature_dim: None } => (BackendKind::Linear, states),
            Backend::Linear { feature_dim: Some(d) } => {
                if d == 0 {
                    return Err(LabError::Config("feature_dim must be positive".into()));
                }
                (BackendKind::Linear, d.min(states))
            }
        };
        let shape = PolicyShape { num_prompts, response_length, vocab_size, rows };
        Ok(Self { backend: kind, shape, theta: vec![S::zero(); shape.param_len()] })
    }

    pub fn for_task(backend: Backend, task: &TaskInstance) -> Result<Self> {
        Self::zeros(backend, task.num_prompts(), task.response_length, task.vocab_size())
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    pub fn student(&self) -> PolicyView<'_, S> {
        PolicyView { params: self, mode: ContextMode::Student, frozen: false }
    }

    pub fn teacher(&self) -> PolicyView<'_, S> {
        PolicyView { params: self, mode: ContextMode::Teacher, frozen: false }
    }

    /// Active `(row, sign)` for a conditioning state.
    pub fn feature(&self, prompt: usize, mode: ContextMode, position: usize) -> (usize, S) {
        let s = &self.shape;
        let state = (prompt * 2 + mode.bit()) * s.response_length + position;
        if s.rows == s.states() {
            return (state, S::one());
        }
        let h = derive_seed(0x6665_6174, Stream::Init, &[state as u64]);
        let sign = if h >> 63 == 0 { S::one() } else { -S::one() };
        ((h % s.rows as u64) as usize, sign)
    }

    /// Row of `theta` for a state as a mutable slice, with its sign.
    pub fn row_mut(&mut self, prompt: usize, mode: ContextMode, position: usize) -> (&mut [S], S) {
        let (row, sign) = self.feature(prompt, mode, position);
        let v = self.shape.vocab_size;
        (&mut self.theta[row * v..(row + 1) * v], sign)
    }
}

/// A params reference plus the conditioning mode it is evaluated under.
#[derive(Clone, Copy, Debug)]
pub struct PolicyView<'a, S> {
    pub params: &'a PolicyParams<S>,
    pub mode: ContextMode,
    pub frozen: bool,
}

impl<'a, S: Scalar> PolicyView<'a, S> {
    pub fn new(params: &'a PolicyParams<S>, mode: ContextMode) -> Self {
        Self { params, mode, frozen: false }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    fn shape(&self) -> &PolicyShape {
        &self.params.shape
    }

    fn check_prompt(&self, prompt: usize) -> Result<()> {
        if prompt >= self.shape().num_prompts {
            return Err(LabError::Input(format!(
                "prompt {prompt} outside policy with {} prompts",
                self.shape().num_prompts
            )));
        }
        Ok(())
    }

    fn check_response(&self, prompt: usize, y: &[Token]) -> Result<()> {
        self.check_prompt(prompt)?;
        let s = self.shape();
        if y.len() != s.response_length {
            return Err(LabError::Input(format!(
                "response length {} != {}",
                y.len(),
                s.response_length
            )));
        }
        if let Some(t) = y.iter().find(|&&t| t >= s.vocab_size) {
            return Err(LabError::Input(format!("token {t} outside vocabulary of size {}", s.vocab_size)));
        }
        Ok(())
    }

    pub fn logits_into(&self, prompt: usize, position: usize, out: &mut [S]) {
        let (row, sign) = self.params.feature(prompt, self.mode, position);
        let v = self.shape().vocab_size;
        for (o, &w) in out.iter_mut().zip(&self.params.theta[row * v..(row + 1) * v]) {
            *o = sign * w;
        }
    }

    /// Per-position categorical at a conditioning state.
    pub fn probs_at(&self, prompt: usize, position: usize) -> Vec<S> {
        let v = self.shape().vocab_size;
        let mut logits = vec![S::zero(); v];
        self.logits_into(prompt, position, &mut logits);
        let mut probs = vec![S::zero(); v];
        softmax_into(&logits, &mut probs);
        probs
    }

    /// `log p(token)` at every token of a conditioning state.
    pub fn log_probs_at(&self, prompt: usize, position: usize) -> Vec<S> {
        let v = self.shape().vocab_size;
        let mut logits = vec![S::zero(); v];
        self.logits_into(prompt, position, &mut logits);
        let lse = crate::scalar::log_sum_exp(&logits);
        logits.iter().map(|&l| l - lse).collect()
    }

    pub fn logprob(&self, prompt: usize, y: &[Token]) -> Result<S> {
        self.check_response(prompt, y)?;
        let mut total = S::zero();
        for (t, &tok) in y.iter().enumerate() {
            total = total + self.log_probs_at(prompt, t)[tok];
        }
        Ok(total)
    }

    /// Draws a response token by token at temperature 1.
    pub fn sample<R: Rng + ?Sized>(&self, prompt: usize, rng: &mut R) -> Result<TokenSeq> {
        self.sample_with_temperature(prompt, rng, 1.0)
    }

    pub fn sample_with_temperature<R: Rng + ?Sized>(
        &self,
        prompt: usize,
        rng: &mut R,
        temperature: f64,
    ) -> Result<TokenSeq> {
        self.check_prompt(prompt)?;
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(LabError::Config(format!("temperature must be positive, got {temperature}")));
        }
        let s = self.shape();
        let inv_temp = S::lit(1.0 / temperature);
        let mut logits = vec![S::zero(); s.vocab_size];
        let mut probs = vec![S::zero(); s.vocab_size];
        let mut y = Vec::with_capacity(s.response_length);
        for t in 0..s.response_length {
            self.logits_into(prompt, t, &mut logits);
            for l in logits.iter_mut() {
                *l = *l * inv_temp;
            }
            softmax_into(&logits, &mut probs);
            y.push(sample_categorical(&probs, rng.random::<f64>()));
        }
        Ok(y)
    }

    /// Adds `scale * grad log p(token | state)` into `out`.
    pub fn accumulate_token_grad(&self, prompt: usize, position: usize, token: Token, scale: S, out: &mut [S]) {
        let (row, sign) = self.params.feature(prompt, self.mode, position);
        let v = self.shape().vocab_size;
        let probs = self.probs_at(prompt, position);
        let block = &mut out[row * v..(row + 1) * v];
        for (j, (o, &p)) in block.iter_mut().zip(&probs).enumerate() {
            let indicator = if j == token { S::one() } else { S::zero() };
            *o = *o + scale * sign * (indicator - p);
        }
    }

    /// Adds `scale * grad log pi(y | x)` into `out`, position by position.
    pub fn accumulate_grad(&self, prompt: usize, y: &[Token], scale: S, out: &mut [S]) -> Result<()> {
        self.check_response(prompt, y)?;
        if out.len() != self.params.theta.len() {
            return Err(LabError::Input("gradient buffer length mismatch".into()));
        }
        for (t, &tok) in y.iter().enumerate() {
            self.accumulate_token_grad(prompt, t, tok, scale, out);
        }
        Ok(())
    }

    pub fn grad_logprob(&self, prompt: usize, y: &[Token]) -> Result<Vec<S>> {
        let mut g = vec![S::zero(); self.params.theta.len()];
        self.accumulate_grad(prompt, y, S::one(), &mut g)?;
        Ok(g)
    }

    pub fn grad_logprob_token(&self, prompt: usize, position: usize, token: Token) -> Result<Vec<S>> {
        self.check_prompt(prompt)?;
        let s = self.shape();
        if position >= s.response_length || token >= s.vocab_size {
            return Err(LabError::Input(format!("bad position {position} or token {token}")));
        }
        let mut g = vec![S::zero(); self.params.theta.len()];
        self.accumulate_token_grad(prompt, position, token, S::one(), &mut g);
        Ok(g)
    }

    /// `pi(y | x)` over the enumeration order of `responses`.
    pub fn distribution_over(&self, prompt: usize, responses: &[TokenSeq]) -> Result<Vec<S>> {
        self.check_prompt(prompt)?;
        let tables: Vec<Vec<S>> = (0..self.shape().response_length).map(|t| self.log_probs_at(prompt, t)).collect();
        responses
            .iter()
            .map(|y| {
                self.check_response(prompt, y)?;
                let lp = y.iter().enumerate().fold(S::zero(), |acc, (t, &tok)| acc + tables[t][tok]);
                Ok(lp.exp())
            })
            .collect()
    }

    /// Exact distribution over `task.enumerate_responses()` order.
    pub fn exact_distribution(&self, prompt: usize, task: &TaskInstance) -> Result<Vec<S>> {
        let responses = task.enumerate_responses()?;
        self.distribution_over(prompt, &responses)
    }

    /// Argmax per position, ties to the lowest token index.
    pub fn greedy(&self, prompt: usize) -> Result<TokenSeq> {
        self.check_prompt(prompt)?;
        let v = self.shape().vocab_size;
        let mut logits = vec![S::zero(); v];
        Ok((0..self.shape().response_length)
            .map(|t| {
                self.logits_into(prompt, t, &mut logits);
                let mut best = 0;
                for j in 1..v {
                    if logits[j] > logits[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Inverse-CDF draw given a uniform `u` in `[0, 1)`.
pub fn sample_categorical<S: Scalar>(probs: &[S], u: f64) -> Token {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (j, p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last_positive = j;
        }
        cum += p;
        if u < cum {
            return j;
        }
    }
    last_positive
}

/// Student logits get small seeded Gaussian noise; the teacher state of each
/// prompt copies the student logits and adds `teacher_bias` on the target token.
pub fn init_policy<S: Scalar>(
    task: &TaskInstance,
    backend: Backend,
    seed: u64,
    teacher_bias: f64,
) -> Result<PolicyParams<S>> {
    if !(teacher_bias >= 0.0 && teacher_bias.is_finite()) {
        return Err(LabError::Config(format!("teacher_bias must be >= 0, got {teacher_bias}")));
    }
    let mut params = PolicyParams::for_task(backend, task)?;
    let mut rng = stream_rng(seed, Stream::Init, &[]);
    let normal = Normal::new(0.0, INIT_NOISE_SCALE).expect("valid normal");
    for w in params.theta.iter_mut() {
        *w = S::lit(normal.sample(&mut rng));
    }
    let v = task.vocab_size();
    let bias = S::lit(teacher_bias);
    for prompt in 0..task.num_prompts() {
        let target = task.target(prompt)?.clone();
        for (t, &tok) in target.iter().enumerate() {
            let mut logits = vec![S::zero(); v];
            params.student().logits_into(prompt, t, &mut logits);
            logits[tok] = logits[tok] + bias;
            let (row, sign) = params.row_mut(prompt, ContextMode::Teacher, t);
            for (w, &l) in row.iter_mut().zip(&logits) {
                *w = sign * l;
            }
        }
    }
    Ok(params)
}
