//! Synthetic classification tasks scored at the final position.
//!
//! Token layout for a vocabulary of `V`: filler tokens occupy `[0, filler)`,
//! the planted tokens follow directly, and seqclass answers use the last
//! `num_classes` ids. A niah_toy answer is the passkey token itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::TokenBatch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqclassConfig {
    pub seq_len: usize,
    pub num_classes: usize,
    /// Distinct filler tokens the background is drawn from.
    pub filler_tokens: usize,
    /// Position of the class token; `None` is the final position.
    pub pattern_pos: Option<usize>,
    pub train_size: usize,
}

impl Default for SeqclassConfig {
    fn default() -> Self {
        Self {
            seq_len: 64,
            num_classes: 4,
            filler_tokens: 8,
            pattern_pos: None,
            train_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NiahConfig {
    pub seq_len: usize,
    pub num_passkeys: usize,
    pub filler_tokens: usize,
    pub train_size: usize,
    /// Held-out examples scored after training; 0 disables.
    pub eval_size: usize,
}

impl Default for NiahConfig {
    fn default() -> Self {
        Self {
            seq_len: 64,
            num_passkeys: 8,
            filler_tokens: 8,
            train_size: 256,
            eval_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Seqclass(SeqclassConfig),
    NiahToy(NiahConfig),
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Seqclass(SeqclassConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    /// Index into [`Task::answer_tokens`].
    pub label: usize,
}

/// A validated task bound to a vocabulary and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    spec: TaskSpec,
    vocab: usize,
    seed: u64,
}

// Held-out examples come from a separate RNG stream range.
const HELDOUT_STREAM: u64 = 1 << 40;

impl TaskSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            TaskSpec::Seqclass(_) => "seqclass",
            TaskSpec::NiahToy(_) => "niah_toy",
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            TaskSpec::Seqclass(c) => c.seq_len,
            TaskSpec::NiahToy(c) => c.seq_len,
        }
    }

    pub fn set_seq_len(&mut self, seq: usize) {
        match self {
            TaskSpec::Seqclass(c) => c.seq_len = seq,
            TaskSpec::NiahToy(c) => c.seq_len = seq,
        }
    }

    pub fn train_size(&self) -> usize {
        match self {
            TaskSpec::Seqclass(c) => c.train_size,
            TaskSpec::NiahToy(c) => c.train_size,
        }
    }

    pub fn eval_size(&self) -> usize {
        match self {
            TaskSpec::Seqclass(_) => 0,
            TaskSpec::NiahToy(c) => c.eval_size,
        }
    }
}

pub fn make_task(spec: TaskSpec, vocab: usize, seed: u64) -> Result<Task> {
    let need = match &spec {
        TaskSpec::Seqclass(c) => {
            if c.num_classes < 2 || c.filler_tokens == 0 {
                return Err(Error::Config("seqclass needs num_classes >= 2 and filler_tokens >= 1".into()));
            }
            if let Some(p) = c.pattern_pos.filter(|&p| p >= c.seq_len) {
                return Err(Error::Config(format!("pattern_pos {p} outside seq_len {}", c.seq_len)));
            }
            c.filler_tokens + 2 * c.num_classes
        }
        TaskSpec::NiahToy(c) => {
            if c.num_passkeys < 2 || c.filler_tokens == 0 {
                return Err(Error::Config("niah_toy needs num_passkeys >= 2 and filler_tokens >= 1".into()));
            }
            c.filler_tokens + c.num_passkeys
        }
    };
    if spec.seq_len() == 0 || spec.train_size() == 0 {
        return Err(Error::Config("task seq_len and train_size must be positive".into()));
    }
    if need > vocab {
        return Err(Error::Config(format!("{} needs {need} token ids, vocab is {vocab}", spec.kind())));
    }
    Ok(Task { spec, vocab, seed })
}

impl Task {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn seq_len(&self) -> usize {
        self.spec.seq_len()
    }

    pub fn train_size(&self) -> usize {
        self.spec.train_size()
    }

    pub fn eval_size(&self) -> usize {
        self.spec.eval_size()
    }

    pub fn num_labels(&self) -> usize {
        self.answer_tokens().len()
    }

    /// Token id the model should emit for each label.
    pub fn answer_tokens(&self) -> Vec<usize> {
        match &self.spec {
            TaskSpec::Seqclass(c) => (self.vocab - c.num_classes..self.vocab).collect(),
            TaskSpec::NiahToy(c) => (c.filler_tokens..c.filler_tokens + c.num_passkeys).collect(),
        }
    }

    fn generate(&self, stream: u64) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        match &self.spec {
            TaskSpec::Seqclass(c) => {
                let mut tokens: Vec<usize> = (0..c.seq_len).map(|_| rng.random_range(0..c.filler_tokens)).collect();
                let label = rng.random_range(0..c.num_classes);
                tokens[c.pattern_pos.unwrap_or(c.seq_len - 1)] = c.filler_tokens + label;
                Example { tokens, label }
            }
            TaskSpec::NiahToy(c) => {
                let mut tokens: Vec<usize> = (0..c.seq_len).map(|_| rng.random_range(0..c.filler_tokens)).collect();
                let label = rng.random_range(0..c.num_passkeys);
                let pos = rng.random_range(0..c.seq_len);
                tokens[pos] = c.filler_tokens + label;
                Example { tokens, label }
            }
        }
    }

    /// Training example `index`, cycling through `train_size` examples.
    pub fn train_example(&self, index: usize) -> Example {
        self.generate((index % self.train_size()) as u64)
    }

    pub fn heldout_example(&self, index: usize) -> Example {
        self.generate(HELDOUT_STREAM + index as u64)
    }

    /// Token grid plus answer-token targets and label indices.
    pub fn batch(&self, examples: &[Example]) -> Result<(TokenBatch, Vec<usize>, Vec<usize>)> {
        let answers = self.answer_tokens();
        let rows: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
        let tokens = TokenBatch::from_rows(&rows)?;
        let targets = examples.iter().map(|e| answers[e.label]).collect();
        let labels = examples.iter().map(|e| e.label).collect();
        Ok((tokens, targets, labels))
    }
}
