//! Synthetic sequence tasks with reproducible, disjoint train/eval splits.
//!
//! Token ids 0 and 1 are reserved (`SEP` between prompt and answer, `OP`
//! inside arithmetic prompts); payload symbols start at 2. Every example
//! carries the index where its answer region begins, and only that region
//! is supervised.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainerError;

/// Separator between prompt and answer.
pub const SEP: u32 = 0;
/// Operator symbol inside modular-addition prompts.
pub const OP: u32 = 1;
/// First token id available to task payloads.
pub const PAYLOAD_BASE: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularAdd,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModularAdd => "modular_add",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "modular_add" => Ok(TaskKind::ModularAdd),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

/// Recipe for a dataset. `seq_len` is the answer length: copy/reverse use a
/// payload of `seq_len` symbols (total sequence `2*seq_len + 1`), and
/// modular addition requires `seq_len == 1` (the answer is one symbol).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_train: usize,
    pub num_eval: usize,
    #[serde(default)]
    pub seed: u64,
}

/// One tokenized sequence; positions at or after `answer_start` are the
/// supervised answer region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub answer_start: usize,
}

impl Example {
    /// Next-token targets, one per position: position `p` is supervised iff
    /// position `p + 1` exists and lies in the answer region.
    pub fn targets(&self) -> Vec<Option<u32>> {
        (0..self.tokens.len())
            .map(|p| {
                (p + 1 < self.tokens.len() && p + 1 >= self.answer_start)
                    .then(|| self.tokens[p + 1])
            })
            .collect()
    }

    pub fn answer(&self) -> &[u32] {
        &self.tokens[self.answer_start..]
    }

    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.answer_start]
    }
}

/// Disjoint train and eval splits of one task.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl TaskSpec {
    /// Alphabet available to payload symbols.
    fn payload_symbols(&self) -> usize {
        self.vocab_size.saturating_sub(PAYLOAD_BASE as usize)
    }

    /// Number of distinct examples this spec can ever produce.
    pub fn capacity(&self) -> usize {
        let s = self.payload_symbols();
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => {
                let mut cap = 1usize;
                for _ in 0..self.seq_len {
                    cap = cap.saturating_mul(s);
                }
                cap
            }
            TaskKind::ModularAdd => s.saturating_mul(s),
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let mut problems = Vec::new();
        if self.seq_len == 0 {
            problems.push("seq_len must be at least 1".to_string());
        }
        if self.payload_symbols() < 1 {
            problems.push(format!(
                "vocab_size {} leaves no payload symbols (ids 0 and 1 are reserved)",
                self.vocab_size
            ));
        }
        match self.kind {
            TaskKind::ModularAdd => {
                if self.seq_len != 1 {
                    problems.push(format!(
                        "modular_add answers are single symbols; seq_len must be 1, got {}",
                        self.seq_len
                    ));
                }
                if self.payload_symbols() < 2 {
                    problems.push(format!(
                        "modular_add needs a modulus of at least 2; vocab_size {} gives {}",
                        self.vocab_size,
                        self.payload_symbols()
                    ));
                }
            }
            TaskKind::Copy | TaskKind::Reverse => {}
        }
        if self.num_train == 0 {
            problems.push("num_train must be at least 1".to_string());
        }
        if !problems.is_empty() {
            return Err(TrainerError::InvalidTask(problems.join("; ")));
        }
        let requested = self.num_train + self.num_eval;
        let capacity = self.capacity();
        if requested > capacity {
            return Err(TrainerError::TaskCapacityExceeded { requested, capacity });
        }
        Ok(())
    }

    /// Full sequence length of every example this spec produces.
    pub fn sequence_len(&self) -> usize {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => 2 * self.seq_len + 1,
            TaskKind::ModularAdd => 5,
        }
    }
}

fn payload_to_example(kind: TaskKind, payload: &[u32]) -> Example {
    match kind {
        TaskKind::Copy => {
            let mut tokens = payload.to_vec();
            tokens.push(SEP);
            tokens.extend_from_slice(payload);
            Example { tokens, answer_start: payload.len() + 1 }
        }
        TaskKind::Reverse => {
            let mut tokens = payload.to_vec();
            tokens.push(SEP);
            tokens.extend(payload.iter().rev().copied());
            Example { tokens, answer_start: payload.len() + 1 }
        }
        TaskKind::ModularAdd => unreachable!("modular examples are built from operand pairs"),
    }
}

fn modular_example(x: u32, y: u32, modulus: u32) -> Example {
    let z = (x + y) % modulus;
    Example {
        tokens: vec![PAYLOAD_BASE + x, OP, PAYLOAD_BASE + y, SEP, PAYLOAD_BASE + z],
        answer_start: 4,
    }
}

/// Builds the dataset: `num_train + num_eval` distinct examples, split in
/// order, so the two sets never overlap. Fully determined by `spec.seed`.
pub fn generate_task(spec: &TaskSpec) -> Result<Dataset, TrainerError> {
    spec.validate()?;
    let requested = spec.num_train + spec.num_eval;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let examples = match spec.kind {
        TaskKind::ModularAdd => {
            // The operand space is tiny; enumerate and shuffle instead of
            // rejection-sampling so requests near capacity still terminate.
            let modulus = spec.payload_symbols() as u32;
            let mut pairs: Vec<(u32, u32)> =
                (0..modulus).flat_map(|x| (0..modulus).map(move |y| (x, y))).collect();
            for i in (1..pairs.len()).rev() {
                let j = rng.gen_range(0..=i);
                pairs.swap(i, j);
            }
            pairs
                .into_iter()
                .take(requested)
                .map(|(x, y)| modular_example(x, y, modulus))
                .collect::<Vec<_>>()
        }
        TaskKind::Copy | TaskKind::Reverse => {
            let symbols = spec.payload_symbols() as u32;
            let mut seen = BTreeSet::new();
            let mut examples = Vec::with_capacity(requested);
            let max_attempts = 1000 + 200 * requested;
            let mut attempts = 0;
            while examples.len() < requested {
                attempts += 1;
                if attempts > max_attempts {
                    return Err(TrainerError::GenerationStalled { attempts, requested });
                }
                let payload: Vec<u32> = (0..spec.seq_len)
                    .map(|_| PAYLOAD_BASE + rng.gen_range(0..symbols))
                    .collect();
                if seen.insert(payload.clone()) {
                    examples.push(payload_to_example(spec.kind, &payload));
                }
            }
            examples
        }
    };
    let (train, eval) = examples.split_at(spec.num_train);
    Ok(Dataset { spec: spec.clone(), train: train.to_vec(), eval: eval.to_vec() })
}
