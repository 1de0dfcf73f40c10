//! Synthetic sequence tasks with deterministic targets.
//!
//! The model carries no positional embedding (position information exists
//! only through the causal mask), so every task's target is a function the
//! network can compute from token content alone.

use super::{ModelError, ModelResult};
use crate::tensor::RngStream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Target at every position is the input token itself.
    Copy,
    /// Each sequence follows a fresh random bigram map f: x(t+1) = f(x(t));
    /// the target is the successor token. Solving it in-context requires
    /// recalling what followed earlier occurrences of the current token.
    Induction,
    /// Tokens are digits below the modulus; the target at position t is
    /// (x(0) + x(t)) mod m.
    ModularAdd { modulus: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn copy(seq_len: usize, seed: u64) -> TaskSpec {
        TaskSpec { kind: TaskKind::Copy, seq_len, seed }
    }

    pub fn validate(&self, vocab: usize, context: usize) -> ModelResult<()> {
        if self.seq_len == 0 || self.seq_len > context {
            return Err(ModelError::InvalidConfig { field: "task seq_len exceeds context" });
        }
        if let TaskKind::ModularAdd { modulus } = self.kind {
            if modulus < 2 || modulus as usize > vocab {
                return Err(ModelError::InvalidConfig {
                    field: "modular-add modulus must lie in 2..=vocab",
                });
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            TaskKind::Copy => "copy".to_string(),
            TaskKind::Induction => "induction".to_string(),
            TaskKind::ModularAdd { modulus } => format!("modular_add_{modulus}"),
        }
    }
}

/// A batch of token sequences with per-position targets, flattened row-major.
/// Loss and accuracy count only `scored` positions; for the induction task
/// these are the positions whose target is determined by the visible prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub scored: Vec<bool>,
    pub batch_size: usize,
    pub seq_len: usize,
}

/// Fisher-Yates permutation of 0..n.
fn random_permutation(n: usize, rng: &mut RngStream) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..n as u32).collect();
    for i in (1..n).rev() {
        let j = rng.next_index(i + 1);
        perm.swap(i, j);
    }
    perm
}

/// Draws one batch for `task`. Deterministic given the stream state.
pub fn sample_batch(
    task: &TaskSpec,
    vocab: usize,
    batch_size: usize,
    rng: &mut RngStream,
) -> ModelResult<Batch> {
    let t = task.seq_len;
    let mut tokens = Vec::with_capacity(batch_size * t);
    let mut targets = Vec::with_capacity(batch_size * t);
    let mut scored = Vec::with_capacity(batch_size * t);
    for _ in 0..batch_size {
        match task.kind {
            TaskKind::Copy => {
                for _ in 0..t {
                    let x = rng.next_index(vocab) as u32;
                    tokens.push(x);
                    targets.push(x);
                    scored.push(true);
                }
            }
            TaskKind::Induction => {
                // A fresh ring of distinct tokens walked cyclically, so the
                // pattern repeats several times within the context window.
                let ring_len = (vocab / 8).clamp(2, (t / 2).max(2));
                let perm = random_permutation(vocab, rng);
                let ring = &perm[..ring_len];
                let start = rng.next_index(ring_len);
                let mut seen = vec![false; vocab];
                for pos in 0..t {
                    let x = ring[(start + pos) % ring_len];
                    tokens.push(x);
                    targets.push(ring[(start + pos + 1) % ring_len]);
                    // Predictable once the current token has appeared before.
                    scored.push(seen[x as usize]);
                    seen[x as usize] = true;
                }
            }
            TaskKind::ModularAdd { modulus } => {
                let m = modulus as usize;
                let first = rng.next_index(m) as u32;
                for pos in 0..t {
                    let x = if pos == 0 { first } else { rng.next_index(m) as u32 };
                    tokens.push(x);
                    targets.push((first + x) % modulus);
                    scored.push(true);
                }
            }
        }
    }
    Ok(Batch { tokens, targets, scored, batch_size, seq_len: t })
}
