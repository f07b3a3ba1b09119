//! Synthetic sequence tasks with exact-match verifiers.
//!
//! Token `0` is begin/pad and token `1` the terminator; symbol tokens start
//! at `2`, and symbol token `2 + v` encodes the digit value `v`. Every
//! expected answer ends with the terminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::TERMINATOR_TOKEN;

pub const FIRST_SYMBOL: u32 = 2;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("vocab_size {0} < 4: need the two reserved tokens and two symbols")]
    Vocab(usize),
    #[error("invalid length range [{0}, {1}]")]
    Length(usize, usize),
    #[error("modulus {modulus} must be in [2, {max}]")]
    Modulus { modulus: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Modsum,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Modsum => "modsum",
        })
    }
}

/// Task section of the run config, e.g. `{"task": "modsum", "len": [2, 6], "vocab": 16}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub len: [usize; 2],
    pub vocab: usize,
    /// MODSUM modulus; defaults to `vocab - 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modulus: Option<usize>,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        check(self.task, self.len, self.vocab, self.modulus).map(|_| ())
    }

    pub fn generate(&self, seed: u64) -> Result<TaskInstance, TaskError> {
        generate_instance(self.task, self.len, self.vocab, self.modulus, seed)
    }

    /// Effective MODSUM modulus (or the symbol count for the other tasks).
    pub fn modulus(&self) -> usize {
        self.modulus.unwrap_or(self.vocab.saturating_sub(2))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub prompt: Vec<u32>,
    pub expected: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub reward: f64,
    pub format_ok: bool,
}

fn check(
    kind: TaskKind,
    len: [usize; 2],
    vocab: usize,
    modulus: Option<usize>,
) -> Result<usize, TaskError> {
    if vocab < 4 {
        return Err(TaskError::Vocab(vocab));
    }
    if len[0] == 0 || len[0] > len[1] {
        return Err(TaskError::Length(len[0], len[1]));
    }
    let symbols = vocab - 2;
    match kind {
        TaskKind::Modsum => {
            let m = modulus.unwrap_or(symbols);
            if !(2..=symbols).contains(&m) {
                return Err(TaskError::Modulus {
                    modulus: m,
                    max: symbols,
                });
            }
            Ok(m)
        }
        _ => Ok(symbols),
    }
}

/// Draws a prompt and derives its expected answer.
///
/// COPY and REVERSE draw digits from every symbol; MODSUM draws digits below
/// the modulus and expects the single token for their sum mod the modulus.
pub fn generate_instance(
    kind: TaskKind,
    len_range: [usize; 2],
    vocab_size: usize,
    modulus: Option<usize>,
    seed: u64,
) -> Result<TaskInstance, TaskError> {
    let digits = check(kind, len_range, vocab_size, modulus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(len_range[0]..=len_range[1]);
    let values: Vec<usize> = (0..len).map(|_| rng.gen_range(0..digits)).collect();
    Ok(instance_from_digits(kind, &values, digits))
}

/// Builds the instance for explicit digit values.
pub fn instance_from_digits(kind: TaskKind, values: &[usize], modulus: usize) -> TaskInstance {
    let prompt: Vec<u32> = values.iter().map(|&v| FIRST_SYMBOL + v as u32).collect();
    let mut expected = match kind {
        TaskKind::Copy => prompt.clone(),
        TaskKind::Reverse => prompt.iter().rev().copied().collect(),
        TaskKind::Modsum => {
            let sum: usize = values.iter().sum();
            vec![FIRST_SYMBOL + (sum % modulus) as u32]
        }
    };
    expected.push(TERMINATOR_TOKEN);
    TaskInstance {
        kind,
        prompt,
        expected,
    }
}

/// Exact-match reward plus a format flag (response ends with the terminator).
pub fn verify(instance: &TaskInstance, response: &[u32]) -> Verdict {
    Verdict {
        reward: if response == instance.expected.as_slice() {
            1.0
        } else {
            0.0
        },
        format_ok: response.last() == Some(&TERMINATOR_TOKEN),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T: u32 = TERMINATOR_TOKEN;

    #[test]
    fn definitional_examples() {
        // digits [3, 5] are tokens [5, 7]
        let copy = instance_from_digits(TaskKind::Copy, &[3, 5], 14);
        assert_eq!(copy.expected, vec![5, 7, T]);
        let rev = instance_from_digits(TaskKind::Reverse, &[3, 5, 7], 14);
        assert_eq!(rev.expected, vec![9, 7, 5, T]);
        let ms = instance_from_digits(TaskKind::Modsum, &[3, 5, 7], 10);
        assert_eq!(ms.expected, vec![FIRST_SYMBOL + 5, T]);
    }

    #[test]
    fn modsum_default_modulus_is_vocab_minus_two() {
        let cfg = TaskConfig {
            task: TaskKind::Modsum,
            len: [3, 3],
            vocab: 12,
            modulus: None,
        };
        assert_eq!(cfg.modulus(), 10);
        for seed in 0..50 {
            let inst = cfg.generate(seed).unwrap();
            let sum: u32 = inst.prompt.iter().map(|t| t - FIRST_SYMBOL).sum();
            assert_eq!(inst.expected, vec![FIRST_SYMBOL + sum % 10, T]);
        }
    }

    #[test]
    fn verify_examples() {
        let inst = instance_from_digits(TaskKind::Copy, &[3, 5], 14);
        assert_eq!(
            verify(&inst, &[5, 7, T]),
            Verdict {
                reward: 1.0,
                format_ok: true
            }
        );
        assert_eq!(
            verify(&inst, &[5, 7]),
            Verdict {
                reward: 0.0,
                format_ok: false
            }
        );
        assert_eq!(
            verify(&inst, &[5, 8, T]),
            Verdict {
                reward: 0.0,
                format_ok: true
            }
        );
        assert_eq!(
            verify(&inst, &[5, 8, 9]),
            Verdict {
                reward: 0.0,
                format_ok: false
            }
        );
    }

    #[test]
    fn invalid_configs() {
        assert_eq!(
            generate_instance(TaskKind::Copy, [1, 3], 3, None, 0),
            Err(TaskError::Vocab(3))
        );
        assert_eq!(
            generate_instance(TaskKind::Copy, [0, 3], 8, None, 0),
            Err(TaskError::Length(0, 3))
        );
        assert_eq!(
            generate_instance(TaskKind::Copy, [4, 3], 8, None, 0),
            Err(TaskError::Length(4, 3))
        );
        assert!(generate_instance(TaskKind::Modsum, [1, 3], 8, Some(7), 0).is_err());
        assert!(generate_instance(TaskKind::Modsum, [1, 3], 8, Some(6), 0).is_ok());
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_instance(TaskKind::Reverse, [2, 6], 16, None, 9).unwrap();
        let b = generate_instance(TaskKind::Reverse, [2, 6], 16, None, 9).unwrap();
        assert_eq!(a, b);
        assert!((2..=6).contains(&a.prompt.len()));
    }

    #[test]
    fn config_json_shape() {
        let cfg: TaskConfig =
            serde_json::from_str(r#"{"task": "modsum", "len": [2, 6], "vocab": 16}"#).unwrap();
        assert_eq!(cfg.task, TaskKind::Modsum);
        assert_eq!(cfg.modulus(), 14);
        assert!(serde_json::from_str::<TaskConfig>(
            r#"{"task":"copy","len":[1,2],"vocab":8,"x":1}"#
        )
        .is_err());
    }
}
