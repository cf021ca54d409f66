//! Supervised sequence tasks: Copy-k, RepeatFirst and cart-pole imitation.
//!
//! Datasets are stored as JSON:
//!
//! ```text
//! {
//!   "format": "temporal-range-dataset",
//!   "version": 1,
//!   "task": { "task": "copy", "k": 3, "len": 32, "vocab": 4 },
//!   "seed": 7, "n": 2, "len": 32, "dim": 4, "classes": 4,
//!   "sequences": [ { "x": [[1.0, 0.0, 0.0, 0.0], ...], "targets": [null, null, null, 2, ...] }, ... ]
//! }
//! ```
//!
//! `x` holds one row per step; `targets` holds a class index, a target
//! vector, or `null` where the loss is masked.

pub mod cartpole;
pub mod copy;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Target;
use crate::model::ObservationSequence;
use crate::rng::Rng;

pub use cartpole::{
    cartpole_step, expert_action, find_aliased_pair, gen_imitation, observe, Action, CartPoleEnv, CartPoleState,
    Hidden, ImitationSpec, ObsVariant,
};
pub use copy::{gen_copyk, gen_repeatfirst, CopyTaskSpec};

pub const DATASET_FORMAT: &str = "temporal-range-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub x: ObservationSequence,
    /// One entry per step; `None` where the loss is masked.
    pub targets: Vec<Option<Target>>,
}

impl LabeledSequence {
    pub fn new(x: ObservationSequence, targets: Vec<Option<Target>>) -> Result<Self> {
        if targets.len() != x.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {} steps",
                targets.len(),
                x.len()
            )));
        }
        Ok(Self { x, targets })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.targets.iter().map(Option::is_some).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskSpec {
    Copy(CopyTaskSpec),
    RepeatFirst { len: usize, vocab: usize },
    Cartpole(ImitationSpec),
}

impl TaskSpec {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        match self {
            TaskSpec::Copy(c) => c.len,
            TaskSpec::RepeatFirst { len, .. } => *len,
            TaskSpec::Cartpole(s) => s.len,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TaskSpec::Copy(c) => c.vocab,
            TaskSpec::RepeatFirst { vocab, .. } => *vocab,
            TaskSpec::Cartpole(s) => s.variant.dim(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            TaskSpec::Copy(c) => c.vocab,
            TaskSpec::RepeatFirst { vocab, .. } => *vocab,
            TaskSpec::Cartpole(_) => 2,
        }
    }

    pub fn generate(&self, n: usize, rng: &mut Rng) -> Result<Vec<LabeledSequence>> {
        match self {
            TaskSpec::Copy(c) => gen_copyk(c, n, rng),
            TaskSpec::RepeatFirst { len, vocab } => gen_repeatfirst(*len, *vocab, n, rng),
            TaskSpec::Cartpole(s) => gen_imitation(s, n, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskSpec,
    pub seed: u64,
    pub sequences: Vec<LabeledSequence>,
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    x: Vec<Vec<f64>>,
    targets: Vec<Option<Target>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    task: TaskSpec,
    seed: u64,
    n: usize,
    len: usize,
    dim: usize,
    classes: usize,
    sequences: Vec<SequenceRecord>,
}

impl Dataset {
    pub fn generate(task: TaskSpec, n: usize, seed: u64) -> Result<Self> {
        let sequences = task.generate(n, &mut Rng::new(seed))?;
        Ok(Self { task, seed, sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            task: self.task,
            seed: self.seed,
            n: self.sequences.len(),
            len: self.task.len(),
            dim: self.task.input_dim(),
            classes: self.task.classes(),
            sequences: self
                .sequences
                .iter()
                .map(|s| SequenceRecord {
                    x: (0..s.x.len()).map(|t| s.x.step(t).to_vec()).collect(),
                    targets: s.targets.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        if file.format != DATASET_FORMAT {
            return Err(Error::Format {
                offset: 0,
                message: format!("not a dataset file (format `{}`)", file.format),
            });
        }
        if file.version != DATASET_VERSION {
            return Err(Error::Version {
                found: file.version.to_string(),
                expected: DATASET_VERSION,
            });
        }
        let bad = |msg: String| Error::Format {
            offset: 0,
            message: msg,
        };
        if file.sequences.len() != file.n {
            return Err(bad(format!(
                "header says {} sequences, found {}",
                file.n,
                file.sequences.len()
            )));
        }
        let mut sequences = Vec::with_capacity(file.n);
        for (i, rec) in file.sequences.into_iter().enumerate() {
            let x = ObservationSequence::from_rows(&rec.x)?;
            if x.len() != file.len || x.dim() != file.dim {
                return Err(bad(format!(
                    "sequence {i} is {}x{}, header says {}x{}",
                    x.len(),
                    x.dim(),
                    file.len,
                    file.dim
                )));
            }
            for t in rec.targets.iter().flatten() {
                if let Target::Class(c) = t {
                    if *c >= file.classes {
                        return Err(bad(format!("sequence {i} has class {c} >= {}", file.classes)));
                    }
                }
            }
            sequences.push(LabeledSequence::new(x, rec.targets)?);
        }
        Ok(Self {
            task: file.task,
            seed: file.seed,
            sequences,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        for task in [
            TaskSpec::Copy(CopyTaskSpec::new(2, 6)),
            TaskSpec::RepeatFirst { len: 5, vocab: 3 },
            TaskSpec::Cartpole(ImitationSpec::new(ObsVariant::noisy(), 6)),
        ] {
            let ds = Dataset::generate(task, 3, 11).unwrap();
            let text = ds.to_json().unwrap();
            assert_eq!(Dataset::from_json(&text).unwrap(), ds);
            assert_eq!(Dataset::generate(task, 3, 11).unwrap().to_json().unwrap(), text);
        }
    }

    #[test]
    fn dataset_rejects_bad_headers() {
        let ds = Dataset::generate(TaskSpec::Copy(CopyTaskSpec::new(1, 4)), 2, 0).unwrap();
        let text = ds.to_json().unwrap();
        assert!(matches!(
            Dataset::from_json(&text.replace("\"version\":1", "\"version\":2")),
            Err(Error::Version { .. })
        ));
        assert!(Dataset::from_json(&text.replace("\"n\":2", "\"n\":3")).is_err());
        assert!(Dataset::from_json(&text.replace("\"classes\":4", "\"classes\":1")).is_err());
        assert!(Dataset::from_json("{").is_err());
    }

    #[test]
    fn ragged_targets_rejected() {
        let x = ObservationSequence::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(LabeledSequence::new(x, vec![None]).is_err());
    }
}
