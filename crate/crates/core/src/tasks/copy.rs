//! Symbol recall tasks over a one-hot vocabulary.

use serde::{Deserialize, Serialize};

use super::LabeledSequence;
use crate::error::{Error, Result};
use crate::grad::Target;
use crate::linalg::Matrix;
use crate::model::ObservationSequence;
use crate::rng::Rng;

pub const DEFAULT_VOCAB: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyTaskSpec {
    pub k: usize,
    pub len: usize,
    pub vocab: usize,
}

impl CopyTaskSpec {
    pub fn new(k: usize, len: usize) -> Self {
        Self {
            k,
            len,
            vocab: DEFAULT_VOCAB,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k >= self.len {
            return Err(Error::Spec(format!(
                "copy offset must satisfy 1 <= k <= T-1, got k={} T={}",
                self.k, self.len
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Spec(format!(
                "vocabulary needs >= 2 symbols, got {}",
                self.vocab
            )));
        }
        Ok(())
    }
}

pub fn one_hot(symbols: &[usize], vocab: usize) -> Result<ObservationSequence> {
    let mut m = Matrix::zeros(symbols.len(), vocab);
    for (t, &s) in symbols.iter().enumerate() {
        m.set(t, s, 1.0);
    }
    ObservationSequence::new(m)
}

fn symbols(rng: &mut Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.below(vocab)).collect()
}

/// Targets `symbol[s-k]` for `s >= k`; earlier steps are masked.
pub fn copy_targets(symbols: &[usize], k: usize) -> Vec<Option<Target>> {
    (0..symbols.len())
        .map(|s| (s >= k).then(|| Target::Class(symbols[s - k])))
        .collect()
}

/// Targets `symbol[0]` for every step after the first.
pub fn repeat_first_targets(symbols: &[usize]) -> Vec<Option<Target>> {
    (0..symbols.len())
        .map(|s| (s >= 1).then(|| Target::Class(symbols[0])))
        .collect()
}

pub fn gen_copyk(spec: &CopyTaskSpec, n: usize, rng: &mut Rng) -> Result<Vec<LabeledSequence>> {
    spec.validate()?;
    (0..n)
        .map(|_| {
            let sym = symbols(rng, spec.len, spec.vocab);
            LabeledSequence::new(one_hot(&sym, spec.vocab)?, copy_targets(&sym, spec.k))
        })
        .collect()
}

pub fn gen_repeatfirst(len: usize, vocab: usize, n: usize, rng: &mut Rng) -> Result<Vec<LabeledSequence>> {
    if len < 2 {
        return Err(Error::Spec(format!("RepeatFirst needs T >= 2, got {len}")));
    }
    if vocab < 2 {
        return Err(Error::Spec(format!("vocabulary needs >= 2 symbols, got {vocab}")));
    }
    (0..n)
        .map(|_| {
            let sym = symbols(rng, len, vocab);
            LabeledSequence::new(one_hot(&sym, vocab)?, repeat_first_targets(&sym))
        })
        .collect()
}
