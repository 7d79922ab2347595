//! Observations, phoneme sequences, the synthetic corpus and the log-Mel
//! featurizer.

mod corpus;
mod featurize;

pub use corpus::{gen_corpus, load_corpus, save_corpus, CorpusItem, SynthCorpus, SynthCorpusConfig, TemplateTable};
pub use featurize::{mel_featurize, mel_filterbank, LOG_FLOOR};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-Mel spectrogram, `N` frames by `D_mel` bins (natural log).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f64>,
    pub frame_hop_s: f64,
}

impl MelSpectrogram {
    pub fn new(values: Array2<f64>, frame_hop_s: f64) -> Result<Self> {
        let (n, d) = values.dim();
        if n == 0 || d == 0 {
            return Err(Error::Shape(format!("empty spectrogram {n}x{d}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("spectrogram contains non-finite values".into()));
        }
        Ok(Self { values, frame_hop_s })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    /// Max minus min over all cells.
    pub fn dynamic_range(&self) -> f64 {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        hi - lo
    }
}

/// Phoneme ids over a vocabulary of `vocab_size` symbols.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Shape("empty phoneme sequence".into()));
        }
        if let Some(bad) = ids.iter().find(|i| **i >= vocab_size) {
            return Err(Error::Config(format!(
                "phoneme id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Parses `"3 1 4"`, `"3,1,4"` or `"p3 p1 p4"`.
    pub fn parse(text: &str, vocab_size: usize) -> Result<Self> {
        let ids = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|tok| {
                tok.trim_start_matches('p')
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad phoneme token {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, vocab_size)
    }
}
