//! Minimal-CTC phoneme aligner: exactly one emitting frame per phoneme.

mod ctc;
mod model;

pub use ctc::{forced_align, minimal_ctc_forward_backward, minimal_ctc_loss};
pub use model::{spike_accuracy, train_aligner, AlignerConfig, AlignerModel, AlignerTrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spike positions (1-based frame indices) and the durations between them.
///
/// `d_i = a_i - a_{i-1}` with `a_0 = 0`, so `sum(d) = a_M`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub spikes: Vec<usize>,
    pub durations: Vec<usize>,
}

/// Consecutive differences of a strictly increasing, 1-based spike sequence.
pub fn durations(spikes: &[usize]) -> Result<Vec<usize>> {
    let mut prev = 0;
    spikes
        .iter()
        .map(|&a| {
            if a <= prev {
                return Err(Error::InvalidAlignment(format!(
                    "spikes must be strictly increasing from 1, got {spikes:?}"
                )));
            }
            let d = a - prev;
            prev = a;
            Ok(d)
        })
        .collect()
}

impl Alignment {
    pub fn from_spikes(spikes: &[usize]) -> Result<Self> {
        if spikes.is_empty() {
            return Err(Error::InvalidAlignment("no spikes".into()));
        }
        Ok(Self {
            durations: durations(spikes)?,
            spikes: spikes.to_vec(),
        })
    }

    pub fn from_durations(durations: &[usize]) -> Result<Self> {
        if durations.is_empty() || durations.contains(&0) {
            return Err(Error::InvalidAlignment(format!(
                "durations must be positive, got {durations:?}"
            )));
        }
        let spikes = durations
            .iter()
            .scan(0, |acc, d| {
                *acc += d;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            spikes,
            durations: durations.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.spikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spikes.is_empty()
    }

    /// Last spike, i.e. the total number of frames covered.
    pub fn total_frames(&self) -> usize {
        self.spikes.last().copied().unwrap_or(0)
    }

    pub fn check_frames(&self, frames: usize) -> Result<()> {
        let last = self.total_frames();
        if last > frames {
            return Err(Error::AlignmentExceedsFrames {
                last_spike: last,
                frames,
            });
        }
        Ok(())
    }

    /// 0-based frame index of each spike.
    pub fn spike_indices(&self) -> Vec<usize> {
        self.spikes.iter().map(|a| a - 1).collect()
    }
}
