//! Frozen helper networks used by the generator losses and the metrics: a
//! speaker-verification embedder, a CTC phoneme recognizer and a pitch
//! predictor, each with its own training routine.

mod asr;
mod pitch;
mod sv;

use cyclevc_autograd::Tensor;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::MelSpec;
use crate::error::{Error, Result};

pub use asr::{ctc_decode, ctc_feasible, AsrConfig, AsrModel, AsrOutputs, AsrPosteriorEncoder, AsrTrainConfig, ASR_STACK};
pub use pitch::{pitch_target, PitchConfig, PitchModel, PitchOutputs, PitchTrainConfig, PitchTraining};
pub use sv::{SvConfig, SvMode, SvModel, SvTrainConfig, SV_DIM};

/// Loss curve of one auxiliary training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Means of consecutive non-overlapping windows of `w` steps.
    pub fn window_means(&self, w: usize) -> Vec<f64> {
        self.losses.chunks_exact(w.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    }
}

/// `n` distinct indices below `len`, drawn with repetition when `len < n`.
pub(crate) fn sample_indices(len: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len >= n {
        index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Random equal-length crops of at most `max_frames`, stacked `(B, L, D)`.
/// Returns the tensor and each crop's start frame.
pub(crate) fn random_crops(mels: &[&MelSpec], max_frames: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
    let len = mels.iter().map(|m| m.frames()).min().ok_or_else(|| Error::Invalid("empty batch".into()))?.min(max_frames);
    let bins = mels[0].bins();
    let mut data = Vec::with_capacity(mels.len() * len * bins);
    let mut starts = Vec::with_capacity(mels.len());
    for m in mels {
        let start = rng.random_range(0..=m.frames() - len);
        starts.push(start);
        data.extend(m.values()[start * bins..(start + len) * bins].iter().map(|&v| v as f64));
    }
    Ok((Tensor::new(&[mels.len(), len, bins], data), starts))
}

pub(crate) fn check_finite(what: &str, step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Invalid(format!("{what} training diverged: loss {loss} at step {step}")));
    }
    Ok(())
}
