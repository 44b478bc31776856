//! Generator and discriminator networks over `(B, T, D)` mel batches.

mod conformer;
mod content;
mod discriminator;
mod generator;
mod timbre;
#[cfg(test)]
mod net_tests;

use cyclevc_autograd::{Binder, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub use conformer::ConformerLayer;
pub use content::{ContentEncoder, ExternalContentEncoder};
pub use discriminator::{Discriminator, PatchScores};
pub use generator::{FusionShapes, Generator};
pub use timbre::TimbreTrunk;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentEncoderKind {
    /// Trainable convolution stack with instance normalization.
    Conv,
    /// Features supplied by an [`ExternalContentEncoder`]; no parameters.
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Reference-attending conformer stack.
    Conformer,
    /// One linear layer on the content/timbre concatenation, no reference.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub mel_bins: usize,
    /// Content channels `C`; the fused width is `2C`.
    pub content_channels: usize,
    pub content_encoder: ContentEncoderKind,
    pub content_layers: usize,
    pub content_hidden: usize,
    pub content_kernel: usize,
    pub content_frozen: bool,
    /// Content frames per mel frame as `(num, den)`.
    pub content_upsample: (usize, usize),
    pub encoder_layers: usize,
    /// Per-bin channels of the frequency-axis convolutions.
    pub encoder_channels: usize,
    pub encoder_hidden: usize,
    pub encoder_kernel: usize,
    pub fusion: FusionKind,
    pub conformer_layers: usize,
    pub conformer_heads: usize,
    pub conformer_ff_mult: usize,
    pub conformer_kernel: usize,
    pub max_rel_pos: usize,
    pub ref_compress_factor: usize,
    pub decoder_blocks: usize,
    pub decoder_hidden: usize,
    pub decoder_kernel: usize,
    pub disc_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::desk()
    }
}

impl NetConfig {
    /// Sized for CPU training on 24-bin synthetic corpora.
    pub fn desk() -> Self {
        NetConfig {
            mel_bins: 24,
            content_channels: 16,
            content_encoder: ContentEncoderKind::Conv,
            content_layers: 4,
            content_hidden: 32,
            content_kernel: 5,
            content_frozen: false,
            content_upsample: (1, 1),
            encoder_layers: 5,
            encoder_channels: 4,
            encoder_hidden: 32,
            encoder_kernel: 5,
            fusion: FusionKind::Conformer,
            conformer_layers: 2,
            conformer_heads: 2,
            conformer_ff_mult: 2,
            conformer_kernel: 7,
            max_rel_pos: 32,
            ref_compress_factor: 4,
            decoder_blocks: 3,
            decoder_hidden: 32,
            decoder_kernel: 5,
            disc_channels: 8,
        }
    }

    /// Published layer counts and widths (80 bins, 256 content channels).
    pub fn full_scale() -> Self {
        NetConfig {
            mel_bins: 80,
            content_channels: 256,
            content_hidden: 256,
            encoder_layers: 5,
            encoder_channels: 8,
            encoder_hidden: 512,
            encoder_kernel: 5,
            conformer_layers: 6,
            conformer_heads: 4,
            conformer_ff_mult: 4,
            conformer_kernel: 31,
            max_rel_pos: 64,
            decoder_blocks: 5,
            decoder_hidden: 512,
            decoder_kernel: 5,
            disc_channels: 32,
            ..NetConfig::desk()
        }
    }

    /// Tiny widths for gradient checks.
    pub fn miniature() -> Self {
        NetConfig {
            mel_bins: 6,
            content_channels: 8,
            content_layers: 2,
            content_hidden: 6,
            content_kernel: 3,
            encoder_layers: 2,
            encoder_channels: 2,
            encoder_hidden: 6,
            encoder_kernel: 3,
            conformer_layers: 2,
            conformer_heads: 2,
            conformer_ff_mult: 1,
            conformer_kernel: 3,
            max_rel_pos: 4,
            ref_compress_factor: 2,
            decoder_blocks: 1,
            decoder_hidden: 6,
            decoder_kernel: 3,
            disc_channels: 2,
            ..NetConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("net config: {m}")));
        if self.mel_bins == 0 || self.content_channels == 0 {
            return bad("mel_bins and content_channels must be positive");
        }
        if self.ref_compress_factor == 0 {
            return bad("ref_compress_factor must be at least 1");
        }
        if self.content_upsample.0 == 0 || self.content_upsample.1 == 0 {
            return bad("content_upsample terms must be positive");
        }
        if (2 * self.content_channels) % self.conformer_heads.max(1) != 0 {
            return bad("conformer_heads must divide 2 * content_channels");
        }
        for (name, k) in [
            ("content_kernel", self.content_kernel),
            ("encoder_kernel", self.encoder_kernel),
            ("conformer_kernel", self.conformer_kernel),
            ("decoder_kernel", self.decoder_kernel),
        ] {
            if k % 2 == 0 {
                return bad(&format!("{name} must be odd"));
            }
        }
        if self.content_encoder == ContentEncoderKind::Conv && self.content_layers == 0 {
            return bad("content_layers must be positive");
        }
        if self.encoder_layers == 0 || self.conformer_heads == 0 {
            return bad("encoder_layers and conformer_heads must be positive");
        }
        Ok(())
    }

    /// Content frames for `mel_frames` mel frames, rounded to nearest.
    pub fn content_frames(&self, mel_frames: usize) -> usize {
        let (n, d) = self.content_upsample;
        ((mel_frames * n + d / 2) / d).max(1)
    }
}

/// Per-bin mel statistics. Every network normalizes its mel input with them;
/// they are stored as frozen parameters so checkpoints carry them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MelNorm {
    pub fn identity(bins: usize) -> Self {
        MelNorm { mean: vec![0.0; bins], std: vec![1.0; bins] }
    }

    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let bins = corpus.mel_bins().ok_or_else(|| Error::Invalid("mel statistics of an empty corpus".into()))?;
        let (mut s, mut s2, mut n) = (vec![0.0; bins], vec![0.0; bins], 0usize);
        for u in corpus.utterances() {
            for t in 0..u.frames() {
                for (b, &v) in u.mel.row(t).iter().enumerate() {
                    s[b] += v as f64;
                    s2[b] += v as f64 * v as f64;
                }
                n += 1;
            }
        }
        let mean: Vec<f64> = s.iter().map(|x| x / n as f64).collect();
        let std = s2.iter().zip(&mean).map(|(x2, m)| (x2 / n as f64 - m * m).max(0.0).sqrt().max(1e-3)).collect();
        Ok(MelNorm { mean, std })
    }
}

/// [`MelNorm`] registered in a parameter store.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub mean: ParamId,
    pub std: ParamId,
}

impl NormParams {
    pub fn new(store: &mut ParamStore, norm: &MelNorm) -> Self {
        let d = norm.mean.len();
        let mean = store.add("norm.mean", Tensor::new(&[d], norm.mean.clone()));
        let std = store.add("norm.std", Tensor::new(&[d], norm.std.clone()));
        store.set_frozen(mean, true);
        store.set_frozen(std, true);
        NormParams { mean, std }
    }

    pub fn apply<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.sub(p.param(self.mean)).div(p.param(self.std))
    }

    pub fn mean_values(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.mean).data().to_vec()
    }
}

/// Nearest-neighbour resampling of axis 1 to `len` positions.
pub fn resample_time<'g>(x: Var<'g>, len: usize) -> Var<'g> {
    let t = x.dim(1);
    if t == len {
        return x;
    }
    let idx: Vec<usize> = (0..len).map(|i| (i * t / len).min(t - 1)).collect();
    x.index_select(1, &idx)
}

/// `(x - mean_t) / sqrt(var_t + eps)` per channel over the time axis of
/// `(B, T, C)`.
pub fn instance_norm<'g>(x: Var<'g>, eps: f64) -> Var<'g> {
    let centred = x.sub(x.mean_axis(1));
    let var = centred.square().mean_axis(1);
    centred.div(var.add_scalar(eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_configs_validate() {
        NetConfig::desk().validate().unwrap();
        NetConfig::full_scale().validate().unwrap();
        NetConfig::miniature().validate().unwrap();
        let p = NetConfig::full_scale();
        assert_eq!((p.conformer_layers, p.encoder_layers, p.encoder_hidden, p.encoder_kernel), (6, 5, 512, 5));
        assert_eq!((p.decoder_blocks, p.decoder_hidden, p.decoder_kernel), (5, 512, 5));
    }

    #[test]
    fn content_frame_rounding() {
        let mut c = NetConfig::desk();
        assert_eq!(c.content_frames(100), 100);
        c.content_upsample = (1, 2);
        assert_eq!(c.content_frames(101), 51);
        c.content_upsample = (2, 1);
        assert_eq!(c.content_frames(7), 14);
    }
}
