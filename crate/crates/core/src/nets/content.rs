use std::sync::Arc;

use cyclevc_autograd::layers::Conv1d;
use cyclevc_autograd::{Binder, ParamStore, Tensor, Var};
use rand::Rng;

use super::{instance_norm, resample_time, NetConfig};
use crate::corpus::MelSpec;
use crate::error::{Error, Result};

/// Source of precomputed or externally computed content features.
pub trait ExternalContentEncoder: Send + Sync {
    fn channels(&self) -> usize;

    /// `(T_ext, C)` features for one mel.
    fn encode(&self, mel: &MelSpec) -> Result<Tensor>;
}

#[derive(Clone)]
pub enum ContentEncoder {
    Conv { layers: Vec<Conv1d> },
    External(Arc<dyn ExternalContentEncoder>),
}

impl std::fmt::Debug for ContentEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ContentEncoder::Conv { layers } => write!(f, "ContentEncoder::Conv({} layers)", layers.len()),
            ContentEncoder::External(e) => write!(f, "ContentEncoder::External({} channels)", e.channels()),
        }
    }
}

pub(crate) const INSTANCE_NORM_EPS: f64 = 1e-5;

impl ContentEncoder {
    pub fn conv(store: &mut ParamStore, cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let n = cfg.content_layers;
        let layers = (0..n)
            .map(|i| {
                let cin = if i == 0 { cfg.mel_bins } else { cfg.content_hidden };
                let cout = if i + 1 == n { cfg.content_channels } else { cfg.content_hidden };
                Conv1d::new(store, &format!("content.conv{i}"), cin, cout, cfg.content_kernel, rng)
            })
            .collect();
        if cfg.content_frozen {
            store.freeze_prefix("content.");
        }
        ContentEncoder::Conv { layers }
    }

    /// `(B, T, D)` normalized mel → `(B, content_frames(T), C)`. `raw` is the
    /// unnormalized batch, which external encoders receive.
    pub fn forward<'g>(&self, p: &Binder<'g, '_>, cfg: &NetConfig, normed: Var<'g>, raw: Var<'g>) -> Result<Var<'g>> {
        let t = normed.dim(1);
        let tc = cfg.content_frames(t);
        match self {
            ContentEncoder::Conv { layers } => {
                let mut h = normed;
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(p, h);
                    if i + 1 < layers.len() {
                        h = h.relu();
                    }
                }
                Ok(resample_time(instance_norm(h, INSTANCE_NORM_EPS), tc))
            }
            ContentEncoder::External(enc) => {
                let mels = MelSpec::unstack(&raw.value());
                let mut items = Vec::with_capacity(mels.len());
                for m in &mels {
                    let f = enc.encode(m)?;
                    if f.ndim() != 2 || f.dim(1) != cfg.content_channels {
                        return Err(Error::Shape(format!(
                            "external content features {:?}, expected (T, {})",
                            f.shape(),
                            cfg.content_channels
                        )));
                    }
                    if f.dim(0) == 0 || f.dim(0).abs_diff(tc) > 1 {
                        return Err(Error::Alignment(format!(
                            "external encoder gave {} frames for {} mel frames (expected {tc} +/- 1)",
                            f.dim(0),
                            m.frames()
                        )));
                    }
                    let t_ext = f.dim(0);
                    let idx: Vec<usize> = (0..tc).map(|i| (i * t_ext / tc).min(t_ext - 1)).collect();
                    items.push(f.index_select(0, &idx));
                }
                let refs: Vec<&Tensor> = items.iter().collect();
                let stacked = Tensor::concat(&refs, 0).reshape(&[items.len(), tc, cfg.content_channels]);
                Ok(p.graph().constant(stacked))
            }
        }
    }
}
