use cyclevc_autograd::layers::Conv2d;
use cyclevc_autograd::{Binder, ParamStore, Var};
use rand::Rng;

use super::{MelNorm, NetConfig, NormParams};
use crate::error::{Error, Result};

/// Patch scores `(B, ceil(T/16), ceil(D/16))`.
pub type PatchScores<'g> = Var<'g>;

/// Four stride-2 convolutions over the mel image, one score per patch.
#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: NetConfig,
    store: ParamStore,
    norm: NormParams,
    convs: Vec<Conv2d>,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn new(cfg: &NetConfig, norm: &MelNorm, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if norm.mean.len() != cfg.mel_bins {
            return Err(Error::Shape(format!("mel statistics have {} bins, config {}", norm.mean.len(), cfg.mel_bins)));
        }
        let mut store = ParamStore::new();
        let normp = NormParams::new(&mut store, norm);
        let c = cfg.disc_channels;
        let widths = [1, c, 2 * c, 4 * c, 1];
        let convs = (0..4)
            .map(|i| Conv2d::new(&mut store, &format!("disc.conv{i}"), widths[i], widths[i + 1], (3, 3), (2, 2), (1, 1), rng))
            .collect();
        Ok(Discriminator { cfg: cfg.clone(), store, norm: normp, convs })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Patch grid for a `frames × bins` mel.
    pub fn grid(frames: usize, bins: usize) -> (usize, usize) {
        (frames.div_ceil(16), bins.div_ceil(16))
    }

    pub fn forward<'g>(&self, p: &Binder<'g, '_>, mel: Var<'g>) -> Result<PatchScores<'g>> {
        let s = mel.shape();
        if s.len() != 3 || s[2] != self.cfg.mel_bins {
            return Err(Error::Shape(format!("discriminator input {s:?}, expected (B, T, {})", self.cfg.mel_bins)));
        }
        let mut h = self.norm.apply(p, mel).reshape(&[s[0], s[1], s[2], 1]);
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(p, h);
            if i + 1 < self.convs.len() {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        let (gh, gw) = (h.dim(1), h.dim(2));
        Ok(h.reshape(&[s[0], gh, gw]))
    }
}
