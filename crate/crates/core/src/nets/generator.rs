use std::sync::Arc;

use cyclevc_autograd::layers::{Conv1d, LayerNorm, Linear};
use cyclevc_autograd::{concat, Binder, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::Serialize;

use super::{
    resample_time, ConformerLayer, ContentEncoder, ContentEncoderKind, ExternalContentEncoder, FusionKind, MelNorm,
    NetConfig, NormParams, TimbreTrunk,
};
use crate::corpus::MelSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Fusion {
    Conformer { ref_proj: Linear, layers: Vec<ConformerLayer> },
    Linear(Linear),
}

#[derive(Clone, Debug)]
struct Decoder {
    input: Linear,
    blocks: Vec<(Conv1d, LayerNorm)>,
    output: Linear,
}

/// Shapes seen while fusing one batch, all `[B, L, channels]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FusionShapes {
    pub unified: [usize; 3],
    pub compressed_reference: Option<[usize; 3]>,
    pub conformer_input: Option<[usize; 3]>,
    pub output: [usize; 3],
}

/// Content encoder, timbre encoder, fusion block and decoder. Mel inputs and
/// outputs are unnormalized log-mels.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: NetConfig,
    store: ParamStore,
    norm: NormParams,
    content: ContentEncoder,
    timbre: TimbreTrunk,
    timbre_head: Linear,
    fusion: Fusion,
    decoder: Decoder,
}

fn shape3(v: Var<'_>) -> [usize; 3] {
    [v.dim(0), v.dim(1), v.dim(2)]
}

impl Generator {
    /// Generator with the trainable convolutional content encoder.
    pub fn new(cfg: &NetConfig, norm: &MelNorm, rng: &mut impl Rng) -> Result<Self> {
        if cfg.content_encoder == ContentEncoderKind::External {
            return Err(Error::Invalid("an external content encoder must be supplied with `with_external`".into()));
        }
        Self::build(cfg, norm, None, rng)
    }

    pub fn with_external(
        cfg: &NetConfig,
        norm: &MelNorm,
        encoder: Arc<dyn ExternalContentEncoder>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if encoder.channels() != cfg.content_channels {
            return Err(Error::Shape(format!(
                "external encoder has {} channels, config expects {}",
                encoder.channels(),
                cfg.content_channels
            )));
        }
        let cfg = NetConfig { content_encoder: ContentEncoderKind::External, ..cfg.clone() };
        Self::build(&cfg, norm, Some(encoder), rng)
    }

    fn build(
        cfg: &NetConfig,
        norm: &MelNorm,
        external: Option<Arc<dyn ExternalContentEncoder>>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if norm.mean.len() != cfg.mel_bins || norm.std.len() != cfg.mel_bins {
            return Err(Error::Shape(format!("mel statistics have {} bins, config {}", norm.mean.len(), cfg.mel_bins)));
        }
        let mut store = ParamStore::new();
        let normp = NormParams::new(&mut store, norm);
        let content = match external {
            Some(e) => ContentEncoder::External(e),
            None => ContentEncoder::conv(&mut store, cfg, rng),
        };
        let c = cfg.content_channels;
        let m = 2 * c;
        let timbre = TimbreTrunk::new(
            &mut store,
            "timbre",
            cfg.mel_bins,
            cfg.encoder_layers,
            cfg.encoder_channels,
            cfg.encoder_kernel,
            cfg.encoder_hidden,
            rng,
        );
        let timbre_head = Linear::new(&mut store, "timbre.head", cfg.encoder_hidden, c, rng);
        let fusion = match cfg.fusion {
            FusionKind::Conformer => Fusion::Conformer {
                ref_proj: Linear::new(&mut store, "fusion.ref_proj", cfg.ref_compress_factor * cfg.mel_bins, m, rng),
                layers: (0..cfg.conformer_layers)
                    .map(|i| {
                        ConformerLayer::new(
                            &mut store,
                            &format!("fusion.layer{i}"),
                            m,
                            cfg.conformer_heads,
                            cfg.conformer_ff_mult,
                            cfg.conformer_kernel,
                            cfg.max_rel_pos,
                            rng,
                        )
                    })
                    .collect(),
            },
            FusionKind::Linear => Fusion::Linear(Linear::new(&mut store, "fusion.linear", m, m, rng)),
        };
        let input = Linear::new(&mut store, "decoder.input", m, cfg.decoder_hidden, rng);
        let blocks = (0..cfg.decoder_blocks)
            .map(|i| {
                let n = format!("decoder.block{i}");
                (
                    Conv1d::new(&mut store, &format!("{n}.conv"), cfg.decoder_hidden, cfg.decoder_hidden, cfg.decoder_kernel, rng),
                    LayerNorm::new(&mut store, &format!("{n}.norm"), cfg.decoder_hidden),
                )
            })
            .collect();
        let output = Linear::new(&mut store, "decoder.output", cfg.decoder_hidden, cfg.mel_bins, rng);
        // Start from the corpus-average spectrum rather than zero.
        if let Some(b) = output.bias {
            store.set(b, Tensor::new(&[cfg.mel_bins], norm.mean.clone()));
        }
        Ok(Generator {
            cfg: cfg.clone(),
            store,
            norm: normp,
            content,
            timbre,
            timbre_head,
            fusion,
            decoder: Decoder { input, blocks, output },
        })
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

    /// `(B, T, D)` → `(B, T_c, C)`.
    pub fn encode_content<'g>(&self, p: &Binder<'g, '_>, mel: Var<'g>) -> Result<Var<'g>> {
        self.check_mel(mel, "content")?;
        self.content.forward(p, &self.cfg, self.norm.apply(p, mel), mel)
    }

    /// `(B, T', D)` → `(B, C)`.
    pub fn encode_timbre<'g>(&self, p: &Binder<'g, '_>, reference: Var<'g>) -> Result<Var<'g>> {
        self.check_mel(reference, "reference")?;
        let h = self.timbre.forward(p, self.norm.apply(p, reference));
        Ok(self.timbre_head.forward(p, h))
    }

    /// Reference mel `(B, T', D)` → `(B, ceil(T'/d), 2C)`, zero-padding the
    /// tail to a multiple of the compression factor.
    pub fn compress_reference<'g>(&self, p: &Binder<'g, '_>, reference: Var<'g>) -> Result<Var<'g>> {
        let Fusion::Conformer { ref_proj, .. } = &self.fusion else {
            return Err(Error::Invalid("linear fusion has no reference path".into()));
        };
        self.check_mel(reference, "reference")?;
        let (b, t, d) = (reference.dim(0), reference.dim(1), reference.dim(2));
        let f = self.cfg.ref_compress_factor;
        let len = t.div_ceil(f);
        let mut x = self.norm.apply(p, reference);
        if len * f > t {
            let pad = p.graph().constant(Tensor::zeros(&[b, len * f - t, d]));
            x = concat(&[x, pad], 1);
        }
        Ok(ref_proj.forward(p, x.reshape(&[b, len, f * d])))
    }

    /// Unified representation `(B, T_c, 2C)` from content `(B, T_c, C)` and
    /// timbre `(B, C)`.
    pub fn unify<'g>(&self, content: Var<'g>, timbre: Var<'g>) -> Result<Var<'g>> {
        let (b, t, c) = (content.dim(0), content.dim(1), content.dim(2));
        if timbre.shape() != [b, c] {
            return Err(Error::Shape(format!("timbre {:?} does not match content {:?}", timbre.shape(), content.shape())));
        }
        let s = timbre.reshape(&[b, 1, c]).broadcast_to(&[b, t, c]);
        Ok(concat(&[content, s], 2))
    }

    /// Runs the conformer over `[unified ; compressed]` and keeps the first
    /// `T_c` positions.
    pub fn fuse_compressed<'g>(&self, p: &Binder<'g, '_>, unified: Var<'g>, compressed: Var<'g>) -> Result<Var<'g>> {
        let Fusion::Conformer { layers, .. } = &self.fusion else {
            return Err(Error::Invalid("linear fusion has no reference path".into()));
        };
        if compressed.dim(0) != unified.dim(0) || compressed.dim(2) != unified.dim(2) {
            return Err(Error::Shape(format!("reference {:?} vs unified {:?}", compressed.shape(), unified.shape())));
        }
        let mut h = concat(&[unified, compressed], 1);
        for l in layers {
            h = l.forward(p, h);
        }
        Ok(h.narrow(1, 0, unified.dim(1)))
    }

    pub fn fuse<'g>(
        &self,
        p: &Binder<'g, '_>,
        content: Var<'g>,
        timbre: Var<'g>,
        reference: Var<'g>,
    ) -> Result<(Var<'g>, FusionShapes)> {
        let unified = self.unify(content, timbre)?;
        match &self.fusion {
            Fusion::Conformer { .. } => {
                let compressed = self.compress_reference(p, reference)?;
                let out = self.fuse_compressed(p, unified, compressed)?;
                let cs = shape3(compressed);
                let shapes = FusionShapes {
                    unified: shape3(unified),
                    compressed_reference: Some(cs),
                    conformer_input: Some([cs[0], unified.dim(1) + cs[1], cs[2]]),
                    output: shape3(out),
                };
                Ok((out, shapes))
            }
            Fusion::Linear(l) => {
                let out = l.forward(p, unified);
                let shapes = FusionShapes {
                    unified: shape3(unified),
                    compressed_reference: None,
                    conformer_input: None,
                    output: shape3(out),
                };
                Ok((out, shapes))
            }
        }
    }

    /// `(B, T_c, 2C)` → `(B, frames, D)` unnormalized mel.
    pub fn decode<'g>(&self, p: &Binder<'g, '_>, hidden: Var<'g>, frames: usize) -> Result<Var<'g>> {
        if hidden.dim(1) != self.cfg.content_frames(frames) {
            return Err(Error::Shape(format!(
                "{} hidden frames do not map to {frames} mel frames under upsample {:?}",
                hidden.dim(1),
                self.cfg.content_upsample
            )));
        }
        let dec = &self.decoder;
        let mut h = dec.input.forward(p, resample_time(hidden, frames));
        for (conv, ln) in &dec.blocks {
            h = ln.forward(p, h.add(conv.forward(p, h).relu()));
        }
        Ok(dec.output.forward(p, h))
    }

    /// Converts `content` `(B, T, D)` toward the voice of `reference`
    /// `(B, T', D)`; returns `(B, T, D)`.
    pub fn forward<'g>(&self, p: &Binder<'g, '_>, content: Var<'g>, reference: Var<'g>) -> Result<Var<'g>> {
        let zc = self.encode_content(p, content)?;
        let s = self.encode_timbre(p, reference)?;
        let (h, _) = self.fuse(p, zc, s, reference)?;
        self.decode(p, h, content.dim(1))
    }

    /// Inference on single utterances, without gradient tracking.
    pub fn convert(&self, content: &MelSpec, reference: &MelSpec) -> Result<MelSpec> {
        let g = Graph::new();
        let p = Binder::frozen(&g, &self.store);
        let out = self.forward(&p, g.constant(content.to_tensor()), g.constant(reference.to_tensor()))?;
        let mut mels = MelSpec::unstack(&out.value());
        Ok(mels.remove(0))
    }

    fn check_mel(&self, v: Var<'_>, what: &str) -> Result<()> {
        let s = v.shape();
        if s.len() != 3 || s[2] != self.cfg.mel_bins || s[1] == 0 {
            return Err(Error::Shape(format!("{what} mel {s:?}, expected (B, T>0, {})", self.cfg.mel_bins)));
        }
        Ok(())
    }
}
