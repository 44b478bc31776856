use cyclevc_autograd::layers::{Conv1d, LayerNorm, Linear};
use cyclevc_autograd::{concat, ctc_nll, Adam, AdamConfig, Binder, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, sample_indices, TrainLog};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::corpus::{apply_timbre, Corpus, MelSpec, PhoneVocab};
use crate::error::{Error, Result};
use crate::nets::{ContentEncoderKind, ExternalContentEncoder, MelNorm, NetConfig, NormParams};

/// Mel frames per recognizer output step.
pub const ASR_STACK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrConfig {
    pub mel_bins: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub kernel: usize,
}

impl Default for AsrConfig {
    fn default() -> Self {
        AsrConfig { mel_bins: 24, hidden: 64, blocks: 2, kernel: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Training inputs are shifted along the mel axis by up to this many bins,
    /// drawn per item, so the recognizer sees voices beyond the corpus speakers.
    pub perturb_shift: i32,
    /// Per-item random spectral tilt of up to this magnitude.
    pub perturb_tilt: f64,
}

impl Default for AsrTrainConfig {
    fn default() -> Self {
        AsrTrainConfig { steps: 600, batch_size: 16, lr: 2e-3, seed: 0, perturb_shift: 0, perturb_tilt: 0.0 }
    }
}

#[derive(Serialize, Deserialize)]
struct AsrCheckpointConfig {
    net: AsrConfig,
    vocab: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct AsrModel {
    cfg: AsrConfig,
    vocab: PhoneVocab,
    store: ParamStore,
    norm: NormParams,
    input: Linear,
    blocks: Vec<(Conv1d, LayerNorm)>,
    output: Linear,
}

/// Recognizer outputs over `ceil(T / 4)` steps.
#[derive(Clone, Copy, Debug)]
pub struct AsrOutputs<'g> {
    /// `(B, L, V + 1)`, index 0 is the blank.
    pub logits: Var<'g>,
    /// `(B, L, H)` activations feeding the output layer.
    pub last_hidden: Var<'g>,
}

/// Minimum output steps needed to emit `labels` (repeats need a blank).
pub fn ctc_feasible(labels: &[usize], steps: usize) -> bool {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count() <= steps
}

/// Greedy best-path decode of `(L, V + 1)` logits: per-step argmax, collapse
/// repeats, drop blanks.
pub fn ctc_decode(logits: &Tensor) -> Vec<usize> {
    let v = logits.dim(logits.ndim() - 1);
    let mut out = Vec::new();
    let mut prev = 0;
    for row in logits.data().chunks_exact(v) {
        let best = row.iter().enumerate().fold(0, |b, (i, &x)| if x > row[b] { i } else { b });
        if best != 0 && best != prev {
            out.push(best);
        }
        prev = best;
    }
    out
}

impl AsrModel {
    pub fn new(cfg: &AsrConfig, vocab: PhoneVocab, norm: &MelNorm, rng: &mut impl rand::Rng) -> Result<Self> {
        if norm.mean.len() != cfg.mel_bins {
            return Err(Error::Shape(format!("mel statistics have {} bins, config {}", norm.mean.len(), cfg.mel_bins)));
        }
        if cfg.kernel % 2 == 0 || cfg.hidden == 0 {
            return Err(Error::Invalid("asr config: kernel must be odd and hidden positive".into()));
        }
        let mut store = ParamStore::new();
        let normp = NormParams::new(&mut store, norm);
        let input = Linear::new(&mut store, "asr.input", ASR_STACK * cfg.mel_bins, cfg.hidden, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                (
                    Conv1d::new(&mut store, &format!("asr.block{i}.conv"), cfg.hidden, cfg.hidden, cfg.kernel, rng),
                    LayerNorm::new(&mut store, &format!("asr.block{i}.norm"), cfg.hidden),
                )
            })
            .collect();
        let output = Linear::new(&mut store, "asr.output", cfg.hidden, vocab.len() + 1, rng);
        Ok(AsrModel { cfg: cfg.clone(), vocab, store, norm: normp, input, blocks, output })
    }

    pub fn config(&self) -> &AsrConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &PhoneVocab {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Marks every parameter frozen; training never updates a frozen model.
    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn output_steps(frames: usize) -> usize {
        frames.div_ceil(ASR_STACK)
    }

    /// `(B, T, D)` unnormalized mel. Frames past `T` in the last group are
    /// zero in normalized space.
    pub fn forward<'g>(&self, p: &Binder<'g, '_>, mel: Var<'g>) -> Result<AsrOutputs<'g>> {
        let s = mel.shape();
        if s.len() != 3 || s[2] != self.cfg.mel_bins || s[1] == 0 {
            return Err(Error::Shape(format!("asr input {s:?}, expected (B, T>0, {})", self.cfg.mel_bins)));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let steps = Self::output_steps(t);
        let mut x = self.norm.apply(p, mel);
        if steps * ASR_STACK > t {
            x = concat(&[x, p.graph().constant(Tensor::zeros(&[b, steps * ASR_STACK - t, d]))], 1);
        }
        let mut h = self.input.forward(p, x.reshape(&[b, steps, ASR_STACK * d])).relu();
        for (conv, ln) in &self.blocks {
            h = ln.forward(p, h.add(conv.forward(p, h).relu()));
        }
        Ok(AsrOutputs { logits: self.output.forward(p, h), last_hidden: h })
    }

    pub fn transcribe(&self, mel: &MelSpec) -> Result<Vec<String>> {
        let g = Graph::new();
        let p = Binder::frozen(&g, &self.store);
        let out = self.forward(&p, g.constant(mel.to_tensor()))?;
        let ids = ctc_decode(&out.logits.value());
        Ok(ids.into_iter().filter_map(|i| self.vocab.token(i).map(str::to_string)).collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let cfg = AsrCheckpointConfig { net: self.cfg.clone(), vocab: self.vocab.tokens().to_vec() };
        Checkpoint::from_store(ModelKind::Asr, &cfg, &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Asr)?;
        let cfg: AsrCheckpointConfig = ckpt.config()?;
        let norm = MelNorm::identity(cfg.net.mel_bins);
        let mut m = AsrModel::new(&cfg.net, PhoneVocab::new(cfg.vocab), &norm, &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.restore_store(&mut m.store)?;
        m.store.freeze_all();
        Ok(m)
    }

    /// CTC training on whole utterances; each batch is padded to its longest
    /// item in normalized space.
    pub fn train(corpus: &Corpus, norm: &MelNorm, cfg: &AsrConfig, tc: &AsrTrainConfig) -> Result<(AsrModel, TrainLog)> {
        if corpus.is_empty() {
            return Err(Error::Invalid("asr training on an empty corpus".into()));
        }
        let vocab = PhoneVocab::from_corpus(corpus);
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        let mut model = AsrModel::new(cfg, vocab, norm, &mut rng)?;
        let labels: Vec<Vec<usize>> =
            corpus.utterances().iter().map(|u| model.vocab.encode(&u.phone_tokens())).collect::<Result<_>>()?;
        let usable: Vec<usize> = (0..corpus.len())
            .filter(|&i| ctc_feasible(&labels[i], Self::output_steps(corpus.utterance(i).frames())))
            .collect();
        if usable.is_empty() {
            return Err(Error::Infeasible("no utterance has enough frames for its phone labels".into()));
        }
        let mut adam = Adam::new(AdamConfig { lr: tc.lr, ..AdamConfig::default() }, &model.store);
        let mut log = TrainLog::default();
        for step in 0..tc.steps {
            let idx: Vec<usize> = sample_indices(usable.len(), tc.batch_size, &mut rng).into_iter().map(|i| usable[i]).collect();
            let x = model.padded_batch(corpus, &idx, tc, &mut rng);
            let g = Graph::new();
            let p = Binder::trainable(&g, &model.store);
            let out = model.forward(&p, g.constant(x))?;
            let targets: Vec<Vec<usize>> = idx.iter().map(|&i| labels[i].clone()).collect();
            let lens: Vec<usize> = idx.iter().map(|&i| Self::output_steps(corpus.utterance(i).frames())).collect();
            let per_item = ctc_nll(out.logits.log_softmax(), &targets, &lens, 0);
            let inv_len = Tensor::new(&[idx.len()], targets.iter().map(|t| 1.0 / t.len().max(1) as f64).collect());
            let loss = per_item.mul(g.constant(inv_len)).mean_all();
            let value = loss.item();
            check_finite("asr", step, value)?;
            log.losses.push(value);
            let grads = p.grads(&g.backward(loss));
            adam.step(&mut model.store, &grads);
        }
        model.store.freeze_all();
        Ok((model, log))
    }

    /// Raw mel batch padded with the per-bin mean, so padding is zero after
    /// normalization.
    fn padded_batch(&self, corpus: &Corpus, idx: &[usize], tc: &AsrTrainConfig, rng: &mut ChaCha8Rng) -> Tensor {
        let d = self.cfg.mel_bins;
        let t = idx.iter().map(|&i| corpus.utterance(i).frames()).max().unwrap_or(0);
        let mean = self.norm.mean_values(&self.store);
        let mut data = Vec::with_capacity(idx.len() * t * d);
        for &i in idx {
            let m = &corpus.utterance(i).mel;
            let shift = if tc.perturb_shift > 0 { rng.random_range(-tc.perturb_shift..=tc.perturb_shift) } else { 0 };
            let tilt = if tc.perturb_tilt > 0.0 { rng.random_range(-tc.perturb_tilt..=tc.perturb_tilt) } else { 0.0 };
            let raw: Vec<f64> = m.values().iter().map(|&v| v as f64).collect();
            data.extend(apply_timbre(&raw, d, shift, tilt));
            for _ in m.frames()..t {
                data.extend_from_slice(&mean);
            }
        }
        Tensor::new(&[idx.len(), t, d], data)
    }
}

/// Content features from a frozen recognizer: per-step phone posteriors,
/// one row per [`ASR_STACK`] mel frames. The posteriors carry what was said
/// and little of who said it, which the trainable convolutional encoder
/// cannot guarantee at desk scale.
#[derive(Clone, Debug)]
pub struct AsrPosteriorEncoder {
    asr: AsrModel,
}

impl AsrPosteriorEncoder {
    pub fn new(mut asr: AsrModel) -> Self {
        asr.freeze();
        AsrPosteriorEncoder { asr }
    }

    pub fn asr(&self) -> &AsrModel {
        &self.asr
    }

    /// `base` with the content width and frame rate of this encoder.
    pub fn net_config(&self, base: &NetConfig) -> NetConfig {
        NetConfig {
            content_encoder: ContentEncoderKind::External,
            content_channels: self.channels(),
            content_upsample: (1, ASR_STACK),
            ..base.clone()
        }
    }
}

impl ExternalContentEncoder for AsrPosteriorEncoder {
    fn channels(&self) -> usize {
        self.asr.vocab().len() + 1
    }

    fn encode(&self, mel: &MelSpec) -> Result<Tensor> {
        let g = Graph::new();
        let p = Binder::frozen(&g, &self.asr.store);
        let post = self.asr.forward(&p, g.constant(mel.to_tensor()))?.logits.softmax();
        let s = post.shape();
        Ok((*post.value()).clone().reshape(&[s[1], s[2]]))
    }
}
