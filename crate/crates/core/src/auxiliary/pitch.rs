use cyclevc_autograd::layers::{Conv1d, LayerNorm, Linear};
use cyclevc_autograd::{Adam, AdamConfig, Binder, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, sample_indices, TrainLog};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::corpus::{Corpus, MelSpec};
use crate::error::{Error, Result};
use crate::nets::{MelNorm, NormParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PitchConfig {
    pub mel_bins: usize,
    pub hidden: usize,
    pub kernel: usize,
}

impl Default for PitchConfig {
    fn default() -> Self {
        PitchConfig { mel_bins: 24, hidden: 32, kernel: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PitchTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub crop_frames: usize,
    pub seed: u64,
}

impl Default for PitchTrainConfig {
    fn default() -> Self {
        PitchTrainConfig { steps: 400, batch_size: 16, lr: 2e-3, crop_frames: 48, seed: 0 }
    }
}

/// Two convolution layers with layer norm, then a linear head predicting
/// log-Hz per frame (0 on unvoiced frames).
#[derive(Clone, Debug)]
pub struct PitchModel {
    cfg: PitchConfig,
    store: ParamStore,
    norm: NormParams,
    conv1: Conv1d,
    ln1: LayerNorm,
    conv2: Conv1d,
    ln2: LayerNorm,
    head: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct PitchOutputs<'g> {
    /// `(B, T, H)` first-layer activations.
    pub first_hidden: Var<'g>,
    /// `(B, T)` predicted log-Hz.
    pub log_f0: Var<'g>,
}

/// Regression target: `ln(f0)` on voiced frames, 0 elsewhere.
pub fn pitch_target(f0: &[f32]) -> Vec<f64> {
    f0.iter().map(|&f| if f > 0.0 { (f as f64).ln() } else { 0.0 }).collect()
}

/// Predictions below this log-Hz value read as unvoiced.
fn voicing_cut() -> f64 {
    60f64.ln() / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PitchTraining {
    pub log: TrainLog,
    /// Voiced-frame log-F0 RMSE of the trained model on the training corpus.
    pub rmse: f64,
    /// Same metric for a constant predictor at the voiced mean.
    pub baseline_rmse: f64,
}

impl PitchModel {
    pub fn new(cfg: &PitchConfig, norm: &MelNorm, rng: &mut impl Rng) -> Result<Self> {
        if norm.mean.len() != cfg.mel_bins {
            return Err(Error::Shape(format!("mel statistics have {} bins, config {}", norm.mean.len(), cfg.mel_bins)));
        }
        if cfg.kernel % 2 == 0 || cfg.hidden == 0 {
            return Err(Error::Invalid("pitch config: kernel must be odd and hidden positive".into()));
        }
        let mut store = ParamStore::new();
        let normp = NormParams::new(&mut store, norm);
        let conv1 = Conv1d::new(&mut store, "pitch.conv1", cfg.mel_bins, cfg.hidden, cfg.kernel, rng);
        let ln1 = LayerNorm::new(&mut store, "pitch.norm1", cfg.hidden);
        let conv2 = Conv1d::new(&mut store, "pitch.conv2", cfg.hidden, cfg.hidden, cfg.kernel, rng);
        let ln2 = LayerNorm::new(&mut store, "pitch.norm2", cfg.hidden);
        let head = Linear::new(&mut store, "pitch.head", cfg.hidden, 1, rng);
        Ok(PitchModel { cfg: cfg.clone(), store, norm: normp, conv1, ln1, conv2, ln2, head })
    }

    pub fn config(&self) -> &PitchConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Marks every parameter frozen; training never updates a frozen model.
    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn forward<'g>(&self, p: &Binder<'g, '_>, mel: Var<'g>) -> Result<PitchOutputs<'g>> {
        let s = mel.shape();
        if s.len() != 3 || s[2] != self.cfg.mel_bins || s[1] == 0 {
            return Err(Error::Shape(format!("pitch input {s:?}, expected (B, T>0, {})", self.cfg.mel_bins)));
        }
        let x = self.norm.apply(p, mel);
        let first = self.ln1.forward(p, self.conv1.forward(p, x).relu());
        let h = self.ln2.forward(p, self.conv2.forward(p, first).relu());
        let log_f0 = self.head.forward(p, h).reshape(&[s[0], s[1]]);
        Ok(PitchOutputs { first_hidden: first, log_f0 })
    }

    pub fn predict_log_f0(&self, mel: &MelSpec) -> Result<Vec<f64>> {
        let g = Graph::new();
        let p = Binder::frozen(&g, &self.store);
        Ok(self.forward(&p, g.constant(mel.to_tensor()))?.log_f0.value().data().to_vec())
    }

    /// Per-frame F0 in Hz, 0 where the prediction reads as unvoiced.
    pub fn predict_hz(&self, mel: &MelSpec) -> Result<Vec<f64>> {
        Ok(self.predict_log_f0(mel)?.into_iter().map(|l| if l < voicing_cut() { 0.0 } else { l.exp() }).collect())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(ModelKind::Pitch, &self.cfg, &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Pitch)?;
        let cfg: PitchConfig = ckpt.config()?;
        let mut m = PitchModel::new(&cfg, &MelNorm::identity(cfg.mel_bins), &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.restore_store(&mut m.store)?;
        m.store.freeze_all();
        Ok(m)
    }

    /// Voiced-frame log-F0 RMSE over `corpus`, and that of predicting the
    /// voiced mean everywhere.
    pub fn voiced_rmse(&self, corpus: &Corpus) -> Result<(f64, f64)> {
        let mut pairs = Vec::new();
        for u in corpus.utterances() {
            let pred = self.predict_log_f0(&u.mel)?;
            for (p, &f) in pred.iter().zip(&u.f0) {
                if f > 0.0 {
                    pairs.push((*p, (f as f64).ln()));
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::Invalid("corpus has no voiced frames".into()));
        }
        let n = pairs.len() as f64;
        let mean = pairs.iter().map(|(_, t)| t).sum::<f64>() / n;
        let rmse = (pairs.iter().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n).sqrt();
        let base = (pairs.iter().map(|(_, t)| (mean - t).powi(2)).sum::<f64>() / n).sqrt();
        Ok((rmse, base))
    }

    pub fn train(corpus: &Corpus, norm: &MelNorm, cfg: &PitchConfig, tc: &PitchTrainConfig) -> Result<(PitchModel, PitchTraining)> {
        if corpus.is_empty() {
            return Err(Error::Invalid("pitch training on an empty corpus".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        let mut model = PitchModel::new(cfg, norm, &mut rng)?;
        let mut adam = Adam::new(AdamConfig { lr: tc.lr, ..AdamConfig::default() }, &model.store);
        let mut log = TrainLog::default();
        let d = cfg.mel_bins;
        for step in 0..tc.steps {
            let idx = sample_indices(corpus.len(), tc.batch_size, &mut rng);
            let len = idx.iter().map(|&i| corpus.utterance(i).frames()).min().expect("batch").min(tc.crop_frames);
            let (mut x, mut y) = (Vec::new(), Vec::new());
            for &i in &idx {
                let u = corpus.utterance(i);
                let st = rng.random_range(0..=u.frames() - len);
                x.extend(u.mel.values()[st * d..(st + len) * d].iter().map(|&v| v as f64));
                y.extend(pitch_target(&u.f0[st..st + len]));
            }
            let g = Graph::new();
            let p = Binder::trainable(&g, &model.store);
            let out = model.forward(&p, g.constant(Tensor::new(&[idx.len(), len, d], x)))?;
            let loss = out.log_f0.sub(g.constant(Tensor::new(&[idx.len(), len], y))).square().mean_all();
            let value = loss.item();
            check_finite("pitch", step, value)?;
            log.losses.push(value);
            let grads = p.grads(&g.backward(loss));
            adam.step(&mut model.store, &grads);
        }
        model.store.freeze_all();
        let (rmse, baseline_rmse) = model.voiced_rmse(corpus)?;
        Ok((model, PitchTraining { log, rmse, baseline_rmse }))
    }
}
