use std::collections::BTreeMap;

use cyclevc_autograd::layers::Linear;
use cyclevc_autograd::{par, Adam, AdamConfig, Binder, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, random_crops, sample_indices, TrainLog};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::corpus::{Corpus, MelSpec};
use crate::error::{Error, Result};
use crate::nets::{MelNorm, NormParams, TimbreTrunk};

pub const SV_DIM: usize = 256;

/// Same trunk as the generator's timbre encoder, projected to 256 dims.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvConfig {
    pub mel_bins: usize,
    pub layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub hidden: usize,
}

impl Default for SvConfig {
    fn default() -> Self {
        SvConfig { mel_bins: 24, layers: 5, channels: 4, kernel: 5, hidden: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvMode {
    /// Additive-margin softmax over corpus speakers.
    Supervised,
    /// Mean-squared error to per-utterance teacher embeddings.
    Distill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvTrainConfig {
    pub mode: SvMode,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub crop_frames: usize,
    pub margin: f64,
    pub scale: f64,
    pub seed: u64,
}

impl Default for SvTrainConfig {
    fn default() -> Self {
        SvTrainConfig {
            mode: SvMode::Supervised,
            steps: 400,
            batch_size: 16,
            lr: 1e-3,
            crop_frames: 32,
            margin: 0.2,
            scale: 10.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SvModel {
    cfg: SvConfig,
    store: ParamStore,
    norm: NormParams,
    trunk: TimbreTrunk,
    head: Linear,
}

fn l2_normalize<'g>(x: Var<'g>, axis: usize) -> Var<'g> {
    x.div(x.square().sum_axis(axis).add_scalar(1e-12).sqrt())
}

impl SvModel {
    pub fn new(cfg: &SvConfig, norm: &MelNorm, rng: &mut impl rand::Rng) -> Result<Self> {
        if norm.mean.len() != cfg.mel_bins {
            return Err(Error::Shape(format!("mel statistics have {} bins, config {}", norm.mean.len(), cfg.mel_bins)));
        }
        if cfg.kernel % 2 == 0 || cfg.layers == 0 {
            return Err(Error::Invalid("sv config: kernel must be odd and layers positive".into()));
        }
        let mut store = ParamStore::new();
        let normp = NormParams::new(&mut store, norm);
        let trunk = TimbreTrunk::new(&mut store, "sv", cfg.mel_bins, cfg.layers, cfg.channels, cfg.kernel, cfg.hidden, rng);
        let head = Linear::new(&mut store, "sv.head", cfg.hidden, SV_DIM, rng);
        Ok(SvModel { cfg: cfg.clone(), store, norm: normp, trunk, head })
    }

    pub fn config(&self) -> &SvConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Marks every parameter frozen; training never updates a frozen model.
    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    /// `(B, T, D)` unnormalized mel → `(B, 256)`.
    pub fn embed<'g>(&self, p: &Binder<'g, '_>, mel: Var<'g>) -> Result<Var<'g>> {
        let s = mel.shape();
        if s.len() != 3 || s[2] != self.cfg.mel_bins || s[1] == 0 {
            return Err(Error::Shape(format!("sv input {s:?}, expected (B, T>0, {})", self.cfg.mel_bins)));
        }
        Ok(self.head.forward(p, self.trunk.forward(p, self.norm.apply(p, mel))))
    }

    pub fn embed_mel(&self, mel: &MelSpec) -> Result<Vec<f64>> {
        let g = Graph::new();
        let p = Binder::frozen(&g, &self.store);
        Ok(self.embed(&p, g.constant(mel.to_tensor()))?.value().data().to_vec())
    }

    /// Embeddings of several mels, computed in parallel, in input order.
    pub fn embed_all(&self, mels: &[&MelSpec]) -> Result<Vec<Vec<f64>>> {
        par::map_slice(mels, |m| self.embed_mel(m)).into_iter().collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(ModelKind::Sv, &self.cfg, &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Sv)?;
        let cfg: SvConfig = ckpt.config()?;
        let mut m = SvModel::new(&cfg, &MelNorm::identity(cfg.mel_bins), &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.restore_store(&mut m.store)?;
        m.store.freeze_all();
        Ok(m)
    }

    /// Trains a fresh model. Distillation reads teacher vectors keyed by
    /// utterance id; supervised training needs at least two speakers.
    pub fn train(
        corpus: &Corpus,
        norm: &MelNorm,
        cfg: &SvConfig,
        tc: &SvTrainConfig,
        teacher: Option<&BTreeMap<String, Vec<f32>>>,
    ) -> Result<(SvModel, TrainLog)> {
        let speakers: Vec<&String> = corpus.speakers().keys().collect();
        match tc.mode {
            SvMode::Supervised if speakers.len() < 2 => {
                return Err(Error::Invalid(format!(
                    "supervised sv training needs at least 2 speakers, corpus has {}",
                    speakers.len()
                )))
            }
            SvMode::Distill => {
                let t = teacher.ok_or_else(|| Error::Invalid("distillation needs teacher embeddings".into()))?;
                if let Some(u) = corpus.utterances().iter().find(|u| !t.contains_key(&u.utt_id)) {
                    return Err(Error::Invalid(format!("no teacher embedding for utterance `{}`", u.utt_id)));
                }
                if let Some((id, v)) = t.iter().find(|(_, v)| v.len() != SV_DIM) {
                    return Err(Error::Shape(format!("teacher embedding `{id}` has {} values, expected {SV_DIM}", v.len())));
                }
            }
            _ => {}
        }
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        let mut model = SvModel::new(cfg, norm, &mut rng)?;
        let mut cls_store = ParamStore::new();
        let classes = cls_store.add_uniform("classifier.weight", &[SV_DIM, speakers.len()], 0.1, &mut rng);
        let adam_cfg = AdamConfig { lr: tc.lr, ..AdamConfig::default() };
        let mut adam = Adam::new(adam_cfg, &model.store);
        let mut cls_adam = Adam::new(adam_cfg, &cls_store);
        let mut log = TrainLog::default();
        for step in 0..tc.steps {
            let idx = sample_indices(corpus.len(), tc.batch_size, &mut rng);
            let mels: Vec<&MelSpec> = idx.iter().map(|&i| &corpus.utterance(i).mel).collect();
            let (x, _) = random_crops(&mels, tc.crop_frames, &mut rng)?;
            let g = Graph::new();
            let p = Binder::trainable(&g, &model.store);
            let q = Binder::trainable(&g, &cls_store);
            let emb = model.embed(&p, g.constant(x))?;
            let b = idx.len();
            let loss = match tc.mode {
                SvMode::Supervised => {
                    let n = speakers.len();
                    let mut onehot = Tensor::zeros(&[b, n]);
                    for (r, &i) in idx.iter().enumerate() {
                        let s = speakers.binary_search(&&corpus.utterance(i).speaker).expect("speaker present");
                        onehot.data_mut()[r * n + s] = 1.0;
                    }
                    let onehot = g.constant(onehot);
                    let cos = l2_normalize(emb, 1).matmul(l2_normalize(q.param(classes), 0));
                    let logits = cos.sub(onehot.scale(tc.margin)).scale(tc.scale);
                    logits.log_softmax().mul(onehot).sum_all().scale(-1.0 / b as f64)
                }
                SvMode::Distill => {
                    let t = teacher.expect("checked above");
                    let target: Vec<f64> = idx
                        .iter()
                        .flat_map(|&i| t[&corpus.utterance(i).utt_id].iter().map(|&v| v as f64))
                        .collect();
                    emb.sub(g.constant(Tensor::new(&[b, SV_DIM], target))).square().mean_all()
                }
            };
            let value = loss.item();
            check_finite("sv", step, value)?;
            log.losses.push(value);
            let grads = g.backward(loss);
            let gm = p.grads(&grads);
            let gc = q.grads(&grads);
            adam.step(&mut model.store, &gm);
            if tc.mode == SvMode::Supervised {
                cls_adam.step(&mut cls_store, &gc);
            }
        }
        model.store.freeze_all();
        Ok((model, log))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticSpec};

    fn small() -> SvConfig {
        SvConfig { mel_bins: 24, layers: 2, channels: 2, kernel: 5, hidden: 16 }
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let s = generate_synthetic_corpus(&SyntheticSpec::default()).unwrap();
        let m = SvModel::new(&small(), &MelNorm::from_corpus(&s.corpus).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = m.embed_mel(&s.corpus.utterance(0).mel).unwrap();
        let b = m.embed_mel(&s.corpus.utterance(1).mel).unwrap();
        assert_eq!((a.len(), b.len()), (SV_DIM, SV_DIM));
        assert_eq!(a, m.embed_mel(&s.corpus.utterance(0).mel).unwrap());
        let one = s.corpus.utterance(0).mel.crop(1);
        assert!(m.embed_mel(&one).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn supervised_needs_two_speakers() {
        let spec = SyntheticSpec { languages: 1, speakers_per_language: 1, ..SyntheticSpec::default() };
        let s = generate_synthetic_corpus(&spec).unwrap();
        let norm = MelNorm::from_corpus(&s.corpus).unwrap();
        let e = SvModel::train(&s.corpus, &norm, &small(), &SvTrainConfig::default(), None).unwrap_err();
        assert!(e.to_string().contains("at least 2 speakers"), "{e}");
    }

    #[test]
    fn distill_without_teacher_is_an_error() {
        let s = generate_synthetic_corpus(&SyntheticSpec::default()).unwrap();
        let norm = MelNorm::from_corpus(&s.corpus).unwrap();
        let tc = SvTrainConfig { mode: SvMode::Distill, ..SvTrainConfig::default() };
        assert!(SvModel::train(&s.corpus, &norm, &small(), &tc, None).is_err());
    }

    #[test]
    fn distill_to_constant_teacher() {
        let s = generate_synthetic_corpus(&SyntheticSpec::default()).unwrap();
        let norm = MelNorm::from_corpus(&s.corpus).unwrap();
        let v: Vec<f32> = (0..SV_DIM).map(|i| ((i % 7) as f32 - 3.0) * 0.1).collect();
        let teacher = s.corpus.utterances().iter().map(|u| (u.utt_id.clone(), v.clone())).collect();
        let tc = SvTrainConfig { mode: SvMode::Distill, steps: 300, lr: 3e-3, batch_size: 8, ..SvTrainConfig::default() };
        let (m, _) = SvModel::train(&s.corpus, &norm, &small(), &tc, Some(&teacher)).unwrap();
        for u in s.corpus.utterances().iter().take(6) {
            let e = m.embed_mel(&u.mel).unwrap();
            let mse = e.iter().zip(&v).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>() / SV_DIM as f64;
            assert!(mse < 1e-3, "{mse}");
        }
    }

    #[test]
    fn supervised_loss_window_means_decrease() {
        let s = generate_synthetic_corpus(&SyntheticSpec::default()).unwrap();
        let norm = MelNorm::from_corpus(&s.corpus).unwrap();
        let tc = SvTrainConfig { steps: 60, ..SvTrainConfig::default() };
        let (_, log) = SvModel::train(&s.corpus, &norm, &small(), &tc, None).unwrap();
        let w = log.window_means(10);
        for pair in w.windows(2) {
            assert!(pair[1] <= pair[0], "{w:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_keeps_embeddings() {
        let s = generate_synthetic_corpus(&SyntheticSpec::default()).unwrap();
        let m = SvModel::new(&small(), &MelNorm::from_corpus(&s.corpus).unwrap(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes()).unwrap();
        let back = SvModel::from_checkpoint(&c).unwrap();
        let mel = &s.corpus.utterance(2).mel;
        assert_eq!(m.embed_mel(mel).unwrap(), back.embed_mel(mel).unwrap());
    }
}
