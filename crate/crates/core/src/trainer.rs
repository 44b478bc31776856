//! Cycle training: three conversions per step, one generator update from
//! their summed losses, then one discriminator update on the detached fakes.
//!
//! Substep 1 reconstructs speaker 1 from content and timbre utterances of the
//! same speaker. Substep 2 converts speaker 2's speech in another language to
//! speaker 1's voice; no ground truth exists, so only timbre, recognizer and
//! adversarial losses apply. Substep 3 reconstructs a third utterance of
//! speaker 1 with the substep-2 output as its timbre reference.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cyclevc_autograd::{Adam, AdamConfig, Binder, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::auxiliary::{random_crops, AsrModel, PitchModel, SvModel};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::corpus::{check_cycle_feasible, sample_cycle_batch, CycleBatch, Corpus, MelSpec, Role, SamplerOptions};
use crate::error::{Error, Result};
use crate::losses::{
    asr_perceptual_loss, compose_step_vars, lsgan_d_loss, lsgan_g_loss, pitch_perceptual_loss, recon_loss,
    timbre_loss, LossBreakdown, LossTerm, LossWeights,
};
use crate::nets::{ContentEncoderKind, Discriminator, ExternalContentEncoder, FusionKind, Generator, MelNorm, NetConfig};

pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const DISCRIMINATOR_FILE: &str = "discriminator.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Training variants compared in the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Substeps 1 and 2.
    WoStep3,
    /// Substep 1 only.
    WoStep23,
    /// Recognizer loss weight set to zero.
    WoAsr,
    /// Linear fusion instead of the conformer stack.
    WoConformer,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::Full, Ablation::WoStep3, Ablation::WoStep23, Ablation::WoAsr, Ablation::WoConformer];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WoStep3 => "wo_step3",
            Ablation::WoStep23 => "wo_step23",
            Ablation::WoAsr => "wo_asr",
            Ablation::WoConformer => "wo_conformer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn substeps(self) -> &'static [u8] {
        match self {
            Ablation::WoStep3 => &[1, 2],
            Ablation::WoStep23 => &[1],
            _ => &[1, 2, 3],
        }
    }

    pub fn weights(self, base: LossWeights) -> LossWeights {
        match self {
            Ablation::WoAsr => LossWeights { asr: 0.0, ..base },
            _ => base,
        }
    }

    pub fn net_config(self, base: &NetConfig) -> NetConfig {
        match self {
            Ablation::WoConformer => NetConfig { fusion: FusionKind::Linear, ..base.clone() },
            _ => base.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Cut the substep-3 timbre reference off the substep-2 graph.
    pub detach_cycle: bool,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Steps between log records; 0 logs only the final step.
    pub log_interval: u64,
    /// Random crop length applied to every role.
    pub max_frames: usize,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub sampler: SamplerOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-9,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            detach_cycle: false,
            checkpoint_interval: 0,
            log_interval: 1,
            max_frames: 64,
            weights: LossWeights::default(),
            ablation: Ablation::Full,
            sampler: SamplerOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Invalid("Adam needs β1, β2 in [0, 1) and ε > 0".into()));
        }
        if self.batch_size == 0 || self.max_frames == 0 {
            return Err(Error::Invalid("batch_size and max_frames must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Loss weights after the ablation is applied.
    pub fn effective_weights(&self) -> LossWeights {
        self.ablation.weights(self.weights)
    }
}

/// The frozen speaker, recognizer and pitch networks.
#[derive(Clone, Debug)]
pub struct AuxModels {
    pub sv: SvModel,
    pub asr: AsrModel,
    pub pitch: PitchModel,
}

impl AuxModels {
    /// Freezes all three models.
    pub fn new(mut sv: SvModel, mut asr: AsrModel, mut pitch: PitchModel) -> Result<Self> {
        let bins = [sv.config().mel_bins, asr.config().mel_bins, pitch.config().mel_bins];
        if bins.iter().any(|&b| b != bins[0]) {
            return Err(Error::Shape(format!("auxiliary models disagree on mel bins: {bins:?}")));
        }
        sv.freeze();
        asr.freeze();
        pitch.freeze();
        Ok(AuxModels { sv, asr, pitch })
    }

    pub fn mel_bins(&self) -> usize {
        self.sv.config().mel_bins
    }

    pub fn stores(&self) -> [&ParamStore; 3] {
        [self.sv.store(), self.asr.store(), self.pitch.store()]
    }
}

/// Anything that maps (content mel, reference mel) to a converted mel with
/// the content's frame count.
pub trait Synthesizer {
    fn synthesize<'g>(&self, p: &Binder<'g, '_>, content: Var<'g>, reference: Var<'g>) -> Result<Var<'g>>;
}

impl Synthesizer for Generator {
    fn synthesize<'g>(&self, p: &Binder<'g, '_>, content: Var<'g>, reference: Var<'g>) -> Result<Var<'g>> {
        self.forward(p, content, reference)
    }
}

/// Cropped `(B, T, D)` mels for the roles of one batch. The substep-2 timbre
/// reference is the substep-1 timbre utterance, so it shares `t1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoleTensors {
    pub c1: Tensor,
    pub t1: Tensor,
    pub c2: Tensor,
    pub c3: Tensor,
}

impl RoleTensors {
    pub fn from_batch(corpus: &Corpus, batch: &CycleBatch, max_frames: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut crop = |role: Role| -> Result<Tensor> {
            let mels: Vec<&MelSpec> = batch.utterances(corpus, role).into_iter().map(|u| &u.mel).collect();
            Ok(random_crops(&mels, max_frames, rng)?.0)
        };
        Ok(RoleTensors {
            c1: crop(Role::Step1Content)?,
            t1: crop(Role::Step1Timbre)?,
            c2: crop(Role::Step2Content)?,
            c3: crop(Role::Step3Content)?,
        })
    }
}

/// Everything a substep reads besides its inputs: the generator with its
/// binder, and frozen binders for the discriminator and auxiliary models.
pub struct StepContext<'g, 'a> {
    pub graph: &'g Graph,
    pub generator: &'a dyn Synthesizer,
    pub gp: &'a Binder<'g, 'a>,
    disc: &'a Discriminator,
    dp: Binder<'g, 'a>,
    aux: &'a AuxModels,
    svp: Binder<'g, 'a>,
    asrp: Binder<'g, 'a>,
    pitchp: Binder<'g, 'a>,
    pub weights: LossWeights,
    pub step: u64,
}

impl<'g, 'a> StepContext<'g, 'a> {
    pub fn new(
        graph: &'g Graph,
        generator: &'a dyn Synthesizer,
        gp: &'a Binder<'g, 'a>,
        disc: &'a Discriminator,
        aux: &'a AuxModels,
        weights: LossWeights,
        step: u64,
    ) -> Self {
        StepContext {
            graph,
            generator,
            gp,
            disc,
            dp: Binder::frozen(graph, disc.store()),
            aux,
            svp: Binder::frozen(graph, aux.sv.store()),
            asrp: Binder::frozen(graph, aux.asr.store()),
            pitchp: Binder::frozen(graph, aux.pitch.store()),
            weights,
            step,
        }
    }

    fn timbre(&self, target: Var<'g>, generated: Var<'g>) -> Result<Var<'g>> {
        let t = self.aux.sv.embed(&self.svp, target)?.detach();
        timbre_loss(t, self.aux.sv.embed(&self.svp, generated)?)
    }

    fn adversarial(&self, generated: Var<'g>) -> Result<Var<'g>> {
        Ok(lsgan_g_loss(self.disc.forward(&self.dp, generated)?))
    }

    fn finish(
        &self,
        substep: u8,
        generated: Var<'g>,
        reference: Var<'g>,
        components: &[(LossTerm, Var<'g>)],
    ) -> Result<SubstepOutput<'g>> {
        for (term, v) in components {
            let value = v.item();
            if !value.is_finite() {
                return Err(Error::NonFinite { step: self.step, substep, component: term.name().into(), value });
            }
        }
        let (composite, breakdown) = compose_step_vars(substep, components, &self.weights)?;
        if !breakdown.composite.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                substep,
                component: "composite".into(),
                value: breakdown.composite,
            });
        }
        Ok(SubstepOutput { substep, generated, reference, composite, breakdown })
    }
}

pub struct SubstepOutput<'g> {
    pub substep: u8,
    pub generated: Var<'g>,
    /// The timbre reference the generator received.
    pub reference: Var<'g>,
    pub composite: Var<'g>,
    pub breakdown: LossBreakdown,
}

/// Reconstructs speaker 1: `G(c1, t1)` against `c1`.
pub fn run_substep1<'g>(cx: &StepContext<'g, '_>, c1: Var<'g>, t1: Var<'g>) -> Result<SubstepOutput<'g>> {
    let m = cx.generator.synthesize(cx.gp, c1, t1)?;
    let comps = [
        (LossTerm::Adv, cx.adversarial(m)?),
        (LossTerm::Rec, recon_loss(c1, m)?),
        (LossTerm::Timbre, cx.timbre(t1, m)?),
        (LossTerm::Pitch, pitch_perceptual_loss(&cx.pitchp, &cx.aux.pitch, c1, m)?),
    ];
    cx.finish(1, m, t1, &comps)
}

/// Converts speaker 2's speech to speaker 1's voice: `G(c2, t1)`.
pub fn run_substep2<'g>(cx: &StepContext<'g, '_>, c2: Var<'g>, t2: Var<'g>) -> Result<SubstepOutput<'g>> {
    let m = cx.generator.synthesize(cx.gp, c2, t2)?;
    let comps = [
        (LossTerm::Adv, cx.adversarial(m)?),
        (LossTerm::Timbre, cx.timbre(t2, m)?),
        (LossTerm::Asr, asr_perceptual_loss(&cx.asrp, &cx.aux.asr, c2, m)?),
    ];
    cx.finish(2, m, t2, &comps)
}

/// Reconstructs speaker 1's third utterance with the substep-2 output as the
/// timbre reference: `G(c3, m2)` against `c3`.
pub fn run_substep3<'g>(
    cx: &StepContext<'g, '_>,
    c3: Var<'g>,
    m2: Var<'g>,
    detach_cycle: bool,
) -> Result<SubstepOutput<'g>> {
    let reference = if detach_cycle { m2.detach() } else { m2 };
    let m = cx.generator.synthesize(cx.gp, c3, reference)?;
    let comps = [
        (LossTerm::Adv, cx.adversarial(m)?),
        (LossTerm::Rec, recon_loss(c3, m)?),
        (LossTerm::Timbre, cx.timbre(c3, m)?),
        (LossTerm::Pitch, pitch_perceptual_loss(&cx.pitchp, &cx.aux.pitch, c3, m)?),
    ];
    cx.finish(3, m, reference, &comps)
}

/// Runs `substeps` (a prefix of `[1, 2, 3]`) in order.
pub fn run_substeps<'g>(
    cx: &StepContext<'g, '_>,
    roles: &RoleTensors,
    substeps: &[u8],
    detach_cycle: bool,
) -> Result<Vec<SubstepOutput<'g>>> {
    if substeps.is_empty() || substeps.iter().enumerate().any(|(i, &s)| s as usize != i + 1) {
        return Err(Error::Invalid(format!("substeps must be a prefix of [1, 2, 3], got {substeps:?}")));
    }
    let g = cx.graph;
    let t1 = g.constant(roles.t1.clone());
    let mut outs = vec![run_substep1(cx, g.constant(roles.c1.clone()), t1)?];
    if substeps.len() > 1 {
        outs.push(run_substep2(cx, g.constant(roles.c2.clone()), t1)?);
    }
    if substeps.len() > 2 {
        let m2 = outs[1].generated;
        outs.push(run_substep3(cx, g.constant(roles.c3.clone()), m2, detach_cycle)?);
    }
    Ok(outs)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepArtifacts {
    pub step: u64,
    pub breakdowns: Vec<LossBreakdown>,
    /// Converted mels per substep.
    #[serde(skip)]
    pub generated: Vec<Tensor>,
    /// Timbre reference fed to substep 3, when it ran.
    #[serde(skip)]
    pub step3_reference: Option<Tensor>,
    /// Sum of the substep composites.
    pub generator_loss: f64,
    pub discriminator_loss: f64,
}

/// Generator, discriminator and their optimizers at some step.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    /// Completed steps.
    pub step: u64,
}

/// Sampling and cropping randomness for step `step`: independent of how
/// many steps ran before, so a resumed run draws the same batches.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step);
    r
}

impl TrainerState {
    pub fn new(net: &NetConfig, config: TrainConfig, norm: &MelNorm) -> Result<Self> {
        Self::build(net, config, norm, None)
    }

    /// Like [`TrainerState::new`] with `encoder` as the content encoder.
    pub fn with_external(
        net: &NetConfig,
        config: TrainConfig,
        norm: &MelNorm,
        encoder: Arc<dyn ExternalContentEncoder>,
    ) -> Result<Self> {
        Self::build(net, config, norm, Some(encoder))
    }

    fn build(
        net: &NetConfig,
        config: TrainConfig,
        norm: &MelNorm,
        encoder: Option<Arc<dyn ExternalContentEncoder>>,
    ) -> Result<Self> {
        config.validate()?;
        let net = config.ablation.net_config(net);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let generator = match encoder {
            Some(e) => Generator::with_external(&net, norm, e, &mut rng)?,
            None => Generator::new(&net, norm, &mut rng)?,
        };
        let discriminator = Discriminator::new(&net, norm, &mut rng)?;
        Ok(Self::assemble(config, generator, discriminator))
    }

    /// State around an existing generator, e.g. one with an external content
    /// encoder.
    pub fn assemble(config: TrainConfig, generator: Generator, discriminator: Discriminator) -> Self {
        let gen_opt = Adam::new(config.adam(), generator.store());
        let disc_opt = Adam::new(config.adam(), discriminator.store());
        TrainerState { config, generator, discriminator, gen_opt, disc_opt, step: 0 }
    }

    fn checkpoint(&self, kind: ModelKind, store: &ParamStore, adam: &Adam) -> Result<Checkpoint> {
        let mut c = Checkpoint::from_store(kind, self.generator.config(), store)?.with_optimizer(store, adam);
        c.set_meta("step", self.step);
        c.set_meta("train_config", &self.config);
        Ok(c)
    }

    pub fn generator_checkpoint(&self) -> Result<Checkpoint> {
        self.checkpoint(ModelKind::Generator, self.generator.store(), &self.gen_opt)
    }

    pub fn discriminator_checkpoint(&self) -> Result<Checkpoint> {
        self.checkpoint(ModelKind::Discriminator, self.discriminator.store(), &self.disc_opt)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::File { path: dir.to_path_buf(), source: e })?;
        self.generator_checkpoint()?.write(&dir.join(GENERATOR_FILE))?;
        self.discriminator_checkpoint()?.write(&dir.join(DISCRIMINATOR_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_with(dir, None)
    }

    /// Loads a checkpoint directory; `encoder` is required exactly when the
    /// saved generator uses an external content encoder.
    pub fn load_with(dir: &Path, encoder: Option<Arc<dyn ExternalContentEncoder>>) -> Result<Self> {
        let gc = Checkpoint::read(&dir.join(GENERATOR_FILE))?;
        let dc = Checkpoint::read(&dir.join(DISCRIMINATOR_FILE))?;
        gc.expect_kind(ModelKind::Generator)?;
        dc.expect_kind(ModelKind::Discriminator)?;
        let net: NetConfig = gc.config()?;
        let config: TrainConfig = gc.meta("train_config")?;
        let step: u64 = gc.meta("step")?;
        if dc.meta::<u64>("step")? != step {
            return Err(Error::Checkpoint("generator and discriminator checkpoints are from different steps".into()));
        }
        let norm = MelNorm::identity(net.mel_bins);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut generator = match (net.content_encoder, encoder) {
            (ContentEncoderKind::External, Some(e)) => Generator::with_external(&net, &norm, e, &mut rng)?,
            (ContentEncoderKind::External, None) => {
                return Err(Error::Invalid("checkpoint uses an external content encoder; none supplied".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Invalid("checkpoint has its own content encoder; an external one was supplied".into()))
            }
            (_, None) => Generator::new(&net, &norm, &mut rng)?,
        };
        let mut discriminator = Discriminator::new(&net, &norm, &mut rng)?;
        gc.restore_store(generator.store_mut())?;
        dc.restore_store(discriminator.store_mut())?;
        let gen_opt = gc.restore_optimizer(generator.store(), config.adam())?;
        let disc_opt = dc.restore_optimizer(discriminator.store(), config.adam())?;
        Ok(TrainerState { config, generator, discriminator, gen_opt, disc_opt, step })
    }

    /// Draws and crops the batch for step `step`.
    pub fn batch_for(&self, corpus: &Corpus, step: u64) -> Result<RoleTensors> {
        let mut rng = step_rng(self.config.seed, step);
        let batch = sample_cycle_batch(corpus, self.config.batch_size, &mut rng, self.config.sampler)?;
        RoleTensors::from_batch(corpus, &batch, self.config.max_frames, &mut rng)
    }

    /// Gradient of the summed composites of `loss_substeps` with respect to
    /// the generator parameters, with the forward pass running every substep
    /// of the ablation. Also returns that summed loss.
    pub fn generator_gradients(
        &self,
        aux: &AuxModels,
        roles: &RoleTensors,
        loss_substeps: &[u8],
    ) -> Result<(Vec<Tensor>, f64)> {
        let g = Graph::new();
        let gp = Binder::trainable(&g, self.generator.store());
        let cx = StepContext::new(
            &g,
            &self.generator,
            &gp,
            &self.discriminator,
            aux,
            self.config.effective_weights(),
            self.step,
        );
        let outs = run_substeps(&cx, roles, self.config.ablation.substeps(), self.config.detach_cycle)?;
        let selected: Vec<&SubstepOutput> = outs.iter().filter(|o| loss_substeps.contains(&o.substep)).collect();
        let total = sum_vars(selected.iter().map(|o| o.composite))
            .ok_or_else(|| Error::Invalid(format!("no active substep among {loss_substeps:?}")))?;
        let grads = gp.grads(&g.backward(total));
        Ok((grads, total.item()))
    }

    /// Summed generator loss on `roles` without updating anything.
    pub fn generator_loss(&self, aux: &AuxModels, roles: &RoleTensors) -> Result<f64> {
        let g = Graph::new();
        let gp = Binder::frozen(&g, self.generator.store());
        let cx = StepContext::new(
            &g,
            &self.generator,
            &gp,
            &self.discriminator,
            aux,
            self.config.effective_weights(),
            self.step,
        );
        let outs = run_substeps(&cx, roles, self.config.ablation.substeps(), self.config.detach_cycle)?;
        Ok(sum_vars(outs.iter().map(|o| o.composite)).expect("at least one substep").item())
    }

    /// One generator update from the summed substep losses, then one
    /// discriminator update on the detached outputs.
    pub fn training_step(&mut self, aux: &AuxModels, roles: &RoleTensors) -> Result<StepArtifacts> {
        let step = self.step;
        let (grads, breakdowns, generated, step3_reference, generator_loss) = {
            let g = Graph::new();
            let gp = Binder::trainable(&g, self.generator.store());
            let cx = StepContext::new(
                &g,
                &self.generator,
                &gp,
                &self.discriminator,
                aux,
                self.config.effective_weights(),
                step,
            );
            let outs = run_substeps(&cx, roles, self.config.ablation.substeps(), self.config.detach_cycle)?;
            let total = sum_vars(outs.iter().map(|o| o.composite)).expect("at least one substep");
            let grads = gp.grads(&g.backward(total));
            let reference = outs.iter().find(|o| o.substep == 3).map(|o| (*o.reference.value()).clone());
            (
                grads,
                outs.iter().map(|o| o.breakdown.clone()).collect::<Vec<_>>(),
                outs.iter().map(|o| (*o.generated.value()).clone()).collect::<Vec<_>>(),
                reference,
                total.item(),
            )
        };
        self.gen_opt.step(self.generator.store_mut(), &grads);

        let reals = [&roles.c1, &roles.c2, &roles.c3];
        let pairs: Vec<(&Tensor, &Tensor)> = generated.iter().enumerate().map(|(i, f)| (reals[i], f)).collect();
        let discriminator_loss = self.discriminator_update(&pairs, step)?;
        self.step += 1;
        Ok(StepArtifacts { step, breakdowns, generated, step3_reference, generator_loss, discriminator_loss })
    }

    /// LSGAN update summed over (real, fake) pairs, one per substep.
    fn discriminator_update(&mut self, pairs: &[(&Tensor, &Tensor)], step: u64) -> Result<f64> {
        let g = Graph::new();
        let dp = Binder::trainable(&g, self.discriminator.store());
        let mut terms = Vec::with_capacity(pairs.len());
        for (real, fake) in pairs {
            let r = self.discriminator.forward(&dp, g.constant((*real).clone()))?;
            let f = self.discriminator.forward(&dp, g.constant((*fake).clone()))?;
            terms.push(lsgan_d_loss(r, f));
        }
        let loss = sum_vars(terms.into_iter()).expect("at least one pair");
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite { step, substep: 0, component: "discriminator".into(), value });
        }
        let grads = dp.grads(&g.backward(loss));
        self.disc_opt.step(self.discriminator.store_mut(), &grads);
        Ok(value)
    }
}

fn sum_vars<'g>(vars: impl Iterator<Item = Var<'g>>) -> Option<Var<'g>> {
    vars.reduce(|a, b| a.add(b))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepArtifacts>,
    pub final_step: u64,
}

/// Where `train` writes logs and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoint")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }
}

fn log_records(out: &mut impl Write, a: &StepArtifacts) -> std::io::Result<()> {
    for b in &a.breakdowns {
        let comps: serde_json::Map<String, serde_json::Value> =
            b.components.iter().map(|(t, v)| (t.name().to_string(), json!(v))).collect();
        writeln!(out, "{}", json!({"step": a.step, "substep": b.substep, "components": comps, "composite": b.composite}))?;
    }
    writeln!(
        out,
        "{}",
        json!({"step": a.step, "generator_loss": a.generator_loss, "discriminator_loss": a.discriminator_loss})
    )
}

/// Runs steps from `state.step` up to `state.config.steps`. With an output
/// directory, appends JSONL loss records and writes checkpoints there; the
/// final state is always checkpointed.
pub fn train(
    state: &mut TrainerState,
    corpus: &Corpus,
    aux: &AuxModels,
    output: Option<&TrainOutput>,
) -> Result<TrainReport> {
    check_cycle_feasible(corpus)?;
    if aux.mel_bins() != state.generator.config().mel_bins {
        return Err(Error::Shape(format!(
            "auxiliary models use {} mel bins, generator {}",
            aux.mel_bins(),
            state.generator.config().mel_bins
        )));
    }
    let mut log = match output {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(|e| Error::File { path: o.dir.clone(), source: e })?;
            let path = o.log_path();
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::File { path: path.clone(), source: e })?;
            Some((BufWriter::new(f), path))
        }
        None => None,
    };
    let cfg = state.config.clone();
    let mut steps = Vec::new();
    while state.step < cfg.steps {
        let roles = state.batch_for(corpus, state.step)?;
        let art = state.training_step(aux, &roles)?;
        let done = state.step;
        if let Some((w, path)) = log.as_mut() {
            let due = done == cfg.steps || (cfg.log_interval > 0 && art.step % cfg.log_interval == 0);
            if due {
                log_records(w, &art).map_err(|e| Error::File { path: path.clone(), source: e })?;
            }
        }
        if let Some(o) = output {
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < cfg.steps {
                state.save(&o.checkpoint_dir())?;
            }
        }
        steps.push(art);
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::File { path, source: e })?;
    }
    if let Some(o) = output {
        state.save(&o.checkpoint_dir())?;
    }
    Ok(TrainReport { steps, final_step: state.step })
}

/// Reads a JSONL training log back as generic records.
pub fn read_log(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::File { path: path.to_path_buf(), source: e })?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
