//! Generator and discriminator objectives and their per-substep weighting.
//!
//! Distances are element means, so weights do not depend on sequence length.
//! Perceptual losses treat the reference side as a constant.

use std::collections::BTreeMap;

use cyclevc_autograd::{Binder, Var};
use serde::{Deserialize, Serialize};

use crate::auxiliary::{AsrModel, PitchModel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub adv: f64,
    pub rec: f64,
    pub timbre: f64,
    pub pitch: f64,
    pub asr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { adv: 0.05, rec: 1.0, timbre: 0.1, pitch: 1.0, asr: 0.5 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights { adv: 0.0, rec: 0.0, timbre: 0.0, pitch: 0.0, asr: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.iter() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Invalid(format!("loss weight `{}` must be a non-negative number, got {w}", name.name())));
            }
        }
        Ok(())
    }

    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Adv => self.adv,
            LossTerm::Rec => self.rec,
            LossTerm::Timbre => self.timbre,
            LossTerm::Pitch => self.pitch,
            LossTerm::Asr => self.asr,
        }
    }

    fn iter(&self) -> impl Iterator<Item = (LossTerm, f64)> + '_ {
        LossTerm::ALL.into_iter().map(|t| (t, self.get(t)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Adv,
    Rec,
    Timbre,
    Pitch,
    Asr,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [LossTerm::Adv, LossTerm::Rec, LossTerm::Timbre, LossTerm::Pitch, LossTerm::Asr];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Adv => "adv",
            LossTerm::Rec => "rec",
            LossTerm::Timbre => "timbre",
            LossTerm::Pitch => "pitch",
            LossTerm::Asr => "asr",
        }
    }
}

/// Terms each substep must supply: reconstruction substeps (1 and 3) use
/// adversarial, reconstruction, timbre and pitch; the cross-lingual substep
/// (2) uses adversarial, timbre and ASR.
pub fn required_terms(substep: u8) -> Result<&'static [LossTerm]> {
    const RECON: [LossTerm; 4] = [LossTerm::Adv, LossTerm::Rec, LossTerm::Timbre, LossTerm::Pitch];
    const CROSS: [LossTerm; 3] = [LossTerm::Adv, LossTerm::Timbre, LossTerm::Asr];
    match substep {
        1 | 3 => Ok(&RECON),
        2 => Ok(&CROSS),
        s => Err(Error::Composition { substep: s, msg: "substep must be 1, 2 or 3".into() }),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub substep: u8,
    pub components: BTreeMap<LossTerm, f64>,
    pub composite: f64,
}

impl LossBreakdown {
    /// The weighted sum recomputed from the stored components.
    pub fn recompute(&self, w: &LossWeights) -> f64 {
        self.components.iter().map(|(&t, &v)| w.get(t) * v).sum()
    }
}

fn check_terms<T>(substep: u8, components: &[(LossTerm, T)]) -> Result<()> {
    let req = required_terms(substep)?;
    for (t, _) in components {
        if !req.contains(t) {
            return Err(Error::Composition { substep, msg: format!("unexpected `{}` term", t.name()) });
        }
    }
    for t in req {
        match components.iter().filter(|(c, _)| c == t).count() {
            1 => {}
            0 => return Err(Error::Composition { substep, msg: format!("missing `{}` term", t.name()) }),
            _ => return Err(Error::Composition { substep, msg: format!("duplicate `{}` term", t.name()) }),
        }
    }
    Ok(())
}

/// λ-weighted composite of exactly the substep's required components, summed
/// in canonical term order.
pub fn compose_step_loss(substep: u8, components: &[(LossTerm, f64)], weights: &LossWeights) -> Result<LossBreakdown> {
    check_terms(substep, components)?;
    let composite = required_terms(substep)?
        .iter()
        .map(|t| weights.get(*t) * components.iter().find(|(c, _)| c == t).expect("checked").1)
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a + x)))
        .expect("at least one term");
    Ok(LossBreakdown { substep, components: components.iter().copied().collect(), composite })
}

/// Differentiable composite plus the matching breakdown. Components are summed
/// in the substep's canonical term order.
pub fn compose_step_vars<'g>(
    substep: u8,
    components: &[(LossTerm, Var<'g>)],
    weights: &LossWeights,
) -> Result<(Var<'g>, LossBreakdown)> {
    check_terms(substep, components)?;
    let values: Vec<(LossTerm, f64)> = components.iter().map(|(t, v)| (*t, v.item())).collect();
    let breakdown = compose_step_loss(substep, &values, weights)?;
    let mut total: Option<Var<'g>> = None;
    for t in required_terms(substep)? {
        let v = components.iter().find(|(c, _)| c == t).expect("checked").1.scale(weights.get(*t));
        total = Some(match total {
            Some(acc) => acc.add(v),
            None => v,
        });
    }
    Ok((total.expect("at least one term"), breakdown))
}

fn same_shape(what: &str, a: Var<'_>, b: Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Element-mean squared difference.
pub fn recon_loss<'g>(target: Var<'g>, generated: Var<'g>) -> Result<Var<'g>> {
    same_shape("reconstruction loss", target, generated)?;
    Ok(generated.sub(target).square().mean_all())
}

/// `1 − cos(e, ê)` per row of `(B, K)` embeddings, averaged over the batch.
pub fn timbre_loss<'g>(target: Var<'g>, generated: Var<'g>) -> Result<Var<'g>> {
    same_shape("timbre loss", target, generated)?;
    for (name, v) in [("target", target), ("generated", generated)] {
        let t = v.value();
        let k = t.dim(t.ndim() - 1);
        if let Some(r) = t.data().chunks_exact(k).position(|row| row.iter().all(|&x| x == 0.0)) {
            return Err(Error::Invalid(format!("timbre loss: {name} embedding {r} has zero norm")));
        }
    }
    let axis = target.shape().len() - 1;
    let dot = target.mul(generated).sum_axis(axis);
    let norms = target.square().sum_axis(axis).mul(generated.square().sum_axis(axis)).sqrt();
    Ok(dot.div(norms).neg().add_scalar(1.0).mean_all())
}

/// MSE between first-layer pitch embeddings of the reference (constant) and
/// generated mels.
pub fn pitch_perceptual_loss<'g>(
    p: &Binder<'g, '_>,
    model: &PitchModel,
    target: Var<'g>,
    generated: Var<'g>,
) -> Result<Var<'g>> {
    same_shape("pitch perceptual loss", target, generated)?;
    let a = model.forward(p, target)?.first_hidden.detach();
    let b = model.forward(p, generated)?.first_hidden;
    Ok(b.sub(a).square().mean_all())
}

/// MSE between last-layer recognizer embeddings of the reference (constant)
/// and generated mels.
pub fn asr_perceptual_loss<'g>(
    p: &Binder<'g, '_>,
    model: &AsrModel,
    target: Var<'g>,
    generated: Var<'g>,
) -> Result<Var<'g>> {
    same_shape("asr perceptual loss", target, generated)?;
    let a = model.forward(p, target)?.last_hidden.detach();
    let b = model.forward(p, generated)?.last_hidden;
    Ok(b.sub(a).square().mean_all())
}

/// `mean((real − 1)²) + mean(fake²)`.
pub fn lsgan_d_loss<'g>(real: Var<'g>, fake: Var<'g>) -> Var<'g> {
    real.add_scalar(-1.0).square().mean_all().add(fake.square().mean_all())
}

/// `mean((fake − 1)²)`.
pub fn lsgan_g_loss(fake: Var<'_>) -> Var<'_> {
    fake.add_scalar(-1.0).square().mean_all()
}

/// Scalar form of both LSGAN objectives: `(g_loss, d_loss)`.
pub fn lsgan_losses(real: &[f64], fake: &[f64]) -> (f64, f64) {
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64;
    let g = mean(fake, &|x| (x - 1.0).powi(2));
    let d = mean(real, &|x| (x - 1.0).powi(2)) + mean(fake, &|x| x * x);
    (g, d)
}
