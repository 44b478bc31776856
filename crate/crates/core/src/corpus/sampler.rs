//! Constraint-based sampling of cycle-training roles.

use cyclevc_autograd::Tensor;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, MelSpec, Utterance};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Step1Content,
    Step1Timbre,
    Step2Content,
    Step2Timbre,
    Step3Content,
}

/// One sextuple of roles as corpus indices. Speaker 1 supplies three distinct
/// utterances in language A; speaker 2 supplies one in language B. The
/// step-2 timbre reference is the step-1 timbre utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleItem {
    pub step1_content: usize,
    pub step1_timbre: usize,
    pub step2_content: usize,
    pub step3_content: usize,
    pub language_a: String,
    pub language_b: String,
}

impl CycleItem {
    pub fn get(&self, role: Role) -> usize {
        match role {
            Role::Step1Content => self.step1_content,
            Role::Step1Timbre | Role::Step2Timbre => self.step1_timbre,
            Role::Step2Content => self.step2_content,
            Role::Step3Content => self.step3_content,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleBatch {
    pub items: Vec<CycleItem>,
}

impl CycleBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn utterances<'c>(&self, corpus: &'c Corpus, role: Role) -> Vec<&'c Utterance> {
        self.items.iter().map(|it| corpus.utterance(it.get(role))).collect()
    }

    /// `(B, T_min, D)` mel tensor for one role, cropped to the shortest item.
    pub fn mel_tensor(&self, corpus: &Corpus, role: Role) -> Result<Tensor> {
        let mels: Vec<&MelSpec> = self.utterances(corpus, role).into_iter().map(|u| &u.mel).collect();
        MelSpec::stack(&mels)
    }

    /// Checks every sextuple's speaker, language and distinctness constraints.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        for (i, it) in self.items.iter().enumerate() {
            let u = |idx: usize| corpus.utterance(idx);
            let (c1, t1, c2, c3) = (u(it.step1_content), u(it.step1_timbre), u(it.step2_content), u(it.step3_content));
            let fail = |m: &str| Err(Error::Infeasible(format!("cycle item {i}: {m}")));
            if !(c1.speaker == t1.speaker && t1.speaker == c3.speaker) {
                return fail("speaker-1 roles come from different speakers");
            }
            if c2.speaker == c1.speaker {
                return fail("speaker 2 equals speaker 1");
            }
            if c2.language == c1.language {
                return fail("both languages are the same");
            }
            let ids = [it.step1_content, it.step1_timbre, it.step3_content];
            if ids[0] == ids[1] || ids[0] == ids[2] || ids[1] == ids[2] {
                return fail("speaker-1 utterances are not distinct");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Draw which language plays role A uniformly per sextuple; otherwise the
    /// first eligible language (sorted) is always A.
    pub swap_languages: bool,
    /// Assign speaker 1's three utterances to roles in random order; otherwise
    /// in corpus order.
    pub shuffle_roles: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions { swap_languages: true, shuffle_roles: true }
    }
}

/// Languages where some speaker has at least 3 utterances.
fn a_candidates(corpus: &Corpus) -> Vec<&str> {
    corpus
        .languages()
        .iter()
        .filter(|(lang, spks)| spks.iter().any(|s| corpus.utterances_of(s, lang).len() >= 3))
        .map(|(l, _)| l.as_str())
        .collect()
}

pub fn check_cycle_feasible(corpus: &Corpus) -> Result<()> {
    if corpus.languages().len() < 2 {
        return Err(Error::Infeasible(format!(
            "cycle sampling needs at least 2 languages, corpus has {}",
            corpus.languages().len()
        )));
    }
    if a_candidates(corpus).is_empty() {
        return Err(Error::Infeasible("no speaker has the 3 utterances needed for the speaker-1 role".into()));
    }
    Ok(())
}

pub fn sample_cycle_batch(
    corpus: &Corpus,
    batch_size: usize,
    rng: &mut impl Rng,
    opts: SamplerOptions,
) -> Result<CycleBatch> {
    check_cycle_feasible(corpus)?;
    let cands = a_candidates(corpus);
    let mut items = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let lang_a = if opts.swap_languages { cands[rng.random_range(0..cands.len())] } else { cands[0] };
        let eligible: Vec<&String> =
            corpus.languages()[lang_a].iter().filter(|s| corpus.utterances_of(s, lang_a).len() >= 3).collect();
        let s1 = eligible[rng.random_range(0..eligible.len())];
        let others: Vec<&str> = corpus.languages().keys().map(|l| l.as_str()).filter(|&l| l != lang_a).collect();
        let lang_b = if opts.swap_languages { others[rng.random_range(0..others.len())] } else { others[0] };
        let s2s: Vec<&String> = corpus.languages()[lang_b].iter().filter(|s| *s != s1).collect();
        if s2s.is_empty() {
            return Err(Error::Infeasible(format!("language `{lang_b}` has no speaker other than `{s1}`")));
        }
        let s2 = s2s[rng.random_range(0..s2s.len())];
        let pool = corpus.utterances_of(s1, lang_a);
        let mut pick = index::sample(rng, pool.len(), 3).into_vec();
        if !opts.shuffle_roles {
            pick.sort_unstable();
        }
        let pool2 = corpus.utterances_of(s2, lang_b);
        items.push(CycleItem {
            step1_content: pool[pick[0]],
            step1_timbre: pool[pick[1]],
            step2_content: pool2[rng.random_range(0..pool2.len())],
            step3_content: pool[pick[2]],
            language_a: lang_a.to_string(),
            language_b: lang_b.to_string(),
        });
    }
    Ok(CycleBatch { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_util::utt;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_roles_with_swapping_off() {
        let c = Corpus::new(vec![
            utt("s1", "A", "u1", 3),
            utt("s1", "A", "u2", 3),
            utt("s2", "B", "u3", 3),
            utt("s1", "A", "u4", 3),
        ])
        .unwrap();
        let opts = SamplerOptions { swap_languages: false, shuffle_roles: false };
        let b = sample_cycle_batch(&c, 1, &mut ChaCha8Rng::seed_from_u64(0), opts).unwrap();
        let name = |r| c.utterance(b.items[0].get(r)).utt_id.as_str();
        assert_eq!(name(Role::Step1Content), "u1");
        assert_eq!(name(Role::Step1Timbre), "u2");
        assert_eq!(name(Role::Step2Content), "u3");
        assert_eq!(name(Role::Step2Timbre), "u2");
        assert_eq!(name(Role::Step3Content), "u4");
    }

    #[test]
    fn single_language_is_infeasible() {
        let c = Corpus::new((0..4).map(|i| utt("s1", "A", &format!("u{i}"), 3)).collect()).unwrap();
        let e = sample_cycle_batch(&c, 1, &mut ChaCha8Rng::seed_from_u64(0), SamplerOptions::default()).unwrap_err();
        assert!(e.to_string().contains("at least 2 languages"));
    }

    #[test]
    fn language_a_is_balanced() {
        let mut v = Vec::new();
        for (s, l) in [("s1", "A"), ("s2", "B")] {
            for i in 0..3 {
                v.push(utt(s, l, &format!("{s}{i}"), 3));
            }
        }
        let c = Corpus::new(v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let b = sample_cycle_batch(&c, 10_000, &mut rng, SamplerOptions::default()).unwrap();
        let a = b.items.iter().filter(|it| it.language_a == "A").count() as f64 / 10_000.0;
        assert!((a - 0.5).abs() <= 0.02, "{a}");
    }

    #[test]
    fn equal_seeds_equal_batches() {
        let s = crate::corpus::generate_synthetic_corpus(&Default::default()).unwrap();
        let draw = |seed| {
            sample_cycle_batch(&s.corpus, 8, &mut ChaCha8Rng::seed_from_u64(seed), SamplerOptions::default()).unwrap()
        };
        assert_eq!(draw(5), draw(5));
    }

    fn corpus_strategy() -> impl Strategy<Value = Corpus> {
        // (language, utterance count) per speaker
        proptest::collection::vec((0usize..3, 1usize..6), 2..8).prop_map(|spk| {
            let mut v = Vec::new();
            for (s, (l, n)) in spk.iter().enumerate() {
                for i in 0..*n {
                    v.push(utt(&format!("s{s}"), &format!("L{l}"), &format!("s{s}u{i}"), 2 + i));
                }
            }
            Corpus::new(v).unwrap()
        })
    }

    proptest! {
        #[test]
        fn batches_satisfy_role_constraints(c in corpus_strategy(), seed in 0u64..1000, bs in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match sample_cycle_batch(&c, bs, &mut rng, SamplerOptions::default()) {
                Ok(b) => {
                    prop_assert_eq!(b.len(), bs);
                    prop_assert!(b.validate(&c).is_ok());
                }
                Err(e) => prop_assert!(matches!(e, Error::Infeasible(_))),
            }
        }
    }
}
