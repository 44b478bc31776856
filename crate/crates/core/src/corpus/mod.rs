//! Utterances, corpora and the pieces that build them.

mod manifest;
mod sampler;
mod synth;

use std::collections::BTreeMap;

use cyclevc_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{
    load_manifest, load_multilingual_manifest, load_teacher_embeddings, read_mel_cache, write_manifest, write_mel_cache, LoadReport,
    ManifestRecord,
};
pub use sampler::{check_cycle_feasible, sample_cycle_batch, CycleBatch, CycleItem, Role, SamplerOptions};
pub use synth::{
    add_f0_bump, apply_timbre, content_envelope, generate_synthetic_corpus, render_utterance, PhonemeTemplate,
    SpeakerFactors, SyntheticCorpus, SyntheticSpec,
};

/// Row-major `frames x bins` log-amplitude matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelSpec {
    frames: usize,
    bins: usize,
    values: Vec<f32>,
}

impl MelSpec {
    pub fn new(frames: usize, bins: usize, values: Vec<f32>) -> Result<Self> {
        if frames == 0 || bins == 0 {
            return Err(Error::Shape(format!("mel must have at least one frame and bin, got {frames}x{bins}")));
        }
        if values.len() != frames * bins {
            return Err(Error::Shape(format!("{} values for a {frames}x{bins} mel", values.len())));
        }
        Ok(MelSpec { frames, bins, values })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, b: usize) -> f32 {
        self.values[t * self.bins + b]
    }

    /// First `frames` frames.
    pub fn crop(&self, frames: usize) -> MelSpec {
        assert!(frames >= 1 && frames <= self.frames, "crop {frames} of {}", self.frames);
        MelSpec { frames, bins: self.bins, values: self.values[..frames * self.bins].to_vec() }
    }

    /// Frames in reverse order.
    pub fn reversed(&self) -> MelSpec {
        let values = (0..self.frames).rev().flat_map(|t| self.row(t).to_vec()).collect();
        MelSpec { frames: self.frames, bins: self.bins, values }
    }

    /// Checks the floor and the expected bin count.
    pub fn validate(&self, bins: usize, min_log: f64) -> Result<()> {
        if self.bins != bins {
            return Err(Error::Shape(format!("mel has {} bins, expected {bins}", self.bins)));
        }
        let floor = min_log as f32;
        if let Some(v) = self.values.iter().find(|&&v| !(v >= floor)) {
            return Err(Error::Invalid(format!("mel value {v} below log floor {floor}")));
        }
        Ok(())
    }

    /// `(1, frames, bins)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.frames, self.bins], self.values.iter().map(|&v| v as f64).collect())
    }

    /// Stacks mels cropped to the shortest one into `(B, T_min, bins)`.
    pub fn stack(mels: &[&MelSpec]) -> Result<Tensor> {
        let first = mels.first().ok_or_else(|| Error::Invalid("empty mel batch".into()))?;
        let t = mels.iter().map(|m| m.frames).min().unwrap();
        let mut data = Vec::with_capacity(mels.len() * t * first.bins);
        for m in mels {
            if m.bins != first.bins {
                return Err(Error::Shape(format!("bin counts {} and {} in one batch", first.bins, m.bins)));
            }
            data.extend(m.values[..t * m.bins].iter().map(|&v| v as f64));
        }
        Ok(Tensor::new(&[mels.len(), t, first.bins], data))
    }

    /// Splits a `(B, T, bins)` tensor into per-item mels, rounding to `f32`.
    pub fn unstack(t: &Tensor) -> Vec<MelSpec> {
        assert_eq!(t.ndim(), 3, "expected (B, T, D), got {:?}", t.shape());
        let (b, frames, bins) = (t.dim(0), t.dim(1), t.dim(2));
        (0..b)
            .map(|i| MelSpec {
                frames,
                bins,
                values: t.data()[i * frames * bins..(i + 1) * frames * bins].iter().map(|&v| v as f32).collect(),
            })
            .collect()
    }
}

/// One phoneme occupying frames `start..end` (end exclusive).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneSpan {
    pub token: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub language: String,
    pub utt_id: String,
    pub mel: MelSpec,
    pub phones: Vec<PhoneSpan>,
    /// Hz per mel frame, 0 for unvoiced.
    pub f0: Vec<f32>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.mel.frames()
    }

    pub fn phone_tokens(&self) -> Vec<&str> {
        self.phones.iter().map(|p| p.token.as_str()).collect()
    }

    /// Phone tokens whose span starts inside the first `frames` frames.
    pub fn phone_tokens_within(&self, frames: usize) -> Vec<&str> {
        self.phones.iter().filter(|p| p.start < frames).map(|p| p.token.as_str()).collect()
    }

    pub fn validate(&self, f0_range: (f64, f64)) -> Result<()> {
        let ctx = |m: String| Error::Invalid(format!("utterance `{}`: {m}", self.utt_id));
        let mut prev_end = 0;
        for p in &self.phones {
            if p.start >= p.end || p.end > self.frames() {
                return Err(ctx(format!("phone span {}..{} outside 0..{}", p.start, p.end, self.frames())));
            }
            if p.start < prev_end {
                return Err(ctx(format!("phone spans overlap or are unsorted at frame {}", p.start)));
            }
            prev_end = p.end;
        }
        if self.f0.len() != self.frames() {
            return Err(ctx(format!("{} f0 values for {} frames", self.f0.len(), self.frames())));
        }
        let (lo, hi) = (f0_range.0 as f32 - 1e-3, f0_range.1 as f32 + 1e-3);
        if let Some(f) = self.f0.iter().find(|&&f| f != 0.0 && !(f >= lo && f <= hi)) {
            return Err(ctx(format!("f0 value {f} outside [{}, {}]", f0_range.0, f0_range.1)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEntry {
    pub languages: Vec<String>,
    /// Indices into [`Corpus::utterances`], in corpus order.
    pub utterances: Vec<usize>,
}

/// Utterances plus speaker and language indices. Immutable once built.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    speakers: BTreeMap<String, SpeakerEntry>,
    languages: BTreeMap<String, Vec<String>>,
}

impl Corpus {
    /// Corpus of monolingual speakers; a speaker under two languages is an
    /// error.
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for u in &utterances {
            if let Some(&first) = seen.get(u.speaker.as_str()) {
                if first != u.language {
                    return Err(Error::Consistency {
                        speaker: u.speaker.clone(),
                        first: first.to_string(),
                        second: u.language.clone(),
                    });
                }
            } else {
                seen.insert(&u.speaker, &u.language);
            }
        }
        Ok(Self::multilingual(utterances))
    }

    /// Corpus where a speaker may record in several languages. Cycle sampling
    /// is undefined for such speakers; evaluation protocols use it.
    pub fn multilingual(utterances: Vec<Utterance>) -> Self {
        let mut speakers: BTreeMap<String, SpeakerEntry> = BTreeMap::new();
        let mut languages: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, u) in utterances.iter().enumerate() {
            let e = speakers.entry(u.speaker.clone()).or_default();
            e.utterances.push(i);
            if !e.languages.contains(&u.language) {
                e.languages.push(u.language.clone());
            }
            let l = languages.entry(u.language.clone()).or_default();
            if !l.contains(&u.speaker) {
                l.push(u.speaker.clone());
            }
        }
        for l in languages.values_mut() {
            l.sort();
        }
        Corpus { utterances, speakers, languages }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn utterance(&self, i: usize) -> &Utterance {
        &self.utterances[i]
    }

    pub fn speakers(&self) -> &BTreeMap<String, SpeakerEntry> {
        &self.speakers
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerEntry> {
        self.speakers.get(id)
    }

    /// Language → sorted speaker ids.
    pub fn languages(&self) -> &BTreeMap<String, Vec<String>> {
        &self.languages
    }

    /// Speakers with fewer than `n` utterances.
    pub fn speakers_below(&self, n: usize) -> Vec<&str> {
        self.speakers.iter().filter(|(_, e)| e.utterances.len() < n).map(|(s, _)| s.as_str()).collect()
    }

    pub fn mel_bins(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.mel.bins())
    }

    /// Utterances of one speaker in one language, in corpus order.
    pub fn utterances_of(&self, speaker: &str, language: &str) -> Vec<usize> {
        self.speakers
            .get(speaker)
            .map(|e| e.utterances.iter().copied().filter(|&i| self.utterances[i].language == language).collect())
            .unwrap_or_default()
    }

    /// Splits off the last `held_out` utterances of every speaker (per
    /// language for multilingual speakers) into a second corpus.
    pub fn split_holdout(&self, held_out: usize) -> (Corpus, Corpus) {
        let mut test_ids = vec![false; self.utterances.len()];
        for (spk, e) in &self.speakers {
            for lang in &e.languages {
                let ids = self.utterances_of(spk, lang);
                for &i in ids.iter().rev().take(held_out) {
                    test_ids[i] = true;
                }
            }
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (u, &t) in self.utterances.iter().zip(&test_ids) {
            if t {
                test.push(u.clone());
            } else {
                train.push(u.clone());
            }
        }
        (Corpus::multilingual(train), Corpus::multilingual(test))
    }

    /// Sorted phone inventory.
    pub fn phone_inventory(&self) -> Vec<String> {
        let mut v: Vec<String> = self.utterances.iter().flat_map(|u| u.phones.iter().map(|p| p.token.clone())).collect();
        v.sort();
        v.dedup();
        v
    }
}

/// Phone token ↔ class index; index 0 is the CTC blank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneVocab {
    tokens: Vec<String>,
}

impl PhoneVocab {
    pub fn new(mut tokens: Vec<String>) -> Self {
        tokens.sort();
        tokens.dedup();
        PhoneVocab { tokens }
    }

    pub fn from_corpus(corpus: &Corpus) -> Self {
        PhoneVocab::new(corpus.phone_inventory())
    }

    /// Phones excluding the blank.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.binary_search_by(|t| t.as_str().cmp(token)).ok().map(|i| i + 1)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.tokens.get(i)).map(|s| s.as_str())
    }

    pub fn encode(&self, tokens: &[&str]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t).ok_or_else(|| Error::Invalid(format!("phone `{t}` not in vocabulary")))).collect()
    }
}


#[cfg(test)]
mod tests {
    use super::test_util::utt;
    use super::*;

    #[test]
    fn speaker_under_two_languages_is_rejected() {
        let err = Corpus::new(vec![utt("s1", "A", "u1", 3), utt("s1", "B", "u2", 3)]).unwrap_err();
        assert!(matches!(err, Error::Consistency { .. }));
        assert_eq!(Corpus::multilingual(vec![utt("s1", "A", "u1", 3), utt("s1", "B", "u2", 3)]).speakers().len(), 1);
    }

    #[test]
    fn index_maps_languages_to_speakers() {
        let c = Corpus::new(vec![utt("s2", "B", "u1", 3), utt("s1", "A", "u2", 3), utt("s1", "A", "u3", 3)]).unwrap();
        assert_eq!(c.languages()["A"], vec!["s1"]);
        assert_eq!(c.speaker("s1").unwrap().utterances, vec![1, 2]);
        assert_eq!(c.speakers_below(2), vec!["s2"]);
    }

    #[test]
    fn stack_crops_to_shortest() {
        let a = MelSpec::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = MelSpec::new(2, 2, vec![7.0, 8.0, 9.0, 10.0]).unwrap();
        let t = MelSpec::stack(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0, 7.0, 8.0, 9.0, 10.0]);
        assert_eq!(MelSpec::unstack(&t)[1], b);
    }

    #[test]
    fn utterance_validation() {
        let mut u = utt("s", "A", "u", 5);
        assert!(u.validate((60.0, 500.0)).is_ok());
        u.phones.push(PhoneSpan { token: "x".into(), start: 4, end: 6 });
        assert!(u.validate((60.0, 500.0)).is_err());
        let mut v = utt("s", "A", "v", 5);
        v.f0[2] = 30.0;
        assert!(v.validate((60.0, 500.0)).is_err());
    }

    #[test]
    fn vocab_reserves_blank() {
        let v = PhoneVocab::new(vec!["b".into(), "a".into(), "a".into()]);
        assert_eq!(v.len(), 2);
        assert_eq!(v.id("a"), Some(1));
        assert_eq!(v.token(2), Some("b"));
        assert_eq!(v.token(0), None);
    }

    #[test]
    fn holdout_takes_last_per_speaker() {
        let c = Corpus::new((0..5).map(|i| utt("s", "A", &format!("u{i}"), 2)).collect()).unwrap();
        let (train, test) = c.split_holdout(2);
        assert_eq!(train.len(), 3);
        assert_eq!(test.utterances().iter().map(|u| u.utt_id.as_str()).collect::<Vec<_>>(), vec!["u3", "u4"]);
    }
}
