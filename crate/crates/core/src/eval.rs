//! Conversion metrics: speaker similarity, phoneme error rate, similarity
//! matrices across (speaker, language) groups, embedding export with a PCA
//! projection, and the ablation runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use cyclevc_autograd::par;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, MelSpec};
use crate::error::{Error, Result};
use crate::nets::{ExternalContentEncoder, Generator, MelNorm, NetConfig};
use crate::auxiliary::{AsrModel, SvModel};
use crate::trainer::{train, Ablation, AuxModels, TrainConfig, TrainerState};

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("embeddings of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Levenshtein distance over tokens divided by the reference length.
pub fn phoneme_error_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("phoneme error rate needs a non-empty reference".into()));
    }
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    for (i, r) in reference.iter().enumerate() {
        let mut cur = vec![i + 1; hyp.len() + 1];
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    Ok(prev[hyp.len()] as f64 / reference.len() as f64)
}

/// `(speaker, language)`.
pub type GroupLabel = (String, String);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimMatrix {
    pub rows: Vec<GroupLabel>,
    pub cols: Vec<GroupLabel>,
    pub cells: Vec<Vec<f64>>,
}

impl SimMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group");
        for (spk, lang) in &self.cols {
            let _ = write!(s, ",{spk}/{lang}");
        }
        s.push('\n');
        for ((spk, lang), row) in self.rows.iter().zip(&self.cells) {
            let _ = write!(s, "{spk}/{lang}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Every (speaker, language) group of `corpus`, sorted.
pub fn corpus_groups(corpus: &Corpus) -> Vec<GroupLabel> {
    let mut g: Vec<GroupLabel> = corpus.utterances().iter().map(|u| (u.speaker.clone(), u.language.clone())).collect();
    g.sort();
    g.dedup();
    g
}

/// Mean cosine similarity between SV embeddings of utterance pairs drawn
/// across row and column groups. A cell uses every cross pair (an utterance is never paired
/// with itself) when there are at most `pairs_per_cell`, otherwise a seeded
/// sample of that many.
pub fn sim_matrix(
    corpus: &Corpus,
    sv: &SvModel,
    rows: &[GroupLabel],
    cols: &[GroupLabel],
    pairs_per_cell: usize,
    seed: u64,
) -> Result<SimMatrix> {
    if pairs_per_cell == 0 {
        return Err(Error::Invalid("sim matrix needs at least one pair per cell".into()));
    }
    let members = |groups: &[GroupLabel]| -> Result<Vec<Vec<usize>>> {
        groups
            .iter()
            .map(|(s, l)| {
                let m = corpus.utterances_of(s, l);
                if m.is_empty() {
                    return Err(Error::Invalid(format!("group ({s}, {l}) has no utterances")));
                }
                Ok(m)
            })
            .collect()
    };
    let (row_members, col_members) = (members(rows)?, members(cols)?);
    let mels: Vec<&MelSpec> = corpus.utterances().iter().map(|u| &u.mel).collect();
    let emb = sv.embed_all(&mels)?;
    let mut cells = vec![vec![0.0; cols.len()]; rows.len()];
    for (r, rm) in row_members.iter().enumerate() {
        for (c, cm) in col_members.iter().enumerate() {
            let all: Vec<(usize, usize)> =
                rm.iter().flat_map(|&a| cm.iter().map(move |&b| (a, b))).filter(|(a, b)| a != b).collect();
            if all.is_empty() {
                return Err(Error::Invalid(format!(
                    "cell ({}, {}) x ({}, {}) has no distinct utterance pairs",
                    rows[r].0, rows[r].1, cols[c].0, cols[c].1
                )));
            }
            let picked: Vec<(usize, usize)> = if all.len() <= pairs_per_cell {
                all
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((r * cols.len() + c) as u64);
                let mut idx = index::sample(&mut rng, all.len(), pairs_per_cell).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| all[i]).collect()
            };
            let mut sum = 0.0;
            for &(a, b) in &picked {
                sum += cosine_sim(&emb[a], &emb[b])?;
            }
            cells[r][c] = sum / picked.len() as f64;
        }
    }
    Ok(SimMatrix { rows: rows.to_vec(), cols: cols.to_vec(), cells })
}

/// Anything that converts a content mel to a reference's voice.
pub trait Converter: Sync {
    fn convert(&self, content: &MelSpec, reference: &MelSpec) -> Result<MelSpec>;
}

impl Converter for Generator {
    fn convert(&self, content: &MelSpec, reference: &MelSpec) -> Result<MelSpec> {
        Generator::convert(self, content, reference)
    }
}

/// Returns the content unchanged; calibrates the metrics.
pub struct IdentityConverter;

impl Converter for IdentityConverter {
    fn convert(&self, content: &MelSpec, _: &MelSpec) -> Result<MelSpec> {
        Ok(content.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Reference in the source's language.
    SameLanguage,
    /// Reference in a different language from the source.
    CrossLanguage,
}

/// A source utterance and a reference utterance of another speaker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub source: usize,
    pub reference: usize,
}

pub fn sample_pairs(corpus: &Corpus, mode: PairMode, n: usize, seed: u64) -> Result<Vec<EvalPair>> {
    if n == 0 {
        return Err(Error::Invalid("evaluation needs at least one pair".into()));
    }
    let utts = corpus.utterances();
    let valid = |s: usize, r: usize| {
        let (a, b) = (&utts[s], &utts[r]);
        a.speaker != b.speaker && ((a.language == b.language) == (mode == PairMode::SameLanguage))
    };
    let options: Vec<(usize, Vec<usize>)> = (0..utts.len())
        .map(|s| (s, (0..utts.len()).filter(|&r| valid(s, r)).collect::<Vec<_>>()))
        .filter(|(_, refs)| !refs.is_empty())
        .collect();
    if options.is_empty() {
        return Err(Error::Infeasible(format!("corpus has no {mode:?} pairs of distinct speakers")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let (s, refs) = &options[rng.random_range(0..options.len())];
            EvalPair { source: *s, reference: refs[rng.random_range(0..refs.len())] }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub source_utt: String,
    pub source_speaker: String,
    pub reference_utt: String,
    pub target_speaker: String,
    /// Cosine between the converted output and the reference utterance.
    pub sim: f64,
    /// Cosine to the target speaker's embedding centroid.
    pub sim_target_centroid: f64,
    /// Cosine to the source speaker's embedding centroid.
    pub sim_source_centroid: f64,
    pub closer_to_target: bool,
    pub per: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: PairMode,
    pub count: usize,
    pub mean_sim: f64,
    /// Standard error of `mean_sim`.
    pub sim_std_err: f64,
    pub mean_sim_source: f64,
    pub closer_fraction: f64,
    pub mean_per: f64,
    pub pairs: Vec<PairResult>,
}

impl EvalReport {
    fn aggregate(mode: PairMode, pairs: Vec<PairResult>) -> Self {
        let n = pairs.len() as f64;
        let mean = |f: &dyn Fn(&PairResult) -> f64| pairs.iter().map(f).sum::<f64>() / n;
        let mean_sim = mean(&|p| p.sim);
        let var = if pairs.len() > 1 {
            pairs.iter().map(|p| (p.sim - mean_sim).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        EvalReport {
            mode,
            count: pairs.len(),
            mean_sim,
            sim_std_err: (var / n).sqrt(),
            mean_sim_source: mean(&|p| p.sim_source_centroid),
            closer_fraction: mean(&|p| f64::from(u8::from(p.closer_to_target))),
            mean_per: mean(&|p| p.per),
            pairs,
        }
    }

    /// Per-pair table as CSV.
    pub fn pairs_csv(&self) -> String {
        let mut s = String::from(
            "source_utt,source_speaker,reference_utt,target_speaker,sim,sim_target_centroid,sim_source_centroid,closer_to_target,per\n",
        );
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                p.source_utt,
                p.source_speaker,
                p.reference_utt,
                p.target_speaker,
                p.sim,
                p.sim_target_centroid,
                p.sim_source_centroid,
                p.closer_to_target,
                p.per
            );
        }
        s
    }
}

/// Mean phoneme error rate of the recognizer over every utterance.
pub fn corpus_per(asr: &AsrModel, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Invalid("phoneme error rate of an empty corpus".into()));
    }
    let rates: Vec<Result<f64>> = par::map_slice(corpus.utterances(), |u| {
        let hyp = asr.transcribe(&u.mel)?;
        phoneme_error_rate(&hyp.iter().map(String::as_str).collect::<Vec<_>>(), &u.phone_tokens())
    });
    Ok(rates.into_iter().sum::<Result<f64>>()? / corpus.len() as f64)
}

/// Mean SV embedding per speaker over all of their utterances.
pub fn speaker_centroids(corpus: &Corpus, sv: &SvModel) -> Result<BTreeMap<String, Vec<f64>>> {
    let mels: Vec<&MelSpec> = corpus.utterances().iter().map(|u| &u.mel).collect();
    let emb = sv.embed_all(&mels)?;
    let mut acc: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (u, e) in corpus.utterances().iter().zip(emb) {
        let entry = acc.entry(u.speaker.clone()).or_insert_with(|| (vec![0.0; e.len()], 0));
        entry.0.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
        entry.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (v, n))| (k, v.into_iter().map(|x| x / n as f64).collect())).collect())
}

/// Converts every pair and scores the output: SIM to the reference, which
/// speaker centroid it is closer to, and the recognizer's phoneme error rate
/// against the source transcript. Pairs run in parallel.
pub fn evaluate_conversion(
    converter: &dyn Converter,
    aux: &AuxModels,
    corpus: &Corpus,
    pairs: &[EvalPair],
    mode: PairMode,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one pair".into()));
    }
    let centroids = speaker_centroids(corpus, &aux.sv)?;
    let rows: Vec<Result<PairResult>> = par::map_slice(pairs, |p| {
        let (src, refu) = (corpus.utterance(p.source), corpus.utterance(p.reference));
        let out = converter.convert(&src.mel, &refu.mel)?;
        let e = aux.sv.embed_mel(&out)?;
        let sim = cosine_sim(&e, &aux.sv.embed_mel(&refu.mel)?)?;
        let to_target = cosine_sim(&e, &centroids[&refu.speaker])?;
        let to_source = cosine_sim(&e, &centroids[&src.speaker])?;
        let hyp = aux.asr.transcribe(&out)?;
        let per = phoneme_error_rate(&hyp.iter().map(String::as_str).collect::<Vec<_>>(), &src.phone_tokens())?;
        Ok(PairResult {
            source_utt: src.utt_id.clone(),
            source_speaker: src.speaker.clone(),
            reference_utt: refu.utt_id.clone(),
            target_speaker: refu.speaker.clone(),
            sim,
            sim_target_centroid: to_target,
            sim_source_centroid: to_source,
            closer_to_target: to_target > to_source,
            per,
        })
    });
    Ok(EvalReport::aggregate(mode, rows.into_iter().collect::<Result<_>>()?))
}

/// Writes `count dim` then one whitespace-separated row per vector to `path`,
/// and the labels one per line to `path` with a `.labels` suffix appended.
pub fn export_embeddings(path: &Path, labels: &[String], vectors: &[Vec<f64>]) -> Result<()> {
    if labels.len() != vectors.len() {
        return Err(Error::Shape(format!("{} labels for {} vectors", labels.len(), vectors.len())));
    }
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("embeddings have different lengths".into()));
    }
    let mut s = format!("{} {dim}\n", vectors.len());
    for v in vectors {
        let row: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    write_text(path, &s)?;
    write_text(&labels_path(path), &labels.iter().map(|l| format!("{l}\n")).collect::<String>())
}

fn labels_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".labels");
    p.into()
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::File { path: parent.to_path_buf(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::File { path: path.to_path_buf(), source: e })
}

pub fn load_embeddings(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::File { path: p.to_path_buf(), source: e });
    let text = read(path)?;
    let bad = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines();
    let header: Vec<usize> = lines
        .next()
        .ok_or_else(|| bad(1, "empty file".into()))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|e| bad(1, format!("{e}"))))
        .collect::<Result<_>>()?;
    let [count, dim] = header[..] else { return Err(bad(1, "header must be `count dim`".into())) };
    let mut vectors = Vec::with_capacity(count);
    for (i, line) in lines.enumerate().take(count) {
        let v: Vec<f64> =
            line.split_whitespace().map(|t| t.parse().map_err(|e| bad(i + 2, format!("{e}")))).collect::<Result<_>>()?;
        if v.len() != dim {
            return Err(bad(i + 2, format!("expected {dim} values, found {}", v.len())));
        }
        vectors.push(v);
    }
    if vectors.len() != count {
        return Err(bad(vectors.len() + 2, format!("expected {count} rows")));
    }
    let labels: Vec<String> = read(&labels_path(path))?.lines().map(str::to_string).collect();
    if labels.len() != count {
        return Err(Error::Shape(format!("{} labels for {count} vectors", labels.len())));
    }
    Ok((labels, vectors))
}

/// Projection onto the two leading principal components. Each component's
/// sign is fixed so its largest-magnitude coefficient is positive.
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if vectors.len() < 2 {
        return Err(Error::Invalid("PCA needs at least 2 vectors".into()));
    }
    let (n, d) = (vectors.len(), vectors[0].len());
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0).max(1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if lead < 0.0 {
                col.into_iter().map(|v| -v).collect()
            } else {
                col
            }
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let p = |a: &[f64]| (0..d).map(|j| centered[(i, j)] * a[j]).sum::<f64>();
            [p(&axes[0]), p(axes.get(1).map_or(&axes[0][..0], |v| v))]
        })
        .collect())
}

/// Mean Euclidean distance between points with the same label and between
/// points with different labels.
pub fn cluster_distances(points: &[[f64; 2]], labels: &[String]) -> (f64, f64) {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2)).sqrt();
            if labels[i] == labels[j] {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub substeps: Vec<u8>,
    pub final_generator_loss: f64,
    pub mean_sim: f64,
    pub closer_fraction: f64,
    pub mean_per: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: PairMode,
    pub pairs: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, a: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == a)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ablation,substeps,final_generator_loss,mean_sim,closer_fraction,mean_per\n");
        for r in &self.rows {
            let subs: Vec<String> = r.substeps.iter().map(u8::to_string).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.ablation.name(),
                subs.join("+"),
                r.final_generator_loss,
                r.mean_sim,
                r.closer_fraction,
                r.mean_per
            );
        }
        s
    }
}

/// What `run_ablation` trains and how it scores.
#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub mode: PairMode,
    pub pairs: usize,
    pub eval_seed: u64,
}

/// Trains the full model and each requested variant with identical seeds and
/// data, then scores all on the same evaluation pairs.
pub fn run_ablation(
    settings: &[Ablation],
    spec: &AblationSpec,
    train_corpus: &Corpus,
    eval_corpus: &Corpus,
    aux: &AuxModels,
    norm: &MelNorm,
    encoder: Option<&Arc<dyn ExternalContentEncoder>>,
) -> Result<AblationReport> {
    let mut variants = vec![Ablation::Full];
    for &a in settings {
        if !variants.contains(&a) {
            variants.push(a);
        }
    }
    let pairs = sample_pairs(eval_corpus, spec.mode, spec.pairs, spec.eval_seed)?;
    let mut rows = Vec::with_capacity(variants.len());
    for a in variants {
        let config = TrainConfig { ablation: a, ..spec.train.clone() };
        let mut state = match encoder {
            Some(e) => TrainerState::with_external(&spec.net, config, norm, Arc::clone(e))?,
            None => TrainerState::new(&spec.net, config, norm)?,
        };
        let report = train(&mut state, train_corpus, aux, None)?;
        let ev = evaluate_conversion(&state.generator, aux, eval_corpus, &pairs, spec.mode)?;
        rows.push(AblationRow {
            ablation: a,
            substeps: a.substeps().to_vec(),
            final_generator_loss: report.steps.last().map_or(f64::NAN, |s| s.generator_loss),
            mean_sim: ev.mean_sim,
            closer_fraction: ev.closer_fraction,
            mean_per: ev.mean_per,
        });
    }
    Ok(AblationReport { mode: spec.mode, pairs: pairs.len(), rows })
}
