//! JSONL manifests and the binary mel cache.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Corpus, MelSpec, PhoneSpan, Utterance};
use crate::audio::{estimate_f0, extract_mel, read_wav, AudioConfig};
use crate::error::{Error, IoContext, Result};

/// One manifest line. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub speaker: String,
    pub language: String,
    pub utt_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mel: Option<String>,
    pub phones: Vec<(String, usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f0: Option<Vec<f32>>,
    /// Flat file of 256 `f32` teacher speaker-embedding values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<String>,
}

/// Non-fatal findings gathered while loading.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub warnings: Vec<String>,
}

const REQUIRED: [&str; 4] = ["speaker", "language", "utt_id", "phones"];

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

enum Line {
    Record(ManifestRecord),
    Warning(String),
}

fn parse_line(path: &Path, line_no: usize, text: &str) -> Result<Line> {
    let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: line_no, msg };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| parse_err("record is not an object".into()))?;
    if let Some(w) = obj.get("warning") {
        return Ok(Line::Warning(w.as_str().map(str::to_string).unwrap_or_else(|| w.to_string())));
    }
    for field in REQUIRED {
        if !obj.contains_key(field) {
            return Err(Error::MissingField { path: path.to_path_buf(), line: line_no, field });
        }
    }
    if !obj.contains_key("mel") && !obj.contains_key("audio") {
        return Err(Error::MissingField { path: path.to_path_buf(), line: line_no, field: "audio` or `mel" });
    }
    serde_json::from_value(value).map(Line::Record).map_err(|e| parse_err(e.to_string()))
}

/// Loads a manifest into a monolingual corpus. Records lacking a mel get one
/// extracted from their audio; records lacking F0 get it estimated from
/// audio, or all-unvoiced F0 (with a warning) when only a mel is given.
pub fn load_manifest(path: &Path, cfg: &AudioConfig) -> Result<(Corpus, LoadReport)> {
    let (utts, mut report) = read_utterances(path, cfg)?;
    let corpus = Corpus::new(utts)?;
    for s in corpus.speakers_below(3) {
        report.warnings.push(format!("speaker `{s}` has fewer than 3 utterances and cannot fill the cycle roles"));
    }
    Ok((corpus, report))
}

/// Like [`load_manifest`] but speakers may record in several languages, as
/// in speaker-verification or similarity-matrix data. Such a corpus cannot
/// drive cycle training.
pub fn load_multilingual_manifest(path: &Path, cfg: &AudioConfig) -> Result<(Corpus, LoadReport)> {
    let (utts, report) = read_utterances(path, cfg)?;
    Ok((Corpus::multilingual(utts), report))
}

fn read_utterances(path: &Path, cfg: &AudioConfig) -> Result<(Vec<Utterance>, LoadReport)> {
    cfg.validate()?;
    let file = fs::File::open(path).at(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut report = LoadReport::default();
    let mut utts = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = match parse_line(path, line_no, &line)? {
            Line::Warning(w) => {
                report.warnings.push(w);
                continue;
            }
            Line::Record(r) => r,
        };
        let at_line = |e: Error| Error::Parse { path: path.to_path_buf(), line: line_no, msg: e.to_string() };
        let wave = match &rec.audio {
            Some(a) if rec.mel.is_none() || rec.f0.is_none() => Some(read_wav(&resolve(base, a), cfg).map_err(at_line)?),
            _ => None,
        };
        let mel = match (&rec.mel, &wave) {
            (Some(m), _) => read_mel_cache(&resolve(base, m)).map_err(at_line)?,
            (None, Some(w)) => extract_mel(w, cfg).map_err(at_line)?,
            (None, None) => unreachable!("checked in parse_line"),
        };
        mel.validate(cfg.mel_bins, cfg.min_log()).map_err(at_line)?;
        let f0 = match (rec.f0, &wave) {
            (Some(f), _) => f,
            (None, Some(w)) => estimate_f0(w, cfg).map_err(at_line)?,
            (None, None) => {
                report.warnings.push(format!("{}: no f0 and no audio; treating as unvoiced", rec.utt_id));
                vec![0.0; mel.frames()]
            }
        };
        let u = Utterance {
            speaker: rec.speaker,
            language: rec.language,
            utt_id: rec.utt_id,
            mel,
            phones: rec.phones.into_iter().map(|(token, start, end)| PhoneSpan { token, start, end }).collect(),
            f0,
        };
        u.validate((cfg.f0_min, cfg.f0_max)).map_err(at_line)?;
        utts.push(u);
    }
    Ok((utts, report))
}

/// Writes `manifest.jsonl` plus `mels/<utt_id>.mel` under `dir`. Warning
/// records come first. Output is byte-deterministic.
pub fn write_manifest(corpus: &Corpus, dir: &Path, warnings: &[String]) -> Result<PathBuf> {
    let mel_dir = dir.join("mels");
    fs::create_dir_all(&mel_dir).at(&mel_dir)?;
    let path = dir.join("manifest.jsonl");
    let mut w = BufWriter::new(fs::File::create(&path).at(&path)?);
    for warning in warnings {
        writeln!(w, "{}", serde_json::json!({ "warning": warning }))?;
    }
    for u in corpus.utterances() {
        let rel = format!("mels/{}.mel", u.utt_id);
        write_mel_cache(&dir.join(&rel), &u.mel)?;
        let rec = ManifestRecord {
            speaker: u.speaker.clone(),
            language: u.language.clone(),
            utt_id: u.utt_id.clone(),
            audio: None,
            mel: Some(rel),
            phones: u.phones.iter().map(|p| (p.token.clone(), p.start, p.end)).collect(),
            f0: Some(u.f0.clone()),
            teacher: None,
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    w.flush()?;
    Ok(path)
}

/// `u32 frames, u32 bins`, then `frames * bins` little-endian `f32`.
pub fn write_mel_cache(path: &Path, mel: &MelSpec) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * mel.values().len());
    buf.extend_from_slice(&(mel.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(mel.bins() as u32).to_le_bytes());
    for v in mel.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).at(path)
}

pub fn read_mel_cache(path: &Path) -> Result<MelSpec> {
    let bytes = fs::read(path).at(path)?;
    if bytes.len() < 8 {
        return Err(Error::Invalid(format!("{}: truncated mel header", path.display())));
    }
    let frames = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let bins = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * frames * bins {
        return Err(Error::Invalid(format!(
            "{}: {} payload bytes for {frames}x{bins} frames",
            path.display(),
            bytes.len() - 8
        )));
    }
    let values = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    MelSpec::new(frames, bins, values)
}

/// Reads the `teacher` column: utt_id → 256 teacher embedding values.
pub fn load_teacher_embeddings(manifest: &Path) -> Result<BTreeMap<String, Vec<f32>>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(manifest).at(manifest)?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(manifest)?;
        if line.trim().is_empty() {
            continue;
        }
        let Line::Record(rec) = parse_line(manifest, i + 1, &line)? else { continue };
        let Some(t) = rec.teacher else { continue };
        let p = resolve(base, &t);
        let bytes = fs::read(&p).at(&p)?;
        if bytes.len() != 256 * 4 {
            return Err(Error::Invalid(format!("{}: teacher file must hold 256 f32 values", p.display())));
        }
        out.insert(rec.utt_id, bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
    }
    Ok(out)
}
