use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cyclevc::audio::{extract_mel, griffin_lim, read_wav, write_wav};
use cyclevc::auxiliary::{AsrModel, AsrPosteriorEncoder, PitchModel, SvModel};
use cyclevc::checkpoint::Checkpoint;
use cyclevc::corpus::{
    generate_synthetic_corpus, load_manifest, load_multilingual_manifest, load_teacher_embeddings, read_mel_cache,
    write_manifest, write_mel_cache, Corpus, MelSpec,
};
use cyclevc::eval::{
    cluster_distances, corpus_groups, corpus_per, evaluate_conversion, export_embeddings, pca_2d, run_ablation,
    sample_pairs, sim_matrix, AblationSpec, Converter, IdentityConverter,
};
use cyclevc::nets::{ContentEncoderKind, ExternalContentEncoder, MelNorm, NetConfig};
use cyclevc::trainer::{train, Ablation, AuxModels, TrainOutput, TrainerState, GENERATOR_FILE};
use cyclevc::{Error, Result};
use serde_json::json;

use crate::config::{CliConfig, ContentSource};
use crate::AuxKind;

/// Griffin-Lim iterations for waveform sidecars.
pub const GRIFFIN_LIM_ITERATIONS: usize = 60;

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::File { path: path.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::File { path: path.to_path_buf(), source: e })
}

pub fn aux_file(dir: &Path, kind: AuxKind) -> PathBuf {
    dir.join(format!("{}.ckpt", kind.name()))
}

fn read_aux(dir: &Path, kind: AuxKind) -> Result<Checkpoint> {
    let path = aux_file(dir, kind);
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "missing {} checkpoint: {} (run `train-aux {}` first)",
            kind.name(),
            path.display(),
            kind.name()
        )));
    }
    Checkpoint::read(&path)
}

fn load_asr(dir: &Path) -> Result<AsrModel> {
    AsrModel::from_checkpoint(&read_aux(dir, AuxKind::Asr)?)
}

/// All three auxiliary models; a missing file is reported by kind before
/// anything is parsed.
fn load_aux(dir: &Path) -> Result<AuxModels> {
    for kind in [AuxKind::Sv, AuxKind::Asr, AuxKind::Pitch] {
        let path = aux_file(dir, kind);
        if !path.exists() {
            return Err(Error::Invalid(format!("missing {} checkpoint: {}", kind.name(), path.display())));
        }
    }
    AuxModels::new(
        SvModel::from_checkpoint(&read_aux(dir, AuxKind::Sv)?)?,
        AsrModel::from_checkpoint(&read_aux(dir, AuxKind::Asr)?)?,
        PitchModel::from_checkpoint(&read_aux(dir, AuxKind::Pitch)?)?,
    )
}

fn posterior_encoder(asr: &AsrModel) -> Arc<dyn ExternalContentEncoder> {
    Arc::new(AsrPosteriorEncoder::new(asr.clone()))
}

/// Loads a saved run, rebuilding the posterior content encoder from the
/// ASR checkpoint in `aux_dir` when the generator was trained with one.
fn load_state(dir: &Path, aux_dir: Option<&Path>) -> Result<TrainerState> {
    let net: NetConfig = Checkpoint::read(&dir.join(GENERATOR_FILE))?.config()?;
    if net.content_encoder != ContentEncoderKind::External {
        return TrainerState::load(dir);
    }
    let aux_dir = aux_dir.ok_or_else(|| {
        Error::Invalid("the generator uses ASR-posterior content features; pass --aux with the asr checkpoint".into())
    })?;
    TrainerState::load_with(dir, Some(posterior_encoder(&load_asr(aux_dir)?)))
}

fn read_input_mel(path: &Path, cfg: &CliConfig) -> Result<MelSpec> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("wav") => extract_mel(&read_wav(path, &cfg.audio)?, &cfg.audio),
        _ => read_mel_cache(path),
    }
}

pub fn synth_corpus(cfg: &CliConfig, out: &Path) -> Result<()> {
    let synth = generate_synthetic_corpus(&cfg.synthetic)?;
    let manifest = write_manifest(&synth.corpus, out, &synth.warnings)?;
    write_json(
        &out.join("factors.json"),
        &json!({ "speakers": synth.factors, "templates": synth.templates }),
    )?;
    for w in &synth.warnings {
        eprintln!("warning: {w}");
    }
    println!("{} utterances -> {}", synth.corpus.len(), manifest.display());
    Ok(())
}

pub fn train_aux(cfg: &CliConfig, out: &Path, kind: AuxKind, manifest: &Path) -> Result<()> {
    let (corpus, report) = load_multilingual_manifest(manifest, &cfg.audio)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let norm = MelNorm::from_corpus(&corpus)?;
    let (ckpt, summary) = match kind {
        AuxKind::Sv => {
            let teacher = match cfg.sv_train.mode {
                cyclevc::auxiliary::SvMode::Distill => {
                    let t = load_teacher_embeddings(manifest)?;
                    if t.is_empty() {
                        return Err(Error::Invalid(format!(
                            "sv distillation needs teacher embeddings; {} has no `teacher` column",
                            manifest.display()
                        )));
                    }
                    Some(t)
                }
                cyclevc::auxiliary::SvMode::Supervised => None,
            };
            let (m, log) = SvModel::train(&corpus, &norm, &cfg.sv, &cfg.sv_train, teacher.as_ref())?;
            (m.to_checkpoint()?, json!({ "losses": log.losses }))
        }
        AuxKind::Asr => {
            let (m, log) = AsrModel::train(&corpus, &norm, &cfg.asr, &cfg.asr_train)?;
            let per = corpus_per(&m, &corpus)?;
            println!("asr training-corpus PER {per:.4}");
            (m.to_checkpoint()?, json!({ "losses": log.losses, "per": per }))
        }
        AuxKind::Pitch => {
            let (m, tr) = PitchModel::train(&corpus, &norm, &cfg.pitch, &cfg.pitch_train)?;
            println!("pitch voiced log-F0 RMSE {:.4} (constant predictor {:.4})", tr.rmse, tr.baseline_rmse);
            (m.to_checkpoint()?, serde_json::to_value(&tr)?)
        }
    };
    let path = aux_file(out, kind);
    ckpt.write(&path)?;
    write_json(&out.join(format!("{}_train.json", kind.name())), &summary)?;
    println!("{} checkpoint -> {}", kind.name(), path.display());
    Ok(())
}

pub fn train_generator(
    cfg: &CliConfig,
    out: &Path,
    manifest: &Path,
    aux_dir: &Path,
    ablation: Option<Ablation>,
    resume: bool,
) -> Result<()> {
    let aux = load_aux(aux_dir)?;
    let (corpus, report) = load_manifest(manifest, &cfg.audio)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let output = TrainOutput { dir: out.to_path_buf() };
    let mut train_cfg = cfg.train.clone();
    if let Some(a) = ablation {
        train_cfg.ablation = a;
    }
    let mut state = if resume && output.checkpoint_dir().join(GENERATOR_FILE).exists() {
        let mut s = load_state(&output.checkpoint_dir(), Some(aux_dir))?;
        s.config.steps = train_cfg.steps;
        s
    } else {
        let norm = MelNorm::from_corpus(&corpus)?;
        match cfg.content {
            ContentSource::Conv => TrainerState::new(&cfg.net, train_cfg, &norm)?,
            ContentSource::AsrPosteriors => {
                let enc = AsrPosteriorEncoder::new(aux.asr.clone());
                let net = enc.net_config(&cfg.net);
                TrainerState::with_external(&net, train_cfg, &norm, Arc::new(enc))?
            }
        }
    };
    let start = state.step;
    let report = train(&mut state, &corpus, &aux, Some(&output))?;
    match report.steps.last() {
        Some(last) => println!(
            "steps {start}..{} done; final generator loss {:.4}, discriminator loss {:.4}",
            state.step, last.generator_loss, last.discriminator_loss
        ),
        None => println!("no steps to run; checkpoint at step {}", state.step),
    }
    println!("checkpoint -> {}", output.checkpoint_dir().display());
    Ok(())
}

pub fn convert(
    cfg: &CliConfig,
    out: &Path,
    checkpoint: &Path,
    aux_dir: Option<&Path>,
    source: &Path,
    reference: &Path,
    wav: bool,
    seed: u64,
) -> Result<()> {
    let state = load_state(checkpoint, aux_dir)?;
    let src = read_input_mel(source, cfg)?;
    let refm = read_input_mel(reference, cfg)?;
    let mel = state.generator.convert(&src, &refm)?;
    let mel_path = out.join("converted.mel");
    write_mel_cache(&mel_path, &mel)?;
    let mut header = json!({
        "source": source,
        "reference": reference,
        "checkpoint": checkpoint,
        "step": state.step,
        "frames": mel.frames(),
        "bins": mel.bins(),
        "mel": "converted.mel",
        "reproducibility": "mel values are bit-identical for identical inputs and checkpoint",
    });
    if wav {
        let samples = griffin_lim(&mel, &cfg.audio, GRIFFIN_LIM_ITERATIONS, seed)?;
        write_wav(&out.join("converted.wav"), &samples, cfg.audio.sample_rate)?;
        header["waveform"] = json!({
            "file": "converted.wav",
            "method": "griffin-lim phase reconstruction",
            "iterations": GRIFFIN_LIM_ITERATIONS,
            "phase_seed": seed,
            "sample_rate": cfg.audio.sample_rate,
        });
    }
    write_json(&out.join("converted.json"), &header)?;
    println!("{} frames -> {}", mel.frames(), mel_path.display());
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub manifest: &'a Path,
    pub aux_dir: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub identity: bool,
    pub matrix: bool,
}

pub fn evaluate(cfg: &CliConfig, out: &Path, args: &EvaluateArgs) -> Result<()> {
    let aux = load_aux(args.aux_dir)?;
    let (corpus, report) = load_multilingual_manifest(args.manifest, &cfg.audio)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let converter: Option<Box<dyn Converter>> = match (args.checkpoint, args.identity) {
        (Some(dir), _) => Some(Box::new(load_state(dir, Some(args.aux_dir))?.generator)),
        (None, true) => Some(Box::new(IdentityConverter)),
        (None, false) => None,
    };
    if let Some(conv) = converter {
        let (_, held_out) = corpus.split_holdout(cfg.eval.holdout);
        let pairs = sample_pairs(&held_out, cfg.eval.mode, cfg.eval.pairs, cfg.eval.seed)?;
        let rep = evaluate_conversion(conv.as_ref(), &aux, &held_out, &pairs, cfg.eval.mode)?;
        write_text(&out.join("pairs.csv"), &rep.pairs_csv())?;
        let mut summary = serde_json::to_value(&rep)?;
        summary.as_object_mut().expect("report is an object").remove("pairs");
        write_json(&out.join("report.json"), &summary)?;
        println!(
            "{} pairs: SIM {:.4} (±{:.4}), closer to target {:.3}, PER {:.4}",
            rep.count, rep.mean_sim, rep.sim_std_err, rep.closer_fraction, rep.mean_per
        );
    }
    if args.matrix {
        sim_matrix_report(&corpus, &aux.sv, cfg, out)?;
    }
    Ok(())
}

/// Same-speaker/cross-language similarity matrix plus the embedding export
/// and its 2-D projection.
fn sim_matrix_report(corpus: &Corpus, sv: &SvModel, cfg: &CliConfig, out: &Path) -> Result<()> {
    let groups = corpus_groups(corpus);
    let m = sim_matrix(corpus, sv, &groups, &groups, cfg.eval.pairs_per_cell, cfg.eval.seed)?;
    write_text(&out.join("sim_matrix.csv"), &m.to_csv())?;

    let labels: Vec<String> = corpus.utterances().iter().map(|u| format!("{}|{}", u.speaker, u.language)).collect();
    let mels: Vec<&MelSpec> = corpus.utterances().iter().map(|u| &u.mel).collect();
    let vectors = sv.embed_all(&mels)?;
    export_embeddings(&out.join("embeddings.txt"), &labels, &vectors)?;
    let points = pca_2d(&vectors)?;
    let speakers: Vec<String> = corpus.utterances().iter().map(|u| u.speaker.clone()).collect();
    let (intra, inter) = cluster_distances(&points, &speakers);
    let mut csv = String::from("utt_id,speaker,language,pc1,pc2\n");
    for (u, p) in corpus.utterances().iter().zip(&points) {
        csv += &format!("{},{},{},{},{}\n", u.utt_id, u.speaker, u.language, p[0], p[1]);
    }
    write_text(&out.join("pca.csv"), &csv)?;
    write_json(
        &out.join("clusters.json"),
        &json!({ "mean_intra_speaker_distance": intra, "mean_inter_speaker_distance": inter }),
    )?;
    println!("sim matrix {}x{}; PCA intra/inter speaker distance {intra:.4}/{inter:.4}", m.rows.len(), m.cols.len());
    Ok(())
}

pub fn ablate(cfg: &CliConfig, out: &Path, manifest: &Path, aux_dir: &Path, settings: &[Ablation]) -> Result<()> {
    let aux = load_aux(aux_dir)?;
    let (corpus, report) = load_manifest(manifest, &cfg.audio)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let (train_c, eval_c) = corpus.split_holdout(cfg.eval.holdout);
    let norm = MelNorm::from_corpus(&train_c)?;
    let (net, encoder) = match cfg.content {
        ContentSource::Conv => (cfg.net.clone(), None),
        ContentSource::AsrPosteriors => {
            let enc = AsrPosteriorEncoder::new(aux.asr.clone());
            (enc.net_config(&cfg.net), Some(Arc::new(enc) as Arc<dyn ExternalContentEncoder>))
        }
    };
    let spec = AblationSpec {
        net,
        train: cfg.train.clone(),
        mode: cfg.eval.mode,
        pairs: cfg.eval.pairs,
        eval_seed: cfg.eval.seed,
    };
    let rep = run_ablation(settings, &spec, &train_c, &eval_c, &aux, &norm, encoder.as_ref())?;
    write_text(&out.join("ablation.csv"), &rep.to_csv())?;
    write_json(&out.join("ablation.json"), &serde_json::to_value(&rep)?)?;
    for r in &rep.rows {
        println!(
            "{:<13} SIM {:.4}  closer {:.3}  PER {:.4}",
            r.ablation.name(),
            r.mean_sim,
            r.closer_fraction,
            r.mean_per
        );
    }
    Ok(())
}
