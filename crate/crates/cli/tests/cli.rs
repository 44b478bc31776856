use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use cyclevc::checkpoint::{Checkpoint, ModelKind};
use cyclevc::corpus::read_mel_cache;
use tempfile::TempDir;

const CONFIG: &str = r#"{
  "train": {"steps": 50, "batch_size": 2, "lr": 1e-3, "max_frames": 24},
  "sv_train": {"steps": 20, "batch_size": 8},
  "asr_train": {"steps": 20, "batch_size": 8},
  "pitch_train": {"steps": 20, "batch_size": 8},
  "eval": {"pairs": 6, "holdout": 2, "pairs_per_cell": 4}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cyclevc"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Corpus and auxiliary checkpoints shared by the tests that need them.
struct Shared {
    dir: TempDir,
}

impl Shared {
    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn manifest(&self) -> PathBuf {
        self.path().join("corpus/manifest.jsonl")
    }
}

fn shared() -> &'static Shared {
    static S: OnceLock<Shared> = OnceLock::new();
    S.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
        let o = run(dir.path(), &["--config", "cfg.json", "--out", "corpus", "synth-corpus"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        for kind in ["sv", "asr", "pitch"] {
            let o = run(
                dir.path(),
                &["--config", "cfg.json", "--out", "aux", "train-aux", kind, "--corpus", "corpus/manifest.jsonl"],
            );
            assert_eq!(code(&o), 0, "{}", stderr(&o));
        }
        Shared { dir }
    })
}

fn trained_run() -> &'static Path {
    static R: OnceLock<PathBuf> = OnceLock::new();
    R.get_or_init(|| {
        let s = shared();
        let o = run(
            s.path(),
            &["--config", "cfg.json", "--out", "run", "train", "--corpus", "corpus/manifest.jsonl", "--aux", "aux"],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        s.path().join("run")
    })
}

#[test]
fn default_corpus_has_one_line_per_utterance_and_is_reproducible() {
    let s = shared();
    let text = fs::read_to_string(s.manifest()).unwrap();
    assert_eq!(text.lines().count(), 2 * 2 * 8);
    assert!(s.path().join("corpus/factors.json").exists());
    let o = run(s.path(), &["--config", "cfg.json", "--out", "again", "synth-corpus"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(s.path().join("again/manifest.jsonl")).unwrap(), text.as_bytes());
}

#[test]
fn single_language_spec_is_flagged_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("one.json"), r#"{"synthetic": {"languages": 1}}"#).unwrap();
    let o = run(dir.path(), &["--config", "one.json", "--out", "c", "synth-corpus"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = fs::read_to_string(dir.path().join("c/manifest.jsonl")).unwrap().lines().next().unwrap().to_string();
    assert!(first.contains("\"warning\""), "{first}");
}

#[test]
fn every_command_echoes_its_config() {
    let s = shared();
    for out in ["corpus", "aux"] {
        let echo: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(s.path().join(out).join("config_echo.json")).unwrap()).unwrap();
        assert_eq!(echo["config"]["train"]["steps"], 50);
    }
    let o = run(s.path(), &["--out", "seeded", "--seed", "9", "synth-corpus"]);
    assert_eq!(code(&o), 0);
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(s.path().join("seeded/config_echo.json")).unwrap()).unwrap();
    assert_eq!(echo["command"], "synth-corpus");
    assert_eq!(echo["config"]["synthetic"]["seed"], 9);
    assert_eq!(echo["config"]["train"]["seed"], 9);
}

#[test]
fn auxiliary_checkpoints_carry_their_kind() {
    let s = shared();
    for (file, kind) in [("sv", ModelKind::Sv), ("asr", ModelKind::Asr), ("pitch", ModelKind::Pitch)] {
        let c = Checkpoint::read(&s.path().join(format!("aux/{file}.ckpt"))).unwrap();
        c.expect_kind(kind).unwrap();
    }
}

#[test]
fn distillation_without_teacher_files_is_a_clear_error() {
    let s = shared();
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.json"), r#"{"sv_train": {"mode": "distill", "steps": 2}}"#).unwrap();
    let o = run(
        dir.path(),
        &["--config", "d.json", "--out", "o", "train-aux", "sv", "--corpus", s.manifest().to_str().unwrap()],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("teacher"), "{}", stderr(&o));
}

#[test]
fn missing_aux_checkpoint_names_its_kind() {
    let s = shared();
    let partial = s.path().join("partial_aux");
    fs::create_dir_all(&partial).unwrap();
    fs::copy(s.path().join("aux/sv.ckpt"), partial.join("sv.ckpt")).unwrap();
    let o = run(
        s.path(),
        &["--out", "x", "train", "--corpus", "corpus/manifest.jsonl", "--aux", partial.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing asr checkpoint"), "{}", stderr(&o));
}

#[test]
fn smoke_run_writes_checkpoint_and_log() {
    let r = trained_run();
    assert!(r.join("checkpoint/generator.ckpt").exists());
    assert!(r.join("checkpoint/discriminator.ckpt").exists());
    let log = fs::read_to_string(r.join("train_log.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["step"], 49);
}

#[test]
fn step1_only_ablation_logs_only_substep1() {
    let s = shared();
    let o = run(
        s.path(),
        &[
            "--config", "cfg.json", "--out", "abl", "train", "--corpus", "corpus/manifest.jsonl", "--aux", "aux",
            "--ablation", "wo_step23",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(s.path().join("abl/train_log.jsonl")).unwrap();
    let substeps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter_map(|v| v.get("substep").and_then(|s| s.as_u64()))
        .collect();
    assert_eq!(substeps.len(), 50);
    assert!(substeps.iter().all(|&s| s == 1));
}

#[test]
fn convert_keeps_source_length_and_writes_waveform_header() {
    let s = shared();
    let run_dir = trained_run();
    let mels = s.path().join("corpus/mels");
    let mut names: Vec<_> = fs::read_dir(&mels).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    let (src, reference) = (&names[0], names.last().unwrap());
    let ckpt = run_dir.join("checkpoint");
    let args = |out: &str, wav: bool| {
        let mut a = vec![
            "--out".to_string(),
            out.to_string(),
            "convert".into(),
            "--checkpoint".into(),
            ckpt.to_str().unwrap().into(),
            "--aux".into(),
            "aux".into(),
            "--source".into(),
            src.to_str().unwrap().into(),
            "--reference".into(),
            reference.to_str().unwrap().into(),
        ];
        if wav {
            a.push("--wav".into());
        }
        a
    };
    let o = bin().current_dir(s.path()).args(args("conv_mel", false)).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = read_mel_cache(&s.path().join("conv_mel/converted.mel")).unwrap();
    assert_eq!(out.frames(), read_mel_cache(src).unwrap().frames());
    assert!(!s.path().join("conv_mel/converted.wav").exists());

    let o = bin().current_dir(s.path()).args(args("conv_wav", true)).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let header: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(s.path().join("conv_wav/converted.json")).unwrap()).unwrap();
    assert_eq!(header["waveform"]["iterations"], 60);
    assert!(s.path().join("conv_wav/converted.wav").exists());
    assert_eq!(fs::read(s.path().join("conv_wav/converted.mel")).unwrap(), fs::read(s.path().join("conv_mel/converted.mel")).unwrap());
}

#[test]
fn evaluation_report_means_match_rows() {
    let s = shared();
    let ckpt = trained_run().join("checkpoint");
    let o = run(
        s.path(),
        &[
            "--config", "cfg.json", "--out", "ev", "evaluate", "--corpus", "corpus/manifest.jsonl", "--aux", "aux",
            "--checkpoint", ckpt.to_str().unwrap(), "--sim-matrix",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(s.path().join("ev/report.json")).unwrap()).unwrap();
    let csv = fs::read_to_string(s.path().join("ev/pairs.csv")).unwrap();
    let sims: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert_eq!(sims.len(), 6);
    let mean = sims.iter().sum::<f64>() / sims.len() as f64;
    assert!((rep["mean_sim"].as_f64().unwrap() - mean).abs() < 1e-12);
    let matrix = fs::read_to_string(s.path().join("ev/sim_matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 1 + 4);
}

#[test]
fn zero_pairs_is_an_error_not_an_empty_report() {
    let s = shared();
    fs::write(s.path().join("zero.json"), r#"{"eval": {"pairs": 0, "holdout": 2}}"#).unwrap();
    let o = run(
        s.path(),
        &["--config", "zero.json", "--out", "ev0", "evaluate", "--corpus", "corpus/manifest.jsonl", "--aux", "aux", "--identity"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!s.path().join("ev0/report.json").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["--bogus", "synth-corpus"])), 1);
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(dir.path(), &["train", "--corpus", "m", "--aux", "a", "--ablation", "wo_step9"])), 1);
    fs::write(dir.path().join("bad.json"), r#"{"train": {"stepz": 1}}"#).unwrap();
    let o = run(dir.path(), &["--config", "bad.json", "synth-corpus"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stepz"));
    assert_eq!(code(&run(dir.path(), &["--out", "e", "evaluate", "--corpus", "m", "--aux", "a"])), 1);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
}
