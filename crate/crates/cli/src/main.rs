//! `cyclevc`: corpus synthesis, auxiliary and generator training,
//! conversion, evaluation and ablations from the command line.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or config), 2 runtime or
//! data error.

mod commands;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cyclevc::trainer::Ablation;
use serde_json::json;

use config::CliConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AuxKind {
    Sv,
    Asr,
    Pitch,
}

impl AuxKind {
    pub fn name(self) -> &'static str {
        match self {
            AuxKind::Sv => "sv",
            AuxKind::Asr => "asr",
            AuxKind::Pitch => "pitch",
        }
    }
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
        format!("unknown ablation `{s}`; expected one of {}", names.join(", "))
    })
}

#[derive(Debug, Parser)]
#[command(name = "cyclevc", version, about = "Multilingual voice conversion with cycle training")]
struct Cli {
    /// JSON config; omitted sections and fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus: manifest, mel caches and factor table.
    SynthCorpus,
    /// Train one auxiliary model and write `<kind>.ckpt`.
    TrainAux {
        #[arg(value_enum)]
        kind: AuxKind,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Cycle-train the generator and discriminator.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory holding sv.ckpt, asr.ckpt and pitch.ckpt.
        #[arg(long)]
        aux: PathBuf,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
        /// Continue from the checkpoint in the output directory if present.
        #[arg(long)]
        resume: bool,
    },
    /// Convert a source mel or WAV to the voice of a reference.
    Convert {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Auxiliary directory; needed when the generator reads ASR posteriors.
        #[arg(long)]
        aux: Option<PathBuf>,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Also write a Griffin-Lim waveform.
        #[arg(long)]
        wav: bool,
    },
    /// Score conversions on held-out pairs and/or the speaker similarity matrix.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        aux: PathBuf,
        #[arg(long, conflicts_with = "identity")]
        checkpoint: Option<PathBuf>,
        /// Score the unconverted source as a calibration baseline.
        #[arg(long)]
        identity: bool,
        /// Write the (speaker, language) similarity matrix and embedding export.
        #[arg(long)]
        sim_matrix: bool,
    },
    /// Train the full model and the named variants, then score them alike.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        aux: PathBuf,
        /// Comma-separated variants; the full model always runs.
        #[arg(long, value_delimiter = ',', value_parser = parse_ablation)]
        settings: Vec<Ablation>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthCorpus => "synth-corpus",
            Command::TrainAux { .. } => "train-aux",
            Command::Train { .. } => "train",
            Command::Convert { .. } => "convert",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<cyclevc::Error> for Failure {
    fn from(e: cyclevc::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn write_echo(out: &Path, cli: &Cli, cfg: &CliConfig) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    let echo = json!({
        "command": cli.command.name(),
        "arguments": format!("{:?}", cli.command),
        "config_file": cli.config,
        "seed": cli.seed,
        "config": cfg,
    });
    let path = out.join("config_echo.json");
    let text = serde_json::to_string_pretty(&echo).expect("config serializes") + "\n";
    fs::write(&path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => CliConfig::load(p).map_err(Failure::Usage)?,
        None => CliConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    let out = cli.out.as_path();
    write_echo(out, &cli, &cfg)?;
    match &cli.command {
        Command::SynthCorpus => commands::synth_corpus(&cfg, out)?,
        Command::TrainAux { kind, corpus } => commands::train_aux(&cfg, out, *kind, corpus)?,
        Command::Train { corpus, aux, ablation, resume } => {
            commands::train_generator(&cfg, out, corpus, aux, *ablation, *resume)?
        }
        Command::Convert { checkpoint, aux, source, reference, wav } => {
            commands::convert(&cfg, out, checkpoint, aux.as_deref(), source, reference, *wav, cfg.eval.seed)?
        }
        Command::Evaluate { corpus, aux, checkpoint, identity, sim_matrix } => {
            if checkpoint.is_none() && !identity && !sim_matrix {
                return Err(Failure::Usage("evaluate needs --checkpoint, --identity or --sim-matrix".into()));
            }
            let args = commands::EvaluateArgs {
                manifest: corpus,
                aux_dir: aux,
                checkpoint: checkpoint.as_deref(),
                identity: *identity,
                matrix: *sim_matrix,
            };
            commands::evaluate(&cfg, out, &args)?
        }
        Command::Ablate { corpus, aux, settings } => commands::ablate(&cfg, out, corpus, aux, settings)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
