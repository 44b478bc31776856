use std::fs;
use std::path::Path;

use cyclevc::audio::AudioConfig;
use cyclevc::auxiliary::{AsrConfig, AsrTrainConfig, PitchConfig, PitchTrainConfig, SvConfig, SvTrainConfig};
use cyclevc::corpus::SyntheticSpec;
use cyclevc::eval::PairMode;
use cyclevc::nets::NetConfig;
use cyclevc::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Where the generator's content features come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentSource {
    /// Trainable convolutional encoder inside the generator.
    Conv,
    /// Phone posteriors of the frozen ASR checkpoint.
    #[default]
    AsrPosteriors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: PairMode,
    pub pairs: usize,
    /// Utterances per speaker kept out of training and used for scoring.
    pub holdout: usize,
    pub pairs_per_cell: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { mode: PairMode::CrossLanguage, pairs: 200, holdout: 4, pairs_per_cell: 50, seed: 0 }
    }
}

/// Everything a command may read, one section per component. Sections a
/// command does not use are ignored by it but still echoed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub audio: AudioConfig,
    pub synthetic: SyntheticSpec,
    pub net: NetConfig,
    pub content: ContentSource,
    pub train: TrainConfig,
    pub sv: SvConfig,
    pub sv_train: SvTrainConfig,
    pub asr: AsrConfig,
    pub asr_train: AsrTrainConfig,
    pub pitch: PitchConfig,
    pub pitch_train: PitchTrainConfig,
    pub eval: EvalConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        let synthetic = SyntheticSpec::default();
        CliConfig {
            audio: AudioConfig { mel_bins: synthetic.mel_bins, ..AudioConfig::default() },
            synthetic,
            net: NetConfig::desk(),
            content: ContentSource::default(),
            train: TrainConfig::default(),
            sv: SvConfig::default(),
            sv_train: SvTrainConfig::default(),
            asr: AsrConfig::default(),
            asr_train: AsrTrainConfig::default(),
            pitch: PitchConfig::default(),
            pitch_train: PitchTrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl CliConfig {
    /// Parses a JSON config; missing sections and fields take defaults.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Sets every seed in the config.
    pub fn reseed(&mut self, seed: u64) {
        self.synthetic.seed = seed;
        self.train.seed = seed;
        self.sv_train.seed = seed;
        self.asr_train.seed = seed;
        self.pitch_train.seed = seed;
        self.eval.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let c: CliConfig = serde_json::from_str(r#"{"train": {"steps": 5}, "content": "conv"}"#).unwrap();
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.train.lr, TrainConfig::default().lr);
        assert_eq!(c.content, ContentSource::Conv);
        assert_eq!(c.audio.mel_bins, c.net.mel_bins);
    }

    #[test]
    fn unknown_field_is_named() {
        let e = serde_json::from_str::<CliConfig>(r#"{"train": {"stepz": 5}}"#).unwrap_err().to_string();
        assert!(e.contains("stepz"), "{e}");
    }

    #[test]
    fn reseed_reaches_every_section() {
        let mut c = CliConfig::default();
        c.reseed(42);
        assert_eq!(
            [c.synthetic.seed, c.train.seed, c.sv_train.seed, c.asr_train.seed, c.pitch_train.seed, c.eval.seed],
            [42; 6]
        );
    }
}
