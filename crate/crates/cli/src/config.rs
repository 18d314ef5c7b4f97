//! Run configuration: a TOML file with one table per component, overridden
//! by command-line flags.

use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use pslm::corpus::CorpusConfig;
use pslm::decode::SamplingParams;
use pslm::latency::LatencyParams;
use pslm::streams::QuestionInput;
use pslm::train::{PlateauRule, TrainConfig};
use pslm::vocoder::VocoderSpec;
use pslm::ModelConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub plateau: PlateauRule,
    pub sampling: SamplingParams,
    pub latency: LatencyParams,
    pub vocoder: VocoderSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| match source.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingInput(path.to_owned()),
            _ => CliError::ConfigRead { path: path.to_owned(), source },
        })?;
        toml::from_str(&text).map_err(|source| CliError::ConfigParse { path: path.to_owned(), source })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config tables serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Pslm,
    Com,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Input {
    /// Gold transcript of the spoken question.
    Gold,
    /// Transcript from the toy recognizer.
    Asr,
    /// Spoken question only.
    Sq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Ablation {
    #[default]
    None,
    /// Drop the text question from the prompt.
    NoTq,
    /// Drop the spoken question from the prompt.
    NoSq,
    /// Train without the 1/S speech-loss weight.
    NoWl,
}

impl Ablation {
    /// Question parts the model sees during training.
    pub fn question_input(self) -> QuestionInput {
        match self {
            Ablation::NoTq => QuestionInput::SpeechOnly,
            Ablation::NoSq => QuestionInput::TextOnly,
            Ablation::None | Ablation::NoWl => QuestionInput::Both,
        }
    }
}

/// Question parts given to a parallel model at decode time.
pub fn decode_input(input: Input, ablation: Ablation) -> Result<QuestionInput> {
    match (input, ablation.question_input()) {
        (Input::Sq, QuestionInput::TextOnly) => Err(CliError::Config(
            "--input sq leaves nothing to decode from under --ablation no-sq".into(),
        )),
        (Input::Sq, _) => Ok(QuestionInput::SpeechOnly),
        (_, q) => Ok(q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_fill_defaults() {
        let cfg: RunConfig = toml::from_str("[train]\nsteps = 5\n[model]\nhidden_size = 16\n").unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model.hidden_size, 16);
        assert_eq!(cfg.corpus, CorpusConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[train]\nstep = 5\n").is_err());
        assert!(toml::from_str::<RunConfig>("[trainer]\nsteps = 5\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(toml::from_str::<RunConfig>(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn ablations_select_question_parts() {
        assert_eq!(decode_input(Input::Gold, Ablation::NoTq).unwrap(), QuestionInput::SpeechOnly);
        assert_eq!(decode_input(Input::Gold, Ablation::NoWl).unwrap(), QuestionInput::Both);
        assert_eq!(decode_input(Input::Sq, Ablation::None).unwrap(), QuestionInput::SpeechOnly);
        assert!(decode_input(Input::Sq, Ablation::NoSq).is_err());
    }
}
