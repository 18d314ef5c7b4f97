#![allow(dead_code)]

use pslm::corpus::{com_examples, generate_corpus, pslm_examples, Corpus, CorpusConfig};
use pslm::model::{ModelConfig, ModelState};
use pslm::streams::{QuestionInput, VocabSpec};
use pslm::train::{train, TrainConfig};

pub fn tiny_config(streams: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        hidden_size: 32,
        num_heads: 2,
        max_context: 512,
        num_speech_streams: streams,
        vocab: VocabSpec::toy(),
        seed: 1,
    }
}

pub fn one_pair_corpus() -> Corpus {
    generate_corpus(&CorpusConfig {
        n_pairs: 1,
        heldout_pairs: 0,
        max_text_len: 6,
        seed: 3,
        ..CorpusConfig::default()
    })
    .unwrap()
}

/// A tiny model trained to reproduce `corpus`. `streams == 0` gives a CoM model.
pub fn overfit(corpus: &Corpus, streams: usize) -> ModelState {
    let vocab = corpus.config.vocab;
    let mut model = ModelState::init(tiny_config(streams)).unwrap();
    let cfg = TrainConfig {
        steps: 150,
        batch_size: 1,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    if streams == 0 {
        train(&mut model, &com_examples(&corpus.train, &vocab).unwrap(), &cfg).unwrap();
    } else {
        let data = pslm_examples(&corpus.train, streams, QuestionInput::Both, &vocab).unwrap();
        train(&mut model, &data, &cfg).unwrap();
    }
    model
}
