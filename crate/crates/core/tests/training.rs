mod common;

use proptest::prelude::*;

use pslm::corpus::{generate_corpus, pslm_examples, CorpusConfig};
use pslm::model::{forward, ModelConfig, ModelState, ParamGroup};
use pslm::streams::{MultiStreamSequence, QuestionInput, VocabSpec};
use pslm::train::{gradcheck, gradcheck_with, train, weighted_loss, GradCheckOptions, TrainConfig};
use pslm::FrameLogits;

fn gradcheck_model(streams: usize) -> ModelState {
    ModelState::init(ModelConfig {
        num_layers: 2,
        hidden_size: 16,
        num_heads: 2,
        max_context: 256,
        num_speech_streams: streams,
        vocab: VocabSpec::toy(),
        seed: 2,
    })
    .unwrap()
}

fn short_example(streams: usize) -> MultiStreamSequence {
    let corpus = common::one_pair_corpus();
    pslm_examples(&corpus.train, streams, QuestionInput::Both, &VocabSpec::toy()).unwrap().remove(0)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for streams in 1..=3 {
        let err = gradcheck(&gradcheck_model(streams), &short_example(streams), 1e-4).unwrap();
        assert!(err < 1e-4, "S={streams}: {err}");
    }
}

#[test]
fn com_model_gradients_match_finite_differences() {
    let corpus = common::one_pair_corpus();
    let example = pslm::corpus::com_examples(&corpus.train, &VocabSpec::toy()).unwrap().remove(0);
    let err = gradcheck(&gradcheck_model(0), &example, 1e-4).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn corrupted_speech_head_gradient_is_caught() {
    let model = gradcheck_model(2);
    let opts = GradCheckOptions::default();
    let report = gradcheck_with(&model, &short_example(2), &opts, |g, layout| {
        for i in layout.speech_head_weights[1].clone() {
            g[i] *= 1.5;
        }
    })
    .unwrap();
    assert!(report.max_rel_error > 1e-2, "{}", report.max_rel_error);
    let worst = report
        .per_group
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert_eq!(worst.0, ParamGroup::SpeechHead(1));
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    let data = pslm_examples(&corpus.train, 1, QuestionInput::Both, &VocabSpec::toy()).unwrap();
    let cfg = TrainConfig { steps: 200, batch_size: 2, ..TrainConfig::default() };
    let mut a = ModelState::init(common::tiny_config(1)).unwrap();
    let ha = train(&mut a, &data, &cfg).unwrap();
    assert!(ha.last().unwrap().total < ha[0].total);
    assert!(ha.iter().all(|l| l.total.is_finite()));

    let mut b = ModelState::init(common::tiny_config(1)).unwrap();
    let hb = train(&mut b, &data[..], &TrainConfig { steps: 20, ..cfg.clone() }).unwrap();
    assert_eq!(&ha[..20], &hb[..]);
}

fn logits_and_targets(streams: usize, len: usize, seed: u64) -> (Vec<FrameLogits>, MultiStreamSequence) {
    let model = ModelState::init(ModelConfig {
        num_layers: 1,
        hidden_size: 8,
        num_heads: 2,
        max_context: 64,
        num_speech_streams: streams,
        vocab: VocabSpec::toy(),
        seed,
    })
    .unwrap();
    let text: Vec<u32> = (0..len as u32).map(|i| (i * 7 + seed as u32) % 64).collect();
    let speech = (0..streams as u32)
        .map(|s| (0..len as u32).map(|i| (i * 11 + s * 5 + seed as u32) % 130).collect())
        .collect();
    let seq = MultiStreamSequence::new(text, speech, 0).unwrap();
    (forward(&model, &seq).unwrap(), seq)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_identity(streams in 1usize..=4, len in 2usize..12, seed in 0u64..1000, weighted: bool) {
        let (logits, seq) = logits_and_targets(streams, len, seed);
        let l = weighted_loss(&logits, &seq, weighted).unwrap();
        let w = if weighted { 1.0 / streams as f64 } else { 1.0 };
        let direct = l.text_loss + w * l.speech_losses.iter().sum::<f64>();
        prop_assert!((l.total - direct).abs() <= 1e-12 * direct.max(1.0));
        prop_assert!(l.text_loss >= 0.0 && l.speech_losses.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn swapping_streams_swaps_losses(streams in 2usize..=4, len in 2usize..12, seed in 0u64..1000, a in 0usize..4, b in 0usize..4) {
        let (a, b) = (a % streams, b % streams);
        let (mut logits, mut seq) = logits_and_targets(streams, len, seed);
        let before = weighted_loss(&logits, &seq, true).unwrap();
        for l in &mut logits {
            l.speech.swap(a, b);
        }
        seq.swap_speech_streams(a, b);
        let after = weighted_loss(&logits, &seq, true).unwrap();
        prop_assert_eq!(after.speech_losses[a], before.speech_losses[b]);
        prop_assert_eq!(after.speech_losses[b], before.speech_losses[a]);
        prop_assert!((after.total - before.total).abs() <= 1e-12 * before.total);
    }
}
