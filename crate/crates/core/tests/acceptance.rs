//! Acceptance suite. Runs every criterion in sequence, prints one line per
//! criterion, and exits non-zero if any criterion fails.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pslm::corpus::{generate_corpus, pslm_examples, CorpusConfig, REFERENCE_EXPANSION};
use pslm::decode::{
    decode_com, decode_pslm, segment_com_tokens, DecodeMode, FailureKind, SamplingParams,
};
use pslm::latency::{
    latency_curve, reference_length_records, simulate_dataset, ComInput, LatencyParams, MethodSpec,
};
use pslm::metrics::evaluate;
use pslm::model::{ModelConfig, ModelState, ParamGroup};
use pslm::streams::{
    build_pslm_prompt, com_prompt_gold, deinterleave_speech, interleave_speech, MultiStreamSequence,
    QuestionInput, VocabSpec,
};
use pslm::train::{gradcheck_with, train_until_plateau, GradCheckOptions, PlateauRule, TrainConfig};
use pslm::vocoder::{n_offset, synthesize_offline, StreamingSynthesizer, VocoderSpec};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Table values are reported to two decimals.
const TABLE_TOL: f64 = 0.005;

fn latency_reproduction() -> Verdict {
    let params = LatencyParams::default();
    let records = reference_length_records(1001, 0);
    let expected = [
        (MethodSpec::Pslm { asr: false, streams: 1 }, 0.34),
        (MethodSpec::Pslm { asr: true, streams: 1 }, 0.54),
        (MethodSpec::Pslm { asr: false, streams: 2 }, 0.20),
        (MethodSpec::Pslm { asr: false, streams: 3 }, 0.15),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (method, want) in expected {
        let got = simulate_dataset(&records, &params, method).unwrap().median;
        pass &= (got - want).abs() <= TABLE_TOL;
        parts.push(format!("{method}={got:.4} (want {want:.2})"));
    }
    verdict(pass, parts.join(", "))
}

fn offset_law() -> Verdict {
    let a = n_offset(26).unwrap();
    let b = n_offset(5).unwrap();
    verdict(a == 14 && b == 3, format!("n_offset(26)={a}, n_offset(5)={b}"))
}

fn curve_shape() -> Verdict {
    let params = LatencyParams::default();
    let lens: Vec<usize> = (0..=140).collect();
    let mut pass = true;
    let mut worst_slope_err = 0.0f64;
    for input in [ComInput::SqOnly, ComInput::Asr, ComInput::Gold] {
        let pts = latency_curve(&lens, &params, &[(MethodSpec::Com(input), 50.0)]).unwrap();
        for w in pts.windows(2) {
            worst_slope_err = worst_slope_err.max((w[1].seconds - w[0].seconds - 0.02).abs());
        }
    }
    pass &= worst_slope_err < 1e-12;

    let mut flat = true;
    let mut equivalent = true;
    for asr in [false, true] {
        let two = latency_curve(&lens, &params, &[(MethodSpec::Pslm { asr, streams: 2 }, 50.0)]).unwrap();
        let fast = latency_curve(&lens, &params, &[(MethodSpec::Pslm { asr, streams: 1 }, 100.0)]).unwrap();
        let one = latency_curve(&lens, &params, &[(MethodSpec::Pslm { asr, streams: 1 }, 50.0)]).unwrap();
        flat &= one.iter().all(|p| p.seconds == one[0].seconds);
        flat &= two.iter().all(|p| p.seconds == two[0].seconds);
        equivalent &= two.iter().zip(&fast).all(|(a, b)| a.seconds == b.seconds);
    }
    pass &= flat && equivalent;
    verdict(
        pass,
        format!("max slope error {worst_slope_err:.1e} s/token, parallel flat: {flat}, 2 streams @50 == 1 stream @100: {equivalent}"),
    )
}

fn stream_round_trip() -> Verdict {
    let vocab = VocabSpec::toy();
    let content = vocab.speech_content_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = 0;
    let mut checked = 0;
    for _ in 0..1000 {
        let len = rng.random_range(0..=512);
        let x: Vec<u32> = (0..len).map(|_| content[rng.random_range(0..content.len())]).collect();
        for s in 1..=8 {
            let (streams, _) = interleave_speech(&x, s, &vocab).unwrap();
            checked += 1;
            if deinterleave_speech(&streams, &vocab).unwrap() != x {
                failures += 1;
            }
        }
    }
    verdict(failures == 0, format!("{checked} round trips, {failures} mismatches"))
}

const GRAD_TOL: f64 = 1e-4;

fn gradient_correctness() -> Verdict {
    let corpus = generate_corpus(&CorpusConfig {
        n_pairs: 1,
        heldout_pairs: 0,
        max_text_len: 4,
        seed: 7,
        ..CorpusConfig::default()
    })
    .unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for streams in 1..=3 {
        let cfg = ModelConfig {
            num_layers: 2,
            hidden_size: 16,
            num_heads: 2,
            max_context: 256,
            num_speech_streams: streams,
            vocab: VocabSpec::toy(),
            seed: 11,
        };
        let model = ModelState::init(cfg).unwrap();
        let example = &pslm_examples(&corpus.train, streams, QuestionInput::Both, &VocabSpec::toy()).unwrap()[0];
        let opts = GradCheckOptions { samples: 256, seed: streams as u64, ..Default::default() };
        let report = gradcheck_with(&model, example, &opts, |_, _| {}).unwrap();
        let has = |g: ParamGroup| report.per_group.iter().any(|(x, _, n)| *x == g && *n > 0);
        let covered = has(ParamGroup::TextEmbedding)
            && has(ParamGroup::Trunk)
            && has(ParamGroup::TextHead)
            && (0..streams).all(|s| has(ParamGroup::SpeechEmbedding(s)) && has(ParamGroup::SpeechHead(s)));
        let ok = covered && report.coordinates >= 200 && report.max_rel_error < GRAD_TOL;
        pass &= ok;
        parts.push(format!(
            "S={streams}: {} coords, max rel {:.2e}{}",
            report.coordinates,
            report.max_rel_error,
            if covered { "" } else { " (groups missing)" }
        ));
    }
    verdict(pass, parts.join("; "))
}

fn streaming_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut late_or_early = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=200);
        let r = [1, 2, 5, 26, 27][rng.random_range(0..5)];
        let spec = VocoderSpec { receptive_field: r, upsample: 480 };
        let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(0..128)).collect();
        let mut synth = StreamingSynthesizer::new(spec).unwrap();
        let mut frags = Vec::new();
        for &t in &tokens {
            frags.extend(synth.push(t));
        }
        frags.extend(synth.finish());
        for (i, f) in frags.iter().enumerate() {
            if f.index != i || f.tokens_seen != (i + r / 2 + 1).min(n) {
                late_or_early += 1;
            }
        }
        let streamed: Vec<f64> = frags.into_iter().flat_map(|f| f.samples).collect();
        let offline = synthesize_offline(&tokens, &spec).unwrap();
        let same_bits = streamed.len() == offline.len()
            && streamed.iter().zip(&offline).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same_bits {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0 && late_or_early == 0,
        format!("100 sequences, {mismatches} output mismatches, {late_or_early} mistimed fragments"),
    )
}

/// Lowest achievable training-set text loss for any model: the next text
/// token's empirical distribution given the full frame prefix, with each
/// example weighted by its share of the per-example mean.
fn text_loss_floor(data: &[MultiStreamSequence]) -> f64 {
    let weight = |d: &MultiStreamSequence| 1.0 / (d.len() - 1) as f64;
    let prefix = |d: &MultiStreamSequence, t: usize| -> Vec<u32> {
        (0..=t).flat_map(|u| std::iter::once(d.text_at(u)).chain(d.speech_frame(u))).collect()
    };
    let mut joint: HashMap<(Vec<u32>, u32), f64> = HashMap::new();
    let mut marginal: HashMap<Vec<u32>, f64> = HashMap::new();
    for d in data {
        for t in 0..d.len() - 1 {
            let k = prefix(d, t);
            *joint.entry((k.clone(), d.text_at(t + 1))).or_default() += weight(d);
            *marginal.entry(k).or_default() += weight(d);
        }
    }
    let total: f64 = data
        .iter()
        .map(|d| {
            let nll: f64 = (0..d.len() - 1)
                .map(|t| {
                    let k = prefix(d, t);
                    -(joint[&(k.clone(), d.text_at(t + 1))] / marginal[&k]).ln()
                })
                .sum();
            nll * weight(d)
        })
        .sum();
    total / data.len() as f64
}

const MEMORIZATION_CER: f64 = 5.0;
const MEMORIZATION_FR: f64 = 10.0;
const TEXT_LOSS_RATIO_TOL: f64 = 0.2;
const MAX_TRAIN_STEPS: usize = 1000;

fn memorization() -> Verdict {
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    let vocab = corpus.config.vocab;
    let tts = corpus.config.tts().unwrap();
    let rule = PlateauRule::default();
    let run = |streams: usize, weighted: bool| {
        let data = pslm_examples(&corpus.train, streams, QuestionInput::Both, &vocab).unwrap();
        let mut model = ModelState::init(ModelConfig { num_speech_streams: streams, ..Default::default() }).unwrap();
        let cfg = TrainConfig { steps: MAX_TRAIN_STEPS, weighted_loss: weighted, ..Default::default() };
        let out = train_until_plateau(&mut model, &data, &cfg, &rule).unwrap();
        let steps = out.checkpoints.last().unwrap().0;
        (model, out.final_loss().text_loss, steps, text_loss_floor(&data))
    };

    let (single, text1, steps1, floor1) = run(1, true);
    let near_greedy = SamplingParams { temperature: 0.1, ..Default::default() };
    let (report, _) = evaluate(&single, &corpus.train, &tts, &near_greedy, DecodeMode::Pslm(QuestionInput::Both)).unwrap();
    let cer = report.cer.unwrap_or(f64::INFINITY);
    let decode_ok = cer < MEMORIZATION_CER && report.failure_rate < MEMORIZATION_FR;

    let (_, text2, steps2, floor2) = run(2, true);
    let ratio_ok = (text2 - text1).abs() <= TEXT_LOSS_RATIO_TOL * text1;

    let (_, text3w, steps3w, floor3) = run(3, true);
    let (_, text3u, steps3u, _) = run(3, false);
    let weighting_ok = text3u > text3w;

    verdict(
        decode_ok && ratio_ok && weighting_ok,
        format!(
            "S=1 ({steps1} steps): CER {cer:.2}% FR {:.1}% [{}]; text loss S=1 {text1:.5} vs S=2 ({steps2} steps) {text2:.5}, ratio {:.2} [{}]; \
             S=3 weighted ({steps3w} steps) {text3w:.5} vs unweighted ({steps3u} steps) {text3u:.5} [{}]; \
             text-loss floors S=1 {floor1:.5} S=2 {floor2:.5} S=3 {floor3:.5}",
            report.failure_rate,
            if decode_ok { "ok" } else { "FAIL" },
            text2 / text1,
            if ratio_ok { "ok" } else { "FAIL" },
            if weighting_ok { "ok" } else { "FAIL" },
        ),
    )
}

fn biased_model(streams: usize, max_context: usize, bias: impl Fn(&mut ModelState)) -> ModelState {
    let mut m = ModelState::init(ModelConfig {
        num_layers: 1,
        hidden_size: 16,
        num_heads: 2,
        max_context,
        num_speech_streams: streams,
        vocab: VocabSpec::toy(),
        seed: 3,
    })
    .unwrap();
    bias(&mut m);
    m
}

fn failure_detection() -> Verdict {
    let vocab = VocabSpec::toy();
    let mut parts = Vec::new();

    // Speech heads that can never pick EOS run into the length cap.
    let never_eos = biased_model(1, 2048, |m| {
        let r = m.layout().speech_head_biases[0].clone();
        m.params_mut()[r][vocab.speech_eos_id as usize] = -1e9;
    });
    let prompt = build_pslm_prompt(&[1, 2, 3], &[4, 5, 6, 7, 8], 1, &vocab).unwrap();
    let out = decode_pslm(&never_eos, &prompt, &SamplingParams::default()).unwrap();
    let no_eos = out.failure == Some(FailureKind::NoEos) && out.frames_generated + prompt.len() == 2048;
    parts.push(format!("no-eos fixture: {:?} after {} frames", out.failure, out.frames_generated));

    // A CoM model whose union head prefers a speech id inside the text answer.
    let speech_in_answer = biased_model(0, 256, |m| {
        let r = m.layout().text_head_bias.clone();
        m.params_mut()[r][vocab.speech_to_union(7) as usize] = 50.0;
    });
    let prompt = com_prompt_gold(&[4, 5, 6], &[1, 2], &vocab);
    let out = decode_com(&speech_in_answer, &prompt, &SamplingParams::default(), true).unwrap();
    let handmade = segment_com_tokens(&[3, vocab.speech_to_union(5)], &vocab, true);
    let wrong = out.failure == Some(FailureKind::WrongModality)
        && handmade.failure == Some(FailureKind::WrongModality);
    parts.push(format!("wrong-modality fixture: {:?}", out.failure));

    // Random parallel decodes never report a modality failure.
    let content = vocab.speech_content_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut modality = 0;
    let mut kinds: HashMap<Option<FailureKind>, usize> = HashMap::new();
    let models: Vec<ModelState> = (1..=3).map(|s| biased_model(s, 256, |_| {})).collect();
    for i in 0..1000 {
        let model = &models[i % 3];
        let sq: Vec<u32> = (0..rng.random_range(9..30)).map(|_| content[rng.random_range(0..content.len())]).collect();
        let tq: Vec<u32> = (0..rng.random_range(0..4)).map(|_| rng.random_range(0..60)).collect();
        let prompt = build_pslm_prompt(&tq, &sq, model.num_speech_streams(), &vocab).unwrap();
        let params = SamplingParams { temperature: 1.0, seed: i as u64, max_total_len: prompt.len() + 24, ..Default::default() };
        let out = decode_pslm(model, &prompt, &params).unwrap();
        modality += usize::from(out.failure == Some(FailureKind::WrongModality));
        *kinds.entry(out.failure).or_default() += 1;
    }
    parts.push(format!(
        "1000 random parallel decodes: {} clean, {} no-eos, {modality} wrong-modality",
        kinds.get(&None).copied().unwrap_or(0),
        kinds.get(&Some(FailureKind::NoEos)).copied().unwrap_or(0)
    ));
    verdict(no_eos && wrong && modality == 0, parts.join("; "))
}

const EXPANSION_TOL: f64 = 0.1;

fn corpus_calibration() -> Verdict {
    let corpus = generate_corpus(&CorpusConfig::default()).unwrap();
    let tts = corpus.config.tts().unwrap();
    let (mut text, mut speech, mut inexact) = (0usize, 0usize, 0usize);
    for p in corpus.pairs() {
        text += p.tq.len() + p.ta.len();
        speech += p.sq.len() + p.sa.len();
        for (t, s) in [(&p.tq, &p.sq), (&p.ta, &p.sa)] {
            let inv = tts.invert(s);
            if !inv.is_exact() || inv.text() != *t {
                inexact += 1;
            }
        }
    }
    let ratio = speech as f64 / text as f64;
    let ok = (ratio - REFERENCE_EXPANSION).abs() <= EXPANSION_TOL * REFERENCE_EXPANSION && inexact == 0;
    verdict(
        ok,
        format!("speech/text ratio {ratio:.2} (target {REFERENCE_EXPANSION:.2}), {inexact} inexact inversions"),
    )
}

fn main() {
    type Check = fn() -> Verdict;
    let criteria: [(&str, Check, Duration); 9] = [
        ("latency reproduction", latency_reproduction, Duration::from_secs(1)),
        ("offset law", offset_law, Duration::from_secs(1)),
        ("latency curve shape", curve_shape, Duration::from_secs(1)),
        ("stream round trip", stream_round_trip, Duration::from_secs(5)),
        ("gradient correctness", gradient_correctness, Duration::from_secs(120)),
        ("streaming equivalence", streaming_equivalence, Duration::from_secs(10)),
        ("end-to-end memorization", memorization, Duration::from_secs(300)),
        ("failure detection", failure_detection, Duration::from_secs(30)),
        ("corpus calibration", corpus_calibration, Duration::from_secs(5)),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let pass = v.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "{} {n}. {name} ({:.2} s of {} s{}): {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" },
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
