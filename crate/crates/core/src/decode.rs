//! Sampling and autoregressive decoding for both model layouts.
//!
//! Parallel decoding samples one text token and `S` speech tokens per frame,
//! all from the same forward pass. Once the text head emits its EOS the text
//! stream is forced to pads; likewise for each speech stream. Decoding stops
//! when every speech stream has emitted EOS or the length cap is reached.
//!
//! CoM decoding generates a single union-vocabulary stream and splits it into
//! question, answer and speech segments at the delimiter tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{FrameLogits, IncrementalDecoder, ModelState};
use crate::streams::{
    build_pslm_prompt, com_prompt_gold, com_prompt_sq_only, deinterleave_speech, Modality, MultiStreamSequence,
    QuestionInput, SpeechToken, TextToken, VocabSpec,
};

/// Temperatures below this are treated as greedy (argmax) decoding.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub seed: u64,
    /// Cap on the total sequence length, prompt included.
    pub max_total_len: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            top_k: 60,
            top_p: 0.8,
            seed: 0,
            max_total_len: 2048,
        }
    }
}

impl SamplingParams {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            top_k: 1,
            top_p: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature must be finite and non-negative"));
        }
        if self.top_k == 0 {
            return Err(invalid("top_k must be at least 1"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(invalid("top_p must lie in (0, 1]"));
        }
        Ok(())
    }
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// The distribution [`sample_token`] draws from: temperature softmax, then
/// the `top_k` most probable tokens (ties broken by lower id), renormalized,
/// then the shortest prefix of those reaching `top_p` cumulative mass,
/// renormalized again. Returned in descending probability order.
pub fn filtered_distribution(logits: &[f64], params: &SamplingParams) -> Result<Vec<(u32, f64)>> {
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(invalid("logits must be finite or -inf"));
    }
    if logits.iter().all(|&v| v == f64::NEG_INFINITY) {
        return Err(invalid("every logit is -inf"));
    }
    if params.temperature < GREEDY_TEMPERATURE {
        return Ok(vec![(argmax(logits) as u32, 1.0)]);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(u32, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| (i as u32, ((z - max) / params.temperature).exp()))
        .collect();
    // Stable sort keeps lower ids first among equal probabilities.
    probs.sort_by(|a, b| b.1.total_cmp(&a.1));
    probs.truncate(params.top_k.min(probs.len()));
    normalize(&mut probs);
    let mut cum = 0.0;
    let mut keep = probs.len();
    for (i, &(_, p)) in probs.iter().enumerate() {
        cum += p;
        if cum >= params.top_p {
            keep = i + 1;
            break;
        }
    }
    probs.truncate(keep);
    normalize(&mut probs);
    Ok(probs)
}

fn normalize(probs: &mut [(u32, f64)]) {
    let sum: f64 = probs.iter().map(|p| p.1).sum();
    for p in probs.iter_mut() {
        p.1 /= sum;
    }
}

/// Draws one token. Consumes exactly one random number unless decoding greedily.
pub fn sample_token(logits: &[f64], params: &SamplingParams, rng: &mut impl Rng) -> Result<u32> {
    let dist = filtered_distribution(logits, params)?;
    if params.temperature < GREEDY_TEMPERATURE {
        return Ok(dist[0].0);
    }
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(id, p) in &dist {
        cum += p;
        if u < cum {
            return Ok(id);
        }
    }
    Ok(dist.last().expect("non-empty support").0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    /// The length cap was reached before the final EOS.
    NoEos,
    /// A speech token appeared in a text segment or vice versa (CoM only).
    WrongModality,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOutcome {
    pub text_answer: Vec<TextToken>,
    pub speech_answer: Vec<SpeechToken>,
    pub frames_generated: usize,
    pub failure: Option<FailureKind>,
}

/// Per-stream completion state during parallel decoding.
#[derive(Debug, Clone)]
pub struct FrameState {
    pub text_done: bool,
    pub speech_done: Vec<bool>,
}

impl FrameState {
    pub fn new(streams: usize) -> Self {
        Self {
            text_done: false,
            speech_done: vec![false; streams],
        }
    }

    pub fn finished(&self) -> bool {
        self.speech_done.iter().all(|&d| d)
    }
}

/// Samples the next frame from one set of logits. Finished streams emit pads.
pub fn sample_frame(
    logits: &FrameLogits,
    state: &mut FrameState,
    vocab: &VocabSpec,
    params: &SamplingParams,
    rng: &mut impl Rng,
) -> Result<(TextToken, Vec<SpeechToken>)> {
    let text = if state.text_done {
        vocab.text_pad_id
    } else {
        let t = sample_token(&logits.text, params, rng)?;
        state.text_done = t == vocab.text_eos_id;
        t
    };
    let mut speech = Vec::with_capacity(state.speech_done.len());
    for (s, done) in state.speech_done.iter_mut().enumerate() {
        if *done {
            speech.push(vocab.speech_pad_id);
        } else {
            let tok = sample_token(&logits.speech[s], params, rng)?;
            *done = tok == vocab.speech_eos_id;
            speech.push(tok);
        }
    }
    Ok((text, speech))
}

fn length_cap(model: &ModelState, params: &SamplingParams) -> usize {
    params.max_total_len.min(model.config().max_context)
}

/// Parallel decoding from a prompt region.
pub fn decode_pslm(
    model: &ModelState,
    prompt: &MultiStreamSequence,
    params: &SamplingParams,
) -> Result<DecodeOutcome> {
    params.validate()?;
    let vocab = model.config().vocab;
    let streams = model.num_speech_streams();
    if streams == 0 {
        return Err(invalid("parallel decoding needs a model with speech streams"));
    }
    let cap = length_cap(model, params);
    if prompt.is_empty() || prompt.len() >= cap {
        return Err(invalid(format!(
            "prompt of {} frames leaves no room under the cap of {cap}",
            prompt.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut dec = IncrementalDecoder::new(model);
    let mut logits = None;
    for t in 0..prompt.len() {
        logits = Some(dec.step(prompt.text_at(t), &prompt.speech_frame(t))?);
    }
    let mut logits = logits.expect("non-empty prompt");
    let mut state = FrameState::new(streams);
    let mut text_out = Vec::new();
    let mut speech_out = vec![Vec::new(); streams];
    let mut total = prompt.len();
    loop {
        let (text, speech) = sample_frame(&logits, &mut state, &vocab, params, &mut rng)?;
        text_out.push(text);
        for (out, tok) in speech_out.iter_mut().zip(&speech) {
            out.push(*tok);
        }
        total += 1;
        if state.finished() || total >= cap {
            break;
        }
        logits = dec.step(text, &speech)?;
    }
    let failure = (!state.finished()).then_some(FailureKind::NoEos);
    Ok(DecodeOutcome {
        text_answer: strip_text(&text_out, &vocab),
        speech_answer: strip_speech(&speech_out, &vocab)?,
        frames_generated: text_out.len(),
        failure,
    })
}

/// Text before the first EOS, pads removed.
fn strip_text(generated: &[TextToken], vocab: &VocabSpec) -> Vec<TextToken> {
    generated
        .iter()
        .take_while(|&&t| t != vocab.text_eos_id)
        .filter(|&&t| t != vocab.text_pad_id)
        .copied()
        .collect()
}

/// Each stream cut at its EOS, merged round-robin, pads removed.
fn strip_speech(streams: &[Vec<SpeechToken>], vocab: &VocabSpec) -> Result<Vec<SpeechToken>> {
    let mut cut: Vec<Vec<SpeechToken>> = streams
        .iter()
        .map(|s| s.iter().take_while(|&&t| t != vocab.speech_eos_id).copied().collect())
        .collect();
    let len = cut.iter().map(Vec::len).max().unwrap_or(0);
    for s in &mut cut {
        s.resize(len, vocab.speech_pad_id);
    }
    let mut merged = deinterleave_speech(&cut, vocab)?;
    merged.retain(|&t| t != vocab.speech_pad_id);
    Ok(merged)
}

/// Which part of a CoM layout is being generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComSegment {
    Question,
    Answer,
    Speech,
}

/// Incremental parser for generated CoM tokens.
#[derive(Debug, Clone)]
pub struct ComSegmenter {
    vocab: VocabSpec,
    segment: ComSegment,
    question: Vec<TextToken>,
    answer: Vec<TextToken>,
    speech: Vec<SpeechToken>,
    generated: usize,
    failure: Option<FailureKind>,
    done: bool,
}

impl ComSegmenter {
    pub fn new(vocab: VocabSpec, start: ComSegment) -> Self {
        Self {
            vocab,
            segment: start,
            question: Vec::new(),
            answer: Vec::new(),
            speech: Vec::new(),
            generated: 0,
            failure: None,
            done: false,
        }
    }

    /// True once the final EOS or a wrong-modality token has been seen.
    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn push(&mut self, token: u32) {
        debug_assert!(!self.done);
        self.generated += 1;
        let v = &self.vocab;
        match (self.segment, v.classify_union(token)) {
            (ComSegment::Speech, Modality::Text(_))
            | (ComSegment::Question | ComSegment::Answer, Modality::Speech(_)) => {
                self.failure = Some(FailureKind::WrongModality);
                self.done = true;
            }
            (ComSegment::Speech, Modality::Speech(s)) => {
                if s == v.speech_eos_id {
                    self.done = true;
                } else if s != v.speech_pad_id {
                    self.speech.push(s);
                }
            }
            (seg, Modality::Text(t)) => {
                if t == v.com_speech_marker_id {
                    self.segment = ComSegment::Speech;
                } else if t == v.text_eos_id && seg == ComSegment::Question {
                    self.segment = ComSegment::Answer;
                } else if !v.is_text_special(t) {
                    match seg {
                        ComSegment::Question => self.question.push(t),
                        _ => self.answer.push(t),
                    }
                }
            }
        }
    }

    /// Generated question text (empty when the question was given).
    pub fn question(&self) -> &[TextToken] {
        &self.question
    }

    /// Output so far. Anything short of the final EOS counts as a failure.
    pub fn finish(self) -> DecodeOutcome {
        let failure = self.failure.or((!self.done).then_some(FailureKind::NoEos));
        DecodeOutcome {
            text_answer: self.answer,
            speech_answer: self.speech,
            frames_generated: self.generated,
            failure,
        }
    }
}

/// Splits an already generated CoM continuation into segments.
pub fn segment_com_tokens(generated: &[u32], vocab: &VocabSpec, gold_tq: bool) -> DecodeOutcome {
    let start = if gold_tq { ComSegment::Answer } else { ComSegment::Question };
    let mut seg = ComSegmenter::new(*vocab, start);
    for &tok in generated {
        if seg.is_done() {
            break;
        }
        seg.push(tok);
    }
    seg.finish()
}

/// Single-stream CoM decoding. With `gold_tq` the prompt already holds the
/// text question and its delimiter, so generation starts in the answer.
pub fn decode_com(
    model: &ModelState,
    prompt: &[u32],
    params: &SamplingParams,
    gold_tq: bool,
) -> Result<DecodeOutcome> {
    params.validate()?;
    if model.num_speech_streams() != 0 {
        return Err(invalid("CoM decoding needs a single-stream model"));
    }
    let vocab = model.config().vocab;
    let cap = length_cap(model, params);
    let start = if gold_tq { ComSegment::Answer } else { ComSegment::Question };
    let mut seg = ComSegmenter::new(vocab, start);
    if prompt.is_empty() {
        return Err(invalid("empty CoM prompt"));
    }
    if prompt.len() >= cap {
        return Ok(seg.finish());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut dec = IncrementalDecoder::new(model);
    let mut logits = None;
    for &tok in prompt {
        logits = Some(dec.step(tok, &[])?);
    }
    let mut logits = logits.expect("non-empty prompt");
    let mut total = prompt.len();
    loop {
        let tok = sample_token(&logits.text, params, &mut rng)?;
        seg.push(tok);
        total += 1;
        if seg.is_done() || total >= cap {
            break;
        }
        logits = dec.step(tok, &[])?;
    }
    Ok(seg.finish())
}

/// Model layout and prompt contents used for decoding a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Pslm(QuestionInput),
    /// CoM decoding; with `gold_tq` the text question is part of the prompt.
    Com { gold_tq: bool },
}

/// Builds the prompt for one question and decodes it.
pub fn decode_question(
    model: &ModelState,
    tq: &[TextToken],
    sq: &[SpeechToken],
    mode: DecodeMode,
    params: &SamplingParams,
) -> Result<DecodeOutcome> {
    let vocab = model.config().vocab;
    match mode {
        DecodeMode::Pslm(input) => {
            let (tq, sq) = input.select(tq, sq);
            let prompt = build_pslm_prompt(tq, sq, model.num_speech_streams(), &vocab)?;
            decode_pslm(model, &prompt, params)
        }
        DecodeMode::Com { gold_tq } => {
            let prompt = if gold_tq {
                com_prompt_gold(sq, tq, &vocab)
            } else {
                com_prompt_sq_only(sq, &vocab)
            };
            decode_com(model, &prompt, params, gold_tq)
        }
    }
}

/// One line of decode output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRecord {
    pub id: u64,
    pub text: Vec<TextToken>,
    pub speech: Vec<SpeechToken>,
    pub frames: usize,
    pub failure: Option<FailureKind>,
}

impl DecodeRecord {
    pub fn new(id: u64, outcome: &DecodeOutcome) -> Self {
        Self {
            id,
            text: outcome.text_answer.clone(),
            speech: outcome.speech_answer.clone(),
            frames: outcome.frames_generated,
            failure: outcome.failure,
        }
    }
}
