//! Token layouts: speech-stream interleaving, text padding, and the frame
//! sequences the model reads and writes.
//!
//! A PSLM frame holds one text token and `S` speech tokens. A flat speech
//! sequence of length `N` is dealt round-robin onto the `S` streams, so (with
//! 1-based positions) stream `s` holds positions `s, s+S, s+2S, ...`. The
//! functions here use 0-based indices: position `p` lands in stream `p % S`
//! at index `p / S`.
//!
//! When `N` is not a multiple of `S` the flat sequence is right-padded with
//! the speech pad id first, so no token is dropped and
//! [`deinterleave_speech`] is an exact inverse.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type TextToken = u32;
pub type SpeechToken = u32;

/// Vocabulary sizes and special ids.
///
/// Text and speech ids live in separate id spaces; a PSLM model never mixes
/// them. The Chain-of-Modality baseline uses a single union space in which
/// speech id `x` is written as `text_vocab_size + x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSpec {
    pub text_vocab_size: u32,
    pub speech_vocab_size: u32,
    pub text_pad_id: TextToken,
    pub text_eos_id: TextToken,
    pub speech_pad_id: SpeechToken,
    pub speech_eos_id: SpeechToken,
    /// Text-space id opening the text segment of a CoM layout.
    pub com_text_marker_id: TextToken,
    /// Text-space id opening the speech segment of a CoM layout.
    pub com_speech_marker_id: TextToken,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self::toy()
    }
}

/// Which vocabulary a union-space id belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text(TextToken),
    Speech(SpeechToken),
}

impl VocabSpec {
    /// 60 text content ids and 128 speech content ids, specials at the top.
    pub fn toy() -> Self {
        Self {
            text_vocab_size: 64,
            speech_vocab_size: 130,
            text_pad_id: 60,
            text_eos_id: 61,
            com_text_marker_id: 62,
            com_speech_marker_id: 63,
            speech_pad_id: 128,
            speech_eos_id: 129,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let text = [
            self.text_pad_id,
            self.text_eos_id,
            self.com_text_marker_id,
            self.com_speech_marker_id,
        ];
        for (i, a) in text.iter().enumerate() {
            if *a >= self.text_vocab_size {
                return Err(invalid(format!(
                    "text special id {a} outside vocabulary of {}",
                    self.text_vocab_size
                )));
            }
            if text[i + 1..].contains(a) {
                return Err(invalid(format!("text special id {a} used twice")));
            }
        }
        for id in [self.speech_pad_id, self.speech_eos_id] {
            if id >= self.speech_vocab_size {
                return Err(invalid(format!(
                    "speech special id {id} outside vocabulary of {}",
                    self.speech_vocab_size
                )));
            }
        }
        if self.speech_pad_id == self.speech_eos_id {
            return Err(invalid("speech pad and EOS ids coincide"));
        }
        if self.text_content_ids().is_empty() || self.speech_content_ids().is_empty() {
            return Err(invalid("vocabulary has no content ids"));
        }
        Ok(())
    }

    pub fn is_text_special(&self, id: TextToken) -> bool {
        id == self.text_pad_id
            || id == self.text_eos_id
            || id == self.com_text_marker_id
            || id == self.com_speech_marker_id
    }

    pub fn is_speech_special(&self, id: SpeechToken) -> bool {
        id == self.speech_pad_id || id == self.speech_eos_id
    }

    /// Text ids that may appear inside generated content.
    pub fn text_content_ids(&self) -> Vec<TextToken> {
        (0..self.text_vocab_size)
            .filter(|&id| !self.is_text_special(id))
            .collect()
    }

    pub fn speech_content_ids(&self) -> Vec<SpeechToken> {
        (0..self.speech_vocab_size)
            .filter(|&id| !self.is_speech_special(id))
            .collect()
    }

    pub fn union_vocab_size(&self) -> u32 {
        self.text_vocab_size + self.speech_vocab_size
    }

    pub fn speech_to_union(&self, id: SpeechToken) -> u32 {
        self.text_vocab_size + id
    }

    pub fn classify_union(&self, id: u32) -> Modality {
        if id < self.text_vocab_size {
            Modality::Text(id)
        } else {
            Modality::Speech(id - self.text_vocab_size)
        }
    }
}

/// Aligned text and speech streams, one column per decode frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiStreamSequence {
    text: Vec<TextToken>,
    speech: Vec<Vec<SpeechToken>>,
    prompt_len: usize,
}

impl MultiStreamSequence {
    pub fn new(
        text: Vec<TextToken>,
        speech: Vec<Vec<SpeechToken>>,
        prompt_len: usize,
    ) -> Result<Self> {
        if speech.is_empty() {
            return Err(invalid("a multi-stream sequence needs at least one speech stream"));
        }
        if let Some(bad) = speech.iter().find(|s| s.len() != text.len()) {
            return Err(invalid(format!(
                "stream lengths differ: text has {} frames, a speech stream has {}",
                text.len(),
                bad.len()
            )));
        }
        if prompt_len > text.len() {
            return Err(invalid(format!(
                "prompt length {prompt_len} exceeds sequence length {}",
                text.len()
            )));
        }
        Ok(Self { text, speech, prompt_len })
    }

    /// Number of frames.
    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    pub fn num_speech_streams(&self) -> usize {
        self.speech.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn text_stream(&self) -> &[TextToken] {
        &self.text
    }

    pub fn speech_streams(&self) -> &[Vec<SpeechToken>] {
        &self.speech
    }

    pub fn speech_stream(&self, s: usize) -> &[SpeechToken] {
        &self.speech[s]
    }

    pub fn text_at(&self, t: usize) -> TextToken {
        self.text[t]
    }

    pub fn speech_at(&self, s: usize, t: usize) -> SpeechToken {
        self.speech[s][t]
    }

    /// Speech tokens of frame `t`, one per stream.
    pub fn speech_frame(&self, t: usize) -> Vec<SpeechToken> {
        self.speech.iter().map(|s| s[t]).collect()
    }

    /// Appends one frame. Panics if `speech` does not hold one token per stream.
    pub fn push_frame(&mut self, text: TextToken, speech: &[SpeechToken]) {
        assert_eq!(speech.len(), self.speech.len(), "one speech token per stream");
        self.text.push(text);
        for (stream, &tok) in self.speech.iter_mut().zip(speech) {
            stream.push(tok);
        }
    }

    /// The prompt region as a sequence of its own.
    pub fn prompt(&self) -> MultiStreamSequence {
        MultiStreamSequence {
            text: self.text[..self.prompt_len].to_vec(),
            speech: self
                .speech
                .iter()
                .map(|s| s[..self.prompt_len].to_vec())
                .collect(),
            prompt_len: self.prompt_len,
        }
    }

    /// Swaps two speech streams in place.
    pub fn swap_speech_streams(&mut self, a: usize, b: usize) {
        self.speech.swap(a, b);
    }
}

/// Bookkeeping from [`interleave_speech`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamLayoutReport {
    pub original_speech_len: usize,
    pub per_stream_len: usize,
    pub padded_tail: usize,
}

/// Deals `tokens` round-robin onto `streams` parallel speech streams.
pub fn interleave_speech(
    tokens: &[SpeechToken],
    streams: usize,
    vocab: &VocabSpec,
) -> Result<(Vec<Vec<SpeechToken>>, StreamLayoutReport)> {
    if streams == 0 {
        return Err(invalid("number of speech streams must be at least 1"));
    }
    if tokens.contains(&vocab.speech_pad_id) {
        return Err(invalid("speech tokens to interleave must not contain the pad id"));
    }
    let n = tokens.len();
    let per_stream_len = n.div_ceil(streams);
    let padded_tail = per_stream_len * streams - n;
    let mut out = vec![Vec::with_capacity(per_stream_len); streams];
    let padded = tokens
        .iter()
        .copied()
        .chain(std::iter::repeat_n(vocab.speech_pad_id, padded_tail));
    for (p, tok) in padded.enumerate() {
        out[p % streams].push(tok);
    }
    Ok((
        out,
        StreamLayoutReport {
            original_speech_len: n,
            per_stream_len,
            padded_tail,
        },
    ))
}

/// Round-robin merge of equal-length streams; trailing pad ids are dropped.
pub fn deinterleave_speech(
    streams: &[Vec<SpeechToken>],
    vocab: &VocabSpec,
) -> Result<Vec<SpeechToken>> {
    let Some(first) = streams.first() else {
        return Err(invalid("no speech streams to deinterleave"));
    };
    let len = first.len();
    if streams.iter().any(|s| s.len() != len) {
        return Err(invalid("speech streams have unequal lengths"));
    }
    let mut out: Vec<SpeechToken> = (0..len)
        .flat_map(|i| streams.iter().map(move |s| s[i]))
        .collect();
    while out.last() == Some(&vocab.speech_pad_id) {
        out.pop();
    }
    Ok(out)
}

/// Right-pads `text` with the text pad id to exactly `target_len` tokens.
pub fn pad_text_to_length(
    text: &[TextToken],
    target_len: usize,
    vocab: &VocabSpec,
) -> Result<Vec<TextToken>> {
    if text.len() > target_len {
        return Err(Error::TextTooLong {
            len: text.len(),
            target: target_len,
        });
    }
    let mut out = Vec::with_capacity(target_len);
    out.extend_from_slice(text);
    out.resize(target_len, vocab.text_pad_id);
    Ok(out)
}

/// Prompt region for PSLM decoding.
///
/// An empty `tq` drops the text question (the text prompt is all pads); an
/// empty `sq` drops the speech question, in which case the prompt spans
/// `tq.len()` frames of speech pads.
pub fn build_pslm_prompt(
    tq: &[TextToken],
    sq: &[SpeechToken],
    streams: usize,
    vocab: &VocabSpec,
) -> Result<MultiStreamSequence> {
    if tq.is_empty() && sq.is_empty() {
        return Err(invalid("prompt needs a text question, a speech question, or both"));
    }
    let (speech, len) = if sq.is_empty() {
        if streams == 0 {
            return Err(invalid("number of speech streams must be at least 1"));
        }
        (vec![vec![vocab.speech_pad_id; tq.len()]; streams], tq.len())
    } else {
        let (speech, report) = interleave_speech(sq, streams, vocab)?;
        (speech, report.per_stream_len)
    };
    let text = pad_text_to_length(tq, len, vocab)?;
    MultiStreamSequence::new(text, speech, len)
}

/// Which parts of the question a prompt carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionInput {
    #[default]
    Both,
    /// Text question only (speech question dropped).
    TextOnly,
    /// Speech question only (text question dropped).
    SpeechOnly,
}

impl QuestionInput {
    pub fn select<'a>(
        self,
        tq: &'a [TextToken],
        sq: &'a [SpeechToken],
    ) -> (&'a [TextToken], &'a [SpeechToken]) {
        match self {
            QuestionInput::Both => (tq, sq),
            QuestionInput::TextOnly => (tq, &[]),
            QuestionInput::SpeechOnly => (&[], sq),
        }
    }
}

/// Full training layout: prompt region followed by the answer region.
///
/// In the answer region every speech stream ends with the speech EOS id and
/// the text stream holds `ta`, the text EOS id, then pads.
pub fn build_pslm_example(
    tq: &[TextToken],
    ta: &[TextToken],
    sq: &[SpeechToken],
    sa: &[SpeechToken],
    streams: usize,
    vocab: &VocabSpec,
) -> Result<MultiStreamSequence> {
    let prompt = build_pslm_prompt(tq, sq, streams, vocab)?;
    let (mut answer_speech, report) = interleave_speech(sa, streams, vocab)?;
    for stream in &mut answer_speech {
        stream.push(vocab.speech_eos_id);
    }
    let answer_len = report.per_stream_len + 1;
    let mut answer_text = Vec::with_capacity(ta.len() + 1);
    answer_text.extend_from_slice(ta);
    answer_text.push(vocab.text_eos_id);
    let answer_text = pad_text_to_length(&answer_text, answer_len, vocab)?;

    let prompt_len = prompt.len();
    let MultiStreamSequence { mut text, mut speech, .. } = prompt;
    text.extend(answer_text);
    for (stream, tail) in speech.iter_mut().zip(answer_speech) {
        stream.extend(tail);
    }
    MultiStreamSequence::new(text, speech, prompt_len)
}

/// Chain-of-Modality layout over the union id space:
/// `SQ, [text marker], TQ, [text EOS], TA, [speech marker], SA, [speech EOS]`.
///
/// The text EOS between TQ and TA is what lets a decoder tell the generated
/// question apart from the answer.
pub fn build_com_example(
    tq: &[TextToken],
    ta: &[TextToken],
    sq: &[SpeechToken],
    sa: &[SpeechToken],
    vocab: &VocabSpec,
) -> Result<Vec<u32>> {
    check_content(tq, ta, sq, sa, vocab)?;
    let mut out = com_prompt_gold(sq, tq, vocab);
    out.extend_from_slice(ta);
    out.push(vocab.com_speech_marker_id);
    out.extend(sa.iter().map(|&s| vocab.speech_to_union(s)));
    out.push(vocab.speech_to_union(vocab.speech_eos_id));
    Ok(out)
}

/// CoM prompt holding the speech question only.
pub fn com_prompt_sq_only(sq: &[SpeechToken], vocab: &VocabSpec) -> Vec<u32> {
    let mut out: Vec<u32> = sq.iter().map(|&s| vocab.speech_to_union(s)).collect();
    out.push(vocab.com_text_marker_id);
    out
}

/// CoM prompt holding the speech question and a known text question.
pub fn com_prompt_gold(sq: &[SpeechToken], tq: &[TextToken], vocab: &VocabSpec) -> Vec<u32> {
    let mut out = com_prompt_sq_only(sq, vocab);
    out.extend_from_slice(tq);
    out.push(vocab.text_eos_id);
    out
}

fn check_content(
    tq: &[TextToken],
    ta: &[TextToken],
    sq: &[SpeechToken],
    sa: &[SpeechToken],
    vocab: &VocabSpec,
) -> Result<()> {
    let text_ok = |t: &TextToken| *t < vocab.text_vocab_size && !vocab.is_text_special(*t);
    let speech_ok = |s: &SpeechToken| *s < vocab.speech_vocab_size && !vocab.is_speech_special(*s);
    if !tq.iter().chain(ta).all(text_ok) {
        return Err(invalid("text content contains special or out-of-range ids"));
    }
    if !sq.iter().chain(sa).all(speech_ok) {
        return Err(invalid("speech content contains special or out-of-range ids"));
    }
    Ok(())
}
