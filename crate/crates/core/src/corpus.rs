//! Deterministic synthetic spoken-QA corpus.
//!
//! Text tokens are opaque ids. A [`ToyTts`] maps every text content id to a
//! fixed signature of speech tokens; the signatures form a prefix-free code,
//! so [`ToyTts::invert`] recovers the text exactly and doubles as the
//! "transcription" used for character error rates.
//!
//! Question and answer lengths follow the quartile shape of a real spoken-QA
//! training set (min 2/1, quartiles 19/15, 32/29, 51/50, max 148/147 text
//! tokens for questions/answers), scaled down to `max_text_len`.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::ops::Range;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::streams::{
    build_com_example, build_pslm_example, MultiStreamSequence, QuestionInput, SpeechToken, TextToken, VocabSpec,
};

/// Mean speech/text length ratio of the reference corpus (406.6 / 36.5).
pub const REFERENCE_EXPANSION: f64 = 406.6 / 36.5;

/// Question length quantiles at p = 0, .25, .5, .75, 1 (text tokens).
pub const QUESTION_QUANTILES: [f64; 5] = [2.0, 19.0, 32.0, 51.0, 148.0];
/// Answer length quantiles at p = 0, .25, .5, .75, 1 (text tokens).
pub const ANSWER_QUANTILES: [f64; 5] = [1.0, 15.0, 29.0, 50.0, 147.0];

const FORMAT_NAME: &str = "pslm-corpus";
pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// Half-width of the signature length range around the mean.
const SIGNATURE_SPREAD: usize = 3;

/// Deterministic text-to-speech-token mapping with an exact inverse.
#[derive(Debug, Clone)]
pub struct ToyTts {
    vocab: VocabSpec,
    signatures: Vec<Vec<SpeechToken>>,
    lookup: HashMap<Vec<SpeechToken>, TextToken>,
    min_len: usize,
    max_len: usize,
}

/// Result of [`ToyTts::invert`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inversion {
    /// Recovered text, one entry per matched signature; `None` marks a run of
    /// speech tokens that matched no signature.
    pub symbols: Vec<Option<TextToken>>,
    /// Speech index ranges that matched no signature.
    pub unmatched: Vec<Range<usize>>,
}

impl Inversion {
    /// Recovered text with unmatched runs dropped.
    pub fn text(&self) -> Vec<TextToken> {
        self.symbols.iter().flatten().copied().collect()
    }

    pub fn is_exact(&self) -> bool {
        self.unmatched.is_empty()
    }
}

impl ToyTts {
    /// Builds the signature table. Signature lengths are uniform over
    /// `mean - 3 ..= mean + 3` (at least 1), where `mean` is
    /// `expansion_mean` rounded.
    pub fn new(vocab: VocabSpec, seed: u64, expansion_mean: f64) -> Result<Self> {
        vocab.validate()?;
        if !(expansion_mean >= 1.0 && expansion_mean.is_finite()) {
            return Err(invalid("expansion mean must be at least 1"));
        }
        let mean = expansion_mean.round() as usize;
        let min_len = mean.saturating_sub(SIGNATURE_SPREAD).max(1);
        let max_len = mean + SIGNATURE_SPREAD;
        let content = vocab.speech_content_ids();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);

        let mut signatures = vec![Vec::new(); vocab.text_vocab_size as usize];
        let mut lookup = HashMap::new();
        let mut prefixes: HashSet<Vec<SpeechToken>> = HashSet::new();
        for id in vocab.text_content_ids() {
            let mut attempts = 0;
            let sig = loop {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(invalid("could not build a prefix-free signature table"));
                }
                let len = rng.random_range(min_len..=max_len);
                let sig: Vec<SpeechToken> =
                    (0..len).map(|_| *content.choose(&mut rng).expect("content ids")).collect();
                // Prefix-free: no existing signature is a prefix of this one,
                // and this one is not a prefix of an existing one.
                let clashes = (1..=len).any(|k| lookup.contains_key(&sig[..k])) || prefixes.contains(&sig);
                if !clashes {
                    break sig;
                }
            };
            for k in 1..=sig.len() {
                prefixes.insert(sig[..k].to_vec());
            }
            lookup.insert(sig.clone(), id);
            signatures[id as usize] = sig;
        }
        Ok(Self { vocab, signatures, lookup, min_len, max_len })
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    pub fn signature(&self, id: TextToken) -> &[SpeechToken] {
        &self.signatures[id as usize]
    }

    /// Mean signature length over all text content ids.
    pub fn mean_expansion(&self) -> f64 {
        let ids = self.vocab.text_content_ids();
        ids.iter().map(|&i| self.signatures[i as usize].len()).sum::<usize>() as f64 / ids.len() as f64
    }

    /// Concatenated signatures of `text`.
    pub fn synthesize(&self, text: &[TextToken]) -> Result<Vec<SpeechToken>> {
        let mut out = Vec::with_capacity(text.len() * self.max_len);
        for &t in text {
            match self.signatures.get(t as usize) {
                Some(sig) if !sig.is_empty() => out.extend_from_slice(sig),
                _ => return Err(invalid(format!("text id {t} has no speech signature"))),
            }
        }
        Ok(out)
    }

    /// Greedy longest-match decoding of a speech-token sequence.
    pub fn invert(&self, speech: &[SpeechToken]) -> Inversion {
        let mut symbols = Vec::new();
        let mut unmatched: Vec<Range<usize>> = Vec::new();
        let mut i = 0;
        while i < speech.len() {
            let longest = (self.min_len..=self.max_len.min(speech.len() - i))
                .rev()
                .find_map(|len| self.lookup.get(&speech[i..i + len]).map(|&id| (id, len)));
            match longest {
                Some((id, len)) => {
                    symbols.push(Some(id));
                    i += len;
                }
                None => {
                    match unmatched.last_mut() {
                        Some(run) if run.end == i => run.end += 1,
                        _ => {
                            unmatched.push(i..i + 1);
                            symbols.push(None);
                        }
                    }
                    i += 1;
                }
            }
        }
        Inversion { symbols, unmatched }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAPair {
    pub id: u64,
    pub tq: Vec<TextToken>,
    pub ta: Vec<TextToken>,
    pub sq: Vec<SpeechToken>,
    pub sa: Vec<SpeechToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Training pairs.
    pub n_pairs: usize,
    /// Held-out pairs generated after the training pairs.
    pub heldout_pairs: usize,
    /// Mean speech tokens per text token.
    pub expansion_mean: f64,
    pub max_text_len: usize,
    pub seed: u64,
    pub vocab: VocabSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_pairs: 32,
            heldout_pairs: 4,
            expansion_mean: 11.0,
            max_text_len: 12,
            seed: 0,
            vocab: VocabSpec::toy(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.expansion_mean < 1.0 {
            return Err(invalid("expansion mean must be at least 1"));
        }
        if self.max_text_len == 0 {
            return Err(invalid("max_text_len must be positive"));
        }
        Ok(())
    }

    pub fn tts(&self) -> Result<ToyTts> {
        ToyTts::new(self.vocab, self.seed, self.expansion_mean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<QAPair>,
    pub heldout: Vec<QAPair>,
}

impl Corpus {
    pub fn pairs(&self) -> impl Iterator<Item = &QAPair> {
        self.train.iter().chain(&self.heldout)
    }
}

/// Parallel training sequences for `pairs`.
pub fn pslm_examples(
    pairs: &[QAPair],
    streams: usize,
    input: QuestionInput,
    vocab: &VocabSpec,
) -> Result<Vec<MultiStreamSequence>> {
    pairs
        .iter()
        .map(|p| {
            let (tq, sq) = input.select(&p.tq, &p.sq);
            build_pslm_example(tq, &p.ta, sq, &p.sa, streams, vocab)
        })
        .collect()
}

/// Single-stream CoM training sequences for `pairs`.
pub fn com_examples(pairs: &[QAPair], vocab: &VocabSpec) -> Result<Vec<Vec<u32>>> {
    pairs
        .iter()
        .map(|p| build_com_example(&p.tq, &p.ta, &p.sq, &p.sa, vocab))
        .collect()
}

/// Inverse CDF through the five quantile points, scaled so the maximum maps
/// to `max_len`, rounded and clamped to `1..=max_len`.
pub fn sample_length(quantiles: &[f64; 5], max_len: usize, rng: &mut impl Rng) -> usize {
    let scale = max_len as f64 / quantiles[4];
    let u: f64 = rng.random::<f64>() * 4.0;
    let seg = (u.floor() as usize).min(3);
    let frac = u - seg as f64;
    let v = (quantiles[seg] + frac * (quantiles[seg + 1] - quantiles[seg])) * scale;
    (v.round() as usize).clamp(1, max_len)
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let tts = cfg.tts()?;
    let content = cfg.vocab.text_content_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(cfg.n_pairs + cfg.heldout_pairs);
    let mut attempts = 0usize;
    while pairs.len() < cfg.n_pairs + cfg.heldout_pairs {
        attempts += 1;
        if attempts > 100 * (cfg.n_pairs + cfg.heldout_pairs) + 1000 {
            return Err(invalid("could not draw enough distinct questions"));
        }
        let q_len = sample_length(&QUESTION_QUANTILES, cfg.max_text_len, &mut rng);
        let a_len = sample_length(&ANSWER_QUANTILES, cfg.max_text_len, &mut rng);
        let tq: Vec<TextToken> = (0..q_len).map(|_| *content.choose(&mut rng).unwrap()).collect();
        let ta: Vec<TextToken> = (0..a_len).map(|_| *content.choose(&mut rng).unwrap()).collect();
        if !seen.insert(tq.clone()) {
            continue;
        }
        let sq = tts.synthesize(&tq)?;
        let sa = tts.synthesize(&ta)?;
        pairs.push(QAPair {
            id: pairs.len() as u64,
            tq,
            ta,
            sq,
            sa,
        });
    }
    let heldout = pairs.split_off(cfg.n_pairs);
    Ok(Corpus {
        config: cfg.clone(),
        train: pairs,
        heldout,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: CorpusConfig,
}

/// Writes the corpus as JSON lines: a header, then one record per pair
/// (training pairs first; ids below `n_pairs` are training pairs).
pub fn write_corpus(corpus: &Corpus, mut out: impl Write) -> Result<()> {
    let header = Header {
        format: FORMAT_NAME.to_string(),
        version: CORPUS_FORMAT_VERSION,
        config: corpus.config.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    writeln!(out)?;
    for pair in corpus.pairs() {
        serde_json::to_writer(&mut out, pair)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_corpus(input: impl BufRead) -> Result<Corpus> {
    let mut lines = input.lines();
    let bad = |detail: String| Error::Format { what: "corpus file", detail };
    let header: Header = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(bad("empty file".into())),
    };
    if header.format != FORMAT_NAME || header.version != CORPUS_FORMAT_VERSION {
        return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: QAPair = serde_json::from_str(&line)?;
        if (pair.id as usize) < header.config.n_pairs {
            train.push(pair);
        } else {
            heldout.push(pair);
        }
    }
    Ok(Corpus {
        config: header.config,
        train,
        heldout,
    })
}
