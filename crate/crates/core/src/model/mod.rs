//! A small decoder-only transformer with one text stream and `S` speech
//! streams.
//!
//! Each frame's input vector is the sum of the text embedding, one embedding
//! per speech stream, and a sinusoidal position code. A pre-norm transformer
//! trunk is shared by all streams; its final hidden state feeds `S + 1`
//! separate output heads.
//!
//! With `S = 0` the model is a plain single-stream language model whose text
//! table spans the union (text + speech) vocabulary. That is the
//! Chain-of-Modality baseline, driven through [`forward_com`].

mod backprop;
mod cache;
mod checkpoint;
pub(crate) mod ops;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::streams::{MultiStreamSequence, VocabSpec};

pub use backprop::{backward, forward_traced, ForwardTrace};
pub use cache::IncrementalDecoder;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

/// Standard deviation of the normal initialization of every weight matrix
/// and embedding table.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub max_context: usize,
    /// `S`. Zero selects the single-stream CoM model over the union vocabulary.
    pub num_speech_streams: usize,
    pub vocab: VocabSpec,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            max_context: 2048,
            num_speech_streams: 1,
            vocab: VocabSpec::toy(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.hidden_size == 0 || self.num_heads == 0 {
            return Err(invalid("hidden size and head count must be positive"));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(invalid(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_context == 0 {
            return Err(invalid("max_context must be at least 1"));
        }
        Ok(())
    }

    /// Rows of the text embedding table and width of the text head.
    pub fn text_table_size(&self) -> usize {
        if self.num_speech_streams == 0 {
            self.vocab.union_vocab_size() as usize
        } else {
            self.vocab.text_vocab_size as usize
        }
    }

    pub fn speech_table_size(&self) -> usize {
        self.vocab.speech_vocab_size as usize
    }

    pub fn ff_size(&self) -> usize {
        4 * self.hidden_size
    }
}

/// Parameter ranges of one transformer block inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    pub qkv_weight: Range<usize>,
    pub qkv_bias: Range<usize>,
    pub attn_out_weight: Range<usize>,
    pub attn_out_bias: Range<usize>,
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub ff_in_weight: Range<usize>,
    pub ff_in_bias: Range<usize>,
    pub ff_out_weight: Range<usize>,
    pub ff_out_bias: Range<usize>,
}

/// Where each parameter tensor lives in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub text_embedding: Range<usize>,
    pub speech_embeddings: Vec<Range<usize>>,
    pub blocks: Vec<BlockLayout>,
    pub final_ln_gain: Range<usize>,
    pub final_ln_bias: Range<usize>,
    pub text_head_weight: Range<usize>,
    pub text_head_bias: Range<usize>,
    pub speech_head_weights: Vec<Range<usize>>,
    pub speech_head_biases: Vec<Range<usize>>,
    pub total: usize,
}

/// Coarse grouping used by gradient checks and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    TextEmbedding,
    SpeechEmbedding(usize),
    Trunk,
    TextHead,
    SpeechHead(usize),
}

impl ParamLayout {
    fn new(cfg: &ModelConfig) -> Self {
        let c = cfg.hidden_size;
        let f = cfg.ff_size();
        let mut next = 0usize;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let text_embedding = take(cfg.text_table_size() * c);
        let speech_embeddings = (0..cfg.num_speech_streams)
            .map(|_| take(cfg.speech_table_size() * c))
            .collect();
        let blocks = (0..cfg.num_layers)
            .map(|_| BlockLayout {
                ln1_gain: take(c),
                ln1_bias: take(c),
                qkv_weight: take(3 * c * c),
                qkv_bias: take(3 * c),
                attn_out_weight: take(c * c),
                attn_out_bias: take(c),
                ln2_gain: take(c),
                ln2_bias: take(c),
                ff_in_weight: take(f * c),
                ff_in_bias: take(f),
                ff_out_weight: take(c * f),
                ff_out_bias: take(c),
            })
            .collect();
        let final_ln_gain = take(c);
        let final_ln_bias = take(c);
        let text_head_weight = take(cfg.text_table_size() * c);
        let text_head_bias = take(cfg.text_table_size());
        let mut speech_head_weights = Vec::new();
        let mut speech_head_biases = Vec::new();
        for _ in 0..cfg.num_speech_streams {
            speech_head_weights.push(take(cfg.speech_table_size() * c));
            speech_head_biases.push(take(cfg.speech_table_size()));
        }
        Self {
            text_embedding,
            speech_embeddings,
            blocks,
            final_ln_gain,
            final_ln_bias,
            text_head_weight,
            text_head_bias,
            speech_head_weights,
            speech_head_biases,
            total: next,
        }
    }

    /// Every named tensor with its group.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, Range<usize>)> {
        let mut out = vec![(
            "text_embedding".to_string(),
            ParamGroup::TextEmbedding,
            self.text_embedding.clone(),
        )];
        for (s, r) in self.speech_embeddings.iter().enumerate() {
            out.push((format!("speech_embedding.{s}"), ParamGroup::SpeechEmbedding(s), r.clone()));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            let named = [
                ("ln1_gain", &b.ln1_gain),
                ("ln1_bias", &b.ln1_bias),
                ("qkv_weight", &b.qkv_weight),
                ("qkv_bias", &b.qkv_bias),
                ("attn_out_weight", &b.attn_out_weight),
                ("attn_out_bias", &b.attn_out_bias),
                ("ln2_gain", &b.ln2_gain),
                ("ln2_bias", &b.ln2_bias),
                ("ff_in_weight", &b.ff_in_weight),
                ("ff_in_bias", &b.ff_in_bias),
                ("ff_out_weight", &b.ff_out_weight),
                ("ff_out_bias", &b.ff_out_bias),
            ];
            for (name, r) in named {
                out.push((format!("block{l}.{name}"), ParamGroup::Trunk, r.clone()));
            }
        }
        out.push(("final_ln_gain".into(), ParamGroup::Trunk, self.final_ln_gain.clone()));
        out.push(("final_ln_bias".into(), ParamGroup::Trunk, self.final_ln_bias.clone()));
        out.push(("text_head_weight".into(), ParamGroup::TextHead, self.text_head_weight.clone()));
        out.push(("text_head_bias".into(), ParamGroup::TextHead, self.text_head_bias.clone()));
        for s in 0..self.speech_head_weights.len() {
            out.push((
                format!("speech_head_weight.{s}"),
                ParamGroup::SpeechHead(s),
                self.speech_head_weights[s].clone(),
            ));
            out.push((
                format!("speech_head_bias.{s}"),
                ParamGroup::SpeechHead(s),
                self.speech_head_biases[s].clone(),
            ));
        }
        out
    }
}

/// Model parameters, stored as one flat vector addressed through a [`ParamLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl PartialEq for ParamLayout {
    fn eq(&self, other: &Self) -> bool {
        self.total == other.total
    }
}

impl ModelState {
    /// Random initialization, deterministic in `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        // Gains start at one, biases at zero, everything else is normal.
        for (name, _, range) in layout.tensors() {
            if name.ends_with("_gain") {
                params[range].fill(1.0);
            } else if !name.ends_with("_bias") {
                for p in &mut params[range] {
                    *p = normal.sample(&mut rng);
                }
            }
        }
        Ok(Self { config, layout, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if layout.total != params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "configuration needs {} parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_speech_streams(&self) -> usize {
        self.config.num_speech_streams
    }

    pub(crate) fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    /// Input vector of one frame before the trunk: summed embeddings plus position code.
    pub fn input_embedding(&self, pos: usize, text: u32, speech: &[u32]) -> Vec<f64> {
        let c = self.config.hidden_size;
        let row = |r: &Range<usize>, id: u32| &self.params[r.start + id as usize * c..][..c];
        let mut x = row(&self.layout.text_embedding, text).to_vec();
        for (s, &tok) in speech.iter().enumerate() {
            ops::axpy(1.0, row(&self.layout.speech_embeddings[s], tok), &mut x);
        }
        ops::add_position(pos, &mut x);
        x
    }

    /// Applies the output heads to a final hidden state.
    pub(crate) fn heads(&self, hidden: &[f64]) -> FrameLogits {
        let mut text = vec![0.0; self.config.text_table_size()];
        ops::linear(
            self.p(&self.layout.text_head_weight),
            self.p(&self.layout.text_head_bias),
            hidden,
            &mut text,
        );
        let speech = (0..self.config.num_speech_streams)
            .map(|s| {
                let mut out = vec![0.0; self.config.speech_table_size()];
                ops::linear(
                    self.p(&self.layout.speech_head_weights[s]),
                    self.p(&self.layout.speech_head_biases[s]),
                    hidden,
                    &mut out,
                );
                out
            })
            .collect();
        FrameLogits { text, speech }
    }

    /// Checks that `frames` can be fed to this model.
    pub fn check_frames(&self, frames: &FrameView<'_>) -> Result<()> {
        if frames.speech.len() != self.config.num_speech_streams {
            return Err(invalid(format!(
                "input has {} speech streams, model has {}",
                frames.speech.len(),
                self.config.num_speech_streams
            )));
        }
        if frames.len() > self.config.max_context {
            return Err(Error::ContextOverflow {
                len: frames.len(),
                max: self.config.max_context,
            });
        }
        let text_limit = self.config.text_table_size() as u32;
        if let Some(bad) = frames.text.iter().find(|&&t| t >= text_limit) {
            return Err(invalid(format!("text id {bad} outside table of {text_limit}")));
        }
        let speech_limit = self.config.speech_table_size() as u32;
        for stream in &frames.speech {
            if stream.len() != frames.text.len() {
                return Err(invalid("stream lengths differ"));
            }
            if let Some(bad) = stream.iter().find(|&&t| t >= speech_limit) {
                return Err(invalid(format!("speech id {bad} outside table of {speech_limit}")));
            }
        }
        Ok(())
    }
}

/// Closed-form parameter count for a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let c = cfg.hidden_size;
    let vt = cfg.text_table_size();
    let vs = cfg.speech_table_size();
    let s = cfg.num_speech_streams;
    let per_block = 12 * c * c + 13 * c;
    (vt * c) + s * (vs * c) + cfg.num_layers * per_block + 2 * c + (vt * c + vt) + s * (vs * c + vs)
}

/// Logits produced for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLogits {
    pub text: Vec<f64>,
    pub speech: Vec<Vec<f64>>,
}

/// Borrowed frames: a text stream plus zero or more speech streams of equal length.
#[derive(Debug, Clone)]
pub struct FrameView<'a> {
    pub text: &'a [u32],
    pub speech: Vec<&'a [u32]>,
}

impl FrameView<'_> {
    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    pub fn speech_frame(&self, t: usize) -> Vec<u32> {
        self.speech.iter().map(|s| s[t]).collect()
    }
}

/// Anything that can be viewed as model input frames.
pub trait AsFrames {
    fn as_frames(&self) -> FrameView<'_>;
}

impl AsFrames for MultiStreamSequence {
    fn as_frames(&self) -> FrameView<'_> {
        FrameView {
            text: self.text_stream(),
            speech: self.speech_streams().iter().map(Vec::as_slice).collect(),
        }
    }
}

/// A flat single-stream (CoM) token sequence.
impl AsFrames for [u32] {
    fn as_frames(&self) -> FrameView<'_> {
        FrameView { text: self, speech: Vec::new() }
    }
}

impl AsFrames for Vec<u32> {
    fn as_frames(&self) -> FrameView<'_> {
        self.as_slice().as_frames()
    }
}

/// Logits for every frame of `seq`. Frame `t` only sees frames `0..=t`.
pub fn forward(model: &ModelState, seq: &MultiStreamSequence) -> Result<Vec<FrameLogits>> {
    forward_frames(model, &seq.as_frames())
}

/// Single-stream forward pass over the union vocabulary.
pub fn forward_com(model: &ModelState, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
    Ok(forward_frames(model, &tokens.as_frames())?
        .into_iter()
        .map(|f| f.text)
        .collect())
}

pub fn forward_frames(model: &ModelState, frames: &FrameView<'_>) -> Result<Vec<FrameLogits>> {
    model.check_frames(frames)?;
    let mut dec = IncrementalDecoder::new(model);
    (0..frames.len())
        .map(|t| dec.step(frames.text[t], &frames.speech_frame(t)))
        .collect()
}
