use super::{ops, FrameLogits, ModelState};
use crate::error::{invalid, Error, Result};

/// Frame-at-a-time forward pass with a key/value cache.
///
/// Produces exactly the same logits as a full recompute over the prefix.
pub struct IncrementalDecoder<'m> {
    model: &'m ModelState,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(model: &'m ModelState) -> Self {
        let layers = model.config.num_layers;
        Self {
            model,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            pos: 0,
        }
    }

    /// Frames consumed so far.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    /// Consumes one frame and returns its logits.
    pub fn step(&mut self, text: u32, speech: &[u32]) -> Result<FrameLogits> {
        let m = self.model;
        let cfg = &m.config;
        if self.pos >= cfg.max_context {
            return Err(Error::ContextOverflow {
                len: self.pos + 1,
                max: cfg.max_context,
            });
        }
        if speech.len() != cfg.num_speech_streams {
            return Err(invalid(format!(
                "frame has {} speech tokens, model has {} streams",
                speech.len(),
                cfg.num_speech_streams
            )));
        }
        if text as usize >= cfg.text_table_size()
            || speech.iter().any(|&s| s as usize >= cfg.speech_table_size())
        {
            return Err(invalid("token id outside the model's tables"));
        }

        let c = cfg.hidden_size;
        let n = self.pos + 1;
        let mut x = m.input_embedding(self.pos, text, speech);
        let mut normed = vec![0.0; c];
        let mut qkv = vec![0.0; 3 * c];
        let mut attn = vec![0.0; c];
        let mut probs = vec![0.0; cfg.num_heads * n];
        let mut proj = vec![0.0; c];
        let mut ff = vec![0.0; cfg.ff_size()];

        for (l, block) in m.layout.blocks.iter().enumerate() {
            ops::layer_norm(&x, m.p(&block.ln1_gain), m.p(&block.ln1_bias), &mut normed);
            ops::linear(m.p(&block.qkv_weight), m.p(&block.qkv_bias), &normed, &mut qkv);
            self.keys[l].extend_from_slice(&qkv[c..2 * c]);
            self.values[l].extend_from_slice(&qkv[2 * c..]);
            ops::attend(
                &qkv[..c],
                &self.keys[l],
                &self.values[l],
                n,
                cfg.num_heads,
                &mut probs,
                &mut attn,
            );
            ops::linear(m.p(&block.attn_out_weight), m.p(&block.attn_out_bias), &attn, &mut proj);
            ops::axpy(1.0, &proj, &mut x);

            ops::layer_norm(&x, m.p(&block.ln2_gain), m.p(&block.ln2_bias), &mut normed);
            ops::linear(m.p(&block.ff_in_weight), m.p(&block.ff_in_bias), &normed, &mut ff);
            for v in ff.iter_mut() {
                *v = ops::gelu(*v);
            }
            ops::linear(m.p(&block.ff_out_weight), m.p(&block.ff_out_bias), &ff, &mut proj);
            ops::axpy(1.0, &proj, &mut x);
        }
        ops::layer_norm(
            &x,
            m.p(&m.layout.final_ln_gain),
            m.p(&m.layout.final_ln_bias),
            &mut normed,
        );
        self.pos += 1;
        Ok(m.heads(&normed))
    }
}
