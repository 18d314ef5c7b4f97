//! Forward pass that records activations, and the matching reverse pass.

use super::{ops, FrameLogits, FrameView, ModelState};
use crate::error::Result;

struct BlockTrace {
    x_in: Vec<f64>,
    ln1: Vec<f64>,
    ln1_stats: Vec<(f64, f64)>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Row `t` holds `num_heads * (t + 1)` probabilities starting at `H * t(t+1)/2`.
    probs: Vec<f64>,
    attn: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: Vec<f64>,
    ln2_stats: Vec<(f64, f64)>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
}

/// Activations of one forward pass, consumed by [`backward`].
pub struct ForwardTrace {
    text: Vec<u32>,
    speech: Vec<Vec<u32>>,
    blocks: Vec<BlockTrace>,
    x_final: Vec<f64>,
    final_stats: Vec<(f64, f64)>,
    final_normed: Vec<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

fn prob_offset(heads: usize, t: usize) -> usize {
    heads * t * (t + 1) / 2
}

/// Full-sequence forward pass keeping every activation needed for gradients.
pub fn forward_traced(
    model: &ModelState,
    frames: &FrameView<'_>,
) -> Result<(ForwardTrace, Vec<FrameLogits>)> {
    model.check_frames(frames)?;
    let cfg = &model.config;
    let (c, f, h) = (cfg.hidden_size, cfg.ff_size(), cfg.num_heads);
    let t_len = frames.len();

    let mut x = Vec::with_capacity(t_len * c);
    for t in 0..t_len {
        x.extend(model.input_embedding(t, frames.text[t], &frames.speech_frame(t)));
    }

    let mut blocks = Vec::with_capacity(cfg.num_layers);
    for block in &model.layout.blocks {
        let mut ln1 = vec![0.0; t_len * c];
        let ln1_stats = layer_norm_rows(&x, model.p(&block.ln1_gain), model.p(&block.ln1_bias), &mut ln1);
        let mut qkv = vec![0.0; t_len * 3 * c];
        ops::linear_rows(model.p(&block.qkv_weight), model.p(&block.qkv_bias), &ln1, c, &mut qkv);
        let mut q = Vec::with_capacity(t_len * c);
        let mut k = Vec::with_capacity(t_len * c);
        let mut v = Vec::with_capacity(t_len * c);
        for row in qkv.chunks_exact(3 * c) {
            q.extend_from_slice(&row[..c]);
            k.extend_from_slice(&row[c..2 * c]);
            v.extend_from_slice(&row[2 * c..]);
        }

        let mut probs = vec![0.0; prob_offset(h, t_len)];
        let mut attn = vec![0.0; t_len * c];
        for t in 0..t_len {
            let n = t + 1;
            let row = t * c..(t + 1) * c;
            let p_off = prob_offset(h, t);
            ops::attend(
                &q[row.clone()],
                &k[..n * c],
                &v[..n * c],
                n,
                h,
                &mut probs[p_off..p_off + h * n],
                &mut attn[row],
            );
        }
        let mut proj = vec![0.0; t_len * c];
        ops::linear_rows(model.p(&block.attn_out_weight), model.p(&block.attn_out_bias), &attn, c, &mut proj);
        let mut x_mid = x.clone();
        ops::axpy(1.0, &proj, &mut x_mid);

        let mut ln2 = vec![0.0; t_len * c];
        let ln2_stats = layer_norm_rows(&x_mid, model.p(&block.ln2_gain), model.p(&block.ln2_bias), &mut ln2);
        let mut ff_pre = vec![0.0; t_len * f];
        ops::linear_rows(model.p(&block.ff_in_weight), model.p(&block.ff_in_bias), &ln2, c, &mut ff_pre);
        let ff_act: Vec<f64> = ff_pre.iter().map(|&z| ops::gelu(z)).collect();
        ops::linear_rows(model.p(&block.ff_out_weight), model.p(&block.ff_out_bias), &ff_act, f, &mut proj);
        let mut x_out = x_mid.clone();
        ops::axpy(1.0, &proj, &mut x_out);

        blocks.push(BlockTrace {
            x_in: std::mem::replace(&mut x, x_out),
            ln1,
            ln1_stats,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            ln2,
            ln2_stats,
            ff_pre,
            ff_act,
        });
    }

    let lay = &model.layout;
    let mut final_normed = vec![0.0; t_len * c];
    let final_stats = layer_norm_rows(&x, model.p(&lay.final_ln_gain), model.p(&lay.final_ln_bias), &mut final_normed);
    let vt = cfg.text_table_size();
    let mut text_logits = vec![0.0; t_len * vt];
    ops::linear_rows(model.p(&lay.text_head_weight), model.p(&lay.text_head_bias), &final_normed, c, &mut text_logits);
    let vs = cfg.speech_table_size();
    let speech_logits: Vec<Vec<f64>> = (0..cfg.num_speech_streams)
        .map(|s| {
            let mut out = vec![0.0; t_len * vs];
            ops::linear_rows(
                model.p(&lay.speech_head_weights[s]),
                model.p(&lay.speech_head_biases[s]),
                &final_normed,
                c,
                &mut out,
            );
            out
        })
        .collect();
    let logits = (0..t_len)
        .map(|t| FrameLogits {
            text: text_logits[t * vt..(t + 1) * vt].to_vec(),
            speech: speech_logits.iter().map(|l| l[t * vs..(t + 1) * vs].to_vec()).collect(),
        })
        .collect();

    let trace = ForwardTrace {
        text: frames.text.to_vec(),
        speech: frames.speech.iter().map(|s| s.to_vec()).collect(),
        blocks,
        x_final: x,
        final_stats,
        final_normed,
    };
    Ok((trace, logits))
}

/// Gradient of `sum_t <dlogits[t], logits[t]>` with respect to every
/// parameter, laid out like [`ModelState::params`].
pub fn backward(model: &ModelState, trace: &ForwardTrace, dlogits: &[FrameLogits]) -> Vec<f64> {
    let cfg = &model.config;
    let lay = &model.layout;
    let (c, f, h) = (cfg.hidden_size, cfg.ff_size(), cfg.num_heads);
    let hd = c / h;
    let scale = 1.0 / (hd as f64).sqrt();
    let t_len = trace.len();
    assert_eq!(dlogits.len(), t_len, "one gradient per frame");

    let mut grad = vec![0.0; model.num_params()];
    let mut dx = vec![0.0; t_len * c];

    // Heads and final layer norm.
    {
        let mut dnormed = vec![0.0; t_len * c];
        let dtext: Vec<f64> = dlogits.iter().flat_map(|d| d.text.iter().copied()).collect();
        let (dw, db) = split_two(&mut grad, &lay.text_head_weight, &lay.text_head_bias);
        ops::linear_rows_backward(model.p(&lay.text_head_weight), &trace.final_normed, &dtext, c, dw, db, &mut dnormed);
        for s in 0..cfg.num_speech_streams {
            let dspeech: Vec<f64> = dlogits.iter().flat_map(|d| d.speech[s].iter().copied()).collect();
            let (dw, db) = split_two(&mut grad, &lay.speech_head_weights[s], &lay.speech_head_biases[s]);
            ops::linear_rows_backward(
                model.p(&lay.speech_head_weights[s]),
                &trace.final_normed,
                &dspeech,
                c,
                dw,
                db,
                &mut dnormed,
            );
        }
        let (dg, dbias) = split_two(&mut grad, &lay.final_ln_gain, &lay.final_ln_bias);
        layer_norm_rows_backward(
            &trace.x_final,
            &trace.final_stats,
            model.p(&lay.final_ln_gain),
            &dnormed,
            &mut dx,
            dg,
            dbias,
        );
    }

    for (block, bt) in lay.blocks.iter().zip(&trace.blocks).rev() {
        // Feed-forward half: x_out = x_mid + W2 gelu(W1 ln2(x_mid)).
        let mut dx_mid = dx.clone();
        {
            let mut dact = vec![0.0; t_len * f];
            let (dw, db) = split_two(&mut grad, &block.ff_out_weight, &block.ff_out_bias);
            ops::linear_rows_backward(model.p(&block.ff_out_weight), &bt.ff_act, &dx, f, dw, db, &mut dact);
            for (d, &z) in dact.iter_mut().zip(&bt.ff_pre) {
                *d *= ops::gelu_grad(z);
            }
            let mut dln2 = vec![0.0; t_len * c];
            let (dw, db) = split_two(&mut grad, &block.ff_in_weight, &block.ff_in_bias);
            ops::linear_rows_backward(model.p(&block.ff_in_weight), &bt.ln2, &dact, c, dw, db, &mut dln2);
            let (dg, dbias) = split_two(&mut grad, &block.ln2_gain, &block.ln2_bias);
            layer_norm_rows_backward(&bt.x_mid, &bt.ln2_stats, model.p(&block.ln2_gain), &dln2, &mut dx_mid, dg, dbias);
        }

        // Attention half: x_mid = x_in + Wo attn(ln1(x_in)).
        let mut dx_in = dx_mid.clone();
        let mut dattn = vec![0.0; t_len * c];
        let (dw, db) = split_two(&mut grad, &block.attn_out_weight, &block.attn_out_bias);
        ops::linear_rows_backward(model.p(&block.attn_out_weight), &bt.attn, &dx_mid, c, dw, db, &mut dattn);
        let mut dq = vec![0.0; t_len * c];
        let mut dk = vec![0.0; t_len * c];
        let mut dv = vec![0.0; t_len * c];
        let mut dp = vec![0.0; t_len];
        for t in 0..t_len {
            let n = t + 1;
            let p_off = prob_offset(h, t);
            for head in 0..h {
                let hs = head * hd..(head + 1) * hd;
                let p = &bt.probs[p_off + head * n..p_off + (head + 1) * n];
                let dy = &dattn[t * c + hs.start..t * c + hs.end];
                let mut weighted = 0.0;
                for j in 0..n {
                    let vj = j * c + hs.start..j * c + hs.end;
                    ops::axpy(p[j], dy, &mut dv[vj.clone()]);
                    dp[j] = ops::dot(dy, &bt.v[vj]);
                    weighted += p[j] * dp[j];
                }
                for j in 0..n {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = j * c + hs.start..j * c + hs.end;
                    let qt = t * c + hs.start..t * c + hs.end;
                    ops::axpy(ds, &bt.k[kj.clone()], &mut dq[qt.clone()]);
                    ops::axpy(ds, &bt.q[qt], &mut dk[kj]);
                }
            }
        }
        let mut dqkv = Vec::with_capacity(t_len * 3 * c);
        for t in 0..t_len {
            let row = t * c..(t + 1) * c;
            dqkv.extend_from_slice(&dq[row.clone()]);
            dqkv.extend_from_slice(&dk[row.clone()]);
            dqkv.extend_from_slice(&dv[row]);
        }
        let mut dln1 = vec![0.0; t_len * c];
        let (dw, db) = split_two(&mut grad, &block.qkv_weight, &block.qkv_bias);
        ops::linear_rows_backward(model.p(&block.qkv_weight), &bt.ln1, &dqkv, c, dw, db, &mut dln1);
        let (dg, dbias) = split_two(&mut grad, &block.ln1_gain, &block.ln1_bias);
        layer_norm_rows_backward(&bt.x_in, &bt.ln1_stats, model.p(&block.ln1_gain), &dln1, &mut dx_in, dg, dbias);
        dx = dx_in;
    }

    // Embeddings receive the input gradient directly.
    for t in 0..t_len {
        let row = &dx[t * c..(t + 1) * c];
        let tok = trace.text[t] as usize;
        let start = lay.text_embedding.start + tok * c;
        ops::axpy(1.0, row, &mut grad[start..start + c]);
        for (s, stream) in trace.speech.iter().enumerate() {
            let start = lay.speech_embeddings[s].start + stream[t] as usize * c;
            ops::axpy(1.0, row, &mut grad[start..start + c]);
        }
    }
    grad
}

fn layer_norm_rows(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> Vec<(f64, f64)> {
    let c = gain.len();
    x.chunks_exact(c)
        .zip(out.chunks_exact_mut(c))
        .map(|(xr, or)| ops::layer_norm(xr, gain, bias, or))
        .collect()
}

fn layer_norm_rows_backward(
    x: &[f64],
    stats: &[(f64, f64)],
    gain: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let c = gain.len();
    for (t, &(mean, rstd)) in stats.iter().enumerate() {
        let row = t * c..(t + 1) * c;
        ops::layer_norm_backward(&x[row.clone()], mean, rstd, gain, &dy[row.clone()], &mut dx[row], dgain, dbias);
    }
}

/// Two disjoint mutable views into the gradient buffer; `a` must precede `b`.
fn split_two<'g>(
    grad: &'g mut [f64],
    a: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'g mut [f64], &'g mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = grad.split_at_mut(b.start);
    (&mut left[a.clone()], &mut right[..b.len()])
}
