//! Weighted multi-stream cross-entropy, Adam training, and a
//! finite-difference gradient check.
//!
//! Logits at frame `t` score the tokens of frame `t + 1`, so a sequence of
//! `L` frames contributes `L - 1` predictions per stream. Every prediction
//! counts, prompt frames and pad tokens included. Each stream's loss is the
//! mean cross-entropy over those predictions, and the total is
//!
//! ```text
//! total = text_loss + w * (speech_loss_1 + ... + speech_loss_S)
//! ```
//!
//! with `w = 1/S` for the weighted loss and `w = 1` otherwise.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{backward, forward_traced, AsFrames, FrameLogits, FrameView, ModelState, ParamGroup};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub text_loss: f64,
    pub speech_losses: Vec<f64>,
    pub total: f64,
    pub speech_weight: f64,
}

impl LossBreakdown {
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len() as f64;
        let streams = items[0].speech_losses.len();
        LossBreakdown {
            text_loss: items.iter().map(|l| l.text_loss).sum::<f64>() / n,
            speech_losses: (0..streams)
                .map(|s| items.iter().map(|l| l.speech_losses[s]).sum::<f64>() / n)
                .collect(),
            total: items.iter().map(|l| l.total).sum::<f64>() / n,
            speech_weight: items[0].speech_weight,
        }
    }
}

/// Weight applied to each speech stream's loss.
pub fn speech_weight(streams: usize, weighted: bool) -> f64 {
    if weighted && streams > 0 {
        1.0 / streams as f64
    } else {
        1.0
    }
}

/// Loss of `logits` against the next-frame tokens of `targets`.
pub fn weighted_loss<F: AsFrames + ?Sized>(
    logits: &[FrameLogits],
    targets: &F,
    weighted: bool,
) -> Result<LossBreakdown> {
    Ok(loss_and_dlogits(logits, &targets.as_frames(), weighted, false)?.0)
}

/// Cross-entropy of one logit vector against `target`, and optionally
/// `scale * (softmax - onehot)`.
fn cross_entropy(logits: &[f64], target: u32, grad: Option<(&mut Vec<f64>, f64)>) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    if let Some((g, scale)) = grad {
        g.clear();
        g.extend(logits.iter().map(|&z| scale * (z - log_z).exp()));
        g[target as usize] -= scale;
    }
    log_z - logits[target as usize]
}

fn loss_and_dlogits(
    logits: &[FrameLogits],
    frames: &FrameView<'_>,
    weighted: bool,
    with_grad: bool,
) -> Result<(LossBreakdown, Vec<FrameLogits>)> {
    let len = frames.len();
    if logits.len() != len {
        return Err(invalid(format!(
            "{} logit frames for {} target frames",
            logits.len(),
            len
        )));
    }
    if len < 2 {
        return Err(invalid("loss needs at least two frames"));
    }
    let streams = frames.speech.len();
    if logits.iter().any(|l| l.speech.len() != streams) {
        return Err(invalid("logits and targets have different stream counts"));
    }
    let w = speech_weight(streams, weighted);
    let preds = (len - 1) as f64;
    let mut text_loss = 0.0;
    let mut speech_losses = vec![0.0; streams];
    let mut grads = Vec::new();
    for t in 0..len - 1 {
        let lt = &logits[t];
        let mut g = FrameLogits {
            text: Vec::new(),
            speech: vec![Vec::new(); streams],
        };
        text_loss += cross_entropy(&lt.text, frames.text[t + 1], with_grad.then_some((&mut g.text, 1.0 / preds)));
        for s in 0..streams {
            speech_losses[s] += cross_entropy(
                &lt.speech[s],
                frames.speech[s][t + 1],
                with_grad.then_some((&mut g.speech[s], w / preds)),
            );
        }
        if with_grad {
            grads.push(g);
        }
    }
    if with_grad {
        // The last frame predicts nothing.
        let last = &logits[len - 1];
        grads.push(FrameLogits {
            text: vec![0.0; last.text.len()],
            speech: last.speech.iter().map(|v| vec![0.0; v.len()]).collect(),
        });
    }
    text_loss /= preds;
    for l in &mut speech_losses {
        *l /= preds;
    }
    let total = text_loss + w * speech_losses.iter().sum::<f64>();
    Ok((
        LossBreakdown {
            text_loss,
            speech_losses,
            total,
            speech_weight: w,
        },
        grads,
    ))
}

/// Loss of `model` on one example together with its gradient.
pub fn loss_and_grad<F: AsFrames + ?Sized>(
    model: &ModelState,
    example: &F,
    weighted: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let frames = example.as_frames();
    let (trace, logits) = forward_traced(model, &frames)?;
    let (loss, dlogits) = loss_and_dlogits(&logits, &frames, weighted, true)?;
    Ok((loss, backward(model, &trace, &dlogits)))
}

/// Loss of `model` on one example (no gradient).
pub fn evaluate_loss<F: AsFrames + ?Sized>(
    model: &ModelState,
    example: &F,
    weighted: bool,
) -> Result<LossBreakdown> {
    let frames = example.as_frames();
    let logits = crate::model::forward_frames(model, &frames)?;
    Ok(loss_and_dlogits(&logits, &frames, weighted, false)?.0)
}

/// Mean loss over a corpus.
pub fn corpus_loss<F: AsFrames>(model: &ModelState, corpus: &[F], weighted: bool) -> Result<LossBreakdown> {
    if corpus.is_empty() {
        return Err(invalid("empty corpus"));
    }
    let items = corpus
        .iter()
        .map(|e| evaluate_loss(model, e, weighted))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&items))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Scale speech losses by `1/S`.
    pub weighted_loss: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            learning_rate: 3e-3,
            weighted_loss: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Plain Adam without weight decay or schedule.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Resumable training state: optimizer moments and the data order.
///
/// Batches are drawn without replacement from a seeded shuffle of the
/// corpus, reshuffled every epoch.
pub struct Trainer {
    cfg: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl Trainer {
    pub fn new(model: &ModelState, corpus_len: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if corpus_len == 0 {
            return Err(invalid("training corpus is empty"));
        }
        Ok(Self {
            cfg: cfg.clone(),
            adam: Adam::new(model.num_params(), cfg.learning_rate),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: (0..corpus_len).collect(),
            cursor: corpus_len,
            step: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Runs `steps` more optimizer steps and returns their mean batch losses.
    pub fn run<F: AsFrames>(&mut self, model: &mut ModelState, corpus: &[F], steps: usize) -> Result<Vec<LossBreakdown>> {
        if corpus.len() != self.order.len() {
            return Err(invalid("corpus size changed between training runs"));
        }
        for example in corpus {
            model.check_frames(&example.as_frames())?;
        }
        let batch = self.cfg.batch_size;
        let mut history = Vec::with_capacity(steps);
        let mut grad = vec![0.0; model.num_params()];
        let mut losses = Vec::with_capacity(batch);
        for _ in 0..steps {
            grad.fill(0.0);
            losses.clear();
            for _ in 0..batch {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let (loss, g) = loss_and_grad(model, &corpus[self.order[self.cursor]], self.cfg.weighted_loss)?;
                self.cursor += 1;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi;
                }
                losses.push(loss);
            }
            let mean = LossBreakdown::mean(&losses);
            if !mean.total.is_finite() {
                return Err(Error::TrainingDiverged { step: self.step, loss: mean.total });
            }
            let inv = 1.0 / batch as f64;
            for g in grad.iter_mut() {
                *g *= inv;
            }
            self.adam.step(model.params_mut(), &grad);
            log::debug!("step {}: total {:.5} text {:.5}", self.step, mean.total, mean.text_loss);
            history.push(mean);
            self.step += 1;
        }
        Ok(history)
    }
}

/// Trains `model` in place for `cfg.steps` steps and returns the per-step
/// mean batch loss.
pub fn train<F: AsFrames>(
    model: &mut ModelState,
    corpus: &[F],
    cfg: &TrainConfig,
) -> Result<Vec<LossBreakdown>> {
    let mut trainer = Trainer::new(model, corpus.len(), cfg)?;
    trainer.run(model, corpus, cfg.steps)
}

/// When to stop [`train_until_plateau`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauRule {
    /// Steps between full-corpus loss evaluations.
    pub check_every: usize,
    /// Stop once one check interval improves the corpus loss by less than
    /// this fraction.
    pub min_rel_improvement: f64,
}

impl Default for PlateauRule {
    fn default() -> Self {
        Self {
            check_every: 100,
            min_rel_improvement: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlateauRun {
    pub history: Vec<LossBreakdown>,
    /// Full-corpus loss after each check interval, keyed by step count.
    pub checkpoints: Vec<(usize, LossBreakdown)>,
    pub plateaued: bool,
}

impl PlateauRun {
    pub fn final_loss(&self) -> &LossBreakdown {
        &self.checkpoints.last().expect("at least one check").1
    }
}

/// Trains until the full-corpus loss of the run's own objective stops
/// improving, or `cfg.steps` steps have been taken.
pub fn train_until_plateau<F: AsFrames>(
    model: &mut ModelState,
    corpus: &[F],
    cfg: &TrainConfig,
    rule: &PlateauRule,
) -> Result<PlateauRun> {
    if rule.check_every == 0 {
        return Err(invalid("plateau check interval must be positive"));
    }
    let mut trainer = Trainer::new(model, corpus.len(), cfg)?;
    let mut history = Vec::with_capacity(cfg.steps);
    let mut checkpoints: Vec<(usize, LossBreakdown)> = Vec::new();
    let mut plateaued = false;
    while trainer.steps_done() < cfg.steps {
        let chunk = rule.check_every.min(cfg.steps - trainer.steps_done());
        history.extend(trainer.run(model, corpus, chunk)?);
        let loss = corpus_loss(model, corpus, cfg.weighted_loss)?;
        log::info!("step {}: corpus loss {:.6} (text {:.6})", trainer.steps_done(), loss.total, loss.text_loss);
        let prev = checkpoints.last().map(|c| c.1.total);
        checkpoints.push((trainer.steps_done(), loss));
        if let Some(prev) = prev {
            let cur = checkpoints.last().expect("just pushed").1.total;
            if (prev - cur) / prev < rule.min_rel_improvement {
                plateaued = true;
                break;
            }
        }
    }
    if checkpoints.is_empty() {
        checkpoints.push((0, corpus_loss(model, corpus, cfg.weighted_loss)?));
    }
    Ok(PlateauRun {
        history,
        checkpoints,
        plateaued,
    })
}

/// Writes `step,text_loss,speech_loss_1..S,total` rows.
pub fn write_loss_csv(history: &[LossBreakdown], mut out: impl Write) -> Result<()> {
    let streams = history.first().map_or(0, |l| l.speech_losses.len());
    let mut header = String::from("step,text_loss");
    for s in 1..=streams {
        header.push_str(&format!(",speech_loss_{s}"));
    }
    header.push_str(",total");
    writeln!(out, "{header}")?;
    for (step, l) in history.iter().enumerate() {
        let mut row = format!("{step},{}", l.text_loss);
        for s in &l.speech_losses {
            row.push_str(&format!(",{s}"));
        }
        row.push_str(&format!(",{}", l.total));
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Denominator floor of the relative error, so coordinates whose gradient
/// is at round-off level are judged by absolute error instead.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub samples: usize,
    pub seed: u64,
    pub weighted: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            samples: 256,
            seed: 0,
            weighted: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Maximum relative error per parameter group.
    pub per_group: Vec<(ParamGroup, f64, usize)>,
}

/// Compares the analytic gradient against central finite differences and
/// returns the maximum relative error.
pub fn gradcheck<F: AsFrames + ?Sized>(model: &ModelState, example: &F, epsilon: f64) -> Result<f64> {
    let opts = GradCheckOptions { epsilon, ..Default::default() };
    Ok(gradcheck_with(model, example, &opts, |_, _| {})?.max_rel_error)
}

/// Like [`gradcheck`], but lets the caller tamper with the analytic gradient
/// before the comparison (used for negative controls).
pub fn gradcheck_with<F: AsFrames + ?Sized>(
    model: &ModelState,
    example: &F,
    opts: &GradCheckOptions,
    tamper: impl FnOnce(&mut [f64], &crate::model::ParamLayout),
) -> Result<GradCheckReport> {
    let frames = example.as_frames();
    let (_, mut analytic) = loss_and_grad(model, example, opts.weighted)?;
    tamper(&mut analytic, model.layout());
    let coords = sample_coordinates(model, &frames, opts.samples, opts.seed);

    let mut probe = model.clone();
    let mut per_group: Vec<(ParamGroup, f64, usize)> = Vec::new();
    let mut max_rel = 0.0f64;
    for &(group, i) in &coords {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + opts.epsilon;
        let up = evaluate_loss(&probe, example, opts.weighted)?.total;
        probe.params_mut()[i] = orig - opts.epsilon;
        let down = evaluate_loss(&probe, example, opts.weighted)?.total;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * opts.epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        max_rel = max_rel.max(rel);
        match per_group.iter_mut().find(|(g, _, _)| *g == group) {
            Some(entry) => {
                entry.1 = entry.1.max(rel);
                entry.2 += 1;
            }
            None => per_group.push((group, rel, 1)),
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coordinates: coords.len(),
        per_group,
    })
}

/// At least `samples` coordinates, spread over every tensor. Embedding
/// coordinates are drawn from rows of tokens that occur in the example.
fn sample_coordinates(
    model: &ModelState,
    frames: &FrameView<'_>,
    samples: usize,
    seed: u64,
) -> Vec<(ParamGroup, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = model.config().hidden_size;
    let tensors = model.layout().tensors();
    let per_tensor = samples.div_ceil(tensors.len()).max(2);
    let mut out = Vec::with_capacity(per_tensor * tensors.len());
    for (_, group, range) in tensors {
        for _ in 0..per_tensor {
            let idx = match group {
                ParamGroup::TextEmbedding => {
                    let tok = frames.text[rng.random_range(0..frames.len())] as usize;
                    range.start + tok * c + rng.random_range(0..c)
                }
                ParamGroup::SpeechEmbedding(s) => {
                    let tok = frames.speech[s][rng.random_range(0..frames.len())] as usize;
                    range.start + tok * c + rng.random_range(0..c)
                }
                _ => rng.random_range(range.clone()),
            };
            out.push((group, idx));
        }
    }
    out
}
