//! Closed-form response latency for sequential and parallel pipelines.
//!
//! Sequential (CoM) generation must decode the text question (unless given),
//! the text answer and then enough speech tokens to fill the vocoder's
//! lookahead before the first audio comes out:
//!
//! ```text
//! L_com  = D_s2t + D_sq [+ D_asr] + (N_offset + N_ta [+ N_tq]) / P + D_t2s
//! L_pslm = [D_asr +] D_sq + N_offset / (P * S) + D_t2s
//! ```
//!
//! The parallel pipeline emits text and speech together, so its latency does
//! not depend on the answer length. Speech tokenization overlaps ASR there.

use std::fmt;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_length, ANSWER_QUANTILES, QUESTION_QUANTILES};
use crate::error::{invalid, Result};
use crate::vocoder::n_offset;

/// Delays in seconds and the decoding rate in tokens per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyParams {
    pub d_s2t: f64,
    pub d_sq: f64,
    pub d_asr: f64,
    pub d_t2s: f64,
    pub tokens_per_second: f64,
    pub receptive_field: usize,
}

impl Default for LatencyParams {
    fn default() -> Self {
        Self {
            d_s2t: 0.05,
            d_sq: 0.05,
            d_asr: 0.2,
            d_t2s: 0.01,
            tokens_per_second: 50.0,
            receptive_field: 26,
        }
    }
}

impl LatencyParams {
    pub fn validate(&self) -> Result<()> {
        let delays = [self.d_s2t, self.d_sq, self.d_asr, self.d_t2s];
        if delays.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(invalid("delays must be finite and non-negative"));
        }
        if !(self.tokens_per_second > 0.0 && self.tokens_per_second.is_finite()) {
            return Err(invalid("tokens per second must be positive"));
        }
        n_offset(self.receptive_field)?;
        Ok(())
    }

    fn offset(&self) -> f64 {
        (self.receptive_field / 2 + 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthRecord {
    pub tq: usize,
    pub ta: usize,
    pub sq: usize,
    pub sa: usize,
}

/// How the question reaches the sequential model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComInput {
    /// Speech only; the model transcribes the question itself.
    SqOnly,
    /// Speech plus an external ASR transcript.
    Asr,
    /// Speech plus the gold transcript.
    Gold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodSpec {
    Com(ComInput),
    Pslm { asr: bool, streams: usize },
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            MethodSpec::Com(ComInput::SqOnly) => write!(f, "CoM-SQ"),
            MethodSpec::Com(ComInput::Asr) => write!(f, "CoM-ASR"),
            MethodSpec::Com(ComInput::Gold) => write!(f, "CoM-Gold"),
            MethodSpec::Pslm { asr, streams } => {
                let input = if asr { "ASR" } else { "Gold" };
                if streams == 1 {
                    write!(f, "PSLM-{input}")
                } else {
                    write!(f, "PSLM-{streams}x-{input}")
                }
            }
        }
    }
}

pub fn latency_com(rec: &LengthRecord, params: &LatencyParams, input: ComInput) -> f64 {
    let question = match input {
        ComInput::SqOnly => rec.tq as f64,
        ComInput::Asr | ComInput::Gold => 0.0,
    };
    let asr = match input {
        ComInput::Asr => params.d_asr,
        _ => 0.0,
    };
    let decoded = params.offset() + rec.ta as f64 + question;
    params.d_s2t + params.d_sq + asr + decoded / params.tokens_per_second + params.d_t2s
}

pub fn latency_pslm(params: &LatencyParams, asr: bool, streams: usize) -> f64 {
    let asr = if asr { params.d_asr } else { 0.0 };
    asr + params.d_sq + params.offset() / (params.tokens_per_second * streams as f64) + params.d_t2s
}

pub fn latency(method: MethodSpec, rec: &LengthRecord, params: &LatencyParams) -> f64 {
    match method {
        MethodSpec::Com(input) => latency_com(rec, params, input),
        MethodSpec::Pslm { asr, streams } => latency_pslm(params, asr, streams),
    }
}

fn check_method(method: MethodSpec) -> Result<()> {
    match method {
        MethodSpec::Pslm { streams: 0, .. } => Err(invalid("stream count must be at least 1")),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetLatency {
    /// Lower-middle element for even counts.
    pub median: f64,
    pub all: Vec<f64>,
}

pub fn simulate_dataset(records: &[LengthRecord], params: &LatencyParams, method: MethodSpec) -> Result<DatasetLatency> {
    params.validate()?;
    check_method(method)?;
    if records.is_empty() {
        return Err(invalid("no length records"));
    }
    let all: Vec<f64> = records.iter().map(|r| latency(method, r, params)).collect();
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(DatasetLatency {
        median: sorted[(sorted.len() - 1) / 2],
        all,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub method: String,
    pub tokens_per_second: f64,
    pub answer_len: usize,
    pub seconds: f64,
}

/// Latency against answer length for each `(method, tokens per second)`.
/// The question length is held at zero.
pub fn latency_curve(
    answer_lens: &[usize],
    params: &LatencyParams,
    series: &[(MethodSpec, f64)],
) -> Result<Vec<CurvePoint>> {
    if answer_lens.is_empty() || series.is_empty() {
        return Err(invalid("empty latency grid"));
    }
    let mut out = Vec::with_capacity(answer_lens.len() * series.len());
    for &(method, tps) in series {
        check_method(method)?;
        let p = LatencyParams {
            tokens_per_second: tps,
            ..*params
        };
        p.validate()?;
        for &ta in answer_lens {
            let rec = LengthRecord { ta, ..Default::default() };
            out.push(CurvePoint {
                method: method.to_string(),
                tokens_per_second: tps,
                answer_len: ta,
                seconds: latency(method, &rec, &p),
            });
        }
    }
    Ok(out)
}

pub fn write_curve_csv(points: &[CurvePoint], mut out: impl Write) -> Result<()> {
    writeln!(out, "method,tps,n_ta,latency_s")?;
    for p in points {
        writeln!(out, "{},{},{},{}", p.method, p.tokens_per_second, p.answer_len, p.seconds)?;
    }
    Ok(())
}

/// Per-record latencies, one row per method and record.
pub fn write_dataset_csv(results: &[(MethodSpec, DatasetLatency)], mut out: impl Write) -> Result<()> {
    writeln!(out, "method,record,latency_s")?;
    for (method, result) in results {
        for (i, s) in result.all.iter().enumerate() {
            writeln!(out, "{method},{i},{s}")?;
        }
    }
    Ok(())
}

/// Median latency per method, one row each.
pub fn write_summary_csv(results: &[(MethodSpec, DatasetLatency)], mut out: impl Write) -> Result<()> {
    writeln!(out, "method,latency_s")?;
    for (method, result) in results {
        writeln!(out, "{method},{}", result.median)?;
    }
    Ok(())
}

/// The sequential and parallel configurations compared in the latency table.
pub const TABLE_METHODS: [MethodSpec; 7] = [
    MethodSpec::Com(ComInput::SqOnly),
    MethodSpec::Com(ComInput::Asr),
    MethodSpec::Com(ComInput::Gold),
    MethodSpec::Pslm { asr: false, streams: 1 },
    MethodSpec::Pslm { asr: true, streams: 1 },
    MethodSpec::Pslm { asr: false, streams: 2 },
    MethodSpec::Pslm { asr: false, streams: 3 },
];

/// Speech-question length quantiles (min, quartiles, max) of the reference corpus.
pub const SPEECH_QUESTION_QUANTILES: [f64; 5] = [34.0, 214.0, 354.0, 577.0, 1861.0];
/// Speech-answer length quantiles of the reference corpus.
pub const SPEECH_ANSWER_QUANTILES: [f64; 5] = [27.0, 179.0, 340.0, 563.0, 1697.0];

/// Length records drawn independently per field from the reference corpus
/// quantiles at full scale.
pub fn reference_length_records(n: usize, seed: u64) -> Vec<LengthRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |q: &[f64; 5]| sample_length(q, q[4] as usize, &mut rng);
    (0..n)
        .map(|_| LengthRecord {
            tq: draw(&QUESTION_QUANTILES),
            ta: draw(&ANSWER_QUANTILES),
            sq: draw(&SPEECH_QUESTION_QUANTILES),
            sa: draw(&SPEECH_ANSWER_QUANTILES),
        })
        .collect()
}
