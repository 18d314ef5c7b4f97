//! Streaming detokenizer scheduling and a toy waveform synthesizer.
//!
//! A vocoder with receptive field `R` produces the samples of token `i` from
//! the tokens in `[i - R/2, i + R/2]` (integer halving, clamped at the sequence
//! edges). Streaming synthesis can therefore emit fragment `i` as soon as
//! token `i + R/2` has been decoded, so the first audio needs
//! `R/2 + 1` tokens.

use std::io::Write;
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::streams::SpeechToken;

pub const SAMPLE_RATE: u32 = 24_000;
/// Upsampling factors of the reference vocoder; their product is the number
/// of waveform samples per speech token.
pub const UPSAMPLE_RATES: [usize; 4] = [8, 6, 5, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocoderSpec {
    /// Receptive field in tokens.
    pub receptive_field: usize,
    /// Samples per token.
    pub upsample: usize,
}

impl Default for VocoderSpec {
    fn default() -> Self {
        Self {
            receptive_field: 26,
            upsample: UPSAMPLE_RATES.iter().product(),
        }
    }
}

impl VocoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.receptive_field == 0 {
            return Err(invalid("receptive field must be at least 1"));
        }
        if self.upsample == 0 {
            return Err(invalid("upsample factor must be at least 1"));
        }
        Ok(())
    }

    /// Tokens of context on either side of the centre token.
    pub fn half_window(&self) -> usize {
        self.receptive_field / 2
    }
}

/// Tokens that must be decoded before the first fragment can be synthesized.
pub fn n_offset(receptive_field: usize) -> Result<usize> {
    if receptive_field == 0 {
        return Err(invalid("receptive field must be at least 1"));
    }
    Ok(receptive_field / 2 + 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FragmentPlan {
    pub index: usize,
    /// Inclusive token interval read by this fragment.
    pub window: (usize, usize),
    /// Tokens that must be available before the fragment can be emitted.
    pub ready_after: usize,
    pub samples: std::ops::Range<usize>,
}

pub fn fragment_schedule(len: usize, spec: &VocoderSpec) -> Result<Vec<FragmentPlan>> {
    spec.validate()?;
    if len == 0 {
        return Err(invalid("cannot schedule an empty token sequence"));
    }
    let h = spec.half_window();
    let u = spec.upsample;
    Ok((0..len)
        .map(|i| FragmentPlan {
            index: i,
            window: (i.saturating_sub(h), (i + h).min(len - 1)),
            ready_after: (i + h + 1).min(len),
            samples: i * u..(i + 1) * u,
        })
        .collect())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Frequency in Hz and phase in radians assigned to a token.
fn oscillator(token: SpeechToken) -> (f64, f64) {
    let h = splitmix64(token as u64);
    let unit = |bits: u64| (bits & 0xffff_ffff) as f64 / 4_294_967_296.0;
    (80.0 + 320.0 * unit(h), std::f64::consts::TAU * unit(h >> 32))
}

/// `upsample` samples for the token at `window[center]`: a blend of one
/// oscillator per window token, weighted by distance from the centre.
/// Samples lie in `[-1, 1]`.
pub fn toy_waveform(window: &[SpeechToken], center: usize, upsample: usize) -> Vec<f64> {
    assert!(center < window.len(), "centre index outside window");
    let oscs: Vec<(f64, f64, f64)> = window
        .iter()
        .enumerate()
        .map(|(k, &tok)| {
            let (f, phase) = oscillator(tok);
            (f, phase, 1.0 / (1.0 + k.abs_diff(center) as f64))
        })
        .collect();
    let total: f64 = oscs.iter().map(|o| o.2).sum();
    (0..upsample)
        .map(|j| {
            let t = j as f64 / SAMPLE_RATE as f64;
            let v: f64 = oscs
                .iter()
                .map(|&(f, phase, w)| w * (std::f64::consts::TAU * f * t + phase).sin())
                .sum();
            (v / total).clamp(-1.0, 1.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub index: usize,
    /// Tokens received when the fragment was emitted.
    pub tokens_seen: usize,
    pub samples: Vec<f64>,
}

/// Incremental synthesizer: push tokens as they are decoded and collect the
/// fragments that become ready.
#[derive(Debug, Clone)]
pub struct StreamingSynthesizer {
    spec: VocoderSpec,
    tokens: Vec<SpeechToken>,
    next: usize,
}

impl StreamingSynthesizer {
    pub fn new(spec: VocoderSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            tokens: Vec::new(),
            next: 0,
        })
    }

    fn emit(&mut self, end: usize) -> Fragment {
        let i = self.next;
        let h = self.spec.half_window();
        let lo = i.saturating_sub(h);
        let hi = (i + h).min(end - 1);
        self.next += 1;
        Fragment {
            index: i,
            tokens_seen: self.tokens.len(),
            samples: toy_waveform(&self.tokens[lo..=hi], i - lo, self.spec.upsample),
        }
    }

    pub fn push(&mut self, token: SpeechToken) -> Vec<Fragment> {
        self.tokens.push(token);
        let h = self.spec.half_window();
        let mut out = Vec::new();
        while self.next + h < self.tokens.len() {
            out.push(self.emit(self.tokens.len()));
        }
        out
    }

    /// Flushes the fragments whose lookahead runs past the end of the input.
    pub fn finish(mut self) -> Vec<Fragment> {
        let n = self.tokens.len();
        let mut out = Vec::new();
        while self.next < n {
            out.push(self.emit(n));
        }
        out
    }
}

/// Whole-sequence synthesis.
pub fn synthesize_offline(tokens: &[SpeechToken], spec: &VocoderSpec) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let plans = fragment_schedule(tokens.len(), spec)?;
    Ok(plans
        .iter()
        .flat_map(|p| toy_waveform(&tokens[p.window.0..=p.window.1], p.index - p.window.0, spec.upsample))
        .collect())
}

/// Runs `source` on a producer thread and synthesizes on the calling thread,
/// connected by a bounded channel of `capacity` tokens.
pub fn stream_through_channel<I>(source: I, spec: VocoderSpec, capacity: usize) -> Result<Vec<Fragment>>
where
    I: IntoIterator<Item = SpeechToken> + Send,
{
    let mut synth = StreamingSynthesizer::new(spec)?;
    let (tx, rx) = mpsc::sync_channel(capacity);
    let mut fragments = Vec::new();
    thread::scope(|scope| {
        scope.spawn(move || {
            for tok in source {
                if tx.send(tok).is_err() {
                    break;
                }
            }
        });
        for tok in rx {
            fragments.extend(synth.push(tok));
        }
    });
    fragments.extend(synth.finish());
    Ok(fragments)
}

/// Writes mono 16-bit PCM WAV at [`SAMPLE_RATE`].
pub fn write_wav(samples: &[f64], mut out: impl Write) -> Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let byte_rate = SAMPLE_RATE * 2;
    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_len).to_le_bytes())?;
    out.write_all(b"WAVEfmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?; // PCM
    out.write_all(&1u16.to_le_bytes())?; // mono
    out.write_all(&SAMPLE_RATE.to_le_bytes())?;
    out.write_all(&byte_rate.to_le_bytes())?;
    out.write_all(&2u16.to_le_bytes())?; // block align
    out.write_all(&16u16.to_le_bytes())?;
    out.write_all(b"data")?;
    out.write_all(&data_len.to_le_bytes())?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}
