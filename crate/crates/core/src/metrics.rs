//! Character error rate between generated text and transcribed speech, and
//! failure accounting.
//!
//! The transcription of a decoded speech answer is the exact inverse of the
//! toy TTS. Runs of speech tokens that match no signature become a symbol
//! that equals nothing, so they cost one substitution or insertion each.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{QAPair, ToyTts};
use crate::decode::{decode_question, DecodeMode, DecodeOutcome, FailureKind, SamplingParams};
use crate::error::{invalid, Result};
use crate::model::ModelState;

fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let a: Vec<&T> = reference.iter().collect();
    let b: Vec<&T> = hypothesis.iter().collect();
    strsim::generic_levenshtein(&a, &b)
}

/// Unit-cost edit distance divided by the reference length, in percent.
pub fn cer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(invalid("character error rate needs a non-empty reference"));
    }
    Ok(100.0 * edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FailureCounts {
    pub no_eos: usize,
    pub wrong_modality: usize,
}

impl FailureCounts {
    pub fn total(&self) -> usize {
        self.no_eos + self.wrong_modality
    }
}

/// Percentage of failed outcomes and the per-kind counts.
pub fn failure_rate(outcomes: &[DecodeOutcome]) -> Result<(f64, FailureCounts)> {
    if outcomes.is_empty() {
        return Err(invalid("no decode outcomes"));
    }
    let mut counts = FailureCounts::default();
    for o in outcomes {
        match o.failure {
            Some(FailureKind::NoEos) => counts.no_eos += 1,
            Some(FailureKind::WrongModality) => counts.wrong_modality += 1,
            None => {}
        }
    }
    Ok((100.0 * counts.total() as f64 / outcomes.len() as f64, counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub n_samples: usize,
    /// Samples that decoded without failure and entered the CER.
    pub n_scored: usize,
    /// Corpus-level CER over scored samples: total edits over total reference
    /// symbols. `None` when no scored sample has a non-empty text answer.
    pub cer: Option<f64>,
    pub failure_rate: f64,
    pub failures: FailureCounts,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "n_samples,n_scored,cer,failure_rate,no_eos,wrong_modality";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.n_samples,
            self.n_scored,
            self.cer.map_or(String::new(), |c| c.to_string()),
            self.failure_rate,
            self.failures.no_eos,
            self.failures.wrong_modality
        )
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        writeln!(out, "{}", self.csv_row())?;
        Ok(())
    }
}

/// Aggregates already decoded outcomes. The reference of each sample is its
/// own generated text answer; the hypothesis is the transcription of its
/// generated speech answer.
pub fn report(outcomes: &[DecodeOutcome], tts: &ToyTts) -> Result<EvalReport> {
    let (rate, failures) = failure_rate(outcomes)?;
    let mut edits = 0usize;
    let mut symbols = 0usize;
    let mut scored = 0usize;
    for o in outcomes.iter().filter(|o| o.failure.is_none()) {
        scored += 1;
        let reference: Vec<Option<u32>> = o.text_answer.iter().map(|&t| Some(t)).collect();
        let hypothesis = tts.invert(&o.speech_answer).symbols;
        edits += edit_distance(&reference, &hypothesis);
        symbols += reference.len();
    }
    Ok(EvalReport {
        n_samples: outcomes.len(),
        n_scored: scored,
        cer: (symbols > 0).then(|| 100.0 * edits as f64 / symbols as f64),
        failure_rate: rate,
        failures,
    })
}

/// Decodes every question in `pairs` and scores the results.
pub fn evaluate(
    model: &ModelState,
    pairs: &[QAPair],
    tts: &ToyTts,
    sampling: &SamplingParams,
    mode: DecodeMode,
) -> Result<(EvalReport, Vec<DecodeOutcome>)> {
    let outcomes = pairs
        .iter()
        .map(|p| {
            let params = SamplingParams {
                seed: sampling.seed.wrapping_add(p.id),
                ..sampling.clone()
            };
            decode_question(model, &p.tq, &p.sq, mode, &params)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((report(&outcomes, tts)?, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer(&chars("abc"), &chars("abc")).unwrap(), 0.0);
        assert_eq!(cer(&chars("abcd"), &chars("abed")).unwrap(), 25.0);
        assert_eq!(cer(&chars("ab"), &chars("")).unwrap(), 100.0);
        assert_eq!(cer(&chars("a"), &chars("xyz")).unwrap(), 300.0);
        assert!(cer(&chars(""), &chars("a")).is_err());
    }

    fn outcome(failure: Option<FailureKind>) -> DecodeOutcome {
        DecodeOutcome {
            text_answer: vec![],
            speech_answer: vec![],
            frames_generated: 1,
            failure,
        }
    }

    #[test]
    fn failure_rates() {
        assert_eq!(failure_rate(&vec![outcome(None); 4]).unwrap().0, 0.0);
        let mut v = vec![outcome(None); 7];
        v.push(outcome(Some(FailureKind::NoEos)));
        assert_eq!(failure_rate(&v).unwrap().0, 12.5);
        v.push(outcome(Some(FailureKind::WrongModality)));
        v.push(outcome(Some(FailureKind::WrongModality)));
        let (rate, counts) = failure_rate(&v).unwrap();
        assert_eq!(counts, FailureCounts { no_eos: 1, wrong_modality: 2 });
        assert!((rate - 30.0).abs() < 1e-12);
        assert!(failure_rate(&[]).is_err());
    }

    #[test]
    fn report_scores_clean_samples_only() {
        let tts = ToyTts::new(crate::VocabSpec::toy(), 0, 11.0).unwrap();
        let good = DecodeOutcome {
            text_answer: vec![1, 2],
            speech_answer: tts.synthesize(&[1, 3]).unwrap(),
            frames_generated: 10,
            failure: None,
        };
        let bad = DecodeOutcome {
            text_answer: vec![5; 10],
            failure: Some(FailureKind::NoEos),
            ..good.clone()
        };
        let r = report(&[good, bad], &tts).unwrap();
        assert_eq!(r.n_scored, 1);
        assert_eq!(r.cer, Some(50.0));
        assert_eq!(r.failure_rate, 50.0);
        assert_eq!(r.failures.total(), 1);
        assert_eq!(r.csv_row(), "2,1,50,50,1,0");
    }

    #[test]
    fn unmatched_speech_costs_edits() {
        let tts = ToyTts::new(crate::VocabSpec::toy(), 0, 11.0).unwrap();
        let mut speech = tts.synthesize(&[1]).unwrap();
        speech.truncate(speech.len() - 1);
        let o = DecodeOutcome {
            text_answer: vec![1],
            speech_answer: speech,
            frames_generated: 1,
            failure: None,
        };
        assert_eq!(report(&[o], &tts).unwrap().cer, Some(100.0));
    }
}
