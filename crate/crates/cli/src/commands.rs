use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use pslm::corpus::{com_examples, generate_corpus, pslm_examples, read_corpus, write_corpus, Corpus, QAPair, ToyTts};
use pslm::decode::{decode_question, DecodeMode, DecodeRecord, SamplingParams};
use pslm::latency::{
    latency_curve as curve, simulate_dataset, write_curve_csv, write_dataset_csv, write_summary_csv,
    reference_length_records, MethodSpec, TABLE_METHODS,
};
use pslm::metrics::evaluate;
use pslm::model::{load_checkpoint, save_checkpoint};
use pslm::train::{gradcheck_with, train_until_plateau, GradCheckOptions, LossBreakdown};
use pslm::vocoder::{fragment_schedule, stream_through_channel, write_wav};
use pslm::ModelState;

use crate::config::{decode_input, Input, Mode, RunConfig};
use crate::error::{CliError, Result};
use crate::{Flags, Split};

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn open_input(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CliError::MissingInput(path.to_owned()),
        _ => e.into(),
    })
}

/// Reads `path`, or generates the configured corpus when no file is given.
fn corpus(cfg: &RunConfig, path: Option<&Path>) -> Result<Corpus> {
    let corpus = match path {
        Some(p) => read_corpus(BufReader::new(open_input(p)?))?,
        None => generate_corpus(&cfg.corpus)?,
    };
    if corpus.config.vocab != cfg.model.vocab {
        return Err(CliError::Config("corpus vocabulary differs from [model] vocab".into()));
    }
    Ok(corpus)
}

fn checkpoint(cfg: &RunConfig, path: &Path) -> Result<ModelState> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_owned()));
    }
    let model = load_checkpoint(path, None)?;
    if model.num_speech_streams() != cfg.model.num_speech_streams {
        return Err(pslm::Error::CheckpointMismatch(format!(
            "checkpoint has {} speech streams, run expects {}",
            model.num_speech_streams(),
            cfg.model.num_speech_streams
        ))
        .into());
    }
    Ok(model)
}

fn split(corpus: &Corpus, split: crate::Split) -> &[QAPair] {
    match split {
        Split::Train => &corpus.train,
        Split::Heldout => &corpus.heldout,
    }
}

/// Questions as the model receives them: with `--input asr` the text
/// question is replaced by the toy recognizer's transcript of the speech.
fn questions(pairs: &[QAPair], input: Input, tts: &ToyTts) -> Vec<QAPair> {
    pairs
        .iter()
        .map(|p| match input {
            Input::Asr => QAPair { tq: tts.invert(&p.sq).text(), ..p.clone() },
            Input::Gold | Input::Sq => p.clone(),
        })
        .collect()
}

fn decode_mode(flags: &Flags) -> Result<DecodeMode> {
    Ok(match flags.mode {
        Mode::Pslm => DecodeMode::Pslm(decode_input(flags.input, flags.ablation)?),
        Mode::Com => DecodeMode::Com { gold_tq: flags.input != Input::Sq },
    })
}

pub fn gen_corpus(cfg: &RunConfig, flags: &Flags) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let mut out = output(flags.out.as_deref())?;
    write_corpus(&corpus, &mut out)?;
    out.flush()?;
    log::info!("wrote {} training and {} held-out pairs", corpus.train.len(), corpus.heldout.len());
    Ok(())
}

fn write_loss_csv(history: &[LossBreakdown], streams: usize, mut out: impl Write) -> Result<()> {
    let speech: String = (0..streams).map(|s| format!(",speech_{s}")).collect();
    writeln!(out, "step,total,text{speech}")?;
    for (i, l) in history.iter().enumerate() {
        let speech: String = l.speech_losses.iter().map(|x| format!(",{x}")).collect();
        writeln!(out, "{},{},{}{speech}", i + 1, l.total, l.text_loss)?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, flags: &Flags, corpus_path: Option<&Path>) -> Result<()> {
    let out = flags
        .out
        .as_deref()
        .ok_or_else(|| CliError::Config("train needs --out for the checkpoint".into()))?;
    let corpus = corpus(cfg, corpus_path)?;
    let vocab = cfg.model.vocab;
    let mut model = ModelState::init(cfg.model.clone())?;
    let streams = cfg.model.num_speech_streams;
    let run = if streams == 0 {
        let data = com_examples(&corpus.train, &vocab)?;
        train_until_plateau(&mut model, &data, &cfg.train, &cfg.plateau)?
    } else {
        let data = pslm_examples(&corpus.train, streams, flags.ablation.question_input(), &vocab)?;
        train_until_plateau(&mut model, &data, &cfg.train, &cfg.plateau)?
    };
    log::info!(
        "{} steps, corpus loss {:.5} (text {:.5}), plateaued: {}",
        run.history.len(),
        run.final_loss().total,
        run.final_loss().text_loss,
        run.plateaued
    );
    save_checkpoint(&model, out)?;
    let mut loss_path = PathBuf::from(out).into_os_string();
    loss_path.push(".loss.csv");
    let mut csv = BufWriter::new(File::create(&loss_path)?);
    write_loss_csv(&run.history, streams, &mut csv)?;
    csv.flush()?;
    Ok(())
}

pub fn decode(cfg: &RunConfig, flags: &Flags, ckpt: &Path, corpus_path: Option<&Path>, which: Split) -> Result<()> {
    let model = checkpoint(cfg, ckpt)?;
    let corpus = corpus(cfg, corpus_path)?;
    let mode = decode_mode(flags)?;
    let pairs = questions(split(&corpus, which), flags.input, &corpus.config.tts()?);
    let mut out = output(flags.out.as_deref())?;
    for p in &pairs {
        let params = SamplingParams {
            seed: cfg.sampling.seed.wrapping_add(p.id),
            ..cfg.sampling.clone()
        };
        let outcome = decode_question(&model, &p.tq, &p.sq, mode, &params)?;
        serde_json::to_writer(&mut out, &DecodeRecord::new(p.id, &outcome))?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn eval(cfg: &RunConfig, flags: &Flags, ckpt: &Path, corpus_path: Option<&Path>, which: Split) -> Result<()> {
    let model = checkpoint(cfg, ckpt)?;
    let corpus = corpus(cfg, corpus_path)?;
    let tts = corpus.config.tts()?;
    let pairs = questions(split(&corpus, which), flags.input, &tts);
    if pairs.is_empty() {
        return Err(CliError::Config("the selected split is empty".into()));
    }
    let (report, _) = evaluate(&model, &pairs, &tts, &cfg.sampling, decode_mode(flags)?)?;
    log::info!("{report:?}");
    let mut out = output(flags.out.as_deref())?;
    report.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn latency(cfg: &RunConfig, flags: &Flags, records: usize, per_record: bool) -> Result<()> {
    let recs = reference_length_records(records, cfg.corpus.seed);
    let results = TABLE_METHODS
        .iter()
        .map(|&m| Ok((m, simulate_dataset(&recs, &cfg.latency, m)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = output(flags.out.as_deref())?;
    if per_record {
        write_dataset_csv(&results, &mut out)?;
    } else {
        write_summary_csv(&results, &mut out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn latency_curve(cfg: &RunConfig, flags: &Flags, max_answer_len: usize) -> Result<()> {
    let tps = cfg.latency.tokens_per_second;
    let series = [
        (MethodSpec::Com(pslm::latency::ComInput::Gold), tps),
        (MethodSpec::Pslm { asr: false, streams: 1 }, tps),
        (MethodSpec::Pslm { asr: false, streams: 2 }, tps),
        (MethodSpec::Pslm { asr: false, streams: 1 }, 2.0 * tps),
    ];
    let lens: Vec<usize> = (0..=max_answer_len).collect();
    let points = curve(&lens, &cfg.latency, &series)?;
    let mut out = output(flags.out.as_deref())?;
    write_curve_csv(&points, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, flags: &Flags, tolerance: f64, samples: usize) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let pair = std::slice::from_ref(corpus.train.first().ok_or_else(|| CliError::Config("empty corpus".into()))?);
    let model = ModelState::init(cfg.model.clone())?;
    let opts = GradCheckOptions {
        samples,
        seed: cfg.train.seed,
        weighted: cfg.train.weighted_loss,
        ..GradCheckOptions::default()
    };
    let vocab = cfg.model.vocab;
    let report = match cfg.model.num_speech_streams {
        0 => gradcheck_with(&model, &com_examples(pair, &vocab)?[0], &opts, |_, _| {})?,
        s => {
            let example = &pslm_examples(pair, s, flags.ablation.question_input(), &vocab)?[0];
            gradcheck_with(&model, example, &opts, |_, _| {})?
        }
    };
    let pass = report.max_rel_error < tolerance;
    let mut out = output(flags.out.as_deref())?;
    writeln!(
        out,
        "{} max_rel_err={:.3e} tolerance={tolerance:e} coordinates={}",
        if pass { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.coordinates
    )?;
    for (group, err, n) in &report.per_group {
        writeln!(out, "  {group:?}: {err:.3e} over {n}")?;
    }
    out.flush()?;
    if pass {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed { max_rel_error: report.max_rel_error, tolerance })
    }
}

pub fn stream_demo(cfg: &RunConfig, flags: &Flags, corpus_path: Option<&Path>, index: usize, wav: Option<&Path>) -> Result<()> {
    let corpus = corpus(cfg, corpus_path)?;
    let pair = corpus
        .train
        .get(index)
        .ok_or_else(|| CliError::Config(format!("no training pair at index {index}")))?;
    if pair.sa.is_empty() {
        return Err(CliError::Config(format!("pair {index} has an empty spoken answer")));
    }
    let plans = fragment_schedule(pair.sa.len(), &cfg.vocoder)?;
    let fragments = stream_through_channel(pair.sa.clone(), cfg.vocoder, 4)?;
    let tps = cfg.latency.tokens_per_second;
    let mut out = output(flags.out.as_deref())?;
    writeln!(out, "fragment,tokens_seen,ready_after,available_s,samples")?;
    for (f, p) in fragments.iter().zip(&plans) {
        writeln!(
            out,
            "{},{},{},{},{}",
            f.index,
            f.tokens_seen,
            p.ready_after,
            p.ready_after as f64 / tps,
            f.samples.len()
        )?;
    }
    out.flush()?;
    if let Some(path) = wav {
        let samples: Vec<f64> = fragments.into_iter().flat_map(|f| f.samples).collect();
        let mut w = BufWriter::new(File::create(path)?);
        write_wav(&samples, &mut w)?;
        w.flush()?;
    }
    Ok(())
}
