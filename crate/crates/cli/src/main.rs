use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod error;

use config::{Ablation, Input, Mode, RunConfig};
use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "pslm", version, about = "Parallel text and speech generation toolkit")]
struct Cli {
    #[command(flatten)]
    flags: Flags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Flags {
    /// TOML file with [corpus], [model], [train], [plateau], [sampling],
    /// [latency] and [vocoder] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for corpus generation, initialization, batching and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Speech streams of the parallel model.
    #[arg(long, global = true)]
    pub streams: Option<usize>,
    /// Decoding rate in tokens per second.
    #[arg(long, global = true)]
    pub tps: Option<f64>,
    /// Vocoder receptive field in tokens.
    #[arg(long, global = true)]
    pub receptive_field: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Mode::Pslm)]
    pub mode: Mode,
    #[arg(long, global = true, value_enum, default_value_t = Input::Gold)]
    pub input: Input,
    #[arg(long, global = true, value_enum, default_value_t = Ablation::None)]
    pub ablation: Ablation,
    /// Output path; standard output when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Split {
    #[default]
    Train,
    Heldout,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus as JSON lines.
    GenCorpus,
    /// Train until the loss plateaus; writes a checkpoint to --out and the
    /// loss history next to it.
    Train {
        /// Corpus file; generated from the config when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Decode every question of a split and write one JSON record per line.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
    },
    /// Decode a split and report CER and failure rate as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
    },
    /// Median latency of each configuration over simulated length records.
    Latency {
        #[arg(long, default_value_t = 1000)]
        records: usize,
        /// Write every record instead of the medians.
        #[arg(long)]
        per_record: bool,
    },
    /// Latency against answer length.
    LatencyCurve {
        #[arg(long, default_value_t = 140)]
        max_answer_len: usize,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
    /// Stream one spoken answer through the vocoder and log when each
    /// fragment becomes available.
    StreamDemo {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Index of the training pair whose answer is synthesized.
        #[arg(long, default_value_t = 0)]
        pair: usize,
        /// Also write the waveform as 16-bit WAV.
        #[arg(long)]
        wav: Option<PathBuf>,
    },
}

fn resolve(flags: &Flags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.corpus.seed = seed;
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        cfg.sampling.seed = seed;
    }
    if let Some(s) = flags.streams {
        cfg.model.num_speech_streams = s;
    }
    match flags.mode {
        Mode::Com if flags.streams.is_some_and(|s| s != 0) => {
            return Err(CliError::Config("--mode com uses a single stream; drop --streams".into()));
        }
        Mode::Com => cfg.model.num_speech_streams = 0,
        Mode::Pslm if cfg.model.num_speech_streams == 0 => {
            return Err(CliError::Config("--mode pslm needs at least one speech stream".into()));
        }
        Mode::Pslm => {}
    }
    if flags.mode == Mode::Com && matches!(flags.ablation, Ablation::NoTq | Ablation::NoSq) {
        return Err(CliError::Config("question ablations apply to the parallel model only".into()));
    }
    if let Some(tps) = flags.tps {
        cfg.latency.tokens_per_second = tps;
    }
    if let Some(r) = flags.receptive_field {
        cfg.latency.receptive_field = r;
        cfg.vocoder.receptive_field = r;
    }
    if flags.ablation == Ablation::NoWl {
        cfg.train.weighted_loss = false;
    }
    cfg.corpus.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.sampling.validate()?;
    cfg.latency.validate()?;
    cfg.vocoder.validate()?;
    if cfg.model.vocab != cfg.corpus.vocab {
        return Err(CliError::Config("[model] and [corpus] vocabularies differ".into()));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.flags)?;
    log::info!("resolved config:\n{}", cfg.to_toml());
    let flags = &cli.flags;
    match cli.command {
        Command::GenCorpus => commands::gen_corpus(&cfg, flags),
        Command::Train { corpus } => commands::train(&cfg, flags, corpus.as_deref()),
        Command::Decode { checkpoint, corpus, split } => {
            commands::decode(&cfg, flags, &checkpoint, corpus.as_deref(), split)
        }
        Command::Eval { checkpoint, corpus, split } => {
            commands::eval(&cfg, flags, &checkpoint, corpus.as_deref(), split)
        }
        Command::Latency { records, per_record } => commands::latency(&cfg, flags, records, per_record),
        Command::LatencyCurve { max_answer_len } => commands::latency_curve(&cfg, flags, max_answer_len),
        Command::Gradcheck { tolerance, samples } => commands::gradcheck(&cfg, flags, tolerance, samples),
        Command::StreamDemo { corpus, pair, wav } => {
            commands::stream_demo(&cfg, flags, corpus.as_deref(), pair, wav.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}
