use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use boxattn::baselines::PriorMode;
use boxattn::metrics::Protocol;
use boxattn_cli::{
    cmd_baseline, cmd_eval, cmd_gradcheck, cmd_pipeline, cmd_predict, cmd_synth, cmd_train, protocol_name, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "boxattn",
    version,
    about = "Box-attention relationship detection on small images"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. They override the config file.
#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    train_data: Option<PathBuf>,
    #[arg(long, global = true)]
    test_data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Freq,
    FreqOverlap,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Vcoco,
    Vrd,
    Oid,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Vcoco => Protocol::Vcoco,
            ProtocolArg::Vrd => Protocol::Vrd,
            ProtocolArg::Oid => Protocol::Oid,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and test splits.
    Synth {
        /// Train split size.
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        test_images: Option<usize>,
    },
    /// Train the plain detector and the relationship model.
    Train {
        /// Epochs of relationship training.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        detector_epochs: Option<usize>,
    },
    /// Detect relationships on the test split.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score detector pairs with a predicate frequency prior.
    Baseline {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Plain detector checkpoint (default: <out>/detector.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a predictions file.
    Eval {
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        /// Predictions TSV (default: <out>/predictions.tsv).
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Annotations JSON (default: the test split).
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every differentiable operation.
    Gradcheck,
    /// synth, train, predict, both baselines and eval in one go.
    Pipeline {
        #[arg(long, value_enum, default_value = "oid")]
        protocol: ProtocolArg,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if c.train_data.is_some() {
        cfg.train_data = c.train_data.clone();
    }
    if c.test_data.is_some() {
        cfg.test_data = c.test_data.clone();
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Synth { images, test_images } => {
            if let Some(n) = images {
                cfg.synth.num_images = n;
            }
            if let Some(n) = test_images {
                cfg.test_images = n;
            }
            let (train, test) = cmd_synth(&cfg)?;
            println!("wrote {} and {}", train.display(), test.display());
        }
        Command::Train {
            epochs,
            detector_epochs,
        } => {
            if let Some(e) = epochs {
                cfg.schedule.epochs = e;
            }
            if let Some(e) = detector_epochs {
                cfg.detector_schedule.epochs = e;
            }
            let out = cmd_train(&cfg)?;
            let last = |t: &[boxattn::training::TraceRow]| t.last().map_or(f64::NAN, |r| r.loss);
            println!(
                "detector: {} steps, final loss {:.4}; model: {} steps, final loss {:.4}",
                out.detector_trace.len(),
                last(&out.detector_trace),
                out.trace.len(),
                last(&out.trace)
            );
        }
        Command::Predict { checkpoint } => {
            let path = cmd_predict(&cfg, checkpoint.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Baseline { mode, checkpoint } => {
            let mode = match mode {
                ModeArg::Freq => PriorMode::Freq,
                ModeArg::FreqOverlap => PriorMode::FreqOverlap,
            };
            let path = cmd_baseline(&cfg, mode, checkpoint.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Eval {
            protocol,
            predictions,
            ground_truth,
        } => {
            let preds = predictions.unwrap_or_else(|| boxattn_cli::predictions_path(&cfg));
            let report = cmd_eval(&cfg, &preds, ground_truth.as_deref(), protocol.into())?;
            print!("{}", report.to_table());
        }
        Command::Gradcheck => {
            for c in cmd_gradcheck(&cfg)? {
                println!("{:<20} {:.3e} (tolerance {:.0e})", c.name, c.worst, c.tolerance());
            }
        }
        Command::Pipeline { protocol } => {
            let r = cmd_pipeline(&cfg, protocol.into())?;
            for (name, report) in [
                ("model", &r.model),
                ("freq", &r.freq),
                ("freq-overlap", &r.freq_overlap),
            ] {
                println!("{name} ({})", protocol_name(report.protocol));
                print!("{}", report.to_table());
            }
        }
    }
    Ok(())
}
