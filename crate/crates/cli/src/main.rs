use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dream_cli::commands::CONFIG_FILE;
use dream_cli::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_grad_check, cmd_synth, cmd_train, Ablate, ImageInput, Overrides,
    RunConfig, Split, TrainControl,
};
use dream_core::autodiff::AttnNorm;
use dream_core::checkpoint::Checkpoint;
use dream_core::{Components, Precision};

/// Keyword-guided report generation on synthetic fundus-style images.
///
/// Settings are resolved as built-in defaults, then the `--config` file,
/// then command-line flags. `train` echoes the result to `<out>/config.toml`.
#[derive(Parser)]
#[command(name = "dream", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.jsonl, steps.jsonl, config.toml and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps (the schedule still spans the full run).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Greedy-decode a split and print BLEU, ROUGE-L and CIDEr.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Generate one report.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Synthetic image seed.
        #[arg(long, conflicts_with = "image")]
        image_seed: Option<u64>,
        /// Greymap (PGM) image file.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Keywords separated by `[SEP]`, e.g. "drusen [SEP] edema".
        #[arg(long, default_value = "")]
        keywords: String,
    },
    /// Finite-difference gradient checks per module and end to end.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Perturb analytic gradients so every row must fail.
        #[arg(long)]
        corrupt: bool,
    },
    /// Train and evaluate the five-row component grid.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Write synthetic train and eval dataset files.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Also write each image as a PGM file and reference it by path.
        #[arg(long)]
        images: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttnArg {
    Softmax,
    Sigmoid,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for initialisation and batch order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    /// Weight of the alignment loss.
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    attn: Option<AttnArg>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Components to switch off; repeat or separate with commas.
    #[arg(long, value_enum, value_delimiter = ',')]
    ablate: Vec<Ablate>,
    /// Probability of dropping each keyword at evaluation time.
    #[arg(long, allow_negative_numbers = true)]
    keyword_dropout: Option<f64>,
    /// Longest generated report, in tokens.
    #[arg(long)]
    max_len: Option<usize>,
    /// Number of synthetic training samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_enum)]
    split: Option<Split>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint path (default `<out>/checkpoint.bin`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            epochs: self.epochs,
            max_steps: self.max_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            lambda: self.lambda,
            attn: self.attn.map(|a| match a {
                AttnArg::Softmax => AttnNorm::Softmax,
                AttnArg::Sigmoid => AttnNorm::Sigmoid,
            }),
            precision: self.precision.map(|p| match p {
                PrecisionArg::F64 => Precision::F64,
                PrecisionArg::F32 => Precision::F32,
            }),
            ablate: self.ablate.clone(),
            keyword_dropout: self.keyword_dropout,
            max_len: self.max_len,
            samples: self.samples,
            split: self.split,
            out: self.out.clone(),
            checkpoint: self.checkpoint.clone(),
        }
    }

    /// Config file (or defaults) with flags applied. Without `--config`,
    /// commands that read a checkpoint start from the run's echoed
    /// `<out>/config.toml`, or failing that from the checkpoint's own
    /// model and image settings.
    fn resolve(&self, from_checkpoint: bool) -> Result<RunConfig> {
        let o = self.overrides();
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if from_checkpoint && self.config.is_none() {
            let mut probe = cfg.clone();
            probe.apply(&o);
            let echoed = probe.paths.out.join(CONFIG_FILE);
            if echoed.exists() {
                cfg = RunConfig::load(&echoed)?;
            } else {
                let path = probe.checkpoint_path();
                let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
                cfg.model = ck.meta.model;
                cfg.synth = ck.meta.synth;
                cfg.train = ck.meta.train;
            }
        }
        for n in cfg.apply(&o) {
            eprintln!("note: {n}");
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut log = io::stderr();
    match cli.command {
        Command::Train {
            common,
            resume,
            stop_after,
        } => {
            let cfg = common.resolve(false)?;
            cmd_train(&cfg, &TrainControl { resume, stop_after }, &mut log)?;
        }
        Command::Eval { common } => {
            let cfg = common.resolve(true)?;
            let out = cmd_eval(&cfg, &mut io::sink())?;
            println!("{}", out.report);
        }
        Command::Generate {
            common,
            image_seed,
            image,
            keywords,
        } => {
            let cfg = common.resolve(true)?;
            let input = match (image_seed, image) {
                (_, Some(path)) => ImageInput::File(path),
                (Some(s), None) => ImageInput::Seed(s),
                (None, None) => anyhow::bail!("give --image-seed N or --image FILE"),
            };
            let g = cmd_generate(&cfg, &input, &keywords)?;
            for w in &g.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", g.text);
        }
        Command::GradCheck { common, corrupt } => {
            let cfg = common.resolve(false)?;
            let table = cmd_grad_check(&cfg, corrupt)?;
            println!("{table}");
            if !table.all_passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Ablate { common } => {
            let cfg = common.resolve(false)?;
            if !common.ablate.is_empty() {
                eprintln!("note: --ablate is ignored by `ablate`, which runs the whole grid");
            }
            cmd_ablate(&cfg, &Components::ablation_grid(), &mut log)?;
        }
        Command::Synth { common, images } => {
            let cfg = common.resolve(false)?;
            let out = cmd_synth(&cfg, images)?;
            println!("{}\n{}", out.train.display(), out.eval.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
