use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use selfflow_cli::{cmd_ablate, cmd_eval, cmd_gen_data, cmd_probe, cmd_sample, cmd_train, exit_code};
use selfflow_core::eval::FeatureSpace;
use selfflow_core::model::TransformerConfig;
use selfflow_core::objectives::ObjectiveVariant;

#[derive(Parser)]
#[command(name = "selfflow", version, about = "Self-supervised flow matching on a toy token dataset")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Vanilla,
    Selfflow,
    RepaExternal,
    SraLike,
    SelfflowNoMask,
    SelfflowNearDual,
    SelfflowL1,
}

impl From<VariantArg> for ObjectiveVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Vanilla => ObjectiveVariant::Vanilla,
            VariantArg::Selfflow => ObjectiveVariant::SelfFlow,
            VariantArg::RepaExternal => ObjectiveVariant::RepaExternal,
            VariantArg::SraLike => ObjectiveVariant::SraLike,
            VariantArg::SelfflowNoMask => ObjectiveVariant::SelfFlowNoMask,
            VariantArg::SelfflowNearDual => ObjectiveVariant::SelfFlowNearDual,
            VariantArg::SelfflowL1 => ObjectiveVariant::SelfFlowL1,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Pixel,
    ProbeEncoder,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural dataset files.
    GenData {
        /// Dataset spec TOML; defaults to the built-in 8-class spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured objective variant.
        #[arg(long)]
        objective: Option<VariantArg>,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Sample from a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 1.78)]
        sampleshift: f64,
        /// Condition every sample on one class (default: cycle classes).
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a PGM contact sheet here.
        #[arg(long)]
        pgm: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fréchet-score a checkpoint against held-out data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file to score against (default: regenerate the held-out
        /// split from the checkpoint's config).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, value_enum, default_value_t = SpaceArg::Pixel)]
        feature_space: SpaceArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Layer-wise linear probing of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Probe noise level.
        #[arg(long, default_value_t = 0.25)]
        tau: f64,
        #[arg(long, default_value_t = 1e-3)]
        l2: f64,
    },
    /// Run an ablation suite and emit CSV + markdown summaries.
    Ablate {
        /// fig3b, fig10a, or scaling.
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        steps: u64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        /// Model width for the suite.
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        /// Samples drawn per Fréchet evaluation.
        #[arg(long, default_value_t = 1024)]
        eval_samples: usize,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> selfflow_core::Result<()> {
    match cli.command {
        Command::GenData { spec, seed, out, force } => {
            cmd_gen_data(spec.as_deref(), seed, &out, force)
        }
        Command::Train {
            config,
            out,
            objective,
            resume,
            force,
        } => cmd_train(
            &config,
            &out,
            objective.map(Into::into),
            resume.as_deref(),
            force,
        ),
        Command::Sample {
            checkpoint,
            n,
            steps,
            sampleshift,
            class,
            out,
            pgm,
            seed,
        } => cmd_sample(&checkpoint, n, steps, sampleshift, class, &out, pgm.as_deref(), seed),
        Command::Eval {
            checkpoint,
            dataset,
            n,
            feature_space,
            seed,
        } => cmd_eval(
            &checkpoint,
            dataset.as_deref(),
            n,
            match feature_space {
                SpaceArg::Pixel => FeatureSpace::Pixel,
                SpaceArg::ProbeEncoder => FeatureSpace::ProbeEncoder,
            },
            seed,
        ),
        Command::Probe {
            checkpoint,
            dataset,
            tau,
            l2,
        } => cmd_probe(&checkpoint, dataset.as_deref(), tau, l2),
        Command::Ablate {
            suite,
            seeds,
            out,
            steps,
            batch_size,
            hidden,
            eval_samples,
            force,
        } => {
            let model = TransformerConfig {
                hidden,
                head_hidden: (hidden / 2).max(4),
                ..TransformerConfig::toy_default()
            };
            cmd_ablate(&suite, seeds, &out, &model, steps, batch_size, eval_samples, force)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
