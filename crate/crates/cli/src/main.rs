//! `latent-act`: run the latent-action pipeline one stage at a time.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_core::config::{Algorithm, Mode};

#[derive(Parser, Debug)]
#[command(name = "latent-act", version, about = "Latent-action RL on synthetic multimodal tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config; stages after the first default to the checkpoint's snapshot.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct Stage {
    #[command(flatten)]
    pub common: Common,
    /// Corpus directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Input checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `latent` or `token`; defaults to the checkpoint's mode.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Leave text-only data out of stage 3 and behavior cloning.
    #[arg(long)]
    pub paired_only: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate paired, text-only and RL task corpora.
    GenData(Common),
    /// World model and inverse dynamics on paired data (`--mode token`: causal LM on both corpora).
    TrainStage1(Stage),
    /// Projector warm-up on paired data.
    TrainProjector(Stage),
    /// Joint latent-space training on paired and text-only data.
    TrainStage3(Stage),
    /// Behavior cloning of the policy.
    TrainBc(Stage),
    /// Supervised fine-tuning before RL.
    Sft(Stage),
    /// Group-relative RL; writes a checkpoint and `metrics.jsonl`.
    TrainRl {
        #[command(flatten)]
        stage: Stage,
        /// Overrides `rl_engine.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// `grpo`, `drgrpo`, `dapo` or `bnpo`; overrides `rl_engine.algorithm`.
        #[arg(long)]
        algorithm: Option<Algorithm>,
    },
    /// Mean reward on a task split.
    Evaluate {
        #[command(flatten)]
        stage: Stage,
        /// `id`, `ood` or `train`.
        #[arg(long, default_value = "id")]
        split: String,
    },
    /// Semantic diversity of rollout groups on the RL training prompts.
    Diversity {
        #[command(flatten)]
        stage: Stage,
        /// Number of prompts (default `eval.diversity_prompts`).
        #[arg(long)]
        prompts: Option<usize>,
        /// Rollout temperature (default `rl_engine.rollout_temperature`).
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Code usage histogram and entropy on the evaluation tasks.
    InspectCodebook(Stage),
    /// Per-phase RL wall time, optionally against a baseline log.
    Timing {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::TrainStage1(s) => commands::train_stage1(&s),
        Command::TrainProjector(s) => commands::train_projector(&s),
        Command::TrainStage3(s) => commands::train_stage3(&s),
        Command::TrainBc(s) => commands::train_bc(&s),
        Command::Sft(s) => commands::sft(&s),
        Command::TrainRl { stage, steps, algorithm } => commands::train_rl(&stage, steps, algorithm),
        Command::Evaluate { stage, split } => commands::evaluate(&stage, &split),
        Command::Diversity { stage, prompts, temperature } => commands::diversity(&stage, prompts, temperature),
        Command::InspectCodebook(s) => commands::inspect_codebook(&s),
        Command::Timing { log, baseline, out } => commands::timing(&log, baseline.as_deref(), &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
