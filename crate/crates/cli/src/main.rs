//! `lizard`: teacher pretraining, two-stage linearization, passkey
//! evaluation, benchmarks and the self-check suite.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use lizard::pipeline::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "lizard", version, about = "Linearize a softmax-attention transformer into gated linear attention with sliding-window memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Options shared by every subcommand; they override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration (TOML, or JSON for a `.json` path).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory (default: `<config out>/<subcommand>-<config hash>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["recurrent", "parallel", "chunkwise"])]
    pub algo: Option<String>,
    #[arg(long, global = true)]
    pub chunk_size: Option<usize>,
    /// Sliding-window size `w`.
    #[arg(long, global = true)]
    pub window: Option<usize>,
    /// Number of meta tokens `m`.
    #[arg(long, global = true)]
    pub meta: Option<usize>,
    #[arg(long, global = true, value_parser = ["scalar", "mamba2", "low_rank", "pooling"])]
    pub gate: Option<String>,
    /// Student layers kept as softmax attention: `half` or `0,2,...`.
    #[arg(long, global = true, value_name = "INDICES|half")]
    pub retain_full: Option<String>,
    /// LoRA rank for stage 2.
    #[arg(long, global = true)]
    pub lora_rank: Option<usize>,
    /// Stage 2 updates the base weights instead of adapters.
    #[arg(long, global = true)]
    pub no_lora: bool,
    /// Skip stage 1.
    #[arg(long, global = true)]
    pub no_approx: bool,
    /// Drop the sliding-window branch.
    #[arg(long, global = true)]
    pub no_swa: bool,
    /// Fix every gate at 1.
    #[arg(long, global = true)]
    pub no_gate: bool,
    /// Teacher checkpoint to start from.
    #[arg(long, global = true)]
    pub teacher: Option<PathBuf>,
    /// Student checkpoint to start from.
    #[arg(long, global = true)]
    pub student: Option<PathBuf>,
    /// Step count for every training stage, replacing the epoch budget.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the softmax-attention teacher.
    PretrainTeacher,
    /// Stage 1: fit the student's attention approximation to the teacher.
    Distill,
    /// Stage 2: next-token fine-tuning of the student.
    Finetune,
    /// Passkey retrieval accuracy by length and depth.
    EvalPasskey {
        /// Model to evaluate (default: --student, then the config's checkpoints).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time parallel GLA, chunkwise GLA and softmax attention kernels.
    BenchKernel {
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
    },
    /// Per-token decode latency and state size of student and teacher.
    BenchGenerate {
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
    },
    /// Distill and fine-tune every cell of a grid such as `w=32,64 m=2,4`.
    Sweep {
        #[arg(long, num_args = 1.., required = true, value_name = "KEY=V1,V2")]
        grid: Vec<String>,
    },
    /// Run the oracle and invariant suite.
    Verify,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PretrainTeacher => "pretrain-teacher",
            Command::Distill => "distill",
            Command::Finetune => "finetune",
            Command::EvalPasskey { .. } => "eval-passkey",
            Command::BenchKernel { .. } => "bench-kernel",
            Command::BenchGenerate { .. } => "bench-generate",
            Command::Sweep { .. } => "sweep",
            Command::Verify => "verify",
        }
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Command::Verify = cli.command {
        return commands::verify(&cli.common);
    }
    let Some(path) = cli.common.config.as_deref() else {
        return usage_error("--config <path> is required");
    };
    if !path.is_file() {
        return usage_error(&format!("config file {} not found", path.display()));
    }
    let mut cfg = match RunConfig::load(path) {
        Ok(c) => c,
        Err(e) => return usage_error(&format!("{}: {e}", path.display())),
    };
    if let Err(e) = commands::apply_overrides(&mut cfg, &cli.common) {
        return usage_error(&e.to_string());
    }
    let result = match &cli.command {
        Command::PretrainTeacher => commands::pretrain_teacher(&cfg, &cli.common),
        Command::Distill => commands::distill(&cfg, &cli.common),
        Command::Finetune => commands::finetune(&cfg, &cli.common),
        Command::EvalPasskey { checkpoint } => commands::eval_passkey(&cfg, &cli.common, checkpoint.as_deref()),
        Command::BenchKernel { lengths } => commands::bench_kernel(&cfg, &cli.common, lengths),
        Command::BenchGenerate { lengths } => commands::bench_generate(&cfg, &cli.common, lengths),
        Command::Sweep { grid } => commands::sweep(&cfg, &cli.common, grid),
        Command::Verify => unreachable!("handled above"),
    };
    match result {
        Ok(dir) => {
            println!("{} complete: {}", cli.command.name(), dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {} failed: {e}", cli.command.name());
            ExitCode::from(1)
        }
    }
}
