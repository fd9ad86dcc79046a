use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lgl_cli::commands::{self, Inputs};
use lgl_cli::config::{parse_taus, RunConfig};
use lgl_cli::experiments::AblationAxis;
use lgl_cli::{exit_code, EXIT_CONFIG};
use lgl_core::Result;

#[derive(Parser)]
#[command(name = "lgl", about = "Self-supervised speaker embeddings with loss-gated pseudo-label training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated thresholds, one per iteration; `inf` disables the gate.
    #[arg(long)]
    tau_schedule: Option<String>,
    /// Corpus file to use instead of generating one.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Trial list to use with --corpus.
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Encoder checkpoint to start from or evaluate.
    #[arg(long)]
    encoder: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and trial list.
    GenData(Common),
    /// Contrastive pretraining.
    Stage1(Common),
    /// Cluster Stage I embeddings and scan cluster counts.
    Cluster(Common),
    /// Iterative pseudo-label training from a Stage I encoder.
    Stage2 {
        #[command(flatten)]
        common: Common,
        /// Skip every gated epoch.
        #[arg(long)]
        no_lgl: bool,
    },
    /// Data generation, Stage I and Stage II with evaluation.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        no_lgl: bool,
    },
    /// Loss curves of reliable and unreliable labels on a small corpus.
    Toy(Common),
    /// Sweep the first iteration over thresholds or cluster counts.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `tau` or `k`.
        #[arg(long, default_value = "tau")]
        axis: String,
    },
    /// Score trials with an encoder checkpoint.
    Eval(Common),
}

fn resolve(c: &Common) -> Result<(RunConfig, Inputs)> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(t) = &c.tau_schedule {
        cfg.taus = parse_taus(t)?;
    }
    cfg.validate()?;
    let inputs = Inputs {
        corpus: c.corpus.clone(),
        trials: c.trials.clone(),
        encoder: c.encoder.clone(),
    };
    Ok((cfg, inputs))
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData(c) => commands::cmd_gen_data(&resolve(&c)?.0),
        Command::Stage1(c) => {
            let (cfg, inputs) = resolve(&c)?;
            commands::cmd_stage1(&cfg, &inputs)
        }
        Command::Cluster(c) => {
            let (cfg, inputs) = resolve(&c)?;
            commands::cmd_cluster(&cfg, &inputs)
        }
        Command::Stage2 { common, no_lgl } => {
            let (cfg, inputs) = resolve(&common)?;
            commands::cmd_stage2(&cfg, &inputs, no_lgl)
        }
        Command::Pipeline { common, no_lgl } => {
            let (cfg, inputs) = resolve(&common)?;
            commands::cmd_pipeline(&cfg, &inputs, no_lgl)
        }
        Command::Toy(c) => commands::cmd_toy(&resolve(&c)?.0),
        Command::Ablate { common, axis } => {
            let axis: AblationAxis = axis.parse()?;
            let (cfg, inputs) = resolve(&common)?;
            commands::cmd_ablate(&cfg, &inputs, axis)
        }
        Command::Eval(c) => {
            let (cfg, inputs) = resolve(&c)?;
            commands::cmd_eval(&cfg, &inputs)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
