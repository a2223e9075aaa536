//! Pipeline driver for the ego-motion engine: corpus generation, the
//! supervised cold start, group-relative RL, and evaluation, all run from one
//! config document with per-stage seeds derived from a single master seed.

mod manifest;
mod stages;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use egomotion::config::RunConfig;
use std::path::PathBuf;

/// Consulted for the default output root when neither the config file nor
/// `--out` names one.
const OUT_ENV: &str = "EGOMOTION_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "egomotion",
    version,
    about = "Camera ego-motion reasoning: generate corpora, cold-start, reinforce, evaluate"
)]
struct Cli {
    /// TOML config file; keys it omits keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in starting point: "desk" (runnable defaults) or "full"
    /// (the source experiment's batch shape, for reference).
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Master seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Run directory, overriding the config and EGOMOTION_OUT.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Config override of the form section.key=value; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the supervised, reinforcement, and evaluation corpora.
    Gen,
    /// Supervised cold start from a freshly initialized policy.
    Sft,
    /// Group-relative RL from a supervised checkpoint.
    Rl {
        /// Starting checkpoint; defaults to the first-epoch supervised
        /// checkpoint in the run directory.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out corpora.
    Eval {
        /// Checkpoint to score; defaults to the final reinforced checkpoint
        /// in the run directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// All stages in order, wiring the first-epoch checkpoint into RL.
    Pipeline,
}

/// Layers the sources in fixed precedence: preset (or defaults), then the
/// EGOMOTION_OUT root, then the config file, then --override pairs, then the
/// --seed and --out flags.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match cli.preset.as_deref() {
        Some(name) => RunConfig::preset(name)?,
        None => RunConfig::default(),
    };
    if let Some(root) = std::env::var_os(OUT_ENV) {
        cfg.out_dir = PathBuf::from(root);
    }
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        cfg = cfg.merged_with_toml(&text)?;
    }
    cfg = cfg.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = resolve_config(&cli)?;
    stages::write_config_copy(&cfg)?;
    match &cli.command {
        Command::Gen => stages::cmd_gen(&cfg),
        Command::Sft => stages::cmd_sft(&cfg),
        Command::Rl { init } => stages::cmd_rl(&cfg, init.as_deref()),
        Command::Eval { checkpoint } => stages::cmd_eval(&cfg, checkpoint.as_deref()),
        Command::Pipeline => stages::cmd_pipeline(&cfg),
    }
}
