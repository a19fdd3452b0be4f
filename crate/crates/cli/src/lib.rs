//! Command-line front end for the flowfix pipeline.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use flowfix::backbone::Variant;
use flowfix::data::Split;
use flowfix::sampler::Solver;
use flowfix::Result;

use commands::{Context, EvalMode};
use config::RunConfig;

/// Exit code for bad configuration or arguments.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for failures while running.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "flowfix", version, about = "Image-to-image flow matching for motion artifact removal")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration (flat TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?}")),
    }
}

#[derive(Debug, Args)]
pub struct SampleFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    /// euler or heun2
    #[arg(long)]
    pub solver: Option<Solver>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a gated paired dataset from phantoms or a PNG directory.
    Simulate {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// SSIM acceptance interval for corrupted images.
        #[arg(long, num_args = 2, value_names = ["S0", "S1"])]
        gate: Option<Vec<f64>>,
    },
    /// Train a velocity model (and the codec when it is learned).
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore the images of a directory or of a dataset split.
    Restore {
        #[arg(long, default_value = "run")]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long, default_value = "restored")]
        out: PathBuf,
        #[command(flatten)]
        sample: SampleFlags,
    },
    /// Compare image directories against a reference directory.
    Eval {
        /// `NAME=DIR` or `DIR`; repeatable.
        #[arg(long = "input", required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_enum, default_value = "paired")]
        mode: EvalMode,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Step and guidance sweeps with figure grids.
    Ablate {
        #[arg(long, default_value = "run")]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Maximum number of inputs to sweep; 0 means all.
        #[arg(long, default_value_t = 0)]
        limit: usize,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Sample without a source image (guidance 0).
    Generate {
        #[arg(long, default_value = "run")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "generated")]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn apply_sample_flags(cfg: &mut RunConfig, f: &SampleFlags) {
    if let Some(v) = f.steps {
        cfg.steps = v;
    }
    if let Some(v) = f.guidance {
        cfg.guidance = v;
    }
    if let Some(v) = f.solver {
        cfg.solver = v;
    }
    if let Some(v) = f.seed {
        cfg.sample_seed = v;
    }
}

/// Loads the config file, folds in command-line overrides and validates.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(p) => {
            let path = if p.is_absolute() { p.clone() } else { cli.global.workdir.join(p) };
            RunConfig::load(&path)?
        }
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Simulate { gate: Some(g), .. } => {
            cfg.gate_s0 = g[0];
            cfg.gate_s1 = g[1];
        }
        Command::Train { variant, seed, .. } => {
            if let Some(v) = variant {
                cfg.variant = *v;
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
        }
        Command::Restore { sample, .. } => apply_sample_flags(&mut cfg, sample),
        Command::Generate { count, steps, seed, .. } => {
            if let Some(c) = count {
                cfg.generate_count = *c;
            }
            if let Some(s) = steps {
                cfg.generate_steps = *s;
            }
            if let Some(s) = seed {
                cfg.sample_seed = *s;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    println!("# resolved configuration\n{}", cfg.to_toml());
    let ctx = Context::new(&cli.global.workdir, cfg);
    match &cli.command {
        Command::Simulate { out, .. } => commands::simulate(&ctx, out).map(drop),
        Command::Train { data, out, .. } => commands::train(&ctx, data, out).map(drop),
        Command::Restore {
            checkpoint,
            input,
            split,
            out,
            ..
        } => commands::restore(&ctx, checkpoint, input, *split, out).map(drop),
        Command::Eval {
            inputs,
            reference,
            mode,
            out,
        } => {
            let methods: Vec<_> = inputs.iter().map(|s| commands::parse_method(s)).collect();
            commands::eval(&ctx, &methods, reference, *mode, out).map(drop)
        }
        Command::Ablate {
            checkpoint,
            input,
            split,
            limit,
            out,
        } => commands::ablate(&ctx, checkpoint, input, *split, *limit, out).map(drop),
        Command::Generate { checkpoint, out, .. } => {
            commands::generate(&ctx, checkpoint, out).map(drop)
        }
    }
}

/// Process exit code for a result.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_config() => EXIT_CONFIG,
        Err(_) => EXIT_RUNTIME,
    }
}
