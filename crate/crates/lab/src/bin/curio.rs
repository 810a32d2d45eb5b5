//! `curio`: pretrain backbones, train agents, summarize and compare runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use curio_core::env::{EnvConfig, EnvKind};
use curio_core::pretrain::PretrainConfig;
use curio_lab::config::{RunConfig, OUT_ENV};
use curio_lab::diag::{diagnose, DIAG_FILE};
use curio_lab::error::{LabError, Result};
use curio_lab::pretrain::{pretrain_to, PretrainJob};
use curio_lab::runner::{compare, out_root, run_experiment, write_comparison};

#[derive(Parser)]
#[command(name = "curio", version, about = "Prediction-based curiosity lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a frozen feature backbone on random-policy rollouts.
    Pretrain {
        #[arg(long, default_value = "grid_explore")]
        env: String,
        /// Steps collected per environment.
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        num_envs: usize,
        /// Checkpoint path; metadata goes to `<out>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an agent for every configured seed.
    Train {
        /// Config file of `key = value` lines; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        algo: Option<String>,
        /// Comma-separated seeds.
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr_mult: Option<f64>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Output root; `CURIO_OUT` takes precedence.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `key=value` overrides applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Summarize an experiment directory into `diag.json`.
    Diag {
        #[arg(long)]
        run: PathBuf,
    },
    /// Align episode-return curves of several experiments into one CSV.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "comparison.csv")]
        out: PathBuf,
    },
}

fn train_config(
    config: Option<PathBuf>,
    env: Option<String>,
    algo: Option<String>,
    seed: Option<String>,
    steps: Option<usize>,
    lr_mult: Option<f64>,
    backbone: Option<PathBuf>,
    out: Option<PathBuf>,
    set: Vec<String>,
) -> Result<RunConfig> {
    let mut cfg = match &config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(EnvKind::GridExplore),
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    pairs.extend(env.map(|v| ("env".into(), v)));
    pairs.extend(algo.map(|v| ("algo".into(), v)));
    pairs.extend(seed.map(|v| ("seeds".into(), v)));
    pairs.extend(steps.map(|v| ("steps".into(), v.to_string())));
    pairs.extend(lr_mult.map(|v| ("lr_mult".into(), v.to_string())));
    pairs.extend(backbone.map(|v| ("backbone".into(), v.display().to_string())));
    pairs.extend(out.map(|v| ("out".into(), v.display().to_string())));
    for s in set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| LabError::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().into(), v.trim().into()));
    }
    for (k, v) in &pairs {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            env,
            steps,
            seed,
            epochs,
            num_envs,
            out,
        } => {
            let job = PretrainJob {
                env: EnvConfig::for_kind(EnvKind::from_name(&env)?),
                steps_per_env: steps,
                epochs,
                seed,
                config: PretrainConfig {
                    num_envs,
                    ..PretrainConfig::default()
                },
            };
            let meta = pretrain_to(&job, &out)?;
            println!(
                "backbone {} written to {} (coherence ratio {:.4}, random init {:.4})",
                meta.param_digest,
                out.display(),
                meta.coherence_ratio.unwrap_or(f64::NAN),
                meta.coherence_ratio_random.unwrap_or(f64::NAN)
            );
        }
        Command::Train {
            config,
            env,
            algo,
            seed,
            steps,
            lr_mult,
            backbone,
            out,
            set,
        } => {
            let cfg = train_config(config, env, algo, seed, steps, lr_mult, backbone, out, set)?;
            let root = out_root(&cfg);
            let (dir, _) = run_experiment(&cfg, &root)?;
            println!("{}", dir.display());
        }
        Command::Diag { run } => {
            let d = diagnose(&run)?;
            let path = run.join(DIAG_FILE);
            let text = serde_json::to_string_pretty(&d).map_err(LabError::json(&path))?;
            std::fs::write(&path, text + "\n").map_err(LabError::io(&path))?;
            println!("{}", path.display());
        }
        Command::Compare { runs, out } => {
            let rows = compare(&runs)?;
            let out = match std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
                Some(root) if out.is_relative() => PathBuf::from(root).join(out),
                _ => out,
            };
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(LabError::io(parent))?;
            }
            write_comparison(&out, &rows)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
