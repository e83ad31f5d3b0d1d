use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use softreset::bench::{
    recovery_steps, run_experiment, sweep, toy_configs, ExperimentConfig, SweepSpec,
};
use softreset::selfcheck;

#[derive(Parser)]
#[command(
    name = "softreset",
    version,
    about = "Soft parameter resets on non-stationary streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a grid of configs and select the best point per method.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Mean-tracking toy: SGD at two rates, reset-at-switch and Soft Reset.
    Toy {
        /// Number of mean switches.
        #[arg(long, default_value_t = 20)]
        switches: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Fast invariant checks.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// Output directory for CSV and summary files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Directory with IDX image and label files.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use the synthetic dataset even if the config names an IDX directory.
    #[arg(long)]
    synthetic: bool,
}

impl Common {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(dir) = &self.data {
            cfg.data.idx_dir = Some(dir.clone());
        }
        if self.synthetic {
            cfg.data.idx_dir = None;
        }
    }

    fn out_for(&self, cfg: &ExperimentConfig) -> Option<PathBuf> {
        self.out.clone().or_else(|| cfg.output.clone())
    }
}

fn run(config: &Path, common: &Common) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    common.apply(&mut cfg);
    let seeds = common.seeds.clone().unwrap_or_else(|| cfg.seeds());
    let out = common.out_for(&cfg);
    info!("running {} on seeds {seeds:?}", cfg.name);
    let (summary, _) = run_experiment(&cfg, &seeds, out.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if summary.failed() {
        for f in &summary.failures {
            eprintln!("seed {} aborted at step {}: {}", f.seed, f.step, f.error);
        }
        bail!(
            "{} of {} seeds aborted",
            summary.failures.len(),
            seeds.len()
        );
    }
    Ok(())
}

fn run_sweep(config: &Path, common: &Common) -> Result<()> {
    let spec = SweepSpec::load(config)?;
    let mut configs = spec.expand()?;
    for cfg in &mut configs {
        common.apply(cfg);
    }
    info!("sweeping {} points", configs.len());
    let result = sweep(&configs, common.seeds.as_deref(), common.out.as_deref())?;
    for (method, &i) in &result.best {
        let p = &result.points[i];
        println!("{method}\t{}\t{:.4}", p.config.name, p.cumulative_error);
    }
    let failed = result.points.iter().filter(|p| p.failed).count();
    if failed > 0 {
        bail!("{failed} sweep points had aborted seeds");
    }
    Ok(())
}

fn run_toy(switches: usize, common: &Common) -> Result<()> {
    if switches == 0 {
        bail!("--switches must be at least 1");
    }
    let mut aborted = 0;
    println!("config\tcumulative_sq_error\tmean_recovery_steps");
    for cfg in toy_configs(switches) {
        let seeds = common.seeds.clone().unwrap_or_else(|| cfg.seeds());
        let (summary, records) = run_experiment(&cfg, &seeds, common.out.as_deref())?;
        aborted += summary.failures.len();
        let segment = cfg.stream.segment_length;
        let steps: Vec<f64> = records
            .iter()
            .flat_map(|r| recovery_steps(r, segment, 0.2))
            .map(|s| s.unwrap_or(segment) as f64)
            .collect();
        let mean = steps.iter().sum::<f64>() / steps.len().max(1) as f64;
        println!(
            "{}\t{:.4}\t{mean:.2}",
            cfg.name, summary.cumulative_error.mean
        );
    }
    if aborted > 0 {
        bail!("{aborted} toy seeds aborted");
    }
    Ok(())
}

fn run_selfcheck(seed: u64) -> Result<()> {
    let checks = selfcheck::run_all(seed);
    for c in &checks {
        println!(
            "{}\t{}\t{}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} checks failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, common } => {
            run(&config, &common).with_context(|| format!("run {}", config.display()))
        }
        Command::Sweep { config, common } => {
            run_sweep(&config, &common).with_context(|| format!("sweep {}", config.display()))
        }
        Command::Toy { switches, common } => run_toy(switches, &common),
        Command::Selfcheck { seed } => run_selfcheck(seed),
    }
}
