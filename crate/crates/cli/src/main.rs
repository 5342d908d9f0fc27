use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use credo_sim::cleanup::GridMap;
use credo_sim::incentive::{render_sign_map, StageGameParams};
use credo_sim::runner::{self, Environment, ExperimentConfig, IncentiveConfig, RunOptions, OUTPUT_DIR_ENV};

#[derive(Parser, Debug)]
#[command(name = "credo", version, about = "Credo-driven multi-agent team simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct OutputArgs {
    /// Output directory (overrides the config and the environment variable)
    #[arg(short, long, env = OUTPUT_DIR_ENV)]
    out: Option<PathBuf>,

    /// Overwrite existing result files
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Experiment config (TOML)
    config: PathBuf,

    /// Replace the configured seed list
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Replace the credo sweep increment
    #[arg(long)]
    credo_sweep: Option<f64>,

    /// Override the episode count of the environment block
    #[arg(long)]
    episodes: Option<u64>,

    /// Maximum number of runs in parallel
    #[arg(short, long)]
    jobs: Option<usize>,

    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    #[arg(long, default_value_t = 5.0)]
    b: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0])]
    c: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.06, 0.2, 0.5])]
    nu: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    teams: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write closed-form incentive grids, one CSV per (nu, c)
    AnalyzeIncentives {
        /// Use an incentive config instead of the grid flags
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        grid: GridArgs,
        /// Simplex increment
        #[arg(long, default_value_t = 0.02)]
        increment: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run an IPD config
    RunIpd(RunArgs),
    /// Run a Cleanup config
    RunCleanup(RunArgs),
    /// Run any config over its credo sweep
    Sweep(RunArgs),
    /// Seed-averaged tables from a results directory
    Report {
        dir: PathBuf,
        /// Overwrite existing report files
        #[arg(long)]
        force: bool,
    },
    /// Print ASCII incentive sign maps, optionally the Cleanup map
    RenderMaps {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 0.05)]
        increment: f64,
        /// Also print this Cleanup map ("default" for the bundled one)
        #[arg(long)]
        map: Option<String>,
    },
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) {
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if args.credo_sweep.is_some() {
        cfg.credo_sweep = args.credo_sweep;
    }
    if args.jobs.is_some() {
        cfg.parallelism = args.jobs;
    }
    if let Some(episodes) = args.episodes {
        let block = match cfg.environment {
            Environment::Ipd => cfg.ipd.as_mut(),
            Environment::Cleanup => cfg.cleanup.as_mut(),
            Environment::Incentive => None,
        };
        if let Some(block) = block {
            block.insert("episodes".into(), toml::Value::Integer(episodes as i64));
        }
    }
}

fn execute(cfg: &ExperimentConfig, output: &OutputArgs) -> Result<()> {
    cfg.validate()?;
    let opts = RunOptions {
        output_dir: cfg.resolve_output_dir(output.out.as_deref()),
        force: output.force,
    };
    let rep = runner::run(cfg, &opts)?;
    log::info!("{} runs written to {}", rep.manifests.len(), opts.output_dir.display());
    if let Some(agg) = rep.aggregate {
        println!("{}", agg.display());
    } else {
        for m in &rep.manifests {
            for f in &m.outputs {
                println!("{}", opts.output_dir.join(f).display());
            }
        }
    }
    Ok(())
}

fn run_config(args: &RunArgs, expected: Option<Environment>, need_sweep: bool) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    apply_overrides(&mut cfg, args);
    if let Some(env) = expected {
        if cfg.environment != env {
            return Err(credo_sim::Error::Config(format!(
                "{} configures environment {}, expected {}",
                args.config.display(),
                cfg.environment.name(),
                env.name()
            ))
            .into());
        }
    }
    if need_sweep && cfg.credo_sweep.is_none() && cfg.environment != Environment::Incentive {
        return Err(credo_sim::Error::Config("sweep needs credo_sweep in the config or --credo-sweep".into()).into());
    }
    execute(&cfg, &args.output)
}

fn report(dir: &Path, force: bool) -> Result<()> {
    let tables = runner::report(dir)?;
    if tables.is_empty() {
        log::warn!("no completed runs found in {}", dir.display());
        return Ok(());
    }
    for path in runner::write_report(dir, &tables, force)? {
        println!("{}", path.display());
    }
    for t in &tables {
        let flagged = t.rows.iter().filter(|r| r.missing_runs > 0).count();
        if flagged > 0 {
            log::warn!("{flagged} {} rows have missing runs", t.environment.name());
        }
    }
    Ok(())
}

fn render_maps(grid: &GridArgs, increment: f64, map: Option<&str>) -> Result<()> {
    for &nu in &grid.nu {
        for &c in &grid.c {
            let params = StageGameParams::new(grid.b, c, nu, grid.teams)?;
            println!("b={} c={c} nu={nu} (top: team, left: self, right: system)", grid.b);
            print!("{}", render_sign_map(&params, increment)?);
            println!();
        }
    }
    match map {
        None => {}
        Some("default") => print!("{}", GridMap::default_map().to_ascii()),
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            print!("{}", GridMap::parse(&text)?.to_ascii());
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::AnalyzeIncentives {
            config,
            grid,
            increment,
            output,
        } => {
            let cfg = match config {
                Some(path) => {
                    let cfg = ExperimentConfig::load(&path).with_context(|| format!("loading {}", path.display()))?;
                    if cfg.environment != Environment::Incentive {
                        bail!(credo_sim::Error::Config(format!(
                            "{} is not an incentive config",
                            path.display()
                        )));
                    }
                    cfg
                }
                None => ExperimentConfig {
                    environment: Environment::Incentive,
                    credo_sweep: None,
                    seeds: vec![0],
                    output_dir: None,
                    parallelism: None,
                    snapshot_policies: false,
                    grid: None,
                    ipd: None,
                    cleanup: None,
                    incentive: Some(IncentiveConfig {
                        b: grid.b,
                        c: grid.c,
                        nu: grid.nu,
                        num_teams: grid.teams,
                        increment,
                    }),
                },
            };
            execute(&cfg, &output)
        }
        Command::RunIpd(args) => run_config(&args, Some(Environment::Ipd), false),
        Command::RunCleanup(args) => run_config(&args, Some(Environment::Cleanup), false),
        Command::Sweep(args) => run_config(&args, None, true),
        Command::Report { dir, force } => report(&dir, force),
        Command::RenderMaps { grid, increment, map } => render_maps(&grid, increment, map.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<credo_sim::Error>() {
        Some(e) if e.is_config_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
