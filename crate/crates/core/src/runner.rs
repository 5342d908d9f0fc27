//! Experiment harness: configuration, credo sweeps, seed derivation, CSV
//! output and run manifests.
//!
//! A config names one environment and carries that environment's block. The
//! runner expands the block into sweep points (credo lattice x optional `nu`
//! and `c` grids) times seeds, runs every combination and writes one set of
//! files per run plus an aggregate summary.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cleanup::{run_cleanup_experiment, CleanupConfig};
use crate::credo::{simplex_lattice, CredoVector};
use crate::error::{Error, Result};
use crate::incentive::{incentive_grid, StageGameParams};
use crate::ipd::{run_ipd_experiment, IpdConfig};
use crate::metrics::division_of_labor;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "CREDO_OUTPUT_DIR";

pub const INCENTIVE_HEADER: &str = "psi,phi,omega,nu,b,c,num_teams,incentive";
pub const IPD_WINDOW_HEADER: &str = "seed,episode_window,coop_total,coop_in_team,coop_out_team,mean_credo_reward";
pub const IPD_SUMMARY_HEADER: &str =
    "seed,psi,phi,omega,nu,b,c,mean_credo_reward,equality,coop_total,coop_in_team,coop_out_team";
pub const CLEANUP_SUMMARY_HEADER: &str = "seed,psi,phi,omega,mean_credo_reward,equality";
pub const CLEANUP_AGENTS_HEADER: &str = "seed,agent_id,team,apples,cleans,punishes,exo_reward,credo_reward";
pub const Q_VALUES_HEADER: &str = "agent_id,state,action,q";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Environment {
    Ipd,
    Cleanup,
    Incentive,
}

impl Environment {
    pub fn name(self) -> &'static str {
        match self {
            Environment::Ipd => "ipd",
            Environment::Cleanup => "cleanup",
            Environment::Incentive => "incentive",
        }
    }
}

fn default_increment() -> f64 {
    0.02
}

fn default_teams() -> usize {
    5
}

/// Grid of stage-game environments for the incentive analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncentiveConfig {
    pub b: f64,
    pub c: Vec<f64>,
    pub nu: Vec<f64>,
    #[serde(default = "default_teams")]
    pub num_teams: usize,
    #[serde(default = "default_increment")]
    pub increment: f64,
}

impl IncentiveConfig {
    pub fn environments(&self) -> Result<Vec<StageGameParams>> {
        let mut out = Vec::new();
        for &nu in &self.nu {
            for &c in &self.c {
                out.push(StageGameParams::new(self.b, c, nu, self.num_teams)?);
            }
        }
        Ok(out)
    }
}

/// Extra environment grid for IPD sweeps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamGrid {
    #[serde(default)]
    pub nu: Vec<f64>,
    #[serde(default)]
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: Environment,
    /// Simplex increment; when set, every lattice credo is run homogeneously.
    #[serde(default)]
    pub credo_sweep: Option<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Maximum number of runs executed concurrently (defaults to all cores).
    #[serde(default)]
    pub parallelism: Option<usize>,
    /// Also dump per-agent Q tables for IPD runs.
    #[serde(default)]
    pub snapshot_policies: bool,
    #[serde(default)]
    pub grid: Option<ParamGrid>,
    #[serde(default)]
    pub ipd: Option<toml::Table>,
    #[serde(default)]
    pub cleanup: Option<toml::Table>,
    #[serde(default)]
    pub incentive: Option<IncentiveConfig>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Checks structural invariants and that every sweep point yields a
    /// valid environment config.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if let Some(inc) = self.credo_sweep {
            crate::credo::lattice_divisions(inc)?;
        }
        if self.parallelism == Some(0) {
            return Err(Error::config("parallelism must be positive"));
        }
        match self.environment {
            Environment::Incentive => {
                let block = self
                    .incentive
                    .as_ref()
                    .ok_or_else(|| Error::config("missing [incentive] block"))?;
                block.environments()?;
                crate::credo::lattice_divisions(block.increment)?;
            }
            Environment::Ipd => {
                for p in self.sweep_points()? {
                    self.ipd_config(&p, 0)?.validate()?;
                }
            }
            Environment::Cleanup => {
                for p in self.sweep_points()? {
                    self.cleanup_config(&p, 0)?.validate()?;
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the config.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex_digest(canonical.as_bytes())
    }

    pub fn resolve_output_dir(&self, cli_override: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_override {
            return p.to_path_buf();
        }
        if let Ok(p) = std::env::var(OUTPUT_DIR_ENV) {
            if !p.is_empty() {
                return PathBuf::from(p);
            }
        }
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("results"))
    }

    fn block(&self) -> Result<&toml::Table> {
        let block = match self.environment {
            Environment::Ipd => self.ipd.as_ref(),
            Environment::Cleanup => self.cleanup.as_ref(),
            Environment::Incentive => None,
        };
        block.ok_or_else(|| Error::config(format!("missing [{}] block", self.environment.name())))
    }

    pub fn sweep_points(&self) -> Result<Vec<SweepPoint>> {
        if self.environment == Environment::Incentive {
            let block = self
                .incentive
                .as_ref()
                .ok_or_else(|| Error::config("missing [incentive] block"))?;
            return Ok(block
                .environments()?
                .into_iter()
                .enumerate()
                .map(|(index, p)| SweepPoint {
                    index,
                    credo: None,
                    nu: Some(p.nu),
                    c: Some(p.c),
                })
                .collect());
        }
        let credos: Vec<Option<CredoVector>> = match self.credo_sweep {
            Some(inc) => simplex_lattice(inc)?.into_iter().map(Some).collect(),
            None => vec![None],
        };
        let grid = self.grid.clone().unwrap_or_default();
        if self.environment == Environment::Cleanup && (!grid.nu.is_empty() || !grid.c.is_empty()) {
            return Err(Error::config("nu/c grids only apply to the ipd environment"));
        }
        let nus: Vec<Option<f64>> = if grid.nu.is_empty() {
            vec![None]
        } else {
            grid.nu.iter().map(|v| Some(*v)).collect()
        };
        let cs: Vec<Option<f64>> = if grid.c.is_empty() {
            vec![None]
        } else {
            grid.c.iter().map(|v| Some(*v)).collect()
        };
        let mut out = Vec::new();
        for &nu in &nus {
            for &c in &cs {
                for &credo in &credos {
                    out.push(SweepPoint {
                        index: out.len(),
                        credo,
                        nu,
                        c,
                    });
                }
            }
        }
        Ok(out)
    }

    fn patched_block(&self, point: &SweepPoint, seed: u64) -> Result<toml::Table> {
        let mut block = self.block()?.clone();
        if let Some(credo) = point.credo {
            block.insert(
                "credos".into(),
                toml::Value::Array(credo.as_array().iter().map(|w| toml::Value::Float(*w)).collect()),
            );
        }
        if let Some(nu) = point.nu {
            block.insert("nu".into(), toml::Value::Float(nu));
        }
        if let Some(c) = point.c {
            block.insert("c".into(), toml::Value::Float(c));
        }
        block.insert("seed".into(), toml::Value::Integer(seed as i64));
        Ok(block)
    }

    pub fn ipd_config(&self, point: &SweepPoint, seed: u64) -> Result<IpdConfig> {
        Ok(self.patched_block(point, seed)?.try_into()?)
    }

    pub fn cleanup_config(&self, point: &SweepPoint, seed: u64) -> Result<CleanupConfig> {
        Ok(self.patched_block(point, seed)?.try_into()?)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-run seed: the first eight bytes of SHA-256 over the little-endian
/// master seed, sweep index and seed index, masked to 63 bits so it fits a
/// TOML integer.
pub fn derive_seed(master_seed: u64, sweep_index: usize, seed_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update((sweep_index as u64).to_le_bytes());
    h.update((seed_index as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap()) & (i64::MAX as u64)
}

/// Every lattice credo at `increment`.
pub fn generate_credo_sweep(increment: f64) -> Result<Vec<CredoVector>> {
    simplex_lattice(increment)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub credo: Option<CredoVector>,
    pub nu: Option<f64>,
    pub c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub environment: Environment,
    pub config_hash: String,
    pub seed: u64,
    pub seed_index: usize,
    pub derived_seed: u64,
    pub sweep_point: SweepPoint,
    pub engine_version: String,
    pub started_at: u64,
    pub finished_at: u64,
    /// Result files, relative to the output directory.
    pub outputs: Vec<PathBuf>,
    /// The run's one-row summary CSV, if the environment produces one.
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub output_dir: PathBuf,
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub manifests: Vec<RunManifest>,
    /// Aggregate summary CSV (absent for the incentive environment).
    pub aggregate: Option<PathBuf>,
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes `bytes` to `path` unless it exists and `force` is off.
pub fn write_result_file(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::WouldOverwrite(path.to_path_buf()));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Builds CSV text from a header line and rows of already formatted fields.
pub fn csv_text(header: &str, rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header.split(','))?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
}

/// Shortest round-trip formatting; deterministic on every platform.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn credo_fields(credo: Option<CredoVector>) -> [String; 3] {
    match credo {
        Some(c) => c.as_array().map(fmt_f64),
        None => Default::default(),
    }
}

fn run_stem(env: Environment, point: &SweepPoint, seed: u64) -> String {
    format!("{}_p{:04}_seed{}", env.name(), point.index, seed)
}

struct RunFiles {
    files: Vec<(PathBuf, Vec<u8>)>,
    summary_row: Option<Vec<String>>,
    summary_name: Option<PathBuf>,
}

fn run_ipd_point(cfg: &ExperimentConfig, point: &SweepPoint, seed: u64, derived: u64) -> Result<RunFiles> {
    let ipd = cfg.ipd_config(point, derived)?;
    let out = run_ipd_experiment(&ipd)?;
    let stem = run_stem(Environment::Ipd, point, seed);
    let window_rows: Vec<Vec<String>> = out
        .windows
        .iter()
        .map(|w| {
            vec![
                seed.to_string(),
                w.episode_window.to_string(),
                fmt_opt(w.cooperation.total_rate),
                fmt_opt(w.cooperation.in_team_rate),
                fmt_opt(w.cooperation.out_team_rate),
                fmt_f64(w.mean_credo_reward),
            ]
        })
        .collect();
    let mut files = vec![(
        PathBuf::from(format!("{stem}_windows.csv")),
        csv_text(IPD_WINDOW_HEADER, &window_rows)?,
    )];
    let summary_row = out.summary.as_ref().map(|s| {
        let [psi, phi, omega] = credo_fields(ipd.credos.homogeneous());
        vec![
            seed.to_string(),
            psi,
            phi,
            omega,
            fmt_f64(ipd.nu),
            fmt_f64(ipd.b),
            fmt_f64(ipd.c),
            fmt_f64(s.mean_credo_reward),
            fmt_opt(s.equality),
            fmt_opt(s.cooperation.total_rate),
            fmt_opt(s.cooperation.in_team_rate),
            fmt_opt(s.cooperation.out_team_rate),
        ]
    });
    let summary_name = PathBuf::from(format!("{stem}_summary.csv"));
    files.push((
        summary_name.clone(),
        csv_text(IPD_SUMMARY_HEADER, summary_row.as_slice())?,
    ));
    if cfg.snapshot_policies {
        let rows: Vec<Vec<String>> = out
            .q_values
            .iter()
            .enumerate()
            .flat_map(|(agent, q)| {
                q.iter().enumerate().flat_map(move |(state, qa)| {
                    ["C", "D"]
                        .iter()
                        .zip(qa)
                        .map(move |(a, v)| vec![agent.to_string(), state.to_string(), a.to_string(), fmt_f64(*v)])
                })
            })
            .collect();
        files.push((
            PathBuf::from(format!("{stem}_qvalues.csv")),
            csv_text(Q_VALUES_HEADER, &rows)?,
        ));
    }
    Ok(RunFiles {
        files,
        summary_row,
        summary_name: Some(summary_name),
    })
}

fn run_cleanup_point(cfg: &ExperimentConfig, point: &SweepPoint, seed: u64, derived: u64) -> Result<RunFiles> {
    let cc = cfg.cleanup_config(point, derived)?;
    let out = run_cleanup_experiment(&cc)?;
    let stem = run_stem(Environment::Cleanup, point, seed);
    // Per-agent totals over the whole run.
    let mut totals = out.episodes[0].agents.clone();
    for ep in &out.episodes[1..] {
        for (t, a) in totals.iter_mut().zip(&ep.agents) {
            t.apples += a.apples;
            t.cleans += a.cleans;
            t.punishes += a.punishes;
            t.exo_reward += a.exo_reward;
            t.credo_reward += a.credo_reward;
        }
    }
    let labor = division_of_labor(&totals);
    log::debug!("{stem}: specialization index {}", labor.specialization_index);
    let agent_rows: Vec<Vec<String>> = totals
        .iter()
        .map(|a| {
            vec![
                seed.to_string(),
                a.agent_id.to_string(),
                a.team.to_string(),
                a.apples.to_string(),
                a.cleans.to_string(),
                a.punishes.to_string(),
                fmt_f64(a.exo_reward),
                fmt_f64(a.credo_reward),
            ]
        })
        .collect();
    let [psi, phi, omega] = credo_fields(cc.credos.homogeneous());
    let row = vec![
        seed.to_string(),
        psi,
        phi,
        omega,
        fmt_f64(out.summary.mean_credo_reward),
        fmt_opt(out.summary.equality),
    ];
    let summary_name = PathBuf::from(format!("{stem}_summary.csv"));
    Ok(RunFiles {
        files: vec![
            (
                PathBuf::from(format!("{stem}_agents.csv")),
                csv_text(CLEANUP_AGENTS_HEADER, &agent_rows)?,
            ),
            (
                summary_name.clone(),
                csv_text(CLEANUP_SUMMARY_HEADER, std::slice::from_ref(&row))?,
            ),
        ],
        summary_row: Some(row),
        summary_name: Some(summary_name),
    })
}

fn run_incentive_point(cfg: &ExperimentConfig, point: &SweepPoint) -> Result<RunFiles> {
    let block = cfg.incentive.as_ref().expect("validated");
    let params = StageGameParams::new(block.b, point.c.unwrap(), point.nu.unwrap(), block.num_teams)?;
    let grid = incentive_grid(&params, block.increment)?;
    let rows: Vec<Vec<String>> = grid
        .entries
        .iter()
        .map(|(credo, v)| {
            let [psi, phi, omega] = credo.as_array().map(fmt_f64);
            vec![
                psi,
                phi,
                omega,
                fmt_f64(params.nu),
                fmt_f64(params.b),
                fmt_f64(params.c),
                params.num_teams.to_string(),
                fmt_f64(*v),
            ]
        })
        .collect();
    let name = format!("incentive_nu{}_c{}.csv", fmt_f64(params.nu), fmt_f64(params.c));
    Ok(RunFiles {
        files: vec![(PathBuf::from(name), csv_text(INCENTIVE_HEADER, &rows)?)],
        summary_row: None,
        summary_name: None,
    })
}

struct RunJob {
    point: SweepPoint,
    seed: u64,
    seed_index: usize,
    derived: u64,
}

/// Executes every (sweep point x seed) combination and writes results.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let points = cfg.sweep_points()?;
    let jobs: Vec<RunJob> = if cfg.environment == Environment::Incentive {
        points
            .into_iter()
            .map(|point| RunJob {
                point,
                seed: 0,
                seed_index: 0,
                derived: 0,
            })
            .collect()
    } else {
        points
            .iter()
            .flat_map(|point| {
                cfg.seeds.iter().enumerate().map(move |(k, &seed)| RunJob {
                    point: *point,
                    seed,
                    seed_index: k,
                    derived: derive_seed(seed, point.index, k),
                })
            })
            .collect()
    };
    fs::create_dir_all(&opts.output_dir).map_err(|e| Error::io(&opts.output_dir, e))?;

    let execute = |job: &RunJob| -> Result<(RunManifest, Option<Vec<String>>)> {
        let started_at = now_secs();
        let files = match cfg.environment {
            Environment::Ipd => run_ipd_point(cfg, &job.point, job.seed, job.derived)?,
            Environment::Cleanup => run_cleanup_point(cfg, &job.point, job.seed, job.derived)?,
            Environment::Incentive => run_incentive_point(cfg, &job.point)?,
        };
        for (name, bytes) in &files.files {
            write_result_file(&opts.output_dir.join(name), bytes, opts.force)?;
        }
        let manifest = RunManifest {
            environment: cfg.environment,
            config_hash: hash.clone(),
            seed: job.seed,
            seed_index: job.seed_index,
            derived_seed: job.derived,
            sweep_point: job.point,
            engine_version: ENGINE_VERSION.to_string(),
            started_at,
            finished_at: now_secs(),
            outputs: files.files.iter().map(|(n, _)| n.clone()).collect(),
            summary: files.summary_name.clone(),
        };
        let stem = match cfg.environment {
            Environment::Incentive => format!("incentive_p{:04}", job.point.index),
            env => run_stem(env, &job.point, job.seed),
        };
        let manifest_path = opts.output_dir.join(format!("{stem}.manifest.json"));
        write_result_file(
            &manifest_path,
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
            opts.force,
        )?;
        Ok((manifest, files.summary_row))
    };

    let threads = cfg
        .parallelism
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    // Collecting an indexed parallel iterator keeps job order.
    let results: Vec<Result<(RunManifest, Option<Vec<String>>)>> =
        pool.install(|| jobs.par_iter().map(execute).collect());

    let mut manifests = Vec::with_capacity(results.len());
    let mut rows = Vec::new();
    for r in results {
        let (m, row) = r?;
        manifests.push(m);
        rows.extend(row);
    }
    let aggregate = match cfg.environment {
        Environment::Incentive => None,
        env => {
            let header = if env == Environment::Ipd {
                IPD_SUMMARY_HEADER
            } else {
                CLEANUP_SUMMARY_HEADER
            };
            let path = opts.output_dir.join(format!("{}_summary.csv", env.name()));
            write_result_file(&path, &csv_text(header, &rows)?, opts.force)?;
            Some(path)
        }
    };
    Ok(RunReport { manifests, aggregate })
}

/// One row of a seed-averaged report table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// Key columns (everything in the summary header except `seed` and metrics).
    pub key: Vec<String>,
    /// Seed-averaged metrics; `None` when no seed defined the metric.
    pub metrics: Vec<Option<f64>>,
    pub seed_count: usize,
    /// Runs whose manifest exists but whose summary is missing or empty.
    pub missing_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub environment: Environment,
    pub key_columns: Vec<String>,
    pub metric_columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn header(&self) -> String {
        let mut cols = self.key_columns.clone();
        cols.extend(self.metric_columns.iter().cloned());
        cols.push("seed_count".into());
        cols.push("status".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut v = r.key.clone();
                v.extend(r.metrics.iter().map(|m| fmt_opt(*m)));
                v.push(r.seed_count.to_string());
                v.push(if r.missing_runs == 0 {
                    "complete".into()
                } else {
                    format!("partial:missing={}", r.missing_runs)
                });
                v
            })
            .collect();
        csv_text(&self.header(), &rows)
    }
}

fn table_layout(env: Environment) -> (usize, usize) {
    // (number of key columns after `seed`, number of metric columns)
    match env {
        Environment::Ipd => (6, 5),
        Environment::Cleanup => (3, 2),
        Environment::Incentive => (0, 0),
    }
}

/// Joins the per-run summaries of a results directory into seed-averaged
/// tables, one per environment. Runs with a manifest but no usable summary
/// are counted in their row's `missing_runs` instead of being dropped.
pub fn report(dir: &Path) -> Result<Vec<ReportTable>> {
    let mut manifests: Vec<RunManifest> = Vec::new();
    if dir.exists() {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".manifest.json"))
            .collect();
        entries.sort();
        for p in entries {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            manifests.push(serde_json::from_str(&text)?);
        }
    }

    struct Acc {
        sums: Vec<f64>,
        counts: Vec<usize>,
        seeds: usize,
        missing: usize,
    }
    let mut groups: BTreeMap<(Environment, usize), (Vec<String>, Acc)> = BTreeMap::new();
    let mut headers: BTreeMap<Environment, Vec<String>> = BTreeMap::new();
    for m in &manifests {
        let (nkeys, nmetrics) = table_layout(m.environment);
        let Some(summary) = &m.summary else { continue };
        let header = match m.environment {
            Environment::Ipd => IPD_SUMMARY_HEADER,
            _ => CLEANUP_SUMMARY_HEADER,
        };
        headers
            .entry(m.environment)
            .or_insert_with(|| header.split(',').map(String::from).collect());
        let row: Option<Vec<String>> = fs::read(dir.join(summary)).ok().and_then(|bytes| {
            let mut r = csv::Reader::from_reader(bytes.as_slice());
            r.records()
                .next()?
                .ok()
                .map(|rec| rec.iter().map(String::from).collect())
        });
        let entry = groups.entry((m.environment, m.sweep_point.index)).or_insert_with(|| {
            (
                Vec::new(),
                Acc {
                    sums: vec![0.0; nmetrics],
                    counts: vec![0; nmetrics],
                    seeds: 0,
                    missing: 0,
                },
            )
        });
        match row {
            Some(row) if row.len() == 1 + nkeys + nmetrics => {
                if entry.0.is_empty() {
                    entry.0 = row[1..=nkeys].to_vec();
                }
                entry.1.seeds += 1;
                for (k, field) in row[1 + nkeys..].iter().enumerate() {
                    if let Ok(v) = field.parse::<f64>() {
                        entry.1.sums[k] += v;
                        entry.1.counts[k] += 1;
                    }
                }
            }
            _ => entry.1.missing += 1,
        }
    }

    let mut tables: BTreeMap<Environment, ReportTable> = BTreeMap::new();
    for ((env, _), (key, acc)) in groups {
        let (nkeys, _) = table_layout(env);
        let header = &headers[&env];
        let table = tables.entry(env).or_insert_with(|| ReportTable {
            environment: env,
            key_columns: header[1..=nkeys].to_vec(),
            metric_columns: header[1 + nkeys..].to_vec(),
            rows: Vec::new(),
        });
        table.rows.push(ReportRow {
            key: if key.is_empty() {
                vec![String::new(); nkeys]
            } else {
                key
            },
            metrics: acc
                .sums
                .iter()
                .zip(&acc.counts)
                .map(|(s, &n)| (n > 0).then(|| s / n as f64))
                .collect(),
            seed_count: acc.seeds,
            missing_runs: acc.missing,
        });
    }
    Ok(tables.into_values().collect())
}

/// Writes `report_<env>.csv` for every table; returns the written paths.
pub fn write_report(dir: &Path, tables: &[ReportTable], force: bool) -> Result<Vec<PathBuf>> {
    tables
        .iter()
        .map(|t| {
            let path = dir.join(format!("report_{}.csv", t.environment.name()));
            write_result_file(&path, &t.to_csv()?, force)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const IPD_TOML: &str = r#"
environment = "ipd"
seeds = [1, 2]
parallelism = 2

[ipd]
population_size = 6
num_teams = 3
nu = 0.5
b = 5.0
c = 1.0
episodes = 200
window = 50
credos = [0.0, 1.0, 0.0]
"#;

    #[test]
    fn sweep_sizes() {
        assert_eq!(generate_credo_sweep(0.2).unwrap().len(), 21);
        let v = generate_credo_sweep(1.0).unwrap();
        assert_eq!(
            v,
            vec![
                CredoVector::SYSTEM_FOCUSED,
                CredoVector::TEAM_FOCUSED,
                CredoVector::SELF_FOCUSED
            ]
        );
        assert_eq!(generate_credo_sweep(0.02).unwrap().len(), 1326);
        assert!(generate_credo_sweep(0.15).is_err());
    }

    #[test]
    fn seed_derivation_is_stable_and_distinct() {
        assert_eq!(derive_seed(7, 3, 1), derive_seed(7, 3, 1));
        assert_ne!(derive_seed(7, 3, 1), derive_seed(7, 1, 3));
        assert_ne!(derive_seed(7, 3, 1), derive_seed(8, 3, 1));
        // Pinned value: a change here breaks reproducibility of old results.
        assert_eq!(derive_seed(0, 0, 0), {
            let d = Sha256::digest([0u8; 24]);
            u64::from_le_bytes(d[..8].try_into().unwrap()) & (i64::MAX as u64)
        });
    }

    #[test]
    fn config_parsing_and_validation() {
        let cfg = ExperimentConfig::from_toml_str(IPD_TOML).unwrap();
        assert_eq!(cfg.sweep_points().unwrap().len(), 1);
        assert_eq!(
            cfg.config_hash(),
            ExperimentConfig::from_toml_str(IPD_TOML).unwrap().config_hash()
        );

        let no_seeds = IPD_TOML.replace("seeds = [1, 2]", "seeds = []");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&no_seeds),
            Err(Error::Config(_))
        ));
        let bad_sweep = IPD_TOML.replace("parallelism = 2", "credo_sweep = 0.3");
        assert!(ExperimentConfig::from_toml_str(&bad_sweep).is_err());
        let bad_cost = IPD_TOML.replace("c = 1.0", "c = 9.0");
        assert!(ExperimentConfig::from_toml_str(&bad_cost)
            .unwrap_err()
            .is_config_error());
        let unknown = IPD_TOML.replace("window = 50", "window = 50\nwidnow = 3");
        assert!(ExperimentConfig::from_toml_str(&unknown).is_err());
    }

    #[test]
    fn sweep_with_grid() {
        let text = IPD_TOML.replace(
            "parallelism = 2",
            "credo_sweep = 0.5\n[grid]\nnu = [0.2, 0.5]\nc = [1.0, 2.0, 3.0]",
        );
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let pts = cfg.sweep_points().unwrap();
        assert_eq!(pts.len(), 6 * 2 * 3);
        let ipd = cfg.ipd_config(&pts[7], 99).unwrap();
        assert_eq!(ipd.seed, 99);
        assert_eq!(ipd.c, 2.0);
        assert_eq!(Some(ipd.credos.homogeneous().unwrap()), pts[7].credo);
    }

    #[test]
    fn run_writes_expected_files_and_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml_str(IPD_TOML).unwrap();
        let opts = RunOptions {
            output_dir: dir.path().to_path_buf(),
            force: false,
        };
        let rep = run(&cfg, &opts).unwrap();
        assert_eq!(rep.manifests.len(), 2);
        assert!(rep.manifests.iter().all(|m| m.config_hash == cfg.config_hash()));
        let windows = fs::read_to_string(dir.path().join("ipd_p0000_seed1_windows.csv")).unwrap();
        assert!(windows.starts_with(&format!("{IPD_WINDOW_HEADER}\n")));
        assert_eq!(windows.lines().count(), 1 + 4);
        let agg = fs::read_to_string(rep.aggregate.unwrap()).unwrap();
        assert_eq!(agg.lines().count(), 3);

        assert!(matches!(run(&cfg, &opts), Err(Error::WouldOverwrite(_))));
        let forced = RunOptions { force: true, ..opts };
        assert!(run(&cfg, &forced).is_ok());
    }

    #[test]
    fn report_averages_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml_str(IPD_TOML).unwrap();
        let opts = RunOptions {
            output_dir: dir.path().to_path_buf(),
            force: false,
        };
        run(&cfg, &opts).unwrap();
        let tables = report(dir.path()).unwrap();
        assert_eq!(tables.len(), 1);
        assert_eq!(tables[0].rows.len(), 1);
        assert_eq!(tables[0].rows[0].seed_count, 2);
        assert_eq!(tables[0].rows[0].missing_runs, 0);
        assert!(tables[0].header().ends_with("seed_count,status"));

        fs::remove_file(dir.path().join("ipd_p0000_seed2_summary.csv")).unwrap();
        let tables = report(dir.path()).unwrap();
        assert_eq!(tables[0].rows[0].seed_count, 1);
        assert_eq!(tables[0].rows[0].missing_runs, 1);
        let csv = String::from_utf8(tables[0].to_csv().unwrap()).unwrap();
        assert!(csv.contains("partial:missing=1"));

        let empty = tempfile::tempdir().unwrap();
        assert!(report(empty.path()).unwrap().is_empty());
    }
}
