//! Command-line front end.
//!
//! Configuration is resolved in this order, later sources winning: built-in
//! defaults, `CDSL_LAB_SEED`, the config file, `--set` overrides, `--seed`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::protocol::results::{self, write_results};
use crate::protocol::{run_cdsl, run_stationary, AblationVariant, MetricsReport, RunConfig, RunOutput};

pub const SEED_ENV: &str = "CDSL_LAB_SEED";
pub const SWEEP_SEEDS: [u64; 3] = [2022, 2023, 2024];
pub const SUMMARY_FILE: &str = "summary.csv";
pub const DELTAS_FILE: &str = "deltas.csv";

#[derive(Debug, Parser)]
#[command(name = "cdsl-lab", version, about = "Continual domain shift learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one continual experiment and write its results directory.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Seed override, applied last.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep one labeler or augmentation threshold over a list of values.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Parameter to vary.
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values, e.g. 0.5,0.8,0.95.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<f64>,
        /// Seeds of the sub-runs.
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_SEEDS)]
        seeds: Vec<u64>,
    },
    /// Paired full and ablated runs for every seed, with a delta table.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// One of no_randmix, labeler=softmax, labeler=shot_style, no_pca.
        #[arg(long)]
        variant: String,
        /// Seeds of the paired runs.
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_SEEDS)]
        seeds: Vec<u64>,
    },
    /// Print the metrics of a results directory.
    Report {
        /// Directory written by `run`.
        results_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config file, or JSON when the extension is .json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override one config key, e.g. `--set labeler.r_top=3`; repeatable, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads for evaluation and parallel sub-runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    #[value(name = "r_con")]
    RCon,
    #[value(name = "r_top")]
    RTop,
    #[value(name = "r_top_prime")]
    RTopPrime,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::RCon => "r_con",
            SweepParam::RTop => "r_top",
            SweepParam::RTopPrime => "r_top_prime",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig, value: f64) {
        match self {
            SweepParam::RCon => cfg.randmix.r_con = value,
            SweepParam::RTop => cfg.labeler.r_top = value,
            SweepParam::RTopPrime => cfg.labeler.r_top_prime = value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, seed } => {
            let mut cfg = load_config(common.config.as_deref(), &common.overrides)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let out = with_jobs(common.jobs, || run_one(&cfg))??;
            write_results(&common.out, &cfg, &out)?;
            print!("{}", out.metrics.to_text());
            Ok(())
        }
        Command::Sweep { common, param, values, seeds } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides)?;
            let rows = cmd_sweep(&cfg, param, &values, &seeds, &common.out, common.jobs)?;
            print!("{}", fs::read_to_string(common.out.join(SUMMARY_FILE))?);
            debug_assert_eq!(rows.len(), values.len());
            Ok(())
        }
        Command::Ablate { common, variant, seeds } => {
            let variant: AblationVariant = variant.parse()?;
            let cfg = load_config(common.config.as_deref(), &common.overrides)?;
            cmd_ablate(&cfg, variant, &seeds, &common.out, common.jobs)?;
            print!("{}", fs::read_to_string(common.out.join(DELTAS_FILE))?);
            Ok(())
        }
        Command::Report { results_dir, format } => {
            print!("{}", cmd_report(&results_dir, format)?);
            Ok(())
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Resolves a configuration from an optional file plus `--set` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => Some(s.trim().parse::<u64>().map_err(|_| usage(format!("{SEED_ENV}={s:?} is not an integer seed")))?),
        Err(_) => None,
    };
    if let Some(seed) = env_seed {
        cfg.seed = seed;
    }
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let (file_cfg, has_seed) = parse_config_text(&text, is_json(path))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let seed = cfg.seed;
        cfg = file_cfg;
        if !has_seed {
            cfg.seed = seed;
        }
    }
    for o in overrides {
        cfg = apply_override(&cfg, o)?;
    }
    Ok(cfg)
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Parses a config document. The flag reports whether the document sets
/// `seed` itself.
pub fn parse_config_text(text: &str, json: bool) -> std::result::Result<(RunConfig, bool), String> {
    if json {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let raw: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Ok((cfg, raw.get("seed").is_some()))
    } else {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string().trim_end().to_string())?;
        let raw: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        Ok((cfg, raw.contains_key("seed")))
    }
}

/// Applies one `key=value` override. Dotted keys address nested tables; the
/// value is read as JSON when it parses, otherwise as a bare string.
pub fn apply_override(cfg: &RunConfig, item: &str) -> Result<RunConfig> {
    let (key, raw) = item.split_once('=').ok_or_else(|| usage(format!("--set {item:?}: expected KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(usage(format!("--set {item:?}: empty key")));
    }
    let value = serde_json::from_str::<Value>(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut doc = serde_json::to_value(cfg)?;
    let mut slot = &mut doc;
    for part in key.split('.') {
        let obj = match slot {
            Value::Object(map) => map,
            _ => return Err(usage(format!("--set {key}: {part:?} is not inside a table"))),
        };
        if !obj.contains_key(part) {
            return Err(usage(format!("--set {key}: unknown key {part:?}")));
        }
        slot = obj.get_mut(part).expect("checked above");
    }
    *slot = value;
    serde_json::from_value(doc).map_err(|e| usage(format!("--set {item}: {e}")))
}

fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// Runs `cfg`, dispatching to the stationary mode when it is set.
pub fn run_one(cfg: &RunConfig) -> Result<RunOutput> {
    if cfg.stationary {
        let seq = cfg.resolve_sequence()?;
        let out = run_stationary(cfg, &seq.domains[0], &seq.domains[1])?;
        return Ok(out.run);
    }
    run_cdsl(cfg)
}

fn run_into(cfg: &RunConfig, dir: &Path) -> Result<MetricsReport> {
    let out = run_one(cfg).map_err(|e| e.context(format!("run {}", dir.display())))?;
    write_results(dir, cfg, &out)?;
    Ok(out.metrics)
}

fn seed_dir(seed: u64) -> String {
    format!("seed{seed}")
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(usage("need at least one seed"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(usage("seeds must be distinct"));
    }
    Ok(())
}

fn mean_present(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One summary row of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub tdg: Option<f64>,
    pub tda: Option<f64>,
    pub fa: Option<f64>,
}

/// Sub-run directory of one sweep point.
pub fn sweep_dir(out: &Path, param: SweepParam, value: f64, seed: u64) -> PathBuf {
    out.join(format!("{}={value}", param.name())).join(seed_dir(seed))
}

pub fn cmd_sweep(
    base: &RunConfig,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    out: &Path,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(usage("--values is empty"));
    }
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(usage(format!("sweep value {v} is not finite")));
        }
        if values[..i].contains(v) {
            return Err(usage(format!("sweep value {v} is repeated")));
        }
    }
    check_seeds(seeds)?;
    let mut jobs_list = Vec::new();
    for &value in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            param.apply(&mut cfg, value);
            cfg.seed = seed;
            cfg.validate().map_err(|e| e.context(format!("{}={value}", param.name())))?;
            jobs_list.push((value, seed, cfg));
        }
    }
    let reports: Vec<MetricsReport> = with_jobs(jobs, || {
        jobs_list
            .par_iter()
            .map(|(value, seed, cfg)| run_into(cfg, &sweep_dir(out, param, *value, *seed)))
            .collect::<Result<Vec<_>>>()
    })??;

    let mut rows = Vec::new();
    for (i, &value) in values.iter().enumerate() {
        let chunk = &reports[i * seeds.len()..(i + 1) * seeds.len()];
        rows.push(SweepRow {
            value,
            tdg: mean_present(chunk.iter().map(|r| r.avg_tdg)),
            tda: mean_present(chunk.iter().map(|r| Some(r.avg_tda))),
            fa: mean_present(chunk.iter().map(|r| r.avg_fa)),
        });
    }
    let mut text = format!("{},tdg,tda,fa\n", param.name());
    for r in &rows {
        let _ = writeln!(text, "{},{},{},{}", r.value, cell(r.tdg), cell(r.tda), cell(r.fa));
    }
    write_file(&out.join(SUMMARY_FILE), &text)?;
    Ok(rows)
}

/// Full-minus-ablated averages for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationDelta {
    pub seed: u64,
    pub tdg: Option<f64>,
    pub tda: f64,
    pub fa: Option<f64>,
}

pub fn ablate_dir(out: &Path, arm: &str, seed: u64) -> PathBuf {
    out.join(arm).join(seed_dir(seed))
}

pub fn cmd_ablate(
    base: &RunConfig,
    variant: AblationVariant,
    seeds: &[u64],
    out: &Path,
    jobs: usize,
) -> Result<Vec<AblationDelta>> {
    check_seeds(seeds)?;
    let arm = variant.to_string();
    let mut jobs_list = Vec::new();
    for &seed in seeds {
        let full = RunConfig { seed, ..base.clone() };
        full.validate()?;
        let ablated = variant.apply(&full);
        ablated.validate()?;
        jobs_list.push((ablate_dir(out, "full", seed), full));
        jobs_list.push((ablate_dir(out, &arm, seed), ablated));
    }
    let reports: Vec<MetricsReport> = with_jobs(jobs, || {
        jobs_list.par_iter().map(|(dir, cfg)| run_into(cfg, dir)).collect::<Result<Vec<_>>>()
    })??;

    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
    let deltas: Vec<AblationDelta> = seeds
        .iter()
        .zip(reports.chunks(2))
        .map(|(&seed, pair)| AblationDelta {
            seed,
            tdg: diff(pair[0].avg_tdg, pair[1].avg_tdg),
            tda: pair[0].avg_tda - pair[1].avg_tda,
            fa: diff(pair[0].avg_fa, pair[1].avg_fa),
        })
        .collect();
    let mut text = String::from("seed,d_tdg,d_tda,d_fa\n");
    for d in &deltas {
        let _ = writeln!(text, "{},{},{},{}", d.seed, cell(d.tdg), cell(Some(d.tda)), cell(d.fa));
    }
    let _ = writeln!(
        text,
        "mean,{},{},{}",
        cell(mean_present(deltas.iter().map(|d| d.tdg))),
        cell(mean_present(deltas.iter().map(|d| Some(d.tda)))),
        cell(mean_present(deltas.iter().map(|d| d.fa))),
    );
    write_file(&out.join(DELTAS_FILE), &text)?;
    Ok(deltas)
}

pub fn cmd_report(dir: &Path, format: Format) -> Result<String> {
    let path = dir.join(results::METRICS_FILE);
    if !path.is_file() {
        return Err(usage(format!("{} not found; is {} a results directory?", path.display(), dir.display())));
    }
    let report = results::read_metrics(dir).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(match format {
        Format::Text => report.to_text(),
        Format::Csv => report.to_csv(),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&report)?;
            s.push('\n');
            s
        }
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::from(e).context(format!("cannot write {}", path.display())))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
