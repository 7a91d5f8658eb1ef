use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use super::config::RunConfig;
use super::metrics::MetricsReport;
use super::runner::{RunOutput, StepLog};
use crate::error::{Error, Result};

pub const MATRIX_FILE: &str = "matrix.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.resolved.json";
pub const META_FILE: &str = "run.meta";
pub const MEMORY_FILE: &str = "memory.csv";
pub const LABELS_FILE: &str = "label_diagnostics.csv";

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Error::from(e).context(format!("cannot write {}", path.display())))
}

pub fn write_log(w: &mut impl Write, log: &[StepLog]) -> Result<()> {
    writeln!(w, "stage,epoch,step,ce,pca,dis,total")?;
    for r in log {
        writeln!(w, "{},{},{},{},{},{},{}", r.stage, r.epoch, r.step, r.ce, r.pca, r.dis, r.total)?;
    }
    Ok(())
}

pub fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Writes the results layout. Everything except `run.meta` is a pure
/// function of the configuration.
pub fn write_results(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::from(e).context(format!("cannot create {}", dir.display())))?;
    let mut w = create(dir, MATRIX_FILE)?;
    out.matrix.write_csv(&mut w)?;
    w.flush()?;
    write_json(dir, METRICS_FILE, &out.metrics)?;
    let mut w = create(dir, LOG_FILE)?;
    write_log(&mut w, &out.log)?;
    w.flush()?;
    write_json(dir, CONFIG_FILE, cfg)?;
    if let Some(mem) = &out.memory {
        let mut w = create(dir, MEMORY_FILE)?;
        mem.write_csv(&mut w)?;
        w.flush()?;
    }
    if !out.label_diagnostics.is_empty() {
        let mut w = create(dir, LABELS_FILE)?;
        writeln!(w, "stage,epoch,method,accuracy")?;
        for d in &out.label_diagnostics {
            writeln!(w, "{},{},{},{}", d.stage, d.epoch, d.method, d.accuracy)?;
        }
        w.flush()?;
    }
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut w = create(dir, META_FILE)?;
    writeln!(w, "finished_unix={secs}")?;
    writeln!(w, "version={}", env!("CARGO_PKG_VERSION"))?;
    w.flush()?;
    Ok(())
}

pub fn read_metrics(dir: &Path) -> Result<MetricsReport> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::from(e).context(format!("cannot read {}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}
