//! CSV and manifest writers, plus the file-level entry point used by the binary.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{locate, ConfigError, ExperimentConfig, Kind};
use crate::experiments::{run_kind, Outcome, RunError, Table};

/// Hash of the experiment kind and the raw configuration bytes.
pub fn config_hash(kind: Kind, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(kind.name().as_bytes());
    h.update(b"\n");
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub kind: String,
    pub config_hash: String,
    pub code_version: String,
    pub base_seed: u64,
    pub workers: usize,
    pub wall_time_s: f64,
    pub stages: Vec<Stage>,
    pub csv: String,
    pub rows: usize,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
}

/// Writes `table` with a trailing `config_hash` column.
pub fn write_csv<W: io::Write>(table: &Table, hash: &str, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = table.header.clone();
    header.push("config_hash");
    w.write_record(&header)?;
    for row in &table.rows {
        w.write_record(row.iter().map(String::as_str).chain([hash]))?;
    }
    w.flush()?;
    Ok(())
}

/// Result of [`run_file`].
#[derive(Debug)]
pub struct RunReport {
    pub outcome: Outcome,
    pub csv: PathBuf,
    pub manifest: PathBuf,
}

/// Failure of [`run_file`].
#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FileError + '_ {
    move |source| FileError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses `config`, runs the experiment and writes the CSV and manifest into `out_dir`.
pub fn run_file(kind: Kind, config: &Path, out_dir: &Path, workers: usize) -> Result<RunReport, FileError> {
    let start = Instant::now();
    let text = fs::read_to_string(config).map_err(io_err(config))?;
    let cfg = ExperimentConfig::parse(&text, kind).map_err(RunError::Config)?;
    let outcome = run_kind(kind, &cfg).map_err(|e| match e {
        RunError::Config(ConfigError { line: None, field, message }) => RunError::Config(ConfigError {
            line: locate(&text, &field),
            field,
            message,
        }),
        other => other,
    })?;
    let hash = config_hash(kind, &text);
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_name = cfg.output.csv.clone().unwrap_or_else(|| format!("{kind}.csv"));
    let csv_path = out_dir.join(&csv_name);
    let file = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    write_csv(&outcome.table, &hash, io::BufWriter::new(file)).map_err(|e| FileError::Io {
        path: csv_path.clone(),
        source: e.into(),
    })?;
    let manifest = Manifest {
        kind: kind.name().into(),
        config_hash: hash,
        code_version: env!("CARGO_PKG_VERSION").into(),
        base_seed: cfg.numerics.base_seed,
        workers,
        wall_time_s: start.elapsed().as_secs_f64(),
        stages: outcome
            .stages
            .iter()
            .map(|(name, seconds)| Stage {
                name: name.clone(),
                seconds: *seconds,
            })
            .collect(),
        csv: csv_name,
        rows: outcome.table.rows.len(),
        failures: outcome.failures.clone(),
        warnings: outcome.warnings.clone(),
    };
    let manifest_path = out_dir.join(&cfg.output.manifest);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;
    Ok(RunReport {
        outcome,
        csv: csv_path,
        manifest: manifest_path,
    })
}
