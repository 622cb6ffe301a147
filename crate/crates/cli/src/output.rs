//! Result files. CSV files start with `#schema=<name>/<version>` and
//! optional further `#key=value` lines, then a header row. JSON files
//! hold `{"schema": ..., "rows": [...]}` with the same fields.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use batchlock::metrics::MetricsRow;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const METRICS_SCHEMA: &str = "batchlock-metrics/1";
pub const OVERHEAD_SCHEMA: &str = "batchlock-overhead/1";
pub const TRACE_SCHEMA: &str = "batchlock-sim-trace/1";
pub const VERIFY_SCHEMA: &str = "batchlock-verify/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Serialize)]
struct JsonOut<'a, T> {
    schema: &'a str,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    meta: &'a [(String, String)],
    rows: &'a [T],
}

#[derive(Deserialize)]
struct JsonIn<T> {
    schema: String,
    rows: Vec<T>,
}

/// Writes `rows` to `<dir>/<stem>.<csv|json>` and returns the path.
pub fn write_table<T: Serialize>(
    dir: &Path,
    stem: &str,
    format: Format,
    schema: &str,
    meta: &[(String, String)],
    rows: &[T],
) -> Result<PathBuf, CliError> {
    let path = dir.join(format!("{stem}.{}", format.ext()));
    match format {
        Format::Csv => {
            let mut file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            writeln!(file, "#schema={schema}").map_err(|e| io_err(&path, e))?;
            for (k, v) in meta {
                writeln!(file, "#{k}={}", v.replace('\n', " ")).map_err(|e| io_err(&path, e))?;
            }
            let mut w = csv::Writer::from_writer(file);
            for r in rows {
                w.serialize(r).map_err(|e| io_err(&path, e))?;
            }
            w.flush().map_err(|e| io_err(&path, e))?;
        }
        Format::Json => {
            let table = JsonOut { schema, meta, rows };
            let text = serde_json::to_string_pretty(&table).map_err(|e| io_err(&path, e))?;
            fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        }
    }
    Ok(path)
}

/// Reads a table written by [`write_table`], checking its schema.
pub fn read_table<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>, CliError> {
    let mismatch = |found: &str| CliError::Input(format!("{}: schema `{found}`, expected `{schema}`", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let table: JsonIn<T> = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if table.schema != schema {
            return Err(mismatch(&table.schema));
        }
        return Ok(table.rows);
    }
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| io_err(path, e))?;
    match first.trim().strip_prefix("#schema=") {
        Some(s) if s == schema => {}
        Some(s) => return Err(mismatch(s)),
        None => return Err(mismatch("none")),
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    read_table(path, METRICS_SCHEMA)
}

/// Records what was run, with what, and how it ended.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub mode: &'static str,
    /// `ok` or `failed`.
    pub status: &'static str,
    pub failures: &'a [String],
    pub warnings: &'a [String],
    pub outputs: Vec<String>,
    pub machine: Option<&'a Machine>,
    pub config: &'a crate::spec::ExperimentSpec,
}

impl Manifest<'_> {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| io_err(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        let marker = dir.join("FAILED");
        if self.status == "ok" {
            if marker.exists() {
                fs::remove_file(&marker).map_err(|e| io_err(&marker, e))?;
            }
        } else {
            fs::write(&marker, self.failures.join("\n") + "\n").map_err(|e| io_err(&marker, e))?;
        }
        Ok(())
    }
}

/// Where native numbers came from.
#[derive(Clone, Debug, Serialize)]
pub struct Machine {
    pub cpu: String,
    pub logical_cores: usize,
    pub os: &'static str,
    pub arch: &'static str,
    pub cycles_per_ns: f64,
}

impl Machine {
    pub fn probe(cycles_per_ns: f64) -> Self {
        let cpu = fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu,
            logical_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cycles_per_ns,
        }
    }

    pub fn meta(&self) -> Vec<(String, String)> {
        vec![(
            "machine".into(),
            format!(
                "{}; {} logical cores; {}-{}; {:.3} cycles/ns",
                self.cpu, self.logical_cores, self.os, self.arch, self.cycles_per_ns
            ),
        )]
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(vec![format!("output directory {}: {e}", dir.display())]))?;
    // fail before any work if we cannot write there
    let probe = dir.join(".write-test");
    fs::write(&probe, b"").map_err(|e| CliError::Config(vec![format!("output directory {} is not writable: {e}", dir.display())]))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(policy: &str) -> MetricsRow {
        MetricsRow {
            m: 4,
            mbs: 2,
            lambda_ratio: 0.1,
            policy: policy.into(),
            seed: 7,
            inversion_pct: 12.5,
            inversion_instances: 3,
            d_w: 100.0,
            d_w_normalized: None,
            d_highest_priority: 80.0,
            d_max: 900.0,
            workload: "sim".into(),
        }
    }

    #[test]
    fn round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row("FL"), row("BPL")];
        for f in [Format::Csv, Format::Json] {
            let p = write_table(dir.path(), "t", f, METRICS_SCHEMA, &[], &rows).unwrap();
            assert_eq!(read_metrics(&p).unwrap(), rows);
        }
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_table(dir.path(), "o", Format::Csv, OVERHEAD_SCHEMA, &[], &[row("FL")]).unwrap();
        let err = read_metrics(&p).unwrap_err();
        assert!(err.to_string().contains("schema"), "{err}");
    }
}
