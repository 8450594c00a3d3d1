use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ddcl_core::trainer::EpochLog;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const EPOCH_LOG_COLUMNS: [&str; 12] =
    ["epoch", "T", "L_q", "L_OLS", "L_soft", "V_soft", "V_alg", "S_P", "H_Q", "acc", "nmi", "ari"];

/// Seventeen significant digits.
pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn opt_float(v: Option<f64>) -> String {
    v.map(float).unwrap_or_default()
}

/// An in-memory CSV table; nothing touches disk until the run succeeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.to_string(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| CliError::io("csv buffer", e.into_error()))
    }
}

/// Epoch-log table with the fixed leading columns followed by `extra`.
pub fn epoch_log_table(extra: &[&str]) -> Table {
    let cols: Vec<&str> = EPOCH_LOG_COLUMNS.iter().chain(extra).copied().collect();
    Table::new("epoch_log.csv", &cols)
}

pub fn epoch_log_cells(l: &EpochLog) -> Vec<String> {
    vec![
        l.epoch.to_string(),
        float(l.t),
        float(l.l_q),
        float(l.l_ols),
        float(l.l_soft),
        float(l.v_soft),
        float(l.v_alg),
        float(l.s_p),
        float(l.h_q),
        opt_float(l.acc),
        opt_float(l.nmi),
        opt_float(l.ari),
    ]
}

/// `metric,value` summary table.
#[derive(Default)]
pub struct Summary(Vec<(String, String)>);

impl Summary {
    pub fn float(&mut self, key: impl Into<String>, v: f64) {
        self.0.push((key.into(), float(v)));
    }

    pub fn int(&mut self, key: impl Into<String>, v: usize) {
        self.0.push((key.into(), v.to_string()));
    }

    pub fn text(&mut self, key: impl Into<String>, v: impl Into<String>) {
        self.0.push((key.into(), v.into()));
    }

    pub fn into_table(self) -> Table {
        let mut t = Table::new("summary.csv", &["metric", "value"]);
        for (k, v) in self.0 {
            t.push(vec![k, v]);
        }
        t
    }
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct RunInfo {
    experiment: String,
    library_version: String,
    cli_version: String,
    seed: u64,
    threads: Option<usize>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
}

#[derive(Serialize)]
struct Manifest<'a> {
    run: RunInfo,
    config: &'a ExperimentConfig,
    files: Vec<FileEntry>,
}

pub fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write every table, then `manifest.toml` with their checksums. Returns the
/// written paths.
pub fn write_outputs(
    dir: &Path,
    tables: &[Table],
    config: &ExperimentConfig,
    threads: Option<usize>,
    started_unix_ms: u128,
) -> CliResult<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    let mut paths = Vec::new();
    for t in tables {
        let bytes = t.to_bytes()?;
        let path = dir.join(&t.name);
        fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        files.push(FileEntry { name: t.name.clone(), bytes: bytes.len(), sha256: sha256_hex(&bytes) });
        paths.push(path);
    }
    let manifest = Manifest {
        run: RunInfo {
            experiment: config.experiment.name().to_string(),
            library_version: ddcl_core::VERSION.to_string(),
            cli_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            threads,
            started_unix_ms,
            finished_unix_ms: unix_ms(),
        },
        config,
        files,
    };
    let text = toml::to_string(&manifest).map_err(|e| CliError::config(e.to_string()))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    paths.push(path);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -1.0 / 3.0, 6.02214076e23, 5e-324] {
            assert_eq!(float(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(opt_float(None), "");
    }

    #[test]
    fn table_quotes_as_needed() {
        let mut t = Table::new("x.csv", &["a", "b"]);
        t.push(vec!["1".into(), "has,comma".into()]);
        assert_eq!(String::from_utf8(t.to_bytes().unwrap()).unwrap(), "a,b\n1,\"has,comma\"\n");
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
