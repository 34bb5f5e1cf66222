//! Output bundle: CSV tables, plain-text reports, manifest and timings.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ersatz_core::solver::Trajectory;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(&format!("cannot create {}", root.display()), e))?;
        Ok(OutputDir { root: root.to_path_buf(), written: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.root.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| CliError::io(&format!("cannot write {}", p.display()), e))
    }

    pub fn write_csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
        let p = self.path(name);
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_path(&p)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| CliError::io(&format!("cannot write {}", p.display()), e))
    }

    /// `t, x1..xd, value, active` for every stored slice, time ascending.
    pub fn write_slices(&mut self, name: &str, traj: &Trajectory) -> Result<(), CliError> {
        let grid = traj.grid();
        let d = grid.dim();
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        header.push("value".into());
        header.push("active".into());
        let mut rows = Vec::new();
        for &i in traj.stored_indices() {
            let t = traj.times()[i];
            let values = traj.slice(i).expect("stored slice");
            let active = traj.slice_active(i).expect("stored slice");
            for &node in grid.nodes() {
                let mut row = vec![num(t)];
                row.extend(grid.coords(node).iter().map(|x| num(*x)));
                row.push(num(values[node]));
                row.push(if active[node] { "1" } else { "0" }.into());
                rows.push(row);
            }
        }
        self.write_csv(name, &header, &rows)
    }

    /// `report.txt` as `key = value` lines and `report.csv` as two columns.
    pub fn write_report(&mut self, title: &str, entries: &[(String, String)]) -> Result<(), CliError> {
        let mut text = format!("# {title}\n");
        for (k, v) in entries {
            text.push_str(&format!("{k} = {v}\n"));
        }
        self.write_text("report.txt", &text)?;
        let rows: Vec<Vec<String>> = entries.iter().map(|(k, v)| vec![k.clone(), v.clone()]).collect();
        self.write_csv("report.csv", &["field".into(), "value".into()], &rows)
    }

    /// Writes `manifest.toml` (deterministic) and `timings.toml` (wall clock).
    pub fn finish(
        mut self,
        command: &str,
        config: &ExperimentConfig,
        timings: &[(&str, Duration)],
    ) -> Result<(), CliError> {
        let mut files = self.written.clone();
        files.sort();
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: config.semantic_hash(),
            seed: config.run.seed,
            files,
            config: config.clone(),
        };
        let text = toml::to_string(&manifest).expect("manifest serializes");
        self.write_text("manifest.toml", &text)?;
        let mut t = String::from("# wall-clock seconds; not part of the reproducible outputs\n");
        for (name, d) in timings {
            t.push_str(&format!("{name} = {:.6}\n", d.as_secs_f64()));
        }
        self.write_text("timings.toml", &t)
    }
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: String,
    config_sha256: String,
    seed: u64,
    files: Vec<String>,
    config: ExperimentConfig,
}
