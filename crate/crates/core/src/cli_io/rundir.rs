//! Run directory layout: `manifest`, `config.resolved`, `metrics.csv`,
//! `checkpoints/step-N`, `plots/`, plus a `completed` stamp.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::cli_io::config::ExperimentConfig;
use crate::cli_io::csv_io::{fmt_value, metrics_csv_string, CsvError};
use crate::cli_io::svg::{render_svg, PlotError, PlotStyle, Series};
use crate::metrics::{GapPoint, MetricsRow};
use crate::policy::{write_checkpoint, PolicyParams};
use crate::task_env::{export_dataset, Dataset};
use crate::trainer::{RunObserver, TrainError};

pub const MANIFEST_MAGIC: &str = "# srt-manifest v1";
pub const DEFAULT_PLOT_COLUMNS: [&str; 4] = ["avg_at_k", "maj_at_k", "pseudo_reward_mean", "kl_to_base"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFingerprint {
    pub role: String,
    pub family: String,
    pub level: u32,
    pub size: usize,
    pub seed: u64,
    pub sha256: String,
}

impl DatasetFingerprint {
    pub fn of(role: &str, dataset: &Dataset) -> Self {
        DatasetFingerprint {
            role: role.to_string(),
            family: dataset.family.to_string(),
            level: dataset.level,
            size: dataset.len(),
            seed: dataset.seed,
            sha256: sha256_hex(export_dataset(dataset).as_bytes()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub run_id: String,
    pub config_text: String,
    pub datasets: Vec<DatasetFingerprint>,
    pub code_version: String,
    pub started: u64,
}

impl RunManifest {
    /// The run id is a digest of the resolved config, so equal configs share it.
    pub fn new(config: &ExperimentConfig, datasets: Vec<DatasetFingerprint>) -> Self {
        let config_text = config.to_text();
        RunManifest {
            run_id: sha256_hex(config_text.as_bytes())[..16].to_string(),
            config_text,
            datasets,
            code_version: format!("srt-core {}", env!("CARGO_PKG_VERSION")),
            started: unix_now(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{MANIFEST_MAGIC}\nrun_id = {}\ncode_version = {}\nstarted = {}\nconfig_sha256 = {}\n",
            self.run_id,
            self.code_version,
            self.started,
            sha256_hex(self.config_text.as_bytes())
        );
        for d in &self.datasets {
            out.push_str(&format!(
                "dataset.{} = family={} level={} size={} seed={} sha256={}\n",
                d.role, d.family, d.level, d.size, d.seed, d.sha256
            ));
        }
        out.push_str("[config]\n");
        out.push_str(&self.config_text);
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunDirError {
    #[error("{path}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error(transparent)]
    Plot(#[from] PlotError),
}

fn write(path: &Path, contents: &str) -> Result<(), RunDirError> {
    fs::write(path, contents).map_err(|source| RunDirError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn mkdir(path: &Path) -> Result<(), RunDirError> {
    fs::create_dir_all(path).map_err(|source| RunDirError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One series per requested column, x = step.
pub fn metric_series(rows: &[MetricsRow], column: &str) -> Option<Series> {
    let points = rows
        .iter()
        .map(|r| r.get(column).map(|y| (r.step as f64, y)))
        .collect::<Option<Vec<_>>>()?;
    Some(Series {
        name: column.to_string(),
        points,
    })
}

pub fn gap_curve_csv(points: &[GapPoint]) -> String {
    let mut out = String::from("threshold,per_prompt_accuracy,majority_accuracy,gv_gap,prompt_fraction\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_value(p.threshold),
            fmt_value(p.per_prompt_accuracy),
            fmt_value(p.majority_accuracy),
            fmt_value(p.majority_accuracy - p.per_prompt_accuracy),
            fmt_value(p.prompt_fraction)
        ));
    }
    out
}

/// Observer that persists a run. Single writer per directory.
pub struct RunDir {
    root: PathBuf,
    rows: Vec<MetricsRow>,
}

impl RunDir {
    pub fn create(root: &Path, manifest: &RunManifest) -> Result<Self, RunDirError> {
        mkdir(&root.join("checkpoints"))?;
        mkdir(&root.join("plots"))?;
        write(&root.join("manifest"), &manifest.render())?;
        write(&root.join("config.resolved"), &manifest.config_text)?;
        write(&root.join("metrics.csv"), &metrics_csv_string(&[]))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            rows: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn write_file(&self, relative: &str, contents: &str) -> Result<(), RunDirError> {
        let path = self.root.join(relative);
        if let Some(parent) = path.parent() {
            mkdir(parent)?;
        }
        write(&path, contents)
    }

    pub fn record_row(&mut self, row: &MetricsRow) -> Result<(), RunDirError> {
        self.rows.push(*row);
        write(&self.root.join("metrics.csv"), &metrics_csv_string(&self.rows))
    }

    pub fn write_plots(&self, columns: &[&str]) -> Result<(), RunDirError> {
        if self.rows.is_empty() {
            return Ok(());
        }
        for col in columns {
            if let Some(series) = metric_series(&self.rows, col) {
                let style = PlotStyle {
                    title: col.to_string(),
                    y_label: col.to_string(),
                    ..PlotStyle::default()
                };
                write(&self.root.join("plots").join(format!("{col}.svg")), &render_svg(&[series], &style)?)?;
            }
        }
        Ok(())
    }

    /// Plots the default columns and stamps the end time.
    pub fn finish(&self) -> Result<(), RunDirError> {
        self.write_plots(&DEFAULT_PLOT_COLUMNS)?;
        write(&self.root.join("completed"), &format!("{}\n", unix_now()))
    }
}

impl RunObserver for RunDir {
    fn on_eval(&mut self, row: &MetricsRow, params: &PolicyParams) -> Result<(), TrainError> {
        self.record_row(row).map_err(|e| TrainError::Sink(e.to_string()))?;
        write(
            &self.root.join("checkpoints").join(format!("step-{}", row.step)),
            &write_checkpoint(params),
        )
        .map_err(|e| TrainError::Sink(e.to_string()))
    }

    fn on_best(&mut self, step: u64, params: &PolicyParams) -> Result<(), TrainError> {
        let dir = self.root.join("checkpoints");
        write(&dir.join("best"), &write_checkpoint(params))
            .and_then(|_| write(&dir.join("best.step"), &format!("{step}\n")))
            .map_err(|e| TrainError::Sink(e.to_string()))
    }
}

/// Reads a file as text, mapping the error to include the path.
pub fn read_text(path: &Path) -> Result<String, RunDirError> {
    fs::read_to_string(path).map_err(|source| RunDirError::Io {
        path: path.to_path_buf(),
        source,
    })
}
