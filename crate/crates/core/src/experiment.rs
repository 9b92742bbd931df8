//! Experiment runner: parse a JSON config, train, compress, attack, and
//! write the result files.
//!
//! Files written to the output directory:
//!
//! * `metrics.csv`: `epoch,top1,loss,sparsity,lr,phase`, one row per epoch
//! * `final_checkpoint` and `final_checkpoint.json`
//! * `robustness.csv`: `epsilon,top1`, when an attack is configured
//! * `compressed/layerN.cksp` or `.wnsp` per conv layer, when requested; `N` counts prunable layers
//! * `summary.json`

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::{robustness_sweep, AttackSpec, SweepPoint};
use crate::compressed::{compress_ck, compress_window, multiply_count};
use crate::container;
use crate::error::{Error, Result};
use crate::masking::is_kernel_uniform;
use crate::schedule::Granularity;
use crate::trainer::{
    inspect_records, save_checkpoint, Layer, LayerReport, MetricsRow, Trainer, TrainingConfig,
};

/// Overrides the `outputs` directory of every config when set.
pub const OUTPUT_DIR_ENV: &str = "SPARSETRAIN_OUTPUT_DIR";

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "final_checkpoint";
pub const ROBUSTNESS_FILE: &str = "robustness.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const COMPRESSED_DIR: &str = "compressed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub training: TrainingConfig,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    pub outputs: PathBuf,
    #[serde(default)]
    pub emit_compressed: bool,
}

/// 1-based line of the first `"key"` in `text`, or 1.
fn line_of_key(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map_or(1, |i| i + 1)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("name must not be empty"));
        }
        self.training.validate()?;
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }

    /// Parse and validate `text`. Errors carry the line they refer to; for
    /// values that parse but are out of range this is the line of the
    /// offending key.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate().map_err(|e| match e {
            Error::Config(message) => {
                let key = message.split_whitespace().next().unwrap_or("");
                Error::InvalidConfig {
                    path: path.to_path_buf(),
                    line: line_of_key(text, key),
                    message,
                }
            }
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// The output directory after applying [`OUTPUT_DIR_ENV`].
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.outputs.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub final_top1: f64,
    pub final_sparsity: f64,
    pub dense_macs: u64,
    pub sparse_macs: u64,
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub summary: Summary,
    pub metrics: Vec<MetricsRow>,
    pub robustness: Option<Vec<SweepPoint>>,
    pub compressed: Vec<PathBuf>,
}

/// Process exit status for a result of [`run_experiment`] and friends.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Json { .. } | Error::InvalidConfig { .. } | Error::Config(_) => 2,
        Error::NonFiniteLoss { .. } => 3,
        _ => 1,
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    read_csv(path)
}

pub fn write_robustness_csv(path: &Path, rows: &[SweepPoint]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_robustness_csv(path: &Path) -> Result<Vec<SweepPoint>> {
    read_csv(path)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Window format for window-style masks on spatial kernels, kernel format
/// otherwise. The window cap is the configured one when every kernel fits
/// it, else the largest survivor count seen.
fn emit_compressed(trainer: &Trainer, dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = dir.join(COMPRESSED_DIR);
    create_dir(&dir)?;
    let sched = &trainer.config().schedule;
    let mut written = Vec::new();
    // numbered like the checkpoint's prunable layers, so `inspect` rows match
    let prunable = trainer.model().layers().iter().filter(|l| matches!(l, Layer::Conv(_) | Layer::Fc(_)));
    for (i, layer) in prunable.enumerate() {
        let Layer::Conv(p) = layer else { continue };
        let d = p.weight.dims();
        let windowed = matches!(sched.granularity, Granularity::Window | Granularity::Combined)
            && d.kernel_len() > 1
            && !is_kernel_uniform(&p.mask, d);
        let (path, bytes) = if windowed {
            let observed = p
                .mask
                .bits()
                .chunks(d.kernel_len())
                .map(|k| k.iter().filter(|&&b| b).count())
                .max()
                .unwrap_or(0);
            let cap = sched.max_non_zero.filter(|&c| c >= observed).unwrap_or(observed).max(1);
            let layer = compress_window(&p.weight, &p.mask, cap)?;
            (dir.join(format!("layer{i}.wnsp")), layer.to_bytes())
        } else {
            let layer = compress_ck(&p.weight, &p.mask)?;
            (dir.join(format!("layer{i}.cksp")), layer.to_bytes())
        };
        write_file(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

/// Run one experiment end to end. Metrics of completed epochs are written
/// even when training aborts.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    if !cfg.training.era_fits() {
        eprintln!(
            "warning: pruning era ends at epoch {} but training stops after {}; the target sparsity will not be reached",
            cfg.training.schedule.freeze_epoch(),
            cfg.training.epochs
        );
    }
    let dir = cfg.output_dir();
    create_dir(&dir)?;

    let mut trainer = Trainer::new(cfg.training.clone())?;
    let outcome = trainer.run().map(|_| ());
    write_metrics_csv(&dir.join(METRICS_FILE), trainer.metrics())?;
    outcome?;

    save_checkpoint(&trainer, &dir.join(CHECKPOINT_FILE))?;

    let robustness = match &cfg.attack {
        Some(spec) => {
            let sweep = robustness_sweep(trainer.model(), trainer.val_set(), spec)?;
            write_robustness_csv(&dir.join(ROBUSTNESS_FILE), &sweep)?;
            Some(sweep)
        }
        None => None,
    };

    let compressed = if cfg.emit_compressed {
        emit_compressed(&trainer, &dir)?
    } else {
        Vec::new()
    };

    let macs = multiply_count(trainer.model());
    let last = trainer.metrics().last().expect("at least one epoch ran");
    let summary = Summary {
        name: cfg.name.clone(),
        final_top1: last.top1,
        final_sparsity: last.sparsity,
        dense_macs: macs.dense_macs,
        sparse_macs: macs.sparse_macs,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    write_file(&dir.join(SUMMARY_FILE), json.as_bytes())?;

    Ok(RunReport {
        output_dir: dir,
        summary,
        metrics: trainer.metrics().to_vec(),
        robustness,
        compressed,
    })
}

/// Load the config at `path` and [`run`] it.
pub fn run_experiment(path: &Path) -> Result<RunReport> {
    run(&ExperimentConfig::load(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub top1: f64,
    pub delta_top1: f64,
    pub sparsity: f64,
    pub mac_ratio: f64,
}

fn summary_field<'a>(v: &'a serde_json::Value, key: &str, path: &Path) -> Result<&'a serde_json::Value> {
    v.get(key).ok_or_else(|| Error::format(format!("{}: missing field `{key}`", path.display())))
}

fn number(v: &serde_json::Value, key: &str, path: &Path) -> Result<f64> {
    summary_field(v, key, path)?
        .as_f64()
        .ok_or_else(|| Error::format(format!("{}: field `{key}` is not a number", path.display())))
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    let name = summary_field(&v, "name", path)?
        .as_str()
        .ok_or_else(|| Error::format(format!("{}: field `name` is not a string", path.display())))?
        .to_string();
    let count = |key: &str| -> Result<u64> {
        summary_field(&v, key, path)?
            .as_u64()
            .ok_or_else(|| Error::format(format!("{}: field `{key}` is not a count", path.display())))
    };
    Ok(Summary {
        name,
        final_top1: number(&v, "final_top1", path)?,
        final_sparsity: number(&v, "final_sparsity", path)?,
        dense_macs: count("dense_macs")?,
        sparse_macs: count("sparse_macs")?,
    })
}

/// Rows in the given order, with top-1 deltas against the first summary.
pub fn compare_runs(paths: &[PathBuf]) -> Result<Vec<ComparisonRow>> {
    if paths.is_empty() {
        return Err(Error::Empty("no summaries to compare"));
    }
    let summaries = paths.iter().map(|p| read_summary(p)).collect::<Result<Vec<_>>>()?;
    let base = summaries[0].final_top1;
    Ok(summaries
        .into_iter()
        .map(|s| ComparisonRow {
            delta_top1: s.final_top1 - base,
            top1: s.final_top1,
            sparsity: s.final_sparsity,
            mac_ratio: if s.dense_macs == 0 {
                1.0
            } else {
                s.sparse_macs as f64 / s.dense_macs as f64
            },
            name: s.name,
        })
        .collect())
}

/// Aligned text table of [`compare_runs`] output.
pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).chain([4]).max().unwrap_or(4);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>8}  {:>8}  {:>8}", "name", "top1", "delta", "sparsity", "macs");
    for r in rows {
        // keep a zero delta from printing as -0.0000
        let delta = if r.delta_top1 == 0.0 { 0.0 } else { r.delta_top1 };
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.4}  {:>+8.4}  {:>8.4}  {:>8.4}",
            r.name, r.top1, delta, r.sparsity, r.mac_ratio
        );
    }
    out
}

/// Per-layer sparsity of a checkpoint, with layer names from its sidecar
/// when one is present.
pub fn inspect(path: &Path) -> Result<Vec<(String, LayerReport)>> {
    let reports = inspect_records(&container::read_file(path)?)?;
    let side = crate::trainer::sidecar_path(path);
    let names: Vec<String> = match fs::read_to_string(&side) {
        Ok(text) => {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Json { path: side.clone(), source: e })?;
            v.get("layers")
                .and_then(|l| l.as_array())
                .map(|l| {
                    l.iter()
                        .filter_map(|n| n.as_str())
                        .filter(|n| matches!(*n, "conv" | "conv1x1" | "fc"))
                        .map(str::to_string)
                        .collect()
                })
                .unwrap_or_default()
        }
        Err(_) => Vec::new(),
    };
    Ok(reports
        .into_iter()
        .enumerate()
        .map(|(i, r)| (names.get(i).cloned().unwrap_or_else(|| format!("layer{i}")), r))
        .collect())
}

pub fn render_inspection(rows: &[(String, LayerReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>5}  {:<8}  {:<16}  {:>8}  {:>8}", "index", "layer", "dims", "mask", "weights");
    for (name, r) in rows {
        let dims = r.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let _ = writeln!(
            out,
            "{:>5}  {:<8}  {:<16}  {:>8.4}  {:>8.4}",
            r.index, name, dims, r.mask_sparsity, r.weight_sparsity
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"{
  "name": "tiny",
  "training": {
    "epochs": 2,
    "batch_size": 8,
    "lr0": 0.05,
    "seed": 1,
    "schedule": {"s_f": 0.5, "e_i": 0, "l_p": 1, "granularity": "ck"},
    "dataset": {"n_train": 16, "n_val": 8, "image_size": 4, "channels": 1, "n_classes": 2, "seed": 3}
  },
  "outputs": "out"
}"#;

    #[test]
    fn parse_reports_lines() {
        let p = Path::new("c.json");
        assert!(ExperimentConfig::parse(CONFIG, p).is_ok());

        let bad = CONFIG.replace("\"lr0\": 0.05", "\"lr0\": -1.0");
        let err = ExperimentConfig::parse(&bad, p).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { line: 6, .. }), "{err}");
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().starts_with("c.json:6:"));

        let broken = CONFIG.replace("\"seed\": 1,", "\"seed\": 1");
        let err = ExperimentConfig::parse(&broken, p).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("line 8"), "{err}");

        let unknown = CONFIG.replace("\"name\"", "\"title\"");
        assert_eq!(exit_code(&ExperimentConfig::parse(&unknown, p).unwrap_err()), 2);

        let empty = CONFIG.replace("\"tiny\"", "\" \"");
        assert!(matches!(ExperimentConfig::parse(&empty, p).unwrap_err(), Error::InvalidConfig { line: 2, .. }));
    }

    #[test]
    fn comparison_rendering() {
        let rows = vec![
            ComparisonRow { name: "dense".into(), top1: 0.9, delta_top1: 0.0, sparsity: 0.0, mac_ratio: 1.0 },
            ComparisonRow { name: "ck".into(), top1: 0.88, delta_top1: 0.88 - 0.9, sparsity: 0.6, mac_ratio: 0.4 },
        ];
        let table = render_comparison(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("+0.0000"));
        assert!(lines[2].contains("-0.0200"));
        assert_eq!(lines[1].len(), lines[2].len());
    }
}
