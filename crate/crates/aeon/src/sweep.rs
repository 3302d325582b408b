//! Grid sweeps over training configurations.
//!
//! A sweep applies a Cartesian product of override axes to a base config
//! and repeats every cell over a list of seeds. Each run trains from
//! scratch, evaluates against the dataset's ground-truth tags, and writes
//! its report under `out/cell-XXX/seed-S/`. Failures are recorded in
//! place and the rest of the grid keeps going; the aggregate CSV at the
//! end has one row per cell with per-seed means.
//!
//! Axes address config fields by JSON pointer into the serialized
//! [`TrainConfig`], so one axis can tie several fields together (for
//! example moving both estimator temperatures in lockstep):
//!
//! ```
//! use aeon::sweep::SweepAxis;
//!
//! let axis: SweepAxis = serde_json::from_str(
//!     r#"{ "params": ["/t_id", "/t_ood"], "values": [5.0, 10.0, 15.0] }"#,
//! ).unwrap();
//! assert_eq!(axis.values.len(), 3);
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{self, TaggedDataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalContext, EvalReport};
use crate::trainer::{config_digest, fit, FitOptions, TrainConfig};

pub const AGGREGATE_FILE: &str = "aggregate.csv";

/// One override axis. Every pointer in `params` receives the same value,
/// so tied fields move together; distinct axes vary independently.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// JSON pointers into the serialized config, e.g. `/lr_theta` or
    /// `/mask/beta_id`.
    pub params: Vec<String>,
    pub values: Vec<serde_json::Value>,
}

impl SweepAxis {
    /// Column header for the aggregate CSV: pointer paths with the leading
    /// slash dropped, joined by `+` when the axis ties several fields.
    pub fn column_name(&self) -> String {
        self.params
            .iter()
            .map(|p| p.trim_start_matches('/').replace('/', "."))
            .collect::<Vec<_>>()
            .join("+")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Training dataset CSV; its meta sidecar must name the test split.
    pub data: PathBuf,
    pub base: TrainConfig,
    #[serde(default)]
    pub axes: Vec<SweepAxis>,
    /// One full run per cell per seed.
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("sweep needs at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("sweep seeds must be distinct"));
        }
        let tree = serde_json::to_value(&self.base)?;
        let mut seen: Vec<&str> = Vec::new();
        for axis in &self.axes {
            if axis.params.is_empty() {
                return Err(Error::config("sweep axis lists no parameters"));
            }
            if axis.values.is_empty() {
                return Err(Error::config("sweep axis lists no values"));
            }
            for p in &axis.params {
                if tree.pointer(p).is_none() {
                    return Err(Error::config(format!(
                        "sweep axis references unknown config field {p}"
                    )));
                }
                if seen.contains(&p.as_str()) {
                    return Err(Error::config(format!(
                        "config field {p} appears in more than one sweep parameter"
                    )));
                }
                seen.push(p);
            }
        }
        Ok(())
    }

    /// Cells in the grid; an empty axis list means one cell, the base config.
    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// Per-axis value index for a flat cell index, last axis fastest.
    fn cell_choice(&self, cell: usize) -> Vec<usize> {
        let mut rem = cell;
        let mut choice = vec![0; self.axes.len()];
        for (k, axis) in self.axes.iter().enumerate().rev() {
            choice[k] = rem % axis.values.len();
            rem /= axis.values.len();
        }
        choice
    }

    /// Resolve one grid cell to a concrete config: every axis override is
    /// applied, then the run seed.
    pub fn cell_config(&self, cell: usize, seed: u64) -> Result<TrainConfig> {
        if cell >= self.cell_count() {
            return Err(Error::config(format!(
                "cell index {cell} outside a grid of {}",
                self.cell_count()
            )));
        }
        let mut tree = serde_json::to_value(&self.base)?;
        let choice = self.cell_choice(cell);
        for (axis, &v) in self.axes.iter().zip(&choice) {
            for p in &axis.params {
                match tree.pointer_mut(p) {
                    Some(slot) => *slot = axis.values[v].clone(),
                    None => {
                        return Err(Error::config(format!(
                            "sweep axis references unknown config field {p}"
                        )))
                    }
                }
            }
        }
        *tree
            .pointer_mut("/seed")
            .expect("TrainConfig always serializes a seed field") = seed.into();
        serde_json::from_value(tree).map_err(|e| {
            Error::config(format!("sweep override does not fit the config schema: {e}"))
        })
    }
}

/// What a finished grid left behind.
#[derive(Debug)]
pub struct SweepOutcome {
    pub cells: usize,
    pub runs: usize,
    pub failed_runs: usize,
    pub csv_path: PathBuf,
}

fn run_dir(out: &Path, cell: usize, seed: u64) -> PathBuf {
    out.join(format!("cell-{cell:03}")).join(format!("seed-{seed}"))
}

/// Train and evaluate one cell/seed pair, leaving report.json (or
/// error.txt) in its run directory.
fn run_one(
    spec: &SweepSpec,
    cell: usize,
    seed: u64,
    train: &TaggedDataset,
    test: &TaggedDataset,
    rates: (f64, f64),
    out: &Path,
) -> Result<EvalReport> {
    let dir = run_dir(out, cell, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cfg = spec.cell_config(cell, seed)?;
    let fitted = fit(&cfg, train, None, &FitOptions::default())?;
    // Digest the config with its resolved model dims, matching what a
    // checkpoint of this run would store.
    let resolved = TrainConfig {
        model: fitted.model.config.clone(),
        ..cfg.clone()
    };
    let ctx = EvalContext {
        train,
        test,
        r_id: Some(rates.0),
        r_ood: Some(rates.1),
        config_digest: Some(config_digest(&resolved)?),
        seed,
    };
    let report = evaluate(&fitted.model, &fitted.estimators, &cfg.mask, &ctx)?;
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// RFC 4180 quoting, only when the cell needs it.
fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn value_cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => csv_escape(s),
        other => csv_escape(&other.to_string()),
    }
}

/// Mean over the runs that produced a value; empty cell when none did.
fn mean_cell(values: impl Iterator<Item = Option<f64>>) -> String {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        String::new()
    } else {
        (sum / n as f64).to_string()
    }
}

/// Run the whole grid, up to `workers` cells at a time, and write the
/// aggregate CSV. Individual run failures are recorded (error.txt in the
/// run directory, empty metric cells in the aggregate) without stopping
/// the sweep; only setup problems abort it.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path, workers: usize) -> Result<SweepOutcome> {
    spec.validate()?;
    if workers == 0 {
        return Err(Error::config("worker count must be at least 1"));
    }
    let train = benchmark::read_dataset(&spec.data)?;
    let meta = benchmark::read_meta(&benchmark::meta_path(&spec.data))?;
    let test_name = meta
        .test_file
        .as_ref()
        .ok_or_else(|| Error::data("dataset sidecar does not name a test split"))?;
    let test_file = match spec.data.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(test_name),
        _ => PathBuf::from(test_name),
    };
    let test = benchmark::read_dataset(&test_file)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let cells = spec.cell_count();
    let runs: Vec<(usize, u64)> = (0..cells)
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let rates = (meta.config.r_id, meta.config.r_ood);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
    let results: Vec<std::result::Result<EvalReport, Error>> = pool.install(|| {
        runs.par_iter()
            .map(|&(cell, seed)| run_one(spec, cell, seed, &train, &test, rates, out_dir))
            .collect()
    });

    let mut failed = 0usize;
    for (&(cell, seed), result) in runs.iter().zip(&results) {
        if let Err(e) = result {
            failed += 1;
            let dir = run_dir(out_dir, cell, seed);
            fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
            let path = dir.join("error.txt");
            fs::write(&path, format!("{e}\n")).map_err(|err| Error::io(&path, err))?;
        }
    }

    let mut csv = String::from("cell");
    for axis in &spec.axes {
        csv.push(',');
        csv.push_str(&csv_escape(&axis.column_name()));
    }
    csv.push_str(
        ",n_ok,test_accuracy,test_ece,eta_id,eta_ood,eta_id_abs_error,eta_ood_abs_error,auroc_ood,auroc_id\n",
    );
    let per_cell = spec.seeds.len();
    for cell in 0..cells {
        let cell_results = &results[cell * per_cell..(cell + 1) * per_cell];
        let ok: Vec<&EvalReport> = cell_results.iter().filter_map(|r| r.as_ref().ok()).collect();
        csv.push_str(&cell.to_string());
        let choice = spec.cell_choice(cell);
        for (axis, &v) in spec.axes.iter().zip(&choice) {
            csv.push(',');
            csv.push_str(&value_cell(&axis.values[v]));
        }
        csv.push(',');
        csv.push_str(&ok.len().to_string());
        for field in [
            &|r: &EvalReport| Some(r.test_accuracy) as Option<f64>,
            &|r: &EvalReport| Some(r.test_ece),
            &|r: &EvalReport| Some(r.eta_id),
            &|r: &EvalReport| Some(r.eta_ood),
            &|r: &EvalReport| r.eta_id_abs_error,
            &|r: &EvalReport| r.eta_ood_abs_error,
            &|r: &EvalReport| r.auroc_ood,
            &|r: &EvalReport| r.auroc_id,
        ] as [&dyn Fn(&EvalReport) -> Option<f64>; 8]
        {
            csv.push(',');
            csv.push_str(&mean_cell(ok.iter().map(|r| field(r))));
        }
        csv.push('\n');
    }
    let csv_path = out_dir.join(AGGREGATE_FILE);
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    Ok(SweepOutcome {
        cells,
        runs: runs.len(),
        failed_runs: failed,
        csv_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{
        synthesize, tag_counts, test_path, write_dataset, write_meta, DatasetMeta, SynthConfig,
        GENERATOR_VERSION,
    };
    use crate::model::ModelConfig;

    /// Tiny dataset on disk plus a base config that trains in well under a
    /// second, so grid tests stay quick.
    fn sweep_fixture(dir: &Path) -> SweepSpec {
        let synth = SynthConfig {
            num_classes: 3,
            dims: 6,
            train_per_class: 20,
            test_per_class: 8,
            class_separation: 4.0,
            r_id: 0.2,
            r_ood: 0.2,
            pool_clusters: 2,
            seed: 9,
            ..SynthConfig::default()
        };
        let (train, test) = synthesize(&synth).unwrap();
        let csv = dir.join("data.csv");
        write_dataset(&train, &csv).unwrap();
        write_dataset(&test, &test_path(&csv)).unwrap();
        let meta = DatasetMeta {
            config: synth,
            generator_version: GENERATOR_VERSION,
            tag_counts: tag_counts(&train),
            test_file: Some("data.test.csv".into()),
        };
        write_meta(&meta, &benchmark::meta_path(&csv)).unwrap();
        let base = TrainConfig {
            model: ModelConfig {
                hidden_dims: vec![8],
                feature_dim: 6,
                projection_hidden: 6,
                projection_dim: 8,
                ..ModelConfig::default()
            },
            batch_size: 16,
            warmup_epochs: 1,
            total_epochs: 3,
            lr_theta: 0.02,
            lr_gamma: 0.02,
            ..TrainConfig::default()
        };
        SweepSpec {
            data: csv,
            base,
            axes: Vec::new(),
            seeds: vec![0],
        }
    }

    fn axis(params: &[&str], values: &[serde_json::Value]) -> SweepAxis {
        SweepAxis {
            params: params.iter().map(|s| s.to_string()).collect(),
            values: values.to_vec(),
        }
    }

    #[test]
    fn cell_indexing_covers_the_product_last_axis_fastest() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = sweep_fixture(dir.path());
        spec.axes = vec![
            axis(&["/t_id"], &[5.0.into(), 10.0.into(), 15.0.into()]),
            axis(&["/lr_gamma"], &[0.01.into(), 0.02.into()]),
        ];
        assert_eq!(spec.cell_count(), 6);
        // Cell 3 = t_id index 1, lr_gamma index 1.
        let cfg = spec.cell_config(3, 7).unwrap();
        assert_eq!(cfg.t_id, 10.0);
        assert_eq!(cfg.lr_gamma, 0.02);
        assert_eq!(cfg.seed, 7);
        // Walking the flat index enumerates every combination exactly once.
        let mut seen = std::collections::BTreeSet::new();
        for cell in 0..6 {
            let cfg = spec.cell_config(cell, 0).unwrap();
            seen.insert((cfg.t_id.to_bits(), cfg.lr_gamma.to_bits()));
        }
        assert_eq!(seen.len(), 6);
        assert!(spec.cell_config(6, 0).is_err());
    }

    #[test]
    fn tied_parameters_move_together() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = sweep_fixture(dir.path());
        spec.axes = vec![axis(
            &["/t_id", "/t_ood"],
            &[5.0.into(), 15.0.into()],
        )];
        let cfg = spec.cell_config(1, 0).unwrap();
        assert_eq!(cfg.t_id, 15.0);
        assert_eq!(cfg.t_ood, 15.0);
        assert_eq!(spec.axes[0].column_name(), "t_id+t_ood");
        // Nested pointers reach inside sub-configs.
        spec.axes = vec![axis(&["/mask/beta_id"], &[0.05.into()])];
        let cfg = spec.cell_config(0, 0).unwrap();
        assert_eq!(cfg.mask.beta_id, 0.05);
    }

    #[test]
    fn bad_specs_are_rejected_up_front() {
        let dir = tempfile::tempdir().unwrap();
        let spec = sweep_fixture(dir.path());

        let mut bad = spec.clone();
        bad.axes = vec![axis(&["/no_such_field"], &[1.0.into()])];
        assert!(bad.validate().is_err());

        let mut bad = spec.clone();
        bad.axes = vec![axis(&["/t_id"], &[])];
        assert!(bad.validate().is_err());

        let mut bad = spec.clone();
        bad.axes = vec![
            axis(&["/t_id"], &[5.0.into()]),
            axis(&["/t_id"], &[10.0.into()]),
        ];
        assert!(bad.validate().is_err());

        let mut bad = spec.clone();
        bad.seeds = vec![3, 3];
        assert!(bad.validate().is_err());

        let mut bad = spec.clone();
        bad.seeds.clear();
        assert!(bad.validate().is_err());

        // A type mismatch surfaces as a config error at cell resolution.
        let mut bad = spec;
        bad.axes = vec![axis(&["/t_id"], &["warm".into()])];
        assert!(bad.validate().is_ok());
        assert!(bad.cell_config(0, 0).is_err());
    }

    #[test]
    fn single_run_sweep_matches_a_direct_fit() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = sweep_fixture(dir.path());
        spec.axes = vec![axis(&["/warmup_epochs"], &[1.into()])];
        spec.seeds = vec![4];
        let out = dir.path().join("out");
        let outcome = run_sweep(&spec, &out, 1).unwrap();
        assert_eq!(outcome.cells, 1);
        assert_eq!(outcome.runs, 1);
        assert_eq!(outcome.failed_runs, 0);

        let written: EvalReport = serde_json::from_str(
            &std::fs::read_to_string(out.join("cell-000/seed-4/report.json")).unwrap(),
        )
        .unwrap();

        let train = benchmark::read_dataset(&spec.data).unwrap();
        let test = benchmark::read_dataset(&test_path(&spec.data)).unwrap();
        let cfg = spec.cell_config(0, 4).unwrap();
        let fitted = fit(&cfg, &train, None, &FitOptions::default()).unwrap();
        let resolved = TrainConfig {
            model: fitted.model.config.clone(),
            ..cfg.clone()
        };
        let ctx = EvalContext {
            train: &train,
            test: &test,
            r_id: Some(0.2),
            r_ood: Some(0.2),
            config_digest: Some(config_digest(&resolved).unwrap()),
            seed: 4,
        };
        let direct = evaluate(&fitted.model, &fitted.estimators, &cfg.mask, &ctx).unwrap();
        assert_eq!(
            serde_json::to_value(&written).unwrap(),
            serde_json::to_value(&direct).unwrap()
        );
    }

    #[test]
    fn grid_shape_rows_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = sweep_fixture(dir.path());
        spec.axes = vec![
            axis(&["/lr_theta"], &[0.01.into(), 0.02.into()]),
            axis(&["/gamma_init"], &[0.0.into(), 0.1.into()]),
        ];
        spec.seeds = vec![0, 1];
        let out = dir.path().join("out");
        let outcome = run_sweep(&spec, &out, 2).unwrap();
        assert_eq!(outcome.cells, 4);
        assert_eq!(outcome.runs, 8);

        let csv = std::fs::read_to_string(&outcome.csv_path).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        // Header plus one row per cell, row count = product of axis sizes.
        assert_eq!(lines.len(), 5);
        assert_eq!(
            lines[0],
            "cell,lr_theta,gamma_init,n_ok,test_accuracy,test_ece,eta_id,eta_ood,\
             eta_id_abs_error,eta_ood_abs_error,auroc_ood,auroc_id"
        );
        assert!(lines[1].starts_with("0,0.01,0.0,"), "row: {}", lines[1]);
        assert!(lines[4].starts_with("3,0.02,0.1,"), "row: {}", lines[4]);
        for (cell, seed) in (0..4).flat_map(|c| [(c, 0u64), (c, 1u64)]) {
            assert!(run_dir(&out, cell, seed).join("report.json").exists());
        }
    }

    #[test]
    fn repeated_sweep_writes_an_identical_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = sweep_fixture(dir.path());
        spec.axes = vec![axis(&["/total_epochs"], &[2.into(), 3.into()])];
        spec.seeds = vec![0, 5];
        let first = run_sweep(&spec, &dir.path().join("a"), 2).unwrap();
        let second = run_sweep(&spec, &dir.path().join("b"), 1).unwrap();
        let a = std::fs::read(&first.csv_path).unwrap();
        let b = std::fs::read(&second.csv_path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failing_cell_is_recorded_and_the_grid_continues() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = sweep_fixture(dir.path());
        // The second value diverges within an epoch; the first is healthy.
        spec.axes = vec![axis(&["/lr_theta"], &[0.02.into(), 1e30.into()])];
        let out = dir.path().join("out");
        let outcome = run_sweep(&spec, &out, 1).unwrap();
        assert_eq!(outcome.cells, 2);
        assert_eq!(outcome.failed_runs, 1);

        assert!(run_dir(&out, 0, 0).join("report.json").exists());
        let err_file = run_dir(&out, 1, 0).join("error.txt");
        assert!(err_file.exists());
        assert!(!run_dir(&out, 1, 0).join("report.json").exists());

        let csv = std::fs::read_to_string(&outcome.csv_path).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        let healthy: Vec<&str> = lines[1].split(',').collect();
        let failed: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(healthy[2], "1");
        assert_eq!(failed[2], "0");
        // Metric cells stay empty when no seed finished.
        assert!(failed[3..].iter().all(|cell| cell.is_empty()));
        assert!(!healthy[3].is_empty());
    }
}
