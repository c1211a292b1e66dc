//! Named experiment presets and the run driver.
//!
//! A run directory holds `manifest.json` (written before training starts),
//! `metrics.csv` and `checkpoint.nptn`. Feeding the manifest back in as a
//! configuration reproduces the metrics file byte for byte.

use std::fs::{self, File};
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch::{DatasetKind, ModelLabel};
use super::checkpoint::save_checkpoint;
use super::config::{parse_config, ResolvedConfig, TrainConfig};
use super::model::build_model;
use super::train::{run_epochs, EpochMetrics, Metrics, TrainState, MODEL_STREAM};
use crate::data::{AugmentPolicy, DataPaths, Dataset};
use crate::error::{NptnError, Result};
use crate::rng::Rng;

pub const PRESET_NAMES: [&str; 9] = [
    "mnist-rot-0",
    "mnist-rot-30",
    "mnist-rot-60",
    "mnist-rot-90",
    "mnist-trans-0",
    "mnist-trans-4",
    "mnist-trans-8",
    "mnist-trans-12",
    "cifar-smoke",
];

pub const MANIFEST_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const MNIST_TRAIN_SUBSET: usize = 10_000;
pub const MNIST_TEST_SUBSET: usize = 2_000;
pub const CIFAR_SMOKE_TRAIN_SUBSET: usize = 5_000;
pub const CIFAR_SMOKE_TEST_SUBSET: usize = 1_000;

/// Translations applied to training images only in the rotation presets.
pub const ROTATION_TRAIN_JITTER: usize = 2;

const FAMILY: [&str; 5] = [
    "convnet-36",
    "nptn-36-1",
    "nptn-18-2",
    "nptn-12-3",
    "nptn-9-4",
];

/// Reference test error (%) for rotations 0°, 30°, 60°, 90°, per row of
/// [`FAMILY`].
const ROTATION_ERRORS: [[f64; 4]; 5] = [
    [0.75, 1.16, 2.05, 3.32],
    [0.68, 1.27, 2.01, 3.36],
    [0.66, 1.09, 1.72, 2.88],
    [0.63, 1.08, 1.71, 2.76],
    [0.66, 1.17, 1.83, 2.94],
];
const ROTATIONS: [usize; 4] = [0, 30, 60, 90];

/// Reference test error (%) for translations of 0, 4, 8, 12 px.
const TRANSLATION_ERRORS: [[f64; 4]; 5] = [
    [0.62, 0.95, 1.97, 7.00],
    [0.62, 0.88, 1.84, 7.22],
    [0.74, 0.75, 1.70, 6.26],
    [0.66, 0.70, 1.58, 6.20],
    [0.64, 0.76, 1.59, 6.37],
];
const TRANSLATIONS: [usize; 4] = [0, 4, 8, 12];

/// A named experiment: data, schedule, augmentation, the models and seeds
/// it runs by default, and the reference errors to compare against.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: String,
    pub dataset: DatasetKind,
    pub train: TrainConfig,
    pub train_subset: usize,
    pub test_subset: usize,
    pub models: Vec<String>,
    pub seeds: Vec<u64>,
    /// `(bare model label, test error %)`.
    pub reference: Vec<(String, f64)>,
}

fn unknown_preset(name: &str) -> NptnError {
    NptnError::Config {
        key: "preset".into(),
        msg: format!(
            "unknown preset `{name}`; expected one of {}",
            PRESET_NAMES.join(", ")
        ),
    }
}

fn table(column: usize, errors: &[[f64; 4]; 5]) -> Vec<(String, f64)> {
    FAMILY
        .iter()
        .zip(errors)
        .map(|(m, row)| (m.to_string(), row[column]))
        .collect()
}

/// Look up a preset by name.
///
/// ```
/// let p = nptn::training::experiment::preset("mnist-rot-90").unwrap();
/// assert_eq!(p.train.epochs, 15);
/// assert_eq!(p.reference_error("nptn-12-3"), Some(2.76));
/// assert_eq!(p.reference_error("convnet-36"), Some(3.32));
/// ```
pub fn preset(name: &str) -> Result<Preset> {
    let mnist = |augment: AugmentPolicy, reference| Preset {
        name: name.to_string(),
        dataset: DatasetKind::Mnist,
        train: TrainConfig {
            augment,
            ..TrainConfig::default()
        },
        train_subset: MNIST_TRAIN_SUBSET,
        test_subset: MNIST_TEST_SUBSET,
        models: vec!["convnet-36".into(), "nptn-12-3".into()],
        seeds: vec![0, 1, 2],
        reference,
    };
    if let Some(deg) = name.strip_prefix("mnist-rot-") {
        let col = ROTATIONS
            .iter()
            .position(|r| r.to_string() == deg)
            .ok_or_else(|| unknown_preset(name))?;
        let augment = AugmentPolicy {
            rotation_range: ROTATIONS[col] as f64,
            train_jitter: ROTATION_TRAIN_JITTER,
            apply_at_test: true,
            ..AugmentPolicy::none()
        };
        return Ok(mnist(augment, table(col, &ROTATION_ERRORS)));
    }
    if let Some(px) = name.strip_prefix("mnist-trans-") {
        let col = TRANSLATIONS
            .iter()
            .position(|t| t.to_string() == px)
            .ok_or_else(|| unknown_preset(name))?;
        let augment = AugmentPolicy {
            translate_range: TRANSLATIONS[col],
            apply_at_test: true,
            ..AugmentPolicy::none()
        };
        return Ok(mnist(augment, table(col, &TRANSLATION_ERRORS)));
    }
    if name == "cifar-smoke" {
        return Ok(Preset {
            name: name.to_string(),
            dataset: DatasetKind::Cifar10,
            train: TrainConfig {
                epochs: 2,
                decay_epochs: vec![],
                augment: AugmentPolicy {
                    pad_crop: 4,
                    hflip: true,
                    ..AugmentPolicy::none()
                },
                ..TrainConfig::default()
            },
            train_subset: CIFAR_SMOKE_TRAIN_SUBSET,
            test_subset: CIFAR_SMOKE_TEST_SUBSET,
            models: vec!["nptn-24-2".into()],
            seeds: vec![0],
            reference: vec![],
        });
    }
    Err(unknown_preset(name))
}

impl Preset {
    /// Reference test error for a model label, with or without a dataset
    /// prefix.
    pub fn reference_error(&self, model: &str) -> Option<f64> {
        let bare = model.parse::<ModelLabel>().ok()?.bare().to_string();
        self.reference
            .iter()
            .find(|(m, _)| *m == bare)
            .map(|&(_, e)| e)
    }

    /// The configuration document of one run, before overrides.
    pub fn document(&self, model: &str, seed: u64) -> serde_json::Value {
        serde_json::json!({
            "model": model,
            "dataset": self.dataset,
            "train": TrainConfig { seed, ..self.train.clone() },
            "train_subset": self.train_subset,
            "test_subset": self.test_subset,
        })
    }

    /// Resolve one run, applying `key=value` overrides on top of the preset.
    pub fn resolve(
        &self,
        model: &str,
        seed: u64,
        overrides: &[(String, String)],
    ) -> Result<ResolvedConfig> {
        parse_config(&self.document(model, seed).to_string(), None, overrides)
    }
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifacts {
    pub manifest: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Artifacts {
            manifest: dir.join("manifest.json"),
            metrics: dir.join("metrics.csv"),
            checkpoint: dir.join("checkpoint.nptn"),
        }
    }
}

/// Everything needed to repeat a run. Accepted by [`parse_config`] as a
/// configuration document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub preset: Option<String>,
    pub seed: u64,
    pub config: ResolvedConfig,
    pub datasets: Vec<FileChecksum>,
    pub artifacts: Artifacts,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = read_text(p)?;
        serde_json::from_str(&text)
            .map_err(|e| NptnError::format(p.display().to_string(), e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(p, json + "\n").map_err(|e| NptnError::io(p, e))
    }
}

pub(crate) fn read_text(p: &Path) -> Result<String> {
    if !p.exists() {
        return Err(NptnError::MissingData(p.to_path_buf()));
    }
    fs::read_to_string(p).map_err(|e| NptnError::io(p, e))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let p = path.as_ref();
    if !p.exists() {
        return Err(NptnError::MissingData(p.to_path_buf()));
    }
    let mut f = File::open(p).map_err(|e| NptnError::io(p, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| NptnError::io(p, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// The files a configuration reads, training split first.
pub fn dataset_files(cfg: &ResolvedConfig, data: &DataPaths) -> Vec<PathBuf> {
    match cfg.dataset {
        DatasetKind::Mnist => {
            let (a, b) = data.mnist(true);
            let (c, d) = data.mnist(false);
            vec![a, b, c, d]
        }
        DatasetKind::Cifar10 => {
            let mut v = data.cifar10(true);
            v.extend(data.cifar10(false));
            v
        }
    }
}

/// Training and test sets of a configuration, cut to its subsets.
pub fn load_datasets(cfg: &ResolvedConfig, data: &DataPaths) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => (data.load_mnist(true)?, data.load_mnist(false)?),
        DatasetKind::Cifar10 => (data.load_cifar10(true)?, data.load_cifar10(false)?),
    };
    let cut = |ds: Dataset, n: Option<usize>| match n {
        Some(n) => ds.head(n),
        None => Ok(ds),
    };
    Ok((cut(train, cfg.train_subset)?, cut(test, cfg.test_subset)?))
}

/// Outcome of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub manifest: RunManifest,
    pub metrics: Metrics,
}

impl RunRecord {
    pub fn final_error(&self) -> Option<f64> {
        self.metrics.last().map(|r| r.test_error_pct)
    }
}

/// Train one configuration from scratch into `run_dir`.
///
/// The manifest is written before the first epoch; metrics are rewritten
/// after every epoch, the checkpoint once at the end. `on_epoch` sees each
/// epoch's metrics as they arrive.
pub fn execute_run(
    cfg: &ResolvedConfig,
    data: &DataPaths,
    run_dir: &Path,
    preset: Option<&str>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunRecord> {
    let files = dataset_files(cfg, data);
    if let Some(missing) = files.iter().find(|p| !p.exists()) {
        return Err(NptnError::MissingData(missing.clone()));
    }
    let (train_set, test_set) = load_datasets(cfg, data)?;
    let datasets = files
        .into_iter()
        .map(|path| {
            let sha256 = sha256_file(&path)?;
            Ok(FileChecksum { path, sha256 })
        })
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(run_dir).map_err(|e| NptnError::io(run_dir, e))?;
    let artifacts = Artifacts::in_dir(run_dir);
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        preset: preset.map(str::to_string),
        seed: cfg.train.seed,
        config: cfg.clone(),
        datasets,
        artifacts: artifacts.clone(),
    };
    manifest.save(&artifacts.manifest)?;

    let mut model = build_model(&cfg.arch, &mut Rng::derive(cfg.train.seed, MODEL_STREAM))?;
    let mut state = TrainState::new(&model, &cfg.train);
    let result = run_epochs(
        &mut model,
        &mut state,
        &train_set,
        &test_set,
        cfg.train.epochs,
        |_, st| {
            if let Some(row) = st.metrics.last() {
                on_epoch(row);
            }
            st.metrics.save_csv(&artifacts.metrics)
        },
    );
    if let Err(e) = result {
        state.metrics.save_csv(&artifacts.metrics)?;
        return Err(e);
    }
    save_checkpoint(&artifacts.checkpoint, &model, &state, Some(&cfg.model))?;
    Ok(RunRecord {
        manifest,
        metrics: state.metrics,
    })
}

/// `out_dir/<preset>/<model>/seed-<seed>`.
pub fn run_dir(out_dir: &Path, preset: &str, model: &str, seed: u64) -> PathBuf {
    out_dir
        .join(preset)
        .join(model)
        .join(format!("seed-{seed}"))
}

/// Run every `(model, seed)` pair of a preset in order, models outermost.
pub fn run_preset(
    preset: &Preset,
    models: &[String],
    seeds: &[u64],
    overrides: &[(String, String)],
    data: &DataPaths,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&ResolvedConfig, &EpochMetrics),
) -> Result<Vec<RunRecord>> {
    let mut configs = Vec::new();
    for m in models {
        for &s in seeds {
            configs.push(preset.resolve(m, s, overrides)?);
        }
    }
    let mut records = Vec::with_capacity(configs.len());
    for cfg in &configs {
        let dir = run_dir(out_dir, &preset.name, &cfg.model, cfg.train.seed);
        records.push(execute_run(cfg, data, &dir, Some(&preset.name), |row| {
            on_epoch(cfg, row)
        })?);
    }
    Ok(records)
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub model: String,
    pub seeds: usize,
    pub median_test_error_pct: f64,
    pub reference_test_error_pct: Option<f64>,
}

/// Median final test error per model, in first-seen order.
pub fn summarize(preset: &Preset, records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut models: Vec<&str> = Vec::new();
    for r in records {
        if !models.contains(&r.manifest.config.model.as_str()) {
            models.push(&r.manifest.config.model);
        }
    }
    models
        .into_iter()
        .filter_map(|m| {
            let errs: Vec<f64> = records
                .iter()
                .filter(|r| r.manifest.config.model == m)
                .filter_map(RunRecord::final_error)
                .collect();
            Some(SummaryRow {
                model: m.to_string(),
                seeds: errs.len(),
                median_test_error_pct: median(&errs)?,
                reference_test_error_pct: preset.reference_error(m),
            })
        })
        .collect()
}

pub fn write_summary_csv(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let p = path.as_ref();
    let err = |e: csv::Error| NptnError::io(p, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(p).map_err(err)?;
    w.write_record([
        "model",
        "seeds",
        "median_test_error_pct",
        "reference_test_error_pct",
    ])
    .map_err(err)?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.seeds.to_string(),
            format!("{:.4}", r.median_test_error_pct),
            r.reference_test_error_pct
                .map(|e| format!("{e:.2}"))
                .unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| NptnError::io(p, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_mnist_idx, Dataset};
    use crate::tensor::NDTensor;
    use crate::training::arch::LayerKind;

    #[test]
    fn every_name_resolves() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            assert_eq!(p.name, name);
            for m in &p.models {
                let c = p.resolve(m, 7, &[]).unwrap();
                assert_eq!(c.train.seed, 7);
                assert!(!c.train.record_wall_time);
            }
        }
        assert!(matches!(
            preset("mnist-rot-45"),
            Err(NptnError::Config { .. })
        ));
        assert!(preset("imagenet").is_err());
    }

    #[test]
    fn table_values() {
        let rot = |n: &str, m: &str| preset(n).unwrap().reference_error(m).unwrap();
        assert_eq!(rot("mnist-rot-90", "mnist-convnet-36"), 3.32);
        assert_eq!(rot("mnist-rot-90", "nptn-12-3"), 2.76);
        assert_eq!(rot("mnist-rot-0", "convnet-36"), 0.75);
        assert_eq!(rot("mnist-rot-0", "nptn-12-3"), 0.63);
        assert_eq!(rot("mnist-trans-8", "convnet-36"), 1.97);
        assert_eq!(rot("mnist-trans-8", "nptn-12-3"), 1.58);
        assert_eq!(rot("mnist-trans-12", "nptn-36-1"), 7.22);
        assert_eq!(rot("mnist-rot-30", "nptn-9-4"), 1.17);
        assert_eq!(
            preset("cifar-smoke").unwrap().reference_error("nptn-24-2"),
            None
        );
    }

    #[test]
    fn augmentation_per_preset() {
        let a = preset("mnist-rot-60").unwrap().train.augment;
        assert_eq!(a.rotation_range, 60.0);
        assert_eq!(a.train_jitter, 2);
        assert!(a.apply_at_test);
        assert_eq!(a.test_view().train_jitter, 0);
        let a = preset("mnist-trans-4").unwrap().train.augment;
        assert_eq!((a.translate_range, a.train_jitter), (4, 0));
        let p = preset("cifar-smoke").unwrap();
        assert_eq!(p.train.epochs, 2);
        assert!(p.train.augment.hflip && !p.train.augment.apply_at_test);
        let c = p.resolve(&p.models[0], 0, &[]).unwrap();
        assert_eq!(c.model, "cifar-nptn-24-2");
        assert_eq!(c.arch.layers[0].out_channels, 24);
        assert_eq!(c.arch.layers[0].group_size, 2);
        assert_eq!(c.train_subset, Some(5000));
    }

    #[test]
    fn overrides_apply_on_top() {
        let p = preset("mnist-rot-90").unwrap();
        let c = p
            .resolve("convnet-36", 0, &[("epochs".into(), "3".into())])
            .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert!(c.train.decay_epochs.is_empty());
        assert_eq!(c.arch.layers[0].kind, LayerKind::Conv);
        assert_eq!(c.train.augment.rotation_range, 90.0);
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn sha256_of_known_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(matches!(
            sha256_file(dir.path().join("nope")),
            Err(NptnError::MissingData(_))
        ));
    }

    fn tiny_mnist(root: &Path) {
        let mut rng = Rng::new(5);
        let dir = root.join("mnist");
        fs::create_dir_all(&dir).unwrap();
        for (train, n) in [(true, 40), (false, 12)] {
            let images = NDTensor::uniform(&[n, 1, 28, 28], 0.0, 1.0, &mut rng);
            let labels = (0..n).map(|i| i % 10).collect();
            let ds = Dataset::new(images, labels, "tiny").unwrap();
            let (i, l) = DataPaths::new(root).mnist(train);
            write_mnist_idx(&ds, i, l).unwrap();
        }
    }

    #[test]
    fn run_writes_artifacts_and_manifest_reproduces() {
        let dir = tempfile::tempdir().unwrap();
        tiny_mnist(dir.path());
        let data = DataPaths::new(dir.path());
        let p = preset("mnist-rot-30").unwrap();
        let overrides = [("epochs".to_string(), "2".to_string())];
        let out = dir.path().join("out");
        let recs =
            run_preset(&p, &p.models[1..], &[3], &overrides, &data, &out, |_, _| {}).unwrap();
        assert_eq!(recs.len(), 1);
        let run = run_dir(&out, "mnist-rot-30", "mnist-nptn-12-3", 3);
        let art = Artifacts::in_dir(&run);
        assert!(art.checkpoint.exists());
        let first = fs::read(&art.metrics).unwrap();
        let manifest = RunManifest::load(&art.manifest).unwrap();
        assert_eq!(manifest, recs[0].manifest);
        assert_eq!(manifest.seed, 3);
        assert_eq!(manifest.datasets.len(), 4);
        assert_eq!(manifest.config.train_subset, Some(MNIST_TRAIN_SUBSET));

        let again = parse_config(&read_text(&art.manifest).unwrap(), None, &[]).unwrap();
        assert_eq!(again, manifest.config);
        let rerun = dir.path().join("rerun");
        execute_run(&again, &data, &rerun, None, |_| {}).unwrap();
        assert_eq!(fs::read(Artifacts::in_dir(&rerun).metrics).unwrap(), first);

        let rows = summarize(&p, &recs);
        assert_eq!(rows[0].model, "mnist-nptn-12-3");
        assert_eq!(rows[0].reference_test_error_pct, Some(1.08));
        write_summary_csv(&rows, out.join("summary.csv")).unwrap();
    }

    #[test]
    fn missing_data_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = preset("mnist-rot-0").unwrap();
        let cfg = p.resolve("convnet-36", 0, &[]).unwrap();
        let err =
            execute_run(&cfg, &DataPaths::new(dir.path()), dir.path(), None, |_| {}).unwrap_err();
        match err {
            NptnError::MissingData(path) => {
                assert!(path.ends_with("mnist/train-images-idx3-ubyte"))
            }
            other => panic!("{other}"),
        }
        assert!(!dir.path().join("manifest.json").exists());
    }
}
