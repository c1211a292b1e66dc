use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::arch::{ArchSpec, DatasetKind, ModelLabel};
use crate::data::AugmentPolicy;
use crate::error::{NptnError, Result};

pub const DEFAULT_TEST_SEED: u64 = 1_000_003;

/// Optimizer, schedule and augmentation settings. Defaults are the MNIST
/// desk-scale recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    /// Seed of the one-off transformation of the test set, shared by every
    /// model and training seed of an experiment.
    pub test_seed: u64,
    pub augment: AugmentPolicy,
    /// Write measured epoch times into the metrics `seconds` column. Off by
    /// default: the column is then 0 and the metrics file is a pure function
    /// of the inputs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            base_lr: 0.01,
            decay_epochs: vec![8, 12],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            eval_batch_size: 500,
            seed: 0,
            test_seed: DEFAULT_TEST_SEED,
            augment: AugmentPolicy::none(),
            record_wall_time: false,
        }
    }
}

fn cfg_err(key: &str, msg: impl Into<String>) -> NptnError {
    NptnError::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(cfg_err("train.epochs", "must be at least 1"));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(cfg_err("train.decay_epochs", "must be strictly increasing"));
        }
        if let Some(&e) = self.decay_epochs.iter().find(|&&e| e >= self.epochs) {
            return Err(cfg_err(
                "train.decay_epochs",
                format!("epoch {e} is outside [0, {})", self.epochs),
            ));
        }
        if self.batch_size < 2 {
            return Err(cfg_err(
                "train.batch_size",
                "batch norm needs batches of at least 2",
            ));
        }
        if self.eval_batch_size == 0 {
            return Err(cfg_err("train.eval_batch_size", "must be at least 1"));
        }
        for (key, v) in [
            ("train.base_lr", self.base_lr),
            ("train.decay_factor", self.decay_factor),
            ("train.momentum", self.momentum),
            ("train.weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(cfg_err(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        self.augment.validate().map_err(|e| match e {
            NptnError::Config { key, msg } => cfg_err(&format!("train.augment.{key}"), msg),
            other => other,
        })
    }
}

/// A configuration document as written by a user.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model label such as `mnist-nptn-12-3`; ignored when `arch` is given.
    pub model: Option<String>,
    pub dataset: Option<DatasetKind>,
    pub arch: Option<ArchSpec>,
    pub train: TrainConfig,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
}

/// A configuration with every choice made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub model: String,
    pub dataset: DatasetKind,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
}

pub const DEFAULT_MODEL: &str = "mnist-nptn-12-3";

impl RunConfig {
    pub fn resolve(self) -> Result<ResolvedConfig> {
        let label: ModelLabel = self.model.as_deref().unwrap_or(DEFAULT_MODEL).parse()?;
        let dataset = match (self.dataset, label.dataset) {
            (Some(d), Some(l)) if d != l => {
                return Err(cfg_err(
                    "dataset",
                    format!("`{d}` contradicts model label `{label}`"),
                ))
            }
            (Some(d), _) | (None, Some(d)) => d,
            (None, None) => DatasetKind::Mnist,
        };
        let arch = match self.arch {
            Some(a) => a,
            None => label.arch(dataset),
        };
        arch.validate()
            .map_err(|e| cfg_err("arch", e.to_string()))?;
        if arch.input != dataset.input() {
            return Err(cfg_err(
                "arch.input",
                format!(
                    "{:?} does not match {dataset} images {:?}",
                    arch.input,
                    dataset.input()
                ),
            ));
        }
        self.train.validate()?;
        for (key, v) in [
            ("train_subset", self.train_subset),
            ("test_subset", self.test_subset),
        ] {
            if v == Some(0) {
                return Err(cfg_err(key, "must be at least 1"));
            }
        }
        Ok(ResolvedConfig {
            model: ModelLabel {
                dataset: Some(dataset),
                ..label
            }
            .to_string(),
            dataset,
            arch,
            train: self.train,
            train_subset: self.train_subset,
            test_subset: self.test_subset,
        })
    }
}

/// Turn a serde error into a config error that names the offending key.
fn config_error(e: serde_path_to_error::Error<serde_json::Error>) -> NptnError {
    let path = e.path().to_string();
    let msg = e.inner().to_string();
    let key = match msg
        .strip_prefix("unknown field `")
        .and_then(|r| r.split('`').next())
    {
        Some(field) if path == "." || path.is_empty() => field.to_string(),
        _ => path,
    };
    cfg_err(&key, msg)
}

/// Apply `key=value` overrides to a JSON document. Keys are dotted paths
/// (`train.epochs`); a bare training field name (`epochs`) is taken to mean
/// `train.<name>`. Values are parsed as JSON, falling back to a string.
pub fn apply_overrides(doc: &mut Value, overrides: &[(String, String)]) -> Result<()> {
    let train_fields = match serde_json::to_value(TrainConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect::<Vec<_>>(),
        _ => unreachable!("TrainConfig serializes to an object"),
    };
    for (key, raw) in overrides {
        let path = if !key.contains('.') && train_fields.contains(key) {
            format!("train.{key}")
        } else {
            key.clone()
        };
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        let mut node = &mut *doc;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let Value::Object(map) = node else {
                return Err(cfg_err(key, "parent is not an object"));
            };
            if i + 1 == parts.len() {
                map.insert(part.to_string(), value);
                break;
            }
            node = map
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Parse a configuration document. `model` (a label such as
/// `mnist-nptn-12-3`) overrides the document's `model` key. A run manifest
/// is accepted too; its embedded configuration is used.
pub fn parse_config(
    json: &str,
    model: Option<&str>,
    overrides: &[(String, String)],
) -> Result<ResolvedConfig> {
    let mut doc: Value = if json.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(json).map_err(|e| cfg_err("", format!("invalid JSON: {e}")))?
    };
    if let Some(inner) = doc.get("manifest_version").and(doc.get("config")).cloned() {
        doc = inner;
    }
    if let Some(m) = model {
        apply_overrides(
            &mut doc,
            &[("model".into(), Value::String(m.into()).to_string())],
        )?;
    }
    apply_overrides(&mut doc, overrides)?;
    let mut run: RunConfig = serde_path_to_error::deserialize(doc).map_err(config_error)?;
    // Shortening a run through an override drops decay points it never reaches.
    let touched = |k: &str| {
        overrides
            .iter()
            .any(|(o, _)| o == k || o == &format!("train.{k}"))
    };
    if touched("epochs") && !touched("decay_epochs") {
        let epochs = run.train.epochs;
        run.train.decay_epochs.retain(|&e| e < epochs);
    }
    run.resolve()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::arch::LayerKind;

    fn key_of(e: NptnError) -> String {
        match e {
            NptnError::Config { key, .. } => key,
            other => panic!("not a config error: {other}"),
        }
    }

    #[test]
    fn empty_config_with_model_label() {
        let c = parse_config("", Some("mnist-nptn-12-3"), &[]).unwrap();
        assert_eq!(c.arch.input[0], 1);
        assert_eq!(c.arch.layers[0].out_channels, 12);
        assert_eq!(c.arch.layers[1].out_channels, 16);
        assert_eq!(c.arch.layers[0].group_size, 3);
        assert_eq!(c.arch.layers[0].kind, LayerKind::Nptn);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn overrides() {
        let c = parse_config("{}", None, &[("epochs".into(), "1".into())]).unwrap();
        assert_eq!(c.train.epochs, 1);
        assert!(c.train.decay_epochs.is_empty());
        let c = parse_config(
            "{}",
            None,
            &[
                ("train.epochs".into(), "20".into()),
                ("train.augment.rotation_range".into(), "30".into()),
            ],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 20);
        assert_eq!(c.train.augment.rotation_range, 30.0);
    }

    #[test]
    fn unknown_keys_are_named() {
        assert_eq!(
            key_of(parse_config(r#"{"epohcs": 3}"#, None, &[]).unwrap_err()),
            "epohcs"
        );
        assert_eq!(
            key_of(parse_config(r#"{"train": {"epohcs": 3}}"#, None, &[]).unwrap_err()),
            "train.epohcs"
        );
        assert_eq!(
            key_of(parse_config("{}", None, &[("epohcs".into(), "3".into())]).unwrap_err()),
            "epohcs"
        );
    }

    #[test]
    fn type_errors_are_named() {
        let e = parse_config(r#"{"train": {"epochs": "ten"}}"#, None, &[]).unwrap_err();
        assert_eq!(key_of(e), "train.epochs");
    }

    #[test]
    fn constraint_violations() {
        let e = parse_config(
            r#"{"train": {"epochs": 5, "decay_epochs": [3, 2]}}"#,
            None,
            &[],
        )
        .unwrap_err();
        assert_eq!(key_of(e), "train.decay_epochs");
        let e = parse_config(
            r#"{"train": {"epochs": 5, "decay_epochs": [5]}}"#,
            None,
            &[],
        )
        .unwrap_err();
        assert_eq!(key_of(e), "train.decay_epochs");
        let e = parse_config(r#"{"train": {"batch_size": 1}}"#, None, &[]).unwrap_err();
        assert_eq!(key_of(e), "train.batch_size");
        let e = parse_config(r#"{"model": "resnet"}"#, None, &[]).unwrap_err();
        assert_eq!(key_of(e), "model");
        let e = parse_config(
            r#"{"model": "mnist-convnet-36", "dataset": "cifar10"}"#,
            None,
            &[],
        )
        .unwrap_err();
        assert_eq!(key_of(e), "dataset");
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = parse_config(r#"{"model": "cifar-nptn-24-2"}"#, None, &[]).unwrap();
        assert_eq!(c.dataset, DatasetKind::Cifar10);
        assert_eq!(c.model, "cifar-nptn-24-2");
        let json = serde_json::to_string(&c).unwrap();
        let again = parse_config(&json, None, &[]).unwrap();
        assert_eq!(again, c);
    }
}
