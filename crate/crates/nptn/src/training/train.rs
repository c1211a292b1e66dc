use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::Model;
use super::optim::{lr_schedule, sgd_step};
use crate::data::{augment_batch, transform_dataset, Dataset};
use crate::error::{NptnError, Result};
use crate::layers::softmax_xent;
use crate::rng::Rng;
use crate::tensor::{NDTensor, Tensor};

pub const MODEL_STREAM: u64 = 0;
pub const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based number of the completed epoch.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_error_pct: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Loss of the very first training batch, before any update.
    pub initial_loss: Option<f64>,
    pub rows: Vec<EpochMetrics>,
}

impl Metrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.rows.last()
    }

    /// CSV with header `epoch,train_loss,test_loss,test_error_pct,seconds`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| NptnError::io("metrics csv", std::io::Error::other(e));
        w.write_record([
            "epoch",
            "train_loss",
            "test_loss",
            "test_error_pct",
            "seconds",
        ])
        .map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                format!("{:.6}", r.train_loss),
                format!("{:.6}", r.test_loss),
                format!("{:.4}", r.test_error_pct),
                format!("{:.3}", r.seconds),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| NptnError::io("metrics csv", e))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        let f = std::fs::File::create(p).map_err(|e| NptnError::io(p, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Everything besides the model needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: Rng,
    /// Momentum buffers in [`Model::params`] order.
    pub velocity: Vec<Tensor>,
    pub metrics: Metrics,
}

impl TrainState {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        TrainState {
            config: config.clone(),
            epoch: 0,
            rng: Rng::derive(config.seed, TRAIN_STREAM),
            velocity: model
                .params()
                .iter()
                .map(|p| NDTensor::zeros(p.shape()))
                .collect(),
            metrics: Metrics::default(),
        }
    }
}

/// Mean loss and error percentage in eval mode. Predictions take the
/// arg max of the logits, ties going to the lowest class index.
pub fn evaluate(model: &Model, ds: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(NptnError::contract("cannot evaluate on an empty dataset"));
    }
    let mut total_loss = 0.0;
    let mut wrong = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = ds.gather(chunk);
        let logits = model.predict(&x)?;
        let (loss, _) = softmax_xent(&logits, &labels)?;
        total_loss += loss * chunk.len() as f64;
        wrong += count_wrong(&logits, &labels);
    }
    Ok((
        total_loss / ds.len() as f64,
        100.0 * wrong as f64 / ds.len() as f64,
    ))
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_wrong(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) != l)
        .count()
}

/// Train from scratch. The test set is transformed once with
/// `config.augment.test_view()` and `config.test_seed`.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainState> {
    let mut state = TrainState::new(model, config);
    run_epochs(
        model,
        &mut state,
        train_set,
        test_set,
        config.epochs,
        |_, _| Ok(()),
    )?;
    Ok(state)
}

/// Continue training until `until` epochs are complete, calling `on_epoch`
/// after each one.
pub fn run_epochs<F>(
    model: &mut Model,
    state: &mut TrainState,
    train_set: &Dataset,
    test_set: &Dataset,
    until: usize,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(&Model, &TrainState) -> Result<()>,
{
    let cfg = state.config.clone();
    cfg.validate()?;
    if state.velocity.len() != model.params().len() {
        return Err(NptnError::contract(
            "momentum buffers do not match the model",
        ));
    }
    if train_set.len() < 2 {
        return Err(NptnError::contract("need at least 2 training samples"));
    }
    let test_view = transform_dataset(test_set, &cfg.augment.test_view(), cfg.test_seed)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    while state.epoch < until.min(cfg.epochs) {
        let start = Instant::now();
        let epoch = state.epoch;
        let lr = lr_schedule(epoch, &cfg);
        order.sort_unstable();
        state.rng.shuffle(&mut order);

        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (mut x, labels) = train_set.gather(chunk);
            augment_batch(&mut x, &cfg.augment, &mut state.rng)?;
            let (logits, cache) = model.forward_train(&x)?;
            let (loss, d_logits) = softmax_xent(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(NptnError::Numeric {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            state.metrics.initial_loss.get_or_insert(loss);
            let grads = model.backward(&cache, &d_logits)?;
            for ((p, g), v) in model
                .params_mut()
                .into_iter()
                .zip(&grads)
                .zip(&mut state.velocity)
            {
                sgd_step(p, g, v, lr, cfg.momentum, cfg.weight_decay)?;
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }

        let (test_loss, test_error_pct) = evaluate(model, &test_view, cfg.eval_batch_size)?;
        if !test_loss.is_finite() {
            return Err(NptnError::Numeric {
                epoch,
                batch: usize::MAX,
                loss: test_loss,
            });
        }
        state.epoch += 1;
        state.metrics.rows.push(EpochMetrics {
            epoch: state.epoch,
            train_loss: loss_sum / seen as f64,
            test_loss,
            test_error_pct,
            seconds: if cfg.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        on_epoch(model, state)?;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::training::arch::{ArchSpec, LayerKind};
    use crate::training::model::build_model;

    /// Two classes told apart by which half of the image is bright.
    pub(crate) fn synthetic(n: usize, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let mut data = Vec::with_capacity(n * 64);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            for y in 0..8 {
                for _ in 0..8 {
                    let bright = (y < 4) == (label == 0);
                    data.push(if bright { 0.8 } else { 0.1 } + 0.1 * rng.unit_f32());
                }
            }
            labels.push(label);
        }
        Dataset::new(
            NDTensor::from_vec(&[n, 1, 8, 8], data).unwrap(),
            labels,
            "synthetic",
        )
        .unwrap()
    }

    pub(crate) fn small_arch(kind: LayerKind, g: usize) -> ArchSpec {
        let mut a = ArchSpec::two_layer([1, 8, 8], kind, 4, g, 3);
        for l in &mut a.layers {
            l.kernel = 3;
            l.pad = 1;
        }
        a
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            decay_epochs: vec![],
            batch_size: 8,
            record_wall_time: false,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_drops_within_one_epoch() {
        let ds = synthetic(32, 1);
        let mut m = build_model(&small_arch(LayerKind::Nptn, 2), &mut Rng::new(0)).unwrap();
        let st = train(&mut m, &ds, &ds, &cfg(3)).unwrap();
        let first = st.metrics.initial_loss.unwrap();
        assert!(st.metrics.rows[0].train_loss < first, "{:?}", st.metrics);
        assert!(st.metrics.last().unwrap().train_loss < st.metrics.rows[0].train_loss);
    }

    #[test]
    fn same_seed_same_metrics() {
        let ds = synthetic(32, 1);
        let run = || {
            let mut m = build_model(&small_arch(LayerKind::Conv, 1), &mut Rng::new(0)).unwrap();
            let st = train(&mut m, &ds, &ds, &cfg(2)).unwrap();
            (m, st.metrics)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let ds = synthetic(16, 2);
        let mut m = build_model(&small_arch(LayerKind::Nptn, 2), &mut Rng::new(0)).unwrap();
        let before = m.clone();
        let c = TrainConfig {
            base_lr: 0.0,
            ..cfg(1)
        };
        train(&mut m, &ds, &ds, &c).unwrap();
        assert_eq!(m.params(), before.params());
    }

    #[test]
    fn evaluate_rules() {
        let m = build_model(&small_arch(LayerKind::Conv, 1), &mut Rng::new(0)).unwrap();
        assert!(matches!(
            synthetic(2, 0).slice(0..0),
            Err(NptnError::Contract(_))
        ));

        // zero classifier: uniform logits, everything predicted as class 0
        let mut m = m;
        m.fc_weight = NDTensor::zeros(m.fc_weight.shape());
        let mut ds = synthetic(10, 0);
        ds.labels = (0..10).collect();
        let (loss, err) = evaluate(&m, &ds, 4).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-6);
        assert!((err - 90.0).abs() < 1e-12);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn perfect_predictor_has_zero_error() {
        let mut m = build_model(&small_arch(LayerKind::Conv, 1), &mut Rng::new(0)).unwrap();
        m.fc_weight = NDTensor::zeros(m.fc_weight.shape());
        m.fc_bias.data_mut()[3] = 5.0;
        let mut ds = synthetic(10, 0);
        ds.labels = vec![3; 10];
        let (_, err) = evaluate(&m, &ds, 3).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn metrics_csv_format() {
        let m = Metrics {
            initial_loss: None,
            rows: vec![EpochMetrics {
                epoch: 1,
                train_loss: 0.5,
                test_loss: 0.25,
                test_error_pct: 12.5,
                seconds: 0.0,
            }],
        };
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,test_loss,test_error_pct,seconds\n1,0.500000,0.250000,12.5000,0.000\n"
        );
    }
}
