//! Epoch loop with Adam, learning-rate reduction on plateau, early
//! stopping on validation accuracy, and evaluation metrics.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetEntry, FeatureCache, SCENE_CLASSES};
use crate::dsp::{self, FeatureMatrix, NormStats};
use crate::exec::Exec;
use crate::nn::{
    argmax_rows, batch_from_features, Adam, FocalLoss, Mode, Model, ModelSpec, Tensor,
};
use crate::{Error, Result};

/// Slack below which a validation accuracy does not count as improved.
pub const IMPROVEMENT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: FocalLoss,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.001,
            plateau_factor: 0.5,
            plateau_patience: 20,
            early_stop_patience: 50,
            max_epochs: 500,
            batch_size: 32,
            seed: 0,
            loss: FocalLoss::default(),
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie strictly between 0 and 1");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive");
        }
        if self.plateau_patience >= self.early_stop_patience {
            return bad("plateau_patience must be smaller than early_stop_patience");
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return bad("max_epochs and batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epoch: usize,
    pub current_lr: f64,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub plateau_counter: usize,
    pub reductions: u32,
    pub history: Vec<EpochRecord>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // keep the loop stream apart from the stream used for initialization
        rng.set_stream(1);
        Self {
            epoch: 0,
            current_lr: cfg.initial_lr,
            best_val_acc: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            plateau_counter: 0,
            reductions: 0,
            history: Vec::new(),
            rng,
        }
    }

    /// Closes one epoch with its validation accuracy. Returns the learning
    /// rate for the next epoch and whether training should stop.
    ///
    /// Two counters run side by side: the plateau counter resets on
    /// improvement and after every reduction, the early-stop counter only
    /// on improvement.
    pub fn scheduler_step(&mut self, cfg: &TrainConfig, val_acc: f64) -> (f64, bool) {
        self.epoch += 1;
        if val_acc > self.best_val_acc + IMPROVEMENT_EPS {
            self.best_val_acc = val_acc;
            self.best_epoch = self.epoch;
            self.epochs_since_improvement = 0;
            self.plateau_counter = 0;
        } else {
            self.epochs_since_improvement += 1;
            self.plateau_counter += 1;
            if self.plateau_counter >= cfg.plateau_patience {
                self.reductions += 1;
                self.current_lr = cfg.initial_lr * cfg.plateau_factor.powi(self.reductions as i32);
                self.plateau_counter = 0;
            }
        }
        let stop = self.epochs_since_improvement >= cfg.early_stop_patience
            || self.epoch >= cfg.max_epochs;
        (self.current_lr, stop)
    }
}

/// A normalized feature matrix with its class index and device.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: FeatureMatrix,
    pub label: usize,
    pub device: String,
}

/// Loads cached features for `entries` and normalizes them with `stats`.
pub fn load_samples(
    cache: &FeatureCache,
    entries: &[&DatasetEntry],
    stats: &NormStats,
) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| {
            let label = e
                .label_index()
                .ok_or_else(|| Error::Input(format!("unknown scene label {}", e.scene_label)))?;
            let raw = cache.load(&e.path)?;
            Ok(Sample {
                features: dsp::apply_normalization(&raw, stats)?,
                label,
                device: e.device_id.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot taken at the epoch with the best validation accuracy.
    pub best: Model,
    pub state: TrainState,
}

impl TrainOutcome {
    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }
}

pub fn train(
    spec: &ModelSpec,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(spec, train_set, val_set, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    spec: &ModelSpec,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Input(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let mut model = Model::new(spec.clone(), cfg.seed)?.with_exec(cfg.exec);
    let mut adam = Adam::default();
    let mut state = TrainState::new(cfg);
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    loop {
        let lr = state.current_lr;
        order.shuffle(&mut state.rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&FeatureMatrix> =
                chunk.iter().map(|&i| &train_set[i].features).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| train_set[i].label).collect();
            let x = batch_from_features(&items)?;
            model.zero_grad();
            let probs = model.forward(&x, Mode::Train, &mut state.rng)?;
            let loss = model.backward(&targets, &cfg.loss)?;
            let mut params: Vec<&mut Tensor> =
                model.params_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut params, lr)?;
            loss_sum += loss * chunk.len() as f64;
            correct += argmax_rows(&probs)
                .iter()
                .zip(&targets)
                .filter(|(p, t)| p == t)
                .count();
        }
        let val_acc = evaluate(&model, val_set, &cfg.loss, cfg.batch_size)?.accuracy;
        let improved = val_acc > state.best_val_acc + IMPROVEMENT_EPS;
        let record = EpochRecord {
            epoch: state.epoch + 1,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
        };
        on_epoch(&record);
        state.history.push(record);
        if improved {
            best = model.clone();
        }
        let (_, stop) = state.scheduler_step(cfg, val_acc);
        if stop {
            break;
        }
    }
    model.zero_grad();
    Ok(TrainOutcome { best, state })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAccuracy {
    pub name: String,
    pub correct: usize,
    pub total: usize,
}

impl GroupAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub total: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// One entry per class index, including classes with no samples.
    pub per_class: Vec<GroupAccuracy>,
    /// Devices in order of first appearance.
    pub per_device: Vec<GroupAccuracy>,
}

fn class_name(k: usize) -> String {
    SCENE_CLASSES
        .get(k)
        .map_or_else(|| k.to_string(), |s| s.to_string())
}

/// Metrics from a `[n, classes]` probability matrix.
pub fn metrics_from_probs(
    probs: &Tensor,
    labels: &[usize],
    devices: &[&str],
    loss: &FocalLoss,
) -> Result<Metrics> {
    let (n, k) = probs.dims2()?;
    if n == 0 {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    if labels.len() != n || devices.len() != n {
        return Err(Error::Shape(format!(
            "{n} predictions for {} labels and {} devices",
            labels.len(),
            devices.len()
        )));
    }
    let losses = loss.per_sample(probs, labels)?;
    let preds = argmax_rows(probs);
    let mut per_class: Vec<GroupAccuracy> = (0..k)
        .map(|c| GroupAccuracy {
            name: class_name(c),
            correct: 0,
            total: 0,
        })
        .collect();
    let mut per_device: Vec<GroupAccuracy> = Vec::new();
    let mut correct = 0;
    for i in 0..n {
        let hit = (preds[i] == labels[i]) as usize;
        correct += hit;
        let c = &mut per_class[labels[i]];
        c.total += 1;
        c.correct += hit;
        let d = match per_device.iter().position(|g| g.name == devices[i]) {
            Some(j) => &mut per_device[j],
            None => {
                per_device.push(GroupAccuracy {
                    name: devices[i].to_string(),
                    correct: 0,
                    total: 0,
                });
                per_device.last_mut().unwrap()
            }
        };
        d.total += 1;
        d.correct += hit;
    }
    Ok(Metrics {
        total: n,
        accuracy: correct as f64 / n as f64,
        mean_loss: losses.iter().sum::<f64>() / n as f64,
        per_class,
        per_device,
    })
}

/// Inference-mode probabilities for `samples`, batched.
pub fn predict_samples(model: &Model, samples: &[Sample], batch_size: usize) -> Result<Tensor> {
    let k = model.spec.n_classes;
    let mut data = Vec::with_capacity(samples.len() * k);
    for chunk in samples.chunks(batch_size.max(1)) {
        let items: Vec<&FeatureMatrix> = chunk.iter().map(|s| &s.features).collect();
        data.extend_from_slice(model.predict(&batch_from_features(&items)?)?.data());
    }
    Tensor::new(vec![samples.len(), k], data)
}

pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    loss: &FocalLoss,
    batch_size: usize,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let probs = predict_samples(model, samples, batch_size)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let devices: Vec<&str> = samples.iter().map(|s| s.device.as_str()).collect();
    metrics_from_probs(&probs, &labels, &devices, loss)
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.val_acc
        );
    }
    out
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    dsp::write_atomic(path, history_csv(history).as_bytes())
}
