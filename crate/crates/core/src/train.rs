//! Per-category training with Adam.
//!
//! One epoch shuffles the training shapes with the trainer's seeded
//! generator, samples every shape to the configured point count, optionally
//! augments it, and takes one Adam step per batch. The last partial batch is
//! kept. All randomness comes from the single trainer generator, so a run is
//! a pure function of its inputs and seed.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, derive_seed, normalize, sample_points, stack_batch, AugmentConfig, PointCloud};
use crate::error::{Error, Result};
use crate::eval::evaluate_split;
use crate::layers::{commit_bn_updates, Forward, Mode};
use crate::model::{segmentation_loss, Segmenter};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Points sampled per shape.
    pub points: usize,
    pub category: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 1,
            seed: 0,
            points: 1024,
            category: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.points == 0 {
            return Err(Error::Config("points must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam moments for every trainable parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let ids = store.trainable_ids();
        let zeros: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            step: 0,
            ids,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Trainable parameters without an entry in
/// `grads` are treated as having zero gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut by_slot: Vec<Option<&Tensor>> = vec![None; state.ids.len()];
    for (id, g) in grads {
        let slot = state
            .ids
            .binary_search(id)
            .map_err(|_| Error::Usage(format!("gradient for non-trainable parameter {}", store.name(*id))))?;
        if g.shape() != state.m[slot].shape() {
            return Err(Error::Dimension(format!(
                "gradient for {} has shape {:?}, parameter has {:?}",
                store.name(*id),
                g.shape(),
                state.m[slot].shape()
            )));
        }
        by_slot[slot] = Some(g);
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (slot, &id) in state.ids.iter().enumerate() {
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        let p = store.get_mut(id).data_mut();
        match by_slot[slot] {
            Some(g) => {
                for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                    *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                    *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                    *pi -= cfg.learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.epsilon);
                }
            }
            None => {
                for ((pi, mi), vi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi *= cfg.beta1;
                    *vi *= cfg.beta2;
                    *pi -= cfg.learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.epsilon);
                }
            }
        }
    }
    Ok(())
}

/// Optimizer and sampling state carried across epochs and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: u64,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(store: &ParamStore, seed: u64) -> Self {
        Self {
            epoch: 0,
            adam: AdamState::new(store),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    /// Training-mode loss over the training set before the first update.
    pub initial_loss: f64,
    /// Mean batch loss of each epoch (losses measured before each step).
    pub epoch_loss: Vec<f64>,
    /// Validation instance mIoU after each epoch, when a validation set is given.
    pub val_instance_miou: Vec<Option<f64>>,
    pub epoch_seconds: Vec<f64>,
}

impl History {
    /// Tab-separated epoch table.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_instance_miou\tseconds\n");
        for (i, loss) in self.epoch_loss.iter().enumerate() {
            let val = self
                .val_instance_miou
                .get(i)
                .copied()
                .flatten()
                .map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            let secs = self.epoch_seconds.get(i).copied().unwrap_or(0.0);
            out.push_str(&format!("{}\t{loss:.8}\t{val}\t{secs:.3}\n", i + 1));
        }
        out
    }
}

/// Checks that every cloud is labeled within `[0, parts)`.
pub fn check_labels(clouds: &[PointCloud], parts: usize) -> Result<()> {
    for c in clouds {
        let labels = c.labels()?;
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= parts) {
            return Err(Error::Data(format!(
                "shape '{}' point {i} has part {l}, but the model has {parts} parts",
                c.id
            )));
        }
    }
    Ok(())
}

fn prepare(clouds: &[PointCloud]) -> Result<Vec<PointCloud>> {
    clouds.iter().map(normalize).collect()
}

fn step_batch<M: Segmenter + ?Sized>(
    model: &mut M,
    batch: &[PointCloud],
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (x, labels) = stack_batch(batch)?;
    let mut g = Graph::new();
    let (loss_value, updates) = {
        let mut fw = Forward::new(&mut g, model.store(), Mode::Train);
        let input = fw.graph.constant(x);
        let out = model.forward(&mut fw, input)?;
        let loss = segmentation_loss(fw.graph, &out, &labels, model.lambda_reg())?;
        let value = fw.graph.value(loss).data()[0];
        let updates = std::mem::take(&mut fw.bn_updates);
        fw.graph.backward(loss)?;
        (value, updates)
    };
    let grads = g.param_grads();
    adam_step(model.store_mut(), &grads, &mut state.adam, cfg)?;
    commit_bn_updates(model.store_mut(), updates)?;
    Ok(loss_value)
}

/// Training-mode loss over `clouds` (already normalized), without updating
/// anything. Shape `i` is sampled with `derive_seed(seed, i)`; batches
/// follow list order.
pub fn dataset_loss<M: Segmenter + ?Sized>(
    model: &M,
    clouds: &[PointCloud],
    points: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let sampled: Vec<PointCloud> = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| sample_points(c, points, derive_seed(seed, i)))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for chunk in sampled.chunks(batch_size.max(1)) {
        let (x, labels) = stack_batch(chunk)?;
        let mut g = Graph::new();
        let mut fw = Forward::new(&mut g, model.store(), Mode::Train);
        let input = fw.graph.constant(x);
        let out = model.forward(&mut fw, input)?;
        let loss = segmentation_loss(fw.graph, &out, &labels, model.lambda_reg())?;
        total += g.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / sampled.len() as f64)
}

/// Runs one epoch over normalized training clouds; returns the mean batch loss
/// weighted by batch size.
pub fn run_epoch<M: Segmenter + ?Sized>(
    model: &mut M,
    train: &[PointCloud],
    state: &mut TrainState,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut state.rng);
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let mut batch = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let sample_seed = state.rng.next_u64();
            let mut c = sample_points(&train[i], cfg.points, sample_seed)?;
            if aug.enabled {
                c = augment(&c, aug, &mut state.rng);
            }
            batch.push(c);
        }
        total += step_batch(model, &batch, state, cfg)? * chunk.len() as f64;
    }
    state.epoch += 1;
    Ok(total / train.len() as f64)
}

/// Trains `model` on one category's training clouds for `cfg.epochs`
/// epochs, evaluating on `val` after each epoch when it is non-empty.
pub fn train_category<M: Segmenter + ?Sized>(
    model: &mut M,
    train: &[PointCloud],
    val: &[PointCloud],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
) -> Result<History> {
    let mut state = TrainState::new(model.store(), cfg.seed);
    train_from_state(model, train, val, cfg, aug, &mut state)
}

/// As [`train_category`], continuing from an existing optimizer state.
pub fn train_from_state<M: Segmenter + ?Sized>(
    model: &mut M,
    train: &[PointCloud],
    val: &[PointCloud],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    state: &mut TrainState,
) -> Result<History> {
    cfg.validate()?;
    if aug.enabled {
        aug.validate()?;
    }
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    check_labels(train, model.num_parts())?;
    check_labels(val, model.num_parts())?;
    let train = prepare(train)?;

    let mut history = History {
        initial_loss: dataset_loss(model, &train, cfg.points, cfg.batch_size, cfg.seed)?,
        ..History::default()
    };
    for _ in 0..cfg.epochs {
        let start = Instant::now();
        let loss = run_epoch(model, &train, state, cfg, aug)?;
        history.epoch_seconds.push(start.elapsed().as_secs_f64());
        history.epoch_loss.push(loss);
        let val_miou = if val.is_empty() {
            None
        } else {
            Some(evaluate_split(model, val, cfg.points, cfg.seed)?.instance_miou)
        };
        history.val_instance_miou.push(val_miou);
    }
    Ok(history)
}
