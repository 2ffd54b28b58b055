//! Weakly supervised training: one randomly drawn, augmented bag per SGD
//! step, cross-entropy against the sample label, early stopping on an
//! internal validation split, and test-time-augmented evaluation.

use std::fmt;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_float, stable_hash, AugmentConfig, SeededRng};
use crate::imaging::PatchImage;
use crate::model::{
    embed_on_tape, head_on_tape, predict_inputs, record_params, BackboneConfig, ModelError, ModelInput, ModelParams,
};
use crate::tensor::{sgd_step, Tape, TensorError, CROSS_ENTROPY_EPS};

// Stream tags for derived rngs.
const STREAM_INIT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_ORDER: u64 = 3;
const STREAM_BAG: u64 = 4;
const STREAM_TTA: u64 = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, sample `{sample}`")]
    NonFiniteLoss { epoch: usize, sample: String },
    #[error("non-finite gradient for parameter `{parameter}` at epoch {epoch}, sample `{sample}`")]
    NonFiniteGradient {
        epoch: usize,
        sample: String,
        parameter: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub max_epochs: usize,
    pub bag_size_cap: usize,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub tta_replicas: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            max_epochs: 100,
            bag_size_cap: 50,
            early_stop_patience: 10,
            validation_fraction: 0.15,
            tta_replicas: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.bag_size_cap == 0 || self.early_stop_patience == 0 || self.tta_replicas == 0 {
            return bad("bag_size_cap, early_stop_patience and tta_replicas must be positive".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return bad(format!(
                "validation_fraction must lie in (0, 0.5), got {}",
                self.validation_fraction
            ));
        }
        Ok(())
    }
}

/// One labelled sample with its patches already reduced to model resolution.
#[derive(Clone, Debug)]
pub struct BagSample {
    pub id: String,
    pub label: usize,
    pub inputs: Vec<ModelInput>,
}

impl BagSample {
    pub fn from_patches(id: impl Into<String>, label: usize, patches: &[PatchImage], side: usize) -> Self {
        Self {
            id: id.into(),
            label,
            inputs: patches.iter().map(|p| ModelInput::from_patch(p, side)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MaxEpochs => "max_epochs",
            Self::EarlyStopping => "early_stopping",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: ModelParams,
    pub history: Vec<EpochStats>,
    pub config: TrainConfig,
    pub augment: AugmentConfig,
    pub stopping: StopReason,
    /// Epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

/// `min(N, cap)` distinct items drawn uniformly without replacement, in
/// random order.
pub fn sample_bag<'a, T, R: Rng>(items: &'a [T], cap: usize, rng: &mut R) -> Vec<&'a T> {
    if items.is_empty() {
        warn!("sample_bag called on an empty sample");
        return Vec::new();
    }
    rand::seq::index::sample(rng, items.len(), items.len().min(cap))
        .into_iter()
        .map(|i| &items[i])
        .collect()
}

/// Stratified, seeded hold-out: per class, `round(n_c * fraction)` samples
/// (at most `n_c - 1`) go to validation. Returns `true` for validation.
pub fn validation_split(labels: &[usize], fraction: f64, seed: u64) -> Vec<bool> {
    let mut is_val = vec![false; labels.len()];
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut rng = SeededRng::derive(seed, &[STREAM_SPLIT]);
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let take = ((members.len() as f64 * fraction).round() as usize).min(members.len() - 1);
        for &i in &members[..take] {
            is_val[i] = true;
        }
    }
    is_val
}

/// Cross-entropy of one probability vector, with the same clamp as the tape op.
pub fn cross_entropy(probs: &[f32], target: usize) -> f64 {
    -(probs[target].max(CROSS_ENTROPY_EPS as f32) as f64).ln()
}

/// Forward and backward for one bag; gradients are added into `model`.
/// Returns the loss.
pub fn bag_gradient(model: &mut ModelParams, inputs: &[&ModelInput], target: usize) -> Result<f32, ModelError> {
    if target >= model.n_classes() {
        return Err(TensorError::Index {
            target,
            classes: model.n_classes(),
        }
        .into());
    }
    let mut tape = Tape::new();
    let vars = record_params(&mut tape, model, 0..model.params.len());
    let rows = inputs
        .iter()
        .map(|inp| embed_on_tape(&mut tape, model, &vars, inp))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = tape.stack_rows(&rows)?;
    let (fused, _) = tape.max_reduce_instances(stacked)?;
    let (_, probs) = head_on_tape(&mut tape, model, &vars, fused)?;
    let loss = tape.cross_entropy(probs, target)?;
    let grads = tape.backward(loss);
    tape.accumulate(&grads, &mut model.params);
    Ok(tape.value(loss).data()[0])
}

/// Mean loss and accuracy over bags without augmentation; parallel over
/// samples, merged in sample order.
pub fn evaluate_loss(model: &ModelParams, bags: &[&BagSample]) -> Result<(f64, f64), ModelError> {
    let results = bags
        .par_iter()
        .map(|b| {
            let pred = predict_inputs(&b.inputs, model)?;
            Ok((cross_entropy(&pred.probabilities, b.label), pred.predicted_class() == b.label))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let n = results.len().max(1) as f64;
    let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
    let acc = results.iter().filter(|r| r.1).count() as f64 / n;
    Ok((loss, acc))
}

fn run_epoch(
    model: &mut ModelParams,
    train: &[&BagSample],
    epoch: usize,
    augment: &AugmentConfig,
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut SeededRng::derive(config.seed, &[STREAM_ORDER, epoch as u64]));
    let side = model.backbone.input_side;
    let mut total = 0.0f64;
    for &i in &order {
        let bag = train[i];
        let mut rng = SeededRng::derive(config.seed, &[STREAM_BAG, epoch as u64, stable_hash(&bag.id)]);
        let picked = sample_bag(&bag.inputs, config.bag_size_cap, &mut rng);
        let augmented: Vec<ModelInput> = picked
            .into_iter()
            .map(|inp| ModelInput {
                side,
                rgb: augment_float(&inp.rgb, side, augment, &mut rng),
            })
            .collect();
        let refs: Vec<&ModelInput> = augmented.iter().collect();
        let loss = bag_gradient(model, &refs, bag.label)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                sample: bag.id.clone(),
            });
        }
        sgd_step(&mut model.params, config.learning_rate).map_err(|e| match e {
            TensorError::NonFinite(parameter) => TrainError::NonFiniteGradient {
                epoch,
                sample: bag.id.clone(),
                parameter,
            },
            other => TrainError::Model(other.into()),
        })?;
        total += loss as f64;
    }
    Ok(total / train.len() as f64)
}

/// Trains a fresh model. Samples with no patches are skipped with a warning.
pub fn train(
    bags: &[BagSample],
    classes: &[String],
    backbone: &BackboneConfig,
    augment: &AugmentConfig,
    config: &TrainConfig,
) -> Result<TrainedModel, TrainError> {
    config.validate()?;
    augment.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let usable: Vec<&BagSample> = bags
        .iter()
        .filter(|b| {
            if b.inputs.is_empty() {
                warn!("skipping sample `{}`: no patches", b.id);
            }
            !b.inputs.is_empty()
        })
        .collect();
    if let Some(b) = usable.iter().find(|b| b.label >= classes.len()) {
        return Err(TrainError::Config(format!(
            "sample `{}` has label index {} outside {} classes",
            b.id,
            b.label,
            classes.len()
        )));
    }
    let mut present: Vec<usize> = usable.iter().map(|b| b.label).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(TrainError::Config(format!(
            "need at least 2 classes among training samples, found {}",
            present.len()
        )));
    }

    let mut model = ModelParams::init(
        backbone.clone(),
        classes.to_vec(),
        &mut SeededRng::derive(config.seed, &[STREAM_INIT]),
    )?;
    let labels: Vec<usize> = usable.iter().map(|b| b.label).collect();
    let is_val = validation_split(&labels, config.validation_fraction, config.seed);
    let (val, train_set): (Vec<&BagSample>, Vec<&BagSample>) = {
        let (v, t): (Vec<_>, Vec<_>) = usable.iter().zip(&is_val).partition(|(_, &v)| v);
        (v.into_iter().map(|(b, _)| *b).collect(), t.into_iter().map(|(b, _)| *b).collect())
    };
    if val.is_empty() {
        warn!("validation split is empty; early stopping monitors the training set");
    }
    let monitor: &[&BagSample] = if val.is_empty() { &train_set } else { &val };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stopping = StopReason::MaxEpochs;
    for epoch in 0..config.max_epochs {
        let train_loss = run_epoch(&mut model, &train_set, epoch, augment, config)?;
        let (val_loss, val_accuracy) = evaluate_loss(&model, monitor)?;
        info!("epoch {epoch}: train loss {train_loss:.5}, val loss {val_loss:.5}, val acc {val_accuracy:.3}");
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        match &best {
            Some((b, _, _)) if val_loss >= *b => {}
            _ => best = Some((val_loss, epoch, model.clone())),
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if epoch - best_epoch >= config.early_stop_patience {
            stopping = StopReason::EarlyStopping;
            break;
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => (model, None),
    };
    Ok(TrainedModel {
        model,
        history,
        config: config.clone(),
        augment: augment.clone(),
        stopping,
        best_epoch,
    })
}

/// One line per epoch: `epoch train_loss val_loss val_acc`, tab separated.
pub fn format_training_log(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_loss\tval_acc\n");
    for s in history {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.4}\n",
            s.epoch, s.train_loss, s.val_loss, s.val_accuracy
        ));
    }
    out
}

/// Mean class probabilities over `replicas` independently augmented copies
/// of the full patch set.
///
/// Each patch copy draws from a stream keyed by `(seed, replica, patch
/// content)`, so the result does not depend on patch order and duplicated
/// patches stay duplicates.
pub fn evaluate_with_tta(
    model: &ModelParams,
    inputs: &[ModelInput],
    augment: &AugmentConfig,
    replicas: usize,
    seed: u64,
) -> Result<Vec<f32>, ModelError> {
    let replicas = replicas.max(1);
    let side = model.backbone.input_side;
    let keys: Vec<u64> = inputs.iter().map(ModelInput::content_hash).collect();
    let mut sum = vec![0.0f64; model.n_classes()];
    for r in 0..replicas {
        let copy: Vec<ModelInput> = if augment.is_identity() {
            inputs.to_vec()
        } else {
            inputs
                .iter()
                .zip(&keys)
                .map(|(inp, &key)| {
                    let mut rng = SeededRng::derive(seed, &[STREAM_TTA, r as u64, key]);
                    ModelInput {
                        side,
                        rgb: augment_float(&inp.rgb, side, augment, &mut rng),
                    }
                })
                .collect()
        };
        let pred = predict_inputs(&copy, model)?;
        for (s, p) in sum.iter_mut().zip(pred.probabilities) {
            *s += p as f64;
        }
    }
    Ok(sum.into_iter().map(|s| (s / replicas as f64) as f32).collect())
}

pub fn predict_sample_tta(
    model: &ModelParams,
    sample: &BagSample,
    augment: &AugmentConfig,
    replicas: usize,
    seed: u64,
) -> Result<Vec<f32>, ModelError> {
    evaluate_with_tta(model, &sample.inputs, augment, replicas, seed)
}
