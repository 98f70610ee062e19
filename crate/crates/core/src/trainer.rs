//! Mini-batch SGD with momentum and the per-epoch diagnostics:
//! train loss, validation loss, top-1 and top-5 accuracy.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_image, Normalization, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model};
use crate::tensor::{Scalar, Tape, Tensor};

pub const TOP_K: usize = 5;
pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_loss,top1,top5";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables periodic ones).
    pub checkpoint_every: usize,
    pub cosine_decay: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            checkpoint_every: 10,
            cosine_decay: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be a finite value >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "momentum must lie in [0, 1) and weight_decay must be >= 0".into(),
            ));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        if self.cosine_decay && total > 0 {
            let progress = (epoch - 1) as f64 / total as f64;
            0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub top1: f64,
    pub top5: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, self.top1, self.top5
        )
    }
}

/// Decoded images (`3×S×S`) with class indices.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet<T: Scalar> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

impl<T: Scalar> LabeledSet<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads one split of a manifest; class indices follow `labels`.
    pub fn load(manifest: &SplitManifest, split: Split, labels: &[String], size: usize) -> Result<Self> {
        let mut set = Self::default();
        for r in manifest.split(split) {
            let label = labels
                .iter()
                .position(|l| *l == r.family)
                .ok_or_else(|| Error::LabelMap(format!("family `{}` is not in the model label map", r.family)))?;
            set.images.push(load_image(&r.path, size, Normalization::UnitRange)?);
            set.labels.push(label);
            set.paths.push(r.path.clone());
        }
        Ok(set)
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images: Vec<&Tensor<T>> = indices.iter().map(|&i| &self.images[i]).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::stack(&images)?, labels))
    }
}

/// Fraction of rows whose label is among the `k` largest logits. Ties rank
/// the lower class index first.
pub fn topk_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<f64> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "topk_accuracy",
            format!("logits {shape:?} vs {} labels", labels.len()),
        ));
    }
    let c = shape[1];
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={c}")));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let row = &logits.data()[r * c..(r + 1) * c];
        let target = row[label];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < label))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
        })
        .collect()
}

/// Logits (`N×C`) for every image of a set, evaluated in batches.
pub fn predict_set<T: Scalar>(model: &Model<T>, set: &LabeledSet<T>, batch_size: usize) -> Result<Tensor<T>> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("cannot predict an empty set".into()));
    }
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut data = Vec::with_capacity(set.len() * model.num_classes());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, _) = set.batch(chunk)?;
        data.extend_from_slice(model.predict(&batch, &[])?.logits.data());
    }
    Tensor::new(vec![set.len(), model.num_classes()], data)
}

fn mean_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let (loss, _) = tape.softmax_cross_entropy(l, labels)?;
    Ok(tape.value(loss)?.data()[0].as_f64())
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `epochs.csv`, periodic checkpoints and `model.ckpt` go. Nothing
    /// is written when unset.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub final_checkpoint: Option<PathBuf>,
}

pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const FINAL_CHECKPOINT_FILE: &str = "model.ckpt";

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

/// Loads the train and val splits of `manifest` and trains.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    manifest: &SplitManifest,
    hp: &Hyperparams,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let families = manifest.families();
    if families != model.labels() {
        return Err(Error::LabelMap(format!(
            "manifest families [{}] differ from model labels [{}]",
            families.join(", "),
            model.labels().join(", ")
        )));
    }
    let size = model.config().input_size;
    let train_set = LabeledSet::load(manifest, Split::Train, model.labels(), size)?;
    let val_set = LabeledSet::load(manifest, Split::Val, model.labels(), size)?;
    train_on_sets(model, &train_set, &val_set, hp, opts)
}

/// Runs `hp.epochs` epochs, numbered on from `model.trained_epochs()`.
///
/// Each epoch reshuffles the training set from `(hp.seed, epoch)`; the last
/// partial batch is kept. The update is
/// `v ← μ·v + g + λ·p`, `p ← p − η·v`.
pub fn train_on_sets<T: Scalar>(
    model: &mut Model<T>,
    train_set: &LabeledSet<T>,
    val_set: &LabeledSet<T>,
    hp: &Hyperparams,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if train_set.is_empty() {
        return Err(Error::Training("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Training("validation split is empty".into()));
    }
    let start = model.trained_epochs();
    let total = start + hp.epochs;
    let k = TOP_K.min(model.num_classes());
    let mut velocity: Vec<Vec<T>> = model
        .params()
        .iter()
        .map(|p| vec![T::zero(); p.tensor.numel()])
        .collect();
    let momentum = T::from_f64_lossy(hp.momentum);
    let decay = T::from_f64_lossy(hp.weight_decay);
    let mut logs = Vec::with_capacity(hp.epochs);

    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join(EPOCH_LOG_FILE);
        if start == 0 || !log_path.exists() {
            fs::write(&log_path, format!("{EPOCH_LOG_HEADER}\n")).map_err(|e| Error::io(&log_path, e))?;
        }
    }

    for epoch in start + 1..=total {
        let lr = T::from_f64_lossy(hp.lr_at(epoch, total));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let (batch, labels) = train_set.batch(chunk)?;
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let x = tape.constant(batch);
            let pass = model.forward(&mut tape, x, &params, &[])?;
            let (loss, _) = tape.softmax_cross_entropy(pass.logits, &labels)?;
            let loss_value = tape.value(loss)?.data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: loss_value,
                });
            }
            tape.backward(loss)?;
            for ((param, id), vel) in model.params_mut().iter_mut().zip(&params).zip(&mut velocity) {
                let grad = tape.grad(*id)?.expect("parameters track gradients");
                for ((p, &g), v) in param.tensor.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                    *v = momentum * *v + g + decay * *p;
                    *p = *p - lr * *v;
                }
            }
            loss_sum += loss_value;
            batches += 1;
        }

        let val_logits = predict_set(model, val_set, hp.batch_size)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss: mean_cross_entropy(&val_logits, &val_set.labels)?,
            top1: topk_accuracy(&val_logits, &val_set.labels, 1)?,
            top5: topk_accuracy(&val_logits, &val_set.labels, k)?,
        };
        info!(
            "epoch {epoch}: train_loss {:.4} val_loss {:.4} top1 {:.4} top5 {:.4}",
            log.train_loss, log.val_loss, log.top1, log.top5
        );
        logs.push(log);
        model.set_trained_epochs(epoch);

        if let Some(dir) = &opts.out_dir {
            let log_path = dir.join(EPOCH_LOG_FILE);
            let mut f = OpenOptions::new()
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?;
            writeln!(f, "{}", log.csv_row()).map_err(|e| Error::io(&log_path, e))?;
            if hp.checkpoint_every > 0 && epoch % hp.checkpoint_every == 0 {
                save_checkpoint(model, checkpoint_path(dir, epoch))?;
            }
        }
    }

    let final_checkpoint = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT_FILE);
            save_checkpoint(model, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome { logs, final_checkpoint })
}

/// Parses an epoch log CSV written by the trainer.
pub fn read_epoch_log(path: impl AsRef<Path>) -> Result<Vec<EpochLog>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == EPOCH_LOG_HEADER => {}
        _ => {
            return Err(Error::Serde(format!(
                "{}: missing `{EPOCH_LOG_HEADER}` header",
                path.display()
            )))
        }
    }
    lines
        .map(|(i, line)| {
            let bad = || Error::Serde(format!("{}:{}: bad epoch row", path.display(), i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                val_loss: num(f[2])?,
                top1: num(f[3])?,
                top5: num(f[4])?,
            })
        })
        .collect()
}
