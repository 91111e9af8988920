//! SGD training with momentum and weight decay, per-epoch history and
//! checkpoints.

mod checkpoint;
mod sgd;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_for, parse_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use sgd::{sgd_step, sgd_update, OptimState};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batch_order, stack, Batch, Sample};
use crate::metrics::{evaluate, EvalReport};
use crate::model::Model;
use crate::{Error, Graph, Result, Scalar};

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// keep normalization affine terms and position embeddings out of
    /// weight decay
    pub exempt_norm_and_position: bool,
    /// seeds the batch order (the model is initialized separately)
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            exempt_norm_and_position: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based
    pub epoch: usize,
    /// mean training loss over the epoch's batches
    pub loss: f64,
    pub val_dice: Option<f64>,
    /// validation average Hausdorff distance
    pub val_hd: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// `epoch,loss,val_dice,val_hd` with `n/a` for missing values; floats
    /// are written with enough digits to round-trip.
    pub fn to_csv(&self) -> String {
        let na = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| x.to_string());
        let mut out = String::from("epoch,loss,val_dice,val_hd\n");
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.epoch, r.loss, na(r.val_dice), na(r.val_hd)).unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(Error::io(path))
    }
}

/// A model, its optimizer and a step counter.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub optim: OptimState<T>,
    pub steps: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: &TrainConfig) -> Result<Self> {
        let mut optim = OptimState::new(model.params(), cfg.lr, cfg.momentum, cfg.weight_decay)?;
        optim.exempt_norm_and_position = cfg.exempt_norm_and_position;
        Ok(Trainer { model, optim, steps: 0 })
    }

    /// One optimizer step on `batch`: training-mode forward, cross-entropy,
    /// backward, SGD. Returns the batch loss.
    pub fn step(&mut self, batch: &Batch, epoch: usize) -> Result<f64> {
        let diverged = |loss: f64| Error::Diverged {
            epoch,
            step: self.steps + 1,
            loss,
        };
        let g = Graph::new();
        let x = g.constant(batch.images.cast());
        let loss = match self
            .model
            .forward_train(&g, x)
            .and_then(|logits| logits.cross_entropy(&batch.masks))
        {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        let value = loss.value().item().f64();
        if !value.is_finite() {
            return Err(diverged(value));
        }
        let grads = g.backward(loss)?;
        sgd_step(self.model.params_mut(), grads, &mut self.optim)?;
        if self.model.params().iter().any(|p| !p.value.is_finite()) {
            return Err(diverged(value));
        }
        self.steps += 1;
        Ok(value)
    }

    /// One seeded pass over `samples`; returns the mean batch loss.
    pub fn epoch(&mut self, samples: &[Sample], cfg: &TrainConfig, epoch: usize) -> Result<f64> {
        let order = batch_order(samples.len(), cfg.batch_size, cfg.seed, epoch)?;
        let mut total = 0.0;
        for idx in &order {
            total += self.step(&stack(samples, idx)?, epoch)?;
        }
        Ok(total / order.len() as f64)
    }
}

/// Result of [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub last: Trainer<T>,
    /// the model with the best validation Dice (the last one when there is
    /// no validation set)
    pub best: Model<T>,
    pub best_epoch: usize,
    pub best_report: Option<EvalReport>,
    pub history: History,
}

/// Trains for `cfg.epochs` seeded passes over `train`, evaluating on `val`
/// after every epoch. `on_epoch` sees each record as it is produced.
pub fn train_loop<T: Scalar>(
    model: Model<T>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training samples",
            cfg.batch_size,
            train.len()
        )));
    }
    let mut trainer = Trainer::new(model, cfg)?;
    let mut history = History::default();
    let mut best: Option<(f64, usize, Model<T>, EvalReport)> = None;
    for epoch in 1..=cfg.epochs {
        let loss = trainer.epoch(train, cfg, epoch)?;
        let report = if val.is_empty() {
            None
        } else {
            Some(evaluate(&trainer.model, val, cfg.batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            loss,
            val_dice: report.as_ref().and_then(|r| r.mean_dice),
            val_hd: report.as_ref().and_then(|r| r.mean_ahd),
        };
        on_epoch(&record);
        if let Some(report) = report {
            let dice = report.mean_dice.unwrap_or(0.0);
            if best.as_ref().is_none_or(|(d, ..)| dice > *d) {
                best = Some((dice, epoch, trainer.model.clone(), report));
            }
        }
        history.records.push(record);
    }
    let (best, best_epoch, best_report) = match best {
        Some((_, e, m, r)) => (m, e, Some(r)),
        None => (trainer.model.clone(), cfg.epochs, None),
    };
    Ok(TrainOutcome {
        last: trainer,
        best,
        best_epoch,
        best_report,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantoms, PhantomSpec};
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            height: 16,
            width: 16,
            levels: 2,
            base_channels: 4,
            layers: 1,
            heads: 2,
            d_model: 8,
            d_mlp: 8,
            skips: 2,
            num_classes: 3,
            ..Default::default()
        }
    }

    fn samples(n: usize) -> Vec<Sample> {
        generate_phantoms(&PhantomSpec {
            count: n,
            num_classes: 3,
            height: 16,
            width: 16,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn one_sample_one_epoch_is_one_step() {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            ..Default::default()
        };
        let out = train_loop(Model::<f32>::new(tiny(), 0).unwrap(), &samples(1), &[], &cfg, |_| {}).unwrap();
        assert_eq!(out.last.steps, 1);
        assert_eq!(out.history.records.len(), 1);
        assert_eq!(out.history.records[0].val_dice, None);
    }

    #[test]
    fn loss_on_a_fixed_batch_decreases_for_five_steps() {
        let data = samples(2);
        let batch = stack(&data, &[0, 1]).unwrap();
        let mut t = Trainer::new(Model::<f32>::new(tiny(), 0).unwrap(), &TrainConfig::default()).unwrap();
        let losses: Vec<f64> = (0..6).map(|_| t.step(&batch, 1).unwrap()).collect();
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn same_seed_same_history() {
        let data = samples(4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 3,
            ..Default::default()
        };
        let run = || {
            train_loop(Model::<f32>::new(tiny(), 1).unwrap(), &data[..3], &data[3..], &cfg, |_| {})
                .unwrap()
                .history
                .to_csv()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.lines().count(), 3);
        assert!(a.starts_with("epoch,loss,val_dice,val_hd\n1,"));
    }

    #[test]
    fn empty_data_and_oversized_batches_are_rejected() {
        let cfg = TrainConfig::default();
        let m = Model::<f32>::new(tiny(), 0).unwrap();
        assert!(matches!(
            train_loop(m.clone(), &[], &[], &cfg, |_| {}),
            Err(Error::Empty(_))
        ));
        let cfg = TrainConfig {
            batch_size: 5,
            ..cfg
        };
        assert!(train_loop(m, &samples(2), &[], &cfg, |_| {}).is_err());
    }

    #[test]
    fn an_exploding_learning_rate_aborts_with_a_diagnostic() {
        let data = samples(2);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 2,
            lr: 1e30,
            momentum: 0.0,
            ..Default::default()
        };
        let err = train_loop(Model::<f32>::new(tiny(), 0).unwrap(), &data, &[], &cfg, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}
