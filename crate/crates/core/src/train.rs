//! SGD with momentum, a step learning-rate schedule and the training loop.

use std::fmt::Write as _;

use crate::criterion::evaluate_accuracy;
use crate::data::{shuffled, Augment, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::norm::Mode;
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Epochs at which the learning rate is multiplied by `lr_factor`.
    pub lr_drops: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs: 350,
            batch_size: 512,
            lr0: 0.1,
            lr_drops: vec![150, 300],
            lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainPlan {
    /// Two-spirals surrogate task.
    pub fn spirals() -> Self {
        TrainPlan {
            epochs: 200,
            batch_size: 20,
            lr0: 0.01,
            lr_drops: vec![150],
            weight_decay: 0.0,
            augment: false,
            ..TrainPlan::default()
        }
    }

    /// A short CIFAR-10 run on a subset.
    pub fn cifar10_small() -> Self {
        TrainPlan {
            epochs: 15,
            batch_size: 128,
            lr_drops: vec![10],
            ..TrainPlan::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch_size must be positive".into()));
        }
        if let Some(d) = self.lr_drops.iter().find(|&&d| d >= self.epochs) {
            return Err(Error::Invalid(format!("lr drop at epoch {d} is outside [0, {})", self.epochs)));
        }
        for (name, v) in [
            ("lr0", self.lr0),
            ("lr_factor", self.lr_factor),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::Invalid(format!("epoch {epoch} outside [0, {})", self.epochs)));
        }
        let drops = self.lr_drops.iter().filter(|&&d| d <= epoch).count() as i32;
        // dividing by 1/factor keeps 0.1 → 0.01 → 0.001 exact
        let inv = 1.0 / self.lr_factor;
        if inv.fract() == 0.0 && inv.is_finite() {
            Ok(self.lr0 / inv.powi(drops))
        } else {
            Ok(self.lr0 * self.lr_factor.powi(drops))
        }
    }
}

/// One step of SGD with momentum and L2 weight decay:
/// `v ← m·v + g + wd·p`, `p ← p − lr·v`.
pub fn sgd_momentum_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    param.expect_same_shape(grad, "sgd_momentum_step")?;
    param.expect_same_shape(velocity, "sgd_momentum_step")?;
    for ((p, v), g) in param.data_mut().iter_mut().zip(velocity.data_mut()).zip(grad.data()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,test_acc";

pub fn metrics_to_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        // `{:?}` on f64 prints the shortest string that parses back exactly
        let _ = writeln!(s, "{},{:?},{:?},{:?},{:?}", r.epoch, r.lr, r.train_loss, r.train_acc, r.test_acc);
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Data(format!("metrics CSV must start with `{METRICS_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::Data(format!("metrics CSV line {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad())?,
                lr: num(1)?,
                train_loss: num(2)?,
                train_acc: num(3)?,
                test_acc: num(4)?,
            })
        })
        .collect()
}

/// Progress notifications from [`train`].
pub enum TrainEvent<'a> {
    Epoch(&'a EpochMetrics),
    /// Model state at the start of `epoch` (a learning-rate drop) or after
    /// the final epoch (`epoch == plan.epochs`).
    Checkpoint { epoch: usize, model: &'a Model },
}

/// Trains `model` with mean cross-entropy, returning one metrics row per
/// epoch. Shuffling and augmentation draw from the plan seed's substreams.
pub fn train(
    model: &mut Model,
    plan: &TrainPlan,
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    plan.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Data("training and test sets must be non-empty".into()));
    }
    let mut shuffle_rng = substream(plan.seed, Stream::Shuffle);
    let mut augment_rng = substream(plan.seed, Stream::Augment);
    let augment = if plan.augment { Augment::STANDARD } else { Augment::NONE };
    let ids: Vec<_> = model.store().trainable_ids().collect();
    let mut velocity: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros_like(model.store().get(id))).collect();
    let spec = model.train_spec();
    let mut log = Vec::with_capacity(plan.epochs);

    for epoch in 0..plan.epochs {
        let lr = plan.lr_at_epoch(epoch)?;
        model.set_mode(Mode::Train);
        let order = shuffled(train_set.len(), &mut shuffle_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, idx) in order.chunks(plan.batch_size).enumerate() {
            // batch statistics need two samples
            if idx.len() < 2 && seen > 0 {
                continue;
            }
            let (x, labels) = train_set.batch(idx)?;
            let x = augment.apply(&x, &mut augment_rng)?;
            let out = model.loss_and_grads(&x, &labels).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            })?;
            for (((id, grad), v), &want) in out.grads.iter().zip(&mut velocity).zip(&ids) {
                debug_assert_eq!(*id, want);
                let p = model.store_mut().get_mut(*id);
                sgd_momentum_step(p, grad, v, lr, plan.momentum, plan.weight_decay)?;
            }
            model.apply_updates(out.updates)?;
            loss_sum += out.loss * idx.len() as f64;
            correct += out
                .logits
                .argmax_rows()?
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            seen += idx.len();
        }
        let test_acc = evaluate_accuracy(model, test_set, spec)?;
        let row = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc,
        };
        on_event(TrainEvent::Epoch(&row))?;
        log.push(row);
        if plan.lr_drops.contains(&(epoch + 1)) || epoch + 1 == plan.epochs {
            on_event(TrainEvent::Checkpoint { epoch: epoch + 1, model })?;
        }
    }
    model.set_mode(Mode::Eval);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let p = TrainPlan::default();
        assert_eq!(p.lr_at_epoch(0).unwrap(), 0.1);
        assert_eq!(p.lr_at_epoch(149).unwrap(), 0.1);
        assert_eq!(p.lr_at_epoch(150).unwrap(), 0.01);
        assert_eq!(p.lr_at_epoch(300).unwrap(), 0.001);
        assert_eq!(p.lr_at_epoch(349).unwrap(), 0.001);
        assert!(p.lr_at_epoch(350).is_err());
    }

    #[test]
    fn plan_rejects_drop_past_end() {
        let p = TrainPlan {
            epochs: 10,
            lr_drops: vec![10],
            ..TrainPlan::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn sgd_unrolled_momentum() {
        let g = Tensor::from_vec(vec![1.0, -2.0]);
        let mut p = Tensor::zeros([2]);
        let mut v = Tensor::zeros([2]);
        for _ in 0..2 {
            sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
        }
        for (pi, gi) in p.data().iter().zip(g.data()) {
            assert!((pi + 0.1 * (gi + 1.9 * gi)).abs() < 1e-15);
        }
        assert!(sgd_momentum_step(&mut p, &Tensor::zeros([3]), &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn metrics_round_trip() {
        let rows = vec![
            EpochMetrics {
                epoch: 0,
                lr: 0.1,
                train_loss: 0.6931471805599453,
                train_acc: 0.5,
                test_acc: 1.0 / 3.0,
            },
            EpochMetrics {
                epoch: 1,
                lr: 0.010000000000000002,
                train_loss: 1e-300,
                train_acc: 0.97,
                test_acc: 0.9,
            },
        ];
        let csv = metrics_to_csv(&rows);
        assert!(csv.starts_with("epoch,lr,train_loss,train_acc,test_acc\n"));
        assert_eq!(parse_metrics_csv(&csv).unwrap(), rows);
    }
}
