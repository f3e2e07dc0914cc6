//! AdamW with decoupled weight decay, the step-decay learning-rate schedule
//! and the training loop with early stopping on training loss.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_tensors, NormalizedSegment};
use crate::error::{Error, Result};
use crate::layers::Param;
use crate::model::MixerModel;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: first/second moment per parameter tensor plus the step
/// counter. Moments start at zero and shapes are pinned on the first step.
pub struct AdamW<F: Scalar> {
    cfg: AdamWConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: u64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update:
    /// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected
    /// `m_hat, v_hat`, then `p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)`.
    pub fn step(&mut self, params: &mut [(String, &mut Param<F>)], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Protocol(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let one = F::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let eps = F::from_f64(self.cfg.eps);
        let wd = F::from_f64(self.cfg.weight_decay);
        let lr = F::from_f64(lr);
        for (i, (name, p)) in params.iter_mut().enumerate() {
            if !p.grad.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of {name} at optimizer step {}", self.step),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let grads = p.grad.data();
            for ((pv, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pv = *pv - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *pv);
            }
        }
        Ok(())
    }
}

/// Step-decay schedule and stopping rules:
/// `lr(epoch) = initial_lr * decay_factor^floor(epoch / decay_every)`;
/// training halts when the epoch-mean training loss has not improved by more
/// than `min_improvement` for `patience` consecutive epochs, or at
/// `max_epochs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_improvement: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            initial_lr: 0.0005,
            decay_factor: 0.5,
            decay_every: 40,
            max_epochs: 400,
            patience: 40,
            min_improvement: 1e-6,
        }
    }
}

impl TrainSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.decay_every == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "decay_every and max_epochs must be positive".into(),
            ));
        }
        if !(self.initial_lr.is_finite() && self.decay_factor.is_finite()) {
            return Err(Error::Config("learning rates must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub adamw: AdamWConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: TrainSchedule::default(),
            adamw: AdamWConfig::default(),
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch-mean training loss, one entry per completed epoch.
    pub loss_history: Vec<f64>,
    pub lr_history: Vec<f64>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.loss_history.len()
    }
}

/// Minibatch training: shuffle each epoch under the seeded generator
/// (ChaCha8), forward, cross-entropy, backward, AdamW update at the
/// scheduled rate. Returns the per-epoch loss history.
pub fn train<F: Scalar>(
    model: &mut MixerModel<F>,
    data: &[&NormalizedSegment],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.schedule.validate()?;
    if data.is_empty() {
        return Err(Error::Protocol("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let num_classes = model.config().num_classes;
    for (i, seg) in data.iter().enumerate() {
        let label = crate::data::class_index(seg.action_id);
        if label >= num_classes {
            return Err(Error::Label {
                index: i,
                label,
                num_classes,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = AdamW::new(cfg.adamw);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        loss_history: Vec::new(),
        lr_history: Vec::new(),
        best_epoch: 0,
        best_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut epochs_since_best = 0usize;

    for epoch in 0..cfg.schedule.max_epochs {
        let lr = cfg.schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&NormalizedSegment> = chunk.iter().map(|&i| data[i]).collect();
            let (acc, gyro, labels) = batch_tensors::<F>(&batch);
            let mut tape = Tape::new();
            let vars = model.stage(&mut tape)?;
            let logits = model.forward_staged(&mut tape, &vars, &acc, &gyro)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let loss_val = tape.value(loss).item().as_f64();
            if !loss_val.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, batch {batch_index}"),
                });
            }
            let mut grads = tape.backward(loss)?;
            model.harvest_grads(&vars, &mut grads)?;
            let mut params = model.named_params_mut();
            optimizer.step(&mut params, lr)?;
            loss_sum += loss_val * chunk.len() as f64;
        }
        let mean_loss = loss_sum / data.len() as f64;
        report.loss_history.push(mean_loss);
        report.lr_history.push(lr);

        if mean_loss < report.best_loss - cfg.schedule.min_improvement {
            report.best_loss = mean_loss;
            report.best_epoch = epoch;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.schedule.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

/// Loss history as CSV: `epoch,lr,mean_loss`.
pub fn write_loss_history_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "epoch,lr,mean_loss")?;
    for (epoch, (lr, loss)) in report
        .lr_history
        .iter()
        .zip(&report.loss_history)
        .enumerate()
    {
        writeln!(w, "{epoch},{lr},{loss}")?;
    }
    w.flush()?;
    Ok(())
}
