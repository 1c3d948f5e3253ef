//! Mini-batch SGD over the multi-exit objective.

mod observer;
mod sgd;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, AugmentConfig, ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::msd::{total_loss, LossBreakdown, LossConfig, TeacherSet};
use crate::network::{Checkpoint, Mode, MultiExitNetwork};
use crate::runtime::evaluate_per_classifier;
use crate::tensor::{Real, Tape, Tensor};

pub use observer::{Observer, RunDirObserver, LOG_HEADER};
pub use sgd::{sgd_step, sgd_update};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Label, peer distillation and feature terms.
    #[default]
    Msd,
    /// Summed cross-entropy only.
    Joint,
    /// Distillation from the deepest classifier only.
    DeepestSelfDistill,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msd" => Ok(TrainMode::Msd),
            "joint" => Ok(TrainMode::Joint),
            "deepest_self_distill" => Ok(TrainMode::DeepestSelfDistill),
            other => Err(Error::Validation(format!(
                "mode must be msd, joint or deepest_self_distill, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSettings {
    pub crop_pad: usize,
    pub hflip_prob: f64,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        AugmentSettings { crop_pad: 4, hflip_prob: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `(epoch, factor)`: from `epoch` on, the rate is multiplied by `factor`.
    pub lr_milestones: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub mode: TrainMode,
    #[serde(default)]
    pub augment: AugmentSettings,
}

impl TrainConfig {
    /// Momentum 0.9, weight decay 5e-4, rate ×0.1 at 50% and 75% of training.
    pub fn new(num_classes: usize, epochs: usize) -> Self {
        TrainConfig {
            epochs,
            batch_size: 64,
            lr: 0.1,
            lr_milestones: Self::step_milestones(epochs),
            momentum: 0.9,
            weight_decay: 5e-4,
            loss: LossConfig::for_classes(num_classes),
            seed: 0,
            mode: TrainMode::Msd,
            augment: AugmentSettings::default(),
        }
    }

    pub fn step_milestones(epochs: usize) -> Vec<(usize, f64)> {
        vec![(epochs / 2, 0.1), (epochs * 3 / 4, 0.1)]
    }

    /// The loss actually optimized once the mode is applied.
    pub fn effective_loss(&self) -> LossConfig {
        match self.mode {
            TrainMode::Msd => LossConfig { teachers: TeacherSet::AllPeers, ..self.loss },
            TrainMode::Joint => LossConfig { alpha: 0.0, beta_begin: 0.0, beta_end: 0.0, ..self.loss },
            TrainMode::DeepestSelfDistill => LossConfig { teachers: TeacherSet::DeepestOnly, ..self.loss },
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_milestones
            .iter()
            .filter(|(at, _)| epoch >= *at)
            .fold(self.lr, |lr, (_, f)| lr * f)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.augment.hflip_prob) {
            return fail(format!("hflip_prob must lie in [0, 1], got {}", self.augment.hflip_prob));
        }
        self.loss.validate()
    }
}

/// splitmix64 of `seed` mixed with a purpose tag and an epoch.
pub fn derive_seed(seed: u64, tag: u64, epoch: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;
pub const INIT: u64 = 3;

/// Per-classifier test accuracy after a given number of epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss components over the epoch's steps; absent for epoch 0.
    pub mean_loss: Option<LossBreakdown>,
    pub test_accuracy: Vec<f64>,
}

/// Everything needed to continue training where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub epoch: usize,
    pub step: usize,
    /// One buffer per parameter, in parameter order.
    pub momentum: Vec<Tensor<T>>,
    pub history: Vec<EpochRecord>,
    pub best_final_accuracy: f64,
    pub best_epoch: usize,
    pub kd_evaluations: u64,
    pub feature_evaluations: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    step: usize,
    history: Vec<EpochRecord>,
    best_final_accuracy: Option<f64>,
    best_epoch: usize,
    kd_evaluations: u64,
    feature_evaluations: u64,
}

const MOMENTUM_PREFIX: &str = "momentum.";

impl<T: Real> TrainState<T> {
    pub fn new(net: &MultiExitNetwork<T>) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            momentum: net.params().entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect(),
            history: Vec::new(),
            best_final_accuracy: f64::NEG_INFINITY,
            best_epoch: 0,
            kd_evaluations: 0,
            feature_evaluations: 0,
        }
    }

    /// Network, optimizer state and run metadata in one checkpoint.
    pub fn checkpoint(&self, net: &MultiExitNetwork<T>, config: &TrainConfig, norm: &ChannelStats) -> Result<Checkpoint<T>> {
        let mut ckpt = net.to_checkpoint();
        for (e, v) in net.params().entries().iter().zip(&self.momentum) {
            ckpt.tensors.push((format!("{MOMENTUM_PREFIX}{}", e.name), v.clone()));
        }
        ckpt.meta = serde_json::json!({
            "train_state": StateMeta {
                epoch: self.epoch,
                step: self.step,
                history: self.history.clone(),
                best_final_accuracy: Some(self.best_final_accuracy).filter(|a| a.is_finite()),
                best_epoch: self.best_epoch,
                kd_evaluations: self.kd_evaluations,
                feature_evaluations: self.feature_evaluations,
            },
            "config": config,
            "normalization": norm,
        });
        Ok(ckpt)
    }

    /// Inverse of [`TrainState::checkpoint`].
    pub fn restore(ckpt: &Checkpoint<T>) -> Result<(MultiExitNetwork<T>, Self, TrainConfig, ChannelStats)> {
        let net = MultiExitNetwork::from_checkpoint(ckpt)?;
        let meta: StateMeta = serde_json::from_value(ckpt.meta["train_state"].clone())?;
        let config: TrainConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let norm: ChannelStats = serde_json::from_value(ckpt.meta["normalization"].clone())?;
        let momentum = net
            .params()
            .entries()
            .iter()
            .map(|e| {
                ckpt.get(&format!("{MOMENTUM_PREFIX}{}", e.name))
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks momentum for {}", e.name)))
            })
            .collect::<Result<_>>()?;
        let state = TrainState {
            epoch: meta.epoch,
            step: meta.step,
            momentum,
            history: meta.history,
            best_final_accuracy: meta.best_final_accuracy.unwrap_or(f64::NEG_INFINITY),
            best_epoch: meta.best_epoch,
            kd_evaluations: meta.kd_evaluations,
            feature_evaluations: meta.feature_evaluations,
        };
        Ok((net, state, config, norm))
    }
}

/// Loss components of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Final accuracies, per-epoch history and the best epoch by the deepest
/// classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub best_final_accuracy: f64,
}

fn augment_config(stats: &ChannelStats, settings: &AugmentSettings) -> AugmentConfig {
    AugmentConfig {
        crop_pad: settings.crop_pad,
        hflip_prob: settings.hflip_prob,
        mean: stats.mean.clone(),
        std: stats.std.clone(),
    }
}

/// One shuffled pass over `dataset`. The batch order and augmentation of
/// epoch `state.epoch` depend only on `config.seed` and that epoch.
pub fn train_epoch<T: Real>(
    state: &mut TrainState<T>,
    net: &mut MultiExitNetwork<T>,
    dataset: &Dataset,
    norm: &ChannelStats,
    config: &TrainConfig,
    observer: &mut dyn Observer<T>,
) -> Result<Vec<StepLog>> {
    let loss_cfg = config.effective_loss();
    if config.mode != TrainMode::Joint && net.num_exits() < 2 {
        return Err(Error::Validation("distillation modes need at least two classifiers".into()));
    }
    let epoch = state.epoch;
    let aug = augment_config(norm, &config.augment);
    let lr = config.lr_at(epoch);
    let order = batch_iter(dataset, config.batch_size, true, derive_seed(config.seed, SHUFFLE, epoch as u64))?;
    let stream = derive_seed(config.seed, AUGMENT, epoch as u64);
    let mut logs = Vec::with_capacity(order.len());
    for (batch_index, indices) in order.enumerate() {
        let (x, labels) = dataset.train_batch::<T>(&indices, &aug, stream)?;
        let mut tape = Tape::new();
        let out = net.forward_all(&mut tape, &x, Mode::Train)?;
        if let Some(k) = out.exits.iter().position(|e| !tape.value(e.logits).is_finite()) {
            return Err(Error::NonFinite {
                epoch,
                batch_index,
                detail: format!("classifier {} produced non-finite logits", k + 1),
            });
        }
        let (loss, breakdown) = total_loss(&mut tape, &out.exits, &labels, &loss_cfg, epoch, config.epochs.max(1))?;
        if !breakdown.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch_index,
                detail: format!("{breakdown:?}"),
            });
        }
        tape.backward(loss)?;
        let grads = tape.param_grads();
        sgd_update(net.params_mut(), &grads, &mut state.momentum, lr, config.momentum, config.weight_decay)?;
        net.apply_norm_updates(&out.norm_updates);
        state.kd_evaluations += breakdown.kd_evaluated as u64;
        state.feature_evaluations += breakdown.feature_evaluated as u64;
        let log = StepLog { step: state.step, epoch, loss: breakdown };
        observer.step(&log)?;
        logs.push(log);
        state.step += 1;
    }
    state.epoch += 1;
    Ok(logs)
}

fn mean_loss(logs: &[StepLog]) -> Option<LossBreakdown> {
    if logs.is_empty() {
        return None;
    }
    let n = logs.len() as f64;
    let mut m = LossBreakdown::default();
    for l in logs {
        m.loss1 += l.loss.loss1 / n;
        m.loss2 += l.loss.loss2 / n;
        m.loss3 += l.loss.loss3 / n;
        m.beta_used += l.loss.beta_used / n;
        m.total += l.loss.total / n;
    }
    Some(m)
}

fn record<T: Real>(
    state: &mut TrainState<T>,
    net: &MultiExitNetwork<T>,
    test_set: &Dataset,
    eval_norm: &AugmentConfig,
    lr: f64,
    logs: &[StepLog],
) -> Result<(EpochRecord, bool)> {
    let test_accuracy = evaluate_per_classifier(net, test_set, eval_norm)?;
    let last = *test_accuracy.last().expect("at least one classifier");
    let improved = last > state.best_final_accuracy;
    if improved {
        state.best_final_accuracy = last;
        state.best_epoch = state.epoch;
    }
    let rec = EpochRecord { epoch: state.epoch, lr, mean_loss: mean_loss(logs), test_accuracy };
    state.history.push(rec.clone());
    Ok((rec, improved))
}

/// Trains from scratch: evaluates the untrained network, then trains and
/// evaluates `config.epochs` times.
pub fn fit<T: Real>(
    net: &mut MultiExitNetwork<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn Observer<T>,
) -> Result<FitReport> {
    let mut state = TrainState::new(net);
    fit_from(&mut state, net, train_set, test_set, train_set.channel_stats(), config, observer)
}

/// Continues training from `state` up to `config.epochs`.
pub fn fit_from<T: Real>(
    state: &mut TrainState<T>,
    net: &mut MultiExitNetwork<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    norm: &ChannelStats,
    config: &TrainConfig,
    observer: &mut dyn Observer<T>,
) -> Result<FitReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("cannot fit on an empty training set".into()));
    }
    let eval_norm = AugmentConfig::identity(norm);
    if state.history.is_empty() {
        let (rec, best) = record(state, net, test_set, &eval_norm, config.lr_at(0), &[])?;
        observer.epoch(&rec, best, net, state, config, norm)?;
    }
    while state.epoch < config.epochs {
        let lr = config.lr_at(state.epoch);
        let logs = train_epoch(state, net, train_set, norm, config, observer)?;
        let (rec, best) = record(state, net, test_set, &eval_norm, lr, &logs)?;
        log::info!(
            "epoch {}/{} loss {:.4} accuracy {:?}",
            rec.epoch,
            config.epochs,
            rec.mean_loss.map_or(f64::NAN, |l| l.total),
            rec.test_accuracy
        );
        observer.epoch(&rec, best, net, state, config, norm)?;
    }
    let last = state.history.last().expect("untrained evaluation recorded");
    Ok(FitReport {
        mode: config.mode,
        seed: config.seed,
        epochs: state.history.clone(),
        final_accuracy: last.test_accuracy.clone(),
        best_epoch: state.best_epoch,
        best_final_accuracy: state.best_final_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn milestones_compound() {
        let cfg = TrainConfig::new(10, 40);
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(19), 0.1);
        assert!((cfg.lr_at(20) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(39) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn joint_mode_zeroes_distillation() {
        let cfg = TrainConfig { mode: TrainMode::Joint, ..TrainConfig::new(4, 10) };
        let l = cfg.effective_loss();
        assert_eq!((l.alpha, l.beta_begin, l.beta_end), (0.0, 0.0, 0.0));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, SHUFFLE, 0), derive_seed(1, AUGMENT, 0));
        assert_ne!(derive_seed(1, SHUFFLE, 0), derive_seed(1, SHUFFLE, 1));
        assert_eq!(derive_seed(5, INIT, 0), derive_seed(5, INIT, 0));
    }
}
