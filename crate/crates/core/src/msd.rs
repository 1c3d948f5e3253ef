//! The multi-self-distillation objective.
//!
//! ```text
//! total = (1 − α)·label + α·kd + β(epoch)·feature
//! ```
//!
//! `label` sums the cross-entropy of every classifier, `kd` lets every
//! classifier learn from the softened outputs of its peers, and `feature`
//! pulls each shallow classifier's pre-classifier features toward the
//! deepest one's.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ExitOutput;
use crate::tensor::{Real, Tape, Var};

/// Argument order of the distillation KL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(teacher ‖ student)`.
    #[default]
    TeacherFirst,
    /// `KL(student ‖ teacher)`.
    StudentFirst,
}

/// Which classifiers teach each student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSet {
    /// Every other classifier.
    #[default]
    AllPeers,
    /// Only the deepest classifier, which itself has no teacher.
    DeepestOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta_begin: f64,
    pub beta_end: f64,
    pub tau: f64,
    #[serde(default = "yes")]
    pub detach_teachers: bool,
    #[serde(default = "yes")]
    pub kd_tau_sq_scale: bool,
    #[serde(default)]
    pub kl_direction: KlDirection,
    #[serde(default)]
    pub teachers: TeacherSet,
}

fn yes() -> bool {
    true
}

/// Distillation temperature used when none is given.
pub fn default_tau(num_classes: usize) -> f64 {
    if num_classes <= 10 {
        3.0
    } else {
        4.0
    }
}

impl LossConfig {
    pub fn for_classes(num_classes: usize) -> Self {
        LossConfig {
            alpha: 0.5,
            beta_begin: 1.0,
            beta_end: 0.1,
            tau: default_tau(num_classes),
            detach_teachers: true,
            kd_tau_sq_scale: true,
            kl_direction: KlDirection::TeacherFirst,
            teachers: TeacherSet::AllPeers,
        }
    }

    /// Summed cross-entropy only.
    pub fn joint(num_classes: usize) -> Self {
        LossConfig {
            alpha: 0.0,
            beta_begin: 0.0,
            beta_end: 0.0,
            ..Self::for_classes(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Validation(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Validation(format!("tau must be positive, got {}", self.tau)));
        }
        for (name, v) in [("beta_begin", self.beta_begin), ("beta_end", self.beta_end)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss components of one step, as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub beta_used: f64,
    pub total: f64,
    /// Whether the distillation term was evaluated (skipped when `alpha = 0`).
    #[serde(skip)]
    pub kd_evaluated: bool,
    /// Whether the feature term was evaluated (skipped when `β = 0`).
    #[serde(skip)]
    pub feature_evaluated: bool,
}

impl LossBreakdown {
    pub fn recomposed(&self, alpha: f64) -> f64 {
        (1.0 - alpha) * self.loss1 + alpha * self.loss2 + self.beta_used * self.loss3
    }

    pub fn is_finite(&self) -> bool {
        [self.loss1, self.loss2, self.loss3, self.total].iter().all(|v| v.is_finite())
    }
}

fn batch_of<T: Real>(tape: &Tape<T>, v: Var) -> Result<usize> {
    tape.shape(v)
        .first()
        .copied()
        .ok_or_else(|| Error::shape("loss inputs need a batch dimension"))
}

/// `Σ_n CE(logits_n, labels)`, each term a batch mean.
pub fn label_loss<T: Real>(tape: &mut Tape<T>, logits: &[Var], labels: &[usize]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::Contract("label loss needs at least one classifier".into()));
    }
    let batch = batch_of(tape, logits[0])?;
    let mut terms = Vec::with_capacity(logits.len());
    for &l in logits {
        if batch_of(tape, l)? != batch {
            return Err(Error::shape(format!(
                "classifier outputs disagree on batch size: {:?} vs {:?}",
                tape.shape(logits[0]),
                tape.shape(l)
            )));
        }
        terms.push((tape.cross_entropy(l, labels)?, T::one()));
    }
    tape.weighted_sum(&terms)
}

fn teachers_of(student: usize, n: usize, set: TeacherSet) -> Vec<usize> {
    match set {
        TeacherSet::AllPeers => (0..n).filter(|&j| j != student).collect(),
        TeacherSet::DeepestOnly if student + 1 < n => vec![n - 1],
        TeacherSet::DeepestOnly => Vec::new(),
    }
}

/// Pairwise distillation over softened outputs.
///
/// Each student's KL terms are averaged over its teachers and the averages
/// summed over students. With every peer teaching this is
/// `1/(N−1) · Σ_i Σ_{j≠i} KL(q_j ‖ q_i)`.
pub fn kd_loss<T: Real>(tape: &mut Tape<T>, logits: &[Var], cfg: &LossConfig) -> Result<Var> {
    let n = logits.len();
    if n < 2 {
        return Err(Error::Contract(format!("KD needs a peer: got {n} classifier(s)")));
    }
    let tau = T::of(cfg.tau);
    let soft: Vec<Var> = logits
        .iter()
        .map(|&l| tape.tempered_softmax(l, tau))
        .collect::<Result<_>>()?;
    let teacher_view: Vec<Var> = if cfg.detach_teachers {
        soft.iter().map(|&s| tape.detach(s)).collect()
    } else {
        soft.clone()
    };
    let scale = if cfg.kd_tau_sq_scale { cfg.tau * cfg.tau } else { 1.0 };
    let mut terms = Vec::new();
    for i in 0..n {
        let teachers = teachers_of(i, n, cfg.teachers);
        let w = T::of(scale / teachers.len().max(1) as f64);
        for j in teachers {
            let kl = match cfg.kl_direction {
                KlDirection::TeacherFirst => tape.kl_divergence(teacher_view[j], soft[i])?,
                KlDirection::StudentFirst => tape.kl_divergence(soft[i], teacher_view[j])?,
            };
            terms.push((kl, w));
        }
    }
    tape.weighted_sum(&terms)
}

/// `Σ_{i<N} ‖F_i − F_N‖²`, each term a batch mean.
pub fn feature_loss<T: Real>(tape: &mut Tape<T>, features: &[Var], detach_deepest: bool) -> Result<Var> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Contract(format!("feature loss needs a peer: got {n} classifier(s)")));
    }
    let deepest = if detach_deepest {
        tape.detach(features[n - 1])
    } else {
        features[n - 1]
    };
    let terms = features[..n - 1]
        .iter()
        .map(|&f| Ok((tape.l2_distance_sq(f, deepest)?, T::one())))
        .collect::<Result<Vec<_>>>()?;
    tape.weighted_sum(&terms)
}

/// Cosine decay of β from `beta_begin` at epoch 0 to `beta_end` at `total`.
pub fn beta_schedule(epoch: usize, total: usize, beta_begin: f64, beta_end: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Domain("beta schedule needs total >= 1".into()));
    }
    if epoch > total {
        return Err(Error::Domain(format!("epoch {epoch} beyond schedule length {total}")));
    }
    let w = 0.5 * (1.0 + (PI * epoch as f64 / total as f64).cos());
    Ok(w * beta_begin + (1.0 - w) * beta_end)
}

/// The scheduled objective over every exit of one forward pass.
///
/// The distillation term is skipped when `alpha = 0` and the feature term
/// when the scheduled β is 0; skipped terms report 0.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    outputs: &[ExitOutput],
    labels: &[usize],
    cfg: &LossConfig,
    epoch: usize,
    total_epochs: usize,
) -> Result<(Var, LossBreakdown)> {
    let logits: Vec<Var> = outputs.iter().map(|o| o.logits).collect();
    let beta = beta_schedule(epoch, total_epochs, cfg.beta_begin, cfg.beta_end)?;
    let l1 = label_loss(tape, &logits, labels)?;
    let mut terms = vec![(l1, T::of(1.0 - cfg.alpha))];
    let mut out = LossBreakdown {
        loss1: tape.scalar(l1)?.as_f64(),
        beta_used: beta,
        ..Default::default()
    };
    if cfg.alpha != 0.0 {
        let l2 = kd_loss(tape, &logits, cfg)?;
        out.loss2 = tape.scalar(l2)?.as_f64();
        out.kd_evaluated = true;
        terms.push((l2, T::of(cfg.alpha)));
    }
    if beta != 0.0 {
        let features: Vec<Var> = outputs.iter().map(|o| o.feature).collect();
        let l3 = feature_loss(tape, &features, cfg.detach_teachers)?;
        out.loss3 = tape.scalar(l3)?.as_f64();
        out.feature_evaluated = true;
        terms.push((l3, T::of(beta)));
    }
    let total = tape.weighted_sum(&terms)?;
    out.total = tape.scalar(total)?.as_f64();
    debug_assert!(
        !out.is_finite() || {
            let scale = 1.0 + out.loss1.abs() + out.loss2.abs() + beta * out.loss3.abs();
            let tol = 1e-6f64.max(16.0 * T::epsilon().as_f64()) * scale;
            (out.total - out.recomposed(cfg.alpha)).abs() <= tol
        },
        "loss recomposition drifted: {out:?}"
    );
    Ok((total, out))
}
