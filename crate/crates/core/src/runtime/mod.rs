//! Early-exit inference and per-classifier diagnostics.

mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::network::{Mode, MultiExitNetwork};
use crate::tensor::{Real, Tape, Tensor};

pub use report::{
    accuracy_table, agreement_table, budget_table, export_logits, EvalReport, ExclusivityReport,
};

/// How sure a classifier is of its answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMeasure {
    /// Largest softmax probability.
    #[default]
    MaxProb,
    /// `1 − H(p) / ln M`.
    Entropy,
}

impl ConfidenceMeasure {
    pub fn of(self, probs: &[f64]) -> f64 {
        match self {
            ConfidenceMeasure::MaxProb => probs.iter().fold(0.0, |a: f64, &p| a.max(p)),
            ConfidenceMeasure::Entropy => {
                if probs.len() < 2 {
                    return 1.0;
                }
                let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
                1.0 - h / (probs.len() as f64).ln()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExitPolicy {
    /// Exit at the first classifier whose confidence reaches `threshold`,
    /// else at the deepest.
    ConfidenceThreshold {
        threshold: f64,
        #[serde(default)]
        measure: ConfidenceMeasure,
    },
    /// Always answer with classifier `exit` (1-based).
    FixedExit { exit: usize },
    /// Average the softmax outputs of every classifier.
    FullEnsemble,
}

impl ExitPolicy {
    pub fn confidence(threshold: f64) -> Self {
        ExitPolicy::ConfidenceThreshold { threshold, measure: ConfidenceMeasure::MaxProb }
    }
}

/// Outcome of one sample under a policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    /// 1-based classifier that answered; `N` for the ensemble.
    pub exit: usize,
    pub confidence: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax of one row.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let e: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Argmax of the mean of several distributions.
pub fn ensemble_class(distributions: &[Vec<f64>]) -> usize {
    let m = distributions[0].len();
    let mut mean = vec![0.0; m];
    for d in distributions {
        for (acc, &p) in mean.iter_mut().zip(d) {
            *acc += p;
        }
    }
    argmax(&mean)
}

fn single_sample<T: Real>(sample: &Tensor<T>) -> Result<()> {
    if sample.rank() != 4 || sample.shape()[0] != 1 {
        return Err(Error::shape(format!("expected one sample [1, C, H, W], got {:?}", sample.shape())));
    }
    Ok(())
}

/// Answers one `[1, C, H, W]` sample, evaluating classifiers shallow to
/// deep and computing nothing beyond the exit taken.
pub fn predict_early_exit<T: Real>(
    net: &MultiExitNetwork<T>,
    sample: &Tensor<T>,
    policy: &ExitPolicy,
) -> Result<Prediction> {
    single_sample(sample)?;
    let n = net.num_exits();
    let mut tape = Tape::no_grad();
    let mut walker = net.walker(&mut tape, sample, Mode::Eval)?;
    let probs_at = |walker: &mut crate::network::ExitWalker<'_, T>, exit: usize| -> Result<Vec<f64>> {
        let out = walker.exit(exit)?;
        Ok(softmax_row(&walker.tape().value(out.logits).to_f64_vec()))
    };
    match *policy {
        ExitPolicy::ConfidenceThreshold { threshold, measure } => {
            for exit in 1..=n {
                let probs = probs_at(&mut walker, exit)?;
                let confidence = measure.of(&probs);
                if confidence >= threshold || exit == n {
                    return Ok(Prediction { class: argmax(&probs), exit, confidence });
                }
            }
            unreachable!("the deepest classifier always answers")
        }
        ExitPolicy::FixedExit { exit } => {
            net.check_exit(exit)?;
            let probs = probs_at(&mut walker, exit)?;
            Ok(Prediction { class: argmax(&probs), exit, confidence: ConfidenceMeasure::MaxProb.of(&probs) })
        }
        ExitPolicy::FullEnsemble => {
            let dists = (1..=n).map(|e| probs_at(&mut walker, e)).collect::<Result<Vec<_>>>()?;
            let class = ensemble_class(&dists);
            let mean = dists.iter().map(|d| d[class]).sum::<f64>() / n as f64;
            Ok(Prediction { class, exit: n, confidence: mean })
        }
    }
}

/// Class of the averaged softmax outputs of every classifier.
pub fn ensemble_predict<T: Real>(net: &MultiExitNetwork<T>, sample: &Tensor<T>) -> Result<usize> {
    Ok(predict_early_exit(net, sample, &ExitPolicy::FullEnsemble)?.class)
}

/// Eval-mode logits of every classifier for every sample, `[count, N, M]`,
/// one forward pass per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable {
    pub exits: usize,
    pub classes: usize,
    pub logits: Vec<f64>,
    pub labels: Vec<usize>,
}

fn eval_samples(dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Contract("evaluation needs a non-empty test set".into()));
    }
    Ok(())
}

fn sample_tensor<T: Real>(dataset: &Dataset, norm: &AugmentConfig, i: usize) -> Result<Tensor<T>> {
    Ok(dataset.eval_batch::<T>(&[i], norm)?.0)
}

impl LogitTable {
    pub fn collect<T: Real>(net: &MultiExitNetwork<T>, dataset: &Dataset, norm: &AugmentConfig) -> Result<Self> {
        eval_samples(dataset)?;
        let rows = (0..dataset.len())
            .into_par_iter()
            .map(|i| {
                let x = sample_tensor::<T>(dataset, norm, i)?;
                let outs = net.eval_all(&x)?;
                Ok(outs.iter().flat_map(|(l, _)| l.to_f64_vec()).collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LogitTable {
            exits: net.num_exits(),
            classes: net.num_classes(),
            logits: rows.concat(),
            labels: dataset.labels().to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Logits of classifier `exit` (1-based) on sample `i`.
    pub fn row(&self, i: usize, exit: usize) -> &[f64] {
        let start = (i * self.exits + exit - 1) * self.classes;
        &self.logits[start..start + self.classes]
    }

    /// `predictions[n][i]`: class chosen by classifier `n + 1` for sample `i`.
    pub fn predictions(&self) -> Vec<Vec<usize>> {
        (1..=self.exits)
            .map(|e| (0..self.len()).map(|i| argmax(&softmax_row(self.row(i, e)))).collect())
            .collect()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.predictions().iter().map(|p| accuracy(p, &self.labels)).collect()
    }

    pub fn ensemble_accuracy(&self) -> f64 {
        let preds: Vec<usize> = (0..self.len())
            .map(|i| {
                let dists: Vec<Vec<f64>> = (1..=self.exits).map(|e| softmax_row(self.row(i, e))).collect();
                ensemble_class(&dists)
            })
            .collect();
        accuracy(&preds, &self.labels)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.len(), self.exits, self.classes],
            self.logits.iter().map(|&v| v as f32).collect(),
        )
        .expect("table shape")
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Test accuracy of every classifier.
pub fn evaluate_per_classifier<T: Real>(
    net: &MultiExitNetwork<T>,
    test_set: &Dataset,
    norm: &AugmentConfig,
) -> Result<Vec<f64>> {
    Ok(LogitTable::collect(net, test_set, norm)?.accuracies())
}

/// Among samples classifier 1 gets right, the number every deeper
/// classifier gets wrong, and the number classifier 1 gets right.
pub fn exclusive_correct_counts(predictions: &[Vec<usize>], labels: &[usize]) -> Result<(usize, usize)> {
    if predictions.len() < 2 {
        return Err(Error::Contract("exclusivity needs at least two classifiers".into()));
    }
    let mut first_right = 0;
    let mut exclusive = 0;
    for (i, &y) in labels.iter().enumerate() {
        if predictions[0][i] != y {
            continue;
        }
        first_right += 1;
        if predictions[1..].iter().all(|p| p[i] != y) {
            exclusive += 1;
        }
    }
    Ok((exclusive, first_right))
}

/// Fraction of classifier-1-correct samples that no deeper classifier
/// answers correctly; 0 when classifier 1 is never right.
pub fn exclusive_fraction(predictions: &[Vec<usize>], labels: &[usize]) -> Result<f64> {
    let (num, den) = exclusive_correct_counts(predictions, labels)?;
    Ok(if den == 0 { 0.0 } else { num as f64 / den as f64 })
}

pub fn exclusive_correct_stat<T: Real>(
    net: &MultiExitNetwork<T>,
    test_set: &Dataset,
    norm: &AugmentConfig,
) -> Result<f64> {
    let table = LogitTable::collect(net, test_set, norm)?;
    exclusive_fraction(&table.predictions(), &table.labels)
}

/// `A[i][j]`: fraction of samples on which classifiers `i + 1` and `j + 1`
/// predict the same class.
pub fn agreement_matrix(predictions: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let n = predictions.len();
    let count = predictions.first().map_or(0, |p| p.len()).max(1) as f64;
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let same = predictions[i].iter().zip(&predictions[j]).filter(|(a, b)| a == b).count();
                    same as f64 / count
                })
                .collect()
        })
        .collect()
}

/// Aggregate outcome of a policy over a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyResult {
    pub policy: ExitPolicy,
    pub accuracy: f64,
    /// Mean over samples of the MAC count of the exit taken.
    pub mean_macs: f64,
    /// Mean MACs including shallower branches evaluated and passed over.
    pub mean_incurred_macs: f64,
    /// `exit_histogram[n]`: samples answered by classifier `n + 1`.
    pub exit_histogram: Vec<usize>,
}

pub fn evaluate_policy<T: Real>(
    net: &MultiExitNetwork<T>,
    test_set: &Dataset,
    norm: &AugmentConfig,
    policy: &ExitPolicy,
) -> Result<(PolicyResult, Vec<Prediction>)> {
    eval_samples(test_set)?;
    let preds = (0..test_set.len())
        .into_par_iter()
        .map(|i| predict_early_exit(net, &sample_tensor::<T>(test_set, norm, i)?, policy))
        .collect::<Result<Vec<_>>>()?;
    let [_, h, w] = test_set.dims();
    let n = net.num_exits();
    let costs = net.exit_costs(h, w)?;
    let incurred = (1..=n).map(|e| net.incurred_flops(e, h, w)).collect::<Result<Vec<_>>>()?;
    let mut hist = vec![0; n];
    let (mut macs, mut spent) = (0f64, 0f64);
    for p in &preds {
        hist[p.exit - 1] += 1;
        let (c, s) = if matches!(policy, ExitPolicy::FullEnsemble) {
            (incurred[n - 1], incurred[n - 1])
        } else {
            (costs[p.exit - 1], incurred[p.exit - 1])
        };
        macs += c as f64;
        spent += s as f64;
    }
    let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let count = preds.len() as f64;
    Ok((
        PolicyResult {
            policy: *policy,
            accuracy: accuracy(&classes, test_set.labels()),
            mean_macs: macs / count,
            mean_incurred_macs: spent / count,
            exit_histogram: hist,
        },
        preds,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub threshold: f64,
    pub mean_macs: f64,
    pub accuracy: f64,
}

/// One (cost, accuracy) point per confidence threshold.
pub fn budget_curve<T: Real>(
    net: &MultiExitNetwork<T>,
    test_set: &Dataset,
    norm: &AugmentConfig,
    thresholds: &[f64],
    measure: ConfidenceMeasure,
) -> Result<Vec<BudgetPoint>> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Validation(format!("thresholds must be sorted ascending, got {thresholds:?}")));
    }
    thresholds
        .iter()
        .map(|&threshold| {
            let policy = ExitPolicy::ConfidenceThreshold { threshold, measure };
            let (r, _) = evaluate_policy(net, test_set, norm, &policy)?;
            Ok(BudgetPoint { threshold, mean_macs: r.mean_macs, accuracy: r.accuracy })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(argmax(&[0.25; 4]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn ensemble_hand_mean() {
        assert_eq!(ensemble_class(&[vec![0.6, 0.4], vec![0.1, 0.9]]), 1);
        assert_eq!(ensemble_class(&[vec![0.2, 0.8], vec![0.3, 0.7]]), 1);
    }

    #[test]
    fn exclusivity_toy() {
        // Classifier 1 right on a and b, later classifiers right on b only.
        let labels = vec![0, 1, 2, 3];
        let preds = vec![vec![0, 1, 0, 0], vec![1, 1, 0, 0], vec![2, 1, 0, 0]];
        assert_eq!(exclusive_fraction(&preds, &labels).unwrap(), 0.5);
        let same = vec![vec![0, 1, 0, 0]; 3];
        assert_eq!(exclusive_fraction(&same, &labels).unwrap(), 0.0);
        assert!(exclusive_fraction(&preds[..1], &labels).is_err());
    }

    #[test]
    fn agreement_of_identical_classifiers() {
        let m = agreement_matrix(&[vec![1, 2, 3], vec![1, 2, 3]]);
        assert_eq!(m, vec![vec![1.0; 2]; 2]);
    }

    #[test]
    fn entropy_confidence_bounds() {
        let m = ConfidenceMeasure::Entropy;
        assert!((m.of(&[0.25; 4])).abs() < 1e-12);
        assert_eq!(m.of(&[1.0, 0.0, 0.0]), 1.0);
    }
}
