//! Orchestration: run configuration, cross-validation splits, metrics and
//! the staged pipeline behind the `trajnet` command.

mod config;
mod pipeline;
mod report;

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::TrainHistory;
use crate::synth::stream;

pub use config::{EvalConfig, InterpretConfig, RunConfig, BROADCAST_KEYS};
pub use pipeline::{
    run_pipeline, CohortSource, EvaluationReport, ResidualSeparation, Stage, VaeEvaluation, Workspace,
};
pub use report::{render_svg, write_report};

/// Environment variable naming the artifact root directory.
pub const ARTIFACT_ROOT_ENV: &str = "TRAJNET_ARTIFACTS";

/// Stratified `k`-fold partitions of `labels` as `(train, test)` index
/// lists. Each class is shuffled and dealt round-robin, continuing the deal
/// across classes so fold sizes differ by at most one.
pub fn kfold_split(labels: &[bool], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be >= 2, got {k}")));
    }
    let mut rng = stream(seed, &[0x4b46]);
    let mut test: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut next = 0;
    for class in [false, true] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::Stratification(format!(
                "class {class} has {} members, fewer than {k} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for m in members {
            test[next].push(m);
            next = (next + 1) % k;
        }
    }
    Ok(test
        .into_iter()
        .map(|mut t| {
            t.sort_unstable();
            let train = (0..labels.len()).filter(|i| t.binary_search(i).is_err()).collect();
            (train, t)
        })
        .collect())
}

/// A ratio whose denominator may be zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Ratio {
    Defined(f64),
    Undefined(Undefined),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Undefined {
    #[serde(rename = "undefined")]
    Marker,
}

impl Ratio {
    fn of(num: usize, den: usize) -> Self {
        if den == 0 {
            Ratio::Undefined(Undefined::Marker)
        } else {
            Ratio::Defined(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Ratio::Defined(v) => Some(v),
            Ratio::Undefined(_) => None,
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Defined(v) => write!(f, "{v:.4}"),
            Ratio::Undefined(_) => f.write_str("undefined"),
        }
    }
}

/// Confusion counts and the derived ratios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: Ratio,
    pub sensitivity: Ratio,
    pub specificity: Ratio,
}

impl Metrics {
    pub fn from_counts(tp: usize, tn: usize, fp: usize, fn_: usize) -> Self {
        Self {
            tp,
            tn,
            fp,
            fn_,
            accuracy: Ratio::of(tp + tn, tp + tn + fp + fn_),
            sensitivity: Ratio::of(tp, tp + fn_),
            specificity: Ratio::of(tn, tn + fp),
        }
    }

    /// Sums the confusion counts of several folds.
    pub fn pooled(parts: &[Metrics]) -> Self {
        let s = |f: fn(&Metrics) -> usize| parts.iter().map(f).sum();
        Self::from_counts(s(|m| m.tp), s(|m| m.tn), s(|m| m.fp), s(|m| m.fn_))
    }
}

/// Thresholds `predictions` at `threshold` (inclusive) against `labels`.
pub fn compute_metrics(predictions: &[f64], labels: &[bool], threshold: f64) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::validation("predictions", "empty input"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::validation(
            "labels",
            format!("{} predictions but {} labels", predictions.len(), labels.len()),
        ));
    }
    if let Some(i) = predictions.iter().position(|p| p.is_nan()) {
        return Err(Error::validation("predictions", format!("entry {i} is NaN")));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p >= threshold, l) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(Metrics::from_counts(tp, tn, fp, fn_))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub metrics: Metrics,
    pub history: TrainHistory,
}

/// Per-fold and pooled metrics of one cross-validated task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub folds: Vec<FoldReport>,
    /// Confusion counts pooled over folds.
    pub aggregate: Metrics,
    pub mean_accuracy: f64,
}

impl MetricsReport {
    pub fn new(task: impl Into<String>, folds: Vec<FoldReport>) -> Self {
        let parts: Vec<Metrics> = folds.iter().map(|f| f.metrics).collect();
        let accs: Vec<f64> = parts.iter().filter_map(|m| m.accuracy.value()).collect();
        Self {
            task: task.into(),
            aggregate: Metrics::pooled(&parts),
            mean_accuracy: accs.iter().sum::<f64>() / accs.len().max(1) as f64,
            folds,
        }
    }
}

/// Area under the ROC curve of `scores` for `labels`, with ties counted
/// as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::validation("labels", "one label per score is required"));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Stratification("AUC needs both classes".into()));
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_metrics() {
        let m = Metrics::from_counts(3, 4, 2, 1);
        assert_eq!(m.sensitivity, Ratio::Defined(0.75));
        assert!((m.specificity.value().unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.accuracy, Ratio::Defined(0.7));
        let perfect = compute_metrics(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!(perfect.accuracy, Ratio::Defined(1.0));
        assert_eq!(perfect.sensitivity, Ratio::Defined(1.0));
        assert_eq!(perfect.specificity, Ratio::Defined(1.0));
    }

    #[test]
    fn undefined_ratio_serializes_as_marker() {
        let m = compute_metrics(&[0.9, 0.8], &[true, true], 0.5).unwrap();
        assert_eq!(m.specificity.value(), None);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"specificity\":\"undefined\""), "{json}");
        let back: Metrics = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn all_positive_predictor() {
        let m = compute_metrics(&[1.0; 4], &[true, false, true, false], 0.5).unwrap();
        assert_eq!(m.sensitivity, Ratio::Defined(1.0));
        assert_eq!(m.specificity, Ratio::Defined(0.0));
        assert_eq!(m.accuracy, Ratio::Defined(0.5));
    }

    #[test]
    fn ten_subjects_five_folds() {
        let labels: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let folds = kfold_split(&labels, 5, 9).unwrap();
        for (_, test) in &folds {
            assert_eq!(test.iter().filter(|&&i| labels[i]).count(), 1);
            assert_eq!(test.iter().filter(|&&i| !labels[i]).count(), 1);
        }
        assert_eq!(folds, kfold_split(&labels, 5, 9).unwrap());
        assert!(matches!(kfold_split(&labels[..6], 5, 0), Err(Error::Stratification(_))));
    }

    #[test]
    fn auc_known_values() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }
}
