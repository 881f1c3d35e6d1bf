//! Confusion-matrix metrics, seeded k-fold splits and the cross-validation
//! harness.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, model_forward, ModelConfig};
use crate::params::ModelParams;
use crate::train::{train_subset, TrainConfig};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Elementwise sum; both matrices must have the same class count.
    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::invalid("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&t, &p) in truth.iter().zip(predicted) {
        for l in [t, p] {
            if l >= classes {
                return Err(Error::ClassOutOfRange { index: l, classes });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// One-vs-rest precision and recall of a single class. An undefined value
/// (zero denominator) is reported as 0 and flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

/// Four headline numbers, used for fold summaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Macro average over classes.
    pub precision: f64,
    /// Macro average over classes.
    pub recall: f64,
    /// Harmonic mean of the macro precision and recall.
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub folds: Option<Vec<MetricsReport>>,
    pub mean: Option<MetricSummary>,
    pub std: Option<MetricSummary>,
}

impl MetricsReport {
    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            accuracy: self.accuracy,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports contain only finite numbers")
    }
}

/// `2PR / (P + R)`, or 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    let c = cm.classes();
    if total == 0 || c == 0 {
        return Err(Error::invalid("metrics need at least one evaluated sample"));
    }
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = cm.counts[k][k];
            let predicted: u64 = (0..c).map(|t| cm.counts[t][k]).sum();
            let actual: u64 = cm.counts[k].iter().sum();
            let (precision, precision_undefined) = ratio(tp, predicted);
            let (recall, recall_undefined) = ratio(tp, actual);
            ClassMetrics {
                precision,
                recall,
                precision_undefined,
                recall_undefined,
            }
        })
        .collect();
    let precision = per_class.iter().map(|m| m.precision).sum::<f64>() / c as f64;
    let recall = per_class.iter().map(|m| m.recall).sum::<f64>() / c as f64;
    Ok(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        precision,
        recall,
        f1: f1_score(precision, recall),
        per_class,
        confusion: cm.clone(),
        folds: None,
        mean: None,
        std: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Fold>,
}

/// Seeded k-fold partition of `0..n`. With labels, each class is shuffled
/// and dealt round-robin so per-class fold counts differ by at most one.
/// Index lists are sorted ascending.
pub fn kfold_split(n: usize, k: usize, labels: Option<&[usize]>, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::invalid("k-fold needs at least 2 folds"));
    }
    if k > n {
        return Err(Error::invalid(format!("cannot split {n} samples into {k} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match labels {
        None => vec![(0..n).collect()],
        Some(l) => {
            if l.len() != n {
                return Err(Error::invalid(format!("{} labels for {n} samples", l.len())));
            }
            let classes = l.iter().max().map_or(0, |&m| m + 1);
            let mut g = vec![Vec::new(); classes];
            for (i, &c) in l.iter().enumerate() {
                g[c].push(i);
            }
            g
        }
    };
    let mut tests = vec![Vec::new(); k];
    let mut slot = 0;
    for mut g in groups {
        g.shuffle(&mut rng);
        for i in g {
            tests[slot % k].push(i);
            slot += 1;
        }
    }
    let mut fold_of = vec![0; n];
    for (f, t) in tests.iter_mut().enumerate() {
        t.sort_unstable();
        t.iter().for_each(|&i| fold_of[i] = f);
    }
    let folds = tests
        .into_iter()
        .enumerate()
        .map(|(f, test)| Fold {
            train: (0..n).filter(|&i| fold_of[i] != f).collect(),
            test,
        })
        .collect();
    Ok(FoldSplit { folds })
}

/// Training seed of fold `fold` under run seed `seed`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: MetricsReport,
    pub split: FoldSplit,
    /// Trained parameters of each fold.
    pub fold_params: Vec<ModelParams>,
    /// Held-out prediction of every dataset index.
    pub predictions: Vec<usize>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Summaries across folds. `std` is the sample standard deviation.
pub fn summarize_folds(folds: &[MetricsReport]) -> (MetricSummary, MetricSummary) {
    let pick = |f: fn(&MetricsReport) -> f64| mean_std(&folds.iter().map(f).collect::<Vec<_>>());
    let (a, sa) = pick(|r| r.accuracy);
    let (p, sp) = pick(|r| r.precision);
    let (r, sr) = pick(|r| r.recall);
    let (f, sf) = pick(|r| r.f1);
    (
        MetricSummary {
            accuracy: a,
            precision: p,
            recall: r,
            f1: f,
        },
        MetricSummary {
            accuracy: sa,
            precision: sp,
            recall: sr,
            f1: sf,
        },
    )
}

/// Trains one model per fold (seeded by [`fold_seed`]) and evaluates it on
/// the held-out part. The top-level metrics come from the pooled confusion
/// matrix; `mean` and `std` summarize the per-fold metrics.
pub fn cross_validate(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    k: usize,
    seed: u64,
) -> Result<CvOutcome> {
    cross_validate_with(dataset, model_config, train_config, k, seed, |_, _| {})
}

/// [`cross_validate`] with a callback after each finished fold.
pub fn cross_validate_with(
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    k: usize,
    seed: u64,
    mut on_fold: impl FnMut(usize, &MetricsReport),
) -> Result<CvOutcome> {
    if dataset.is_empty() {
        return Err(Error::invalid("cross-validation needs a nonempty dataset"));
    }
    dataset.validate()?;
    if dataset.num_classes() != model_config.num_classes() {
        return Err(Error::invalid(format!(
            "dataset has {} classes but the model has {}",
            dataset.num_classes(),
            model_config.num_classes()
        )));
    }
    let split = kfold_split(dataset.len(), k, Some(&dataset.labels), seed)?;
    let classes = model_config.num_classes();
    let mut pooled = ConfusionMatrix::zeros(classes);
    let mut fold_reports = Vec::with_capacity(k);
    let mut fold_params = Vec::with_capacity(k);
    let mut predictions = vec![0; dataset.len()];
    for (f, fold) in split.folds.iter().enumerate() {
        let cfg = TrainConfig {
            seed: fold_seed(seed, f),
            ..train_config.clone()
        };
        let outcome = train_subset(dataset, &fold.train, model_config, &cfg)?;
        let truth: Vec<usize> = fold.test.iter().map(|&i| dataset.labels[i]).collect();
        let mut pred = Vec::with_capacity(fold.test.len());
        for &i in &fold.test {
            let probs = model_forward(&dataset.images[i], &outcome.params, model_config)?;
            let p = argmax(probs.data());
            predictions[i] = p;
            pred.push(p);
        }
        let cm = confusion_matrix(&truth, &pred, classes)?;
        pooled.add(&cm)?;
        let report = classification_metrics(&cm)?;
        on_fold(f, &report);
        fold_reports.push(report);
        fold_params.push(outcome.params);
    }
    let mut report = classification_metrics(&pooled)?;
    let (mean, std) = summarize_folds(&fold_reports);
    report.mean = Some(mean);
    report.std = Some(std);
    report.folds = Some(fold_reports);
    Ok(CvOutcome {
        report,
        split,
        fold_params,
        predictions,
    })
}

fn check_fraction(v: &Value, path: &str) -> std::result::Result<(), String> {
    match v.as_f64() {
        Some(x) if (0.0..=1.0).contains(&x) => Ok(()),
        _ => Err(format!("`{path}` must be a number in [0, 1]")),
    }
}

fn check_summary(v: &Value, path: &str) -> std::result::Result<(), String> {
    let obj = v.as_object().ok_or_else(|| format!("`{path}` must be an object"))?;
    for key in ["accuracy", "precision", "recall", "f1"] {
        check_fraction(obj.get(key).unwrap_or(&Value::Null), &format!("{path}.{key}"))?;
    }
    Ok(())
}

fn check_report(v: &Value, path: &str, top: bool) -> std::result::Result<(), String> {
    check_summary(v, path)?;
    let obj = v.as_object().expect("checked by check_summary");
    let per_class = obj
        .get("per_class")
        .and_then(Value::as_array)
        .ok_or_else(|| format!("`{path}.per_class` must be an array"))?;
    for (i, c) in per_class.iter().enumerate() {
        for key in ["precision", "recall"] {
            check_fraction(c.get(key).unwrap_or(&Value::Null), &format!("{path}.per_class[{i}].{key}"))?;
        }
    }
    let f1 = f1_score(obj["precision"].as_f64().unwrap_or(0.0), obj["recall"].as_f64().unwrap_or(0.0));
    if (obj["f1"].as_f64().unwrap_or(-1.0) - f1).abs() > 1e-12 {
        return Err(format!("`{path}.f1` is not the harmonic mean of its precision and recall"));
    }
    for key in ["folds", "mean", "std"] {
        if !obj.contains_key(key) {
            return Err(format!("`{path}.{key}` is missing"));
        }
    }
    if top {
        let folds = obj["folds"]
            .as_array()
            .ok_or_else(|| format!("`{path}.folds` must be an array"))?;
        for (i, f) in folds.iter().enumerate() {
            check_report(f, &format!("{path}.folds[{i}]"), false)?;
        }
        check_summary(&obj["mean"], &format!("{path}.mean"))?;
        let std = obj["std"].as_object().ok_or_else(|| format!("`{path}.std` must be an object"))?;
        for key in ["accuracy", "precision", "recall", "f1"] {
            if !std.get(key).and_then(Value::as_f64).is_some_and(|s| s >= 0.0) {
                return Err(format!("`{path}.std.{key}` must be a nonnegative number"));
            }
        }
    }
    Ok(())
}

/// Structural check of a serialized cross-validation report.
pub fn validate_report_json(json: &str) -> Result<()> {
    let v: Value = serde_json::from_str(json).map_err(|e| Error::invalid(format!("report is not JSON: {e}")))?;
    check_report(&v, "report", true).map_err(Error::InvalidArgument)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_example() {
        let cm = confusion_matrix(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
        assert_eq!(confusion_matrix(&[], &[], 3).unwrap(), ConfusionMatrix::zeros(3));
        assert!(confusion_matrix(&[2], &[0], 2).is_err());
    }

    #[test]
    fn worked_example() {
        let cm = ConfusionMatrix::from_counts(vec![vec![5, 1], vec![2, 4]]).unwrap();
        let r = classification_metrics(&cm).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert!((r.precision - 0.757143).abs() < 1e-6);
        assert!((r.recall - 0.75).abs() < 1e-15);
        assert!((r.f1 - 159.0 / 211.0).abs() < 1e-15);
    }

    #[test]
    fn undefined_precision_is_flagged() {
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 0], vec![2, 0]]).unwrap();
        let r = classification_metrics(&cm).unwrap();
        assert!(r.per_class[1].precision_undefined);
        assert_eq!(r.per_class[1].precision, 0.0);
        assert!(classification_metrics(&ConfusionMatrix::zeros(2)).is_err());
    }

    #[test]
    fn paper_pair_gives_expected_f1() {
        assert!((f1_score(0.9947, 0.9952) - 0.99495).abs() < 1e-5);
    }

    #[test]
    fn ten_into_five() {
        let s = kfold_split(10, 5, None, 1).unwrap();
        assert!(s.folds.iter().all(|f| f.test.len() == 2 && f.train.len() == 8));
        assert!(kfold_split(3, 4, None, 0).is_err());
        assert!(kfold_split(3, 1, None, 0).is_err());
    }

    #[test]
    fn balanced_stratification() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let s = kfold_split(30, 5, Some(&labels), 9).unwrap();
        for f in &s.folds {
            for c in 0..3 {
                assert_eq!(f.test.iter().filter(|&&i| labels[i] == c).count(), 2);
            }
        }
    }
}
