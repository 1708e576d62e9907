//! Accuracy, precision, recall, F1, macro/weighted F1 and run aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Sample, Task};
use crate::error::{Error, Result};
use crate::model::Model;

/// Metric name to value.
pub type MetricMap = BTreeMap<String, f64>;

/// One-vs-rest counts for every class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
    pub tn: Vec<usize>,
    pub n_total: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(preds: &[usize], golds: &[usize], k: usize) -> Result<Self> {
        if preds.len() != golds.len() {
            return Err(Error::Input(format!(
                "{} predictions for {} gold labels",
                preds.len(),
                golds.len()
            )));
        }
        if preds.is_empty() {
            return Err(Error::Input("no predictions to score".into()));
        }
        if let Some(&bad) = preds.iter().chain(golds).find(|&&c| c >= k) {
            return Err(Error::Input(format!("label {bad} outside [0, {k})")));
        }
        let mut tp = vec![0; k];
        let mut fp = vec![0; k];
        let mut fn_ = vec![0; k];
        for (&p, &g) in preds.iter().zip(golds) {
            if p == g {
                tp[p] += 1;
            } else {
                fp[p] += 1;
                fn_[g] += 1;
            }
        }
        let n = preds.len();
        let tn = (0..k).map(|c| n - tp[c] - fp[c] - fn_[c]).collect();
        Ok(ConfusionCounts { tp, fp, fn_, tn, n_total: n })
    }

    pub fn n_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn support(&self, class: usize) -> usize {
        self.tp[class] + self.fn_[class]
    }

    pub fn accuracy(&self) -> f64 {
        self.tp.iter().sum::<usize>() as f64 / self.n_total as f64
    }

    /// `(precision, recall, f1)` of `class` against the rest.
    pub fn prf(&self, class: usize) -> (f64, f64, f64) {
        let (tp, fp, fn_) = (self.tp[class], self.fp[class], self.fn_[class]);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        (precision, recall, f1)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MulticlassMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

/// Precision/recall/F1 of `positive_class`; labels outside {0, 1} are rejected.
pub fn binary_metrics(preds: &[usize], golds: &[usize], positive_class: usize) -> Result<BinaryMetrics> {
    if positive_class > 1 {
        return Err(Error::Input(format!("positive class {positive_class} is not binary")));
    }
    let c = ConfusionCounts::from_predictions(preds, golds, 2)?;
    let (precision, recall, f1) = c.prf(positive_class);
    Ok(BinaryMetrics {
        accuracy: c.accuracy(),
        precision,
        recall,
        f1,
    })
}

pub fn multiclass_metrics(preds: &[usize], golds: &[usize], k: usize) -> Result<MulticlassMetrics> {
    let c = ConfusionCounts::from_predictions(preds, golds, k)?;
    let f1: Vec<f64> = (0..k).map(|cl| c.prf(cl).2).collect();
    let macro_f1 = f1.iter().sum::<f64>() / k as f64;
    let weighted_f1 = (0..k)
        .map(|cl| c.support(cl) as f64 * f1[cl])
        .sum::<f64>()
        / c.n_total as f64;
    Ok(MulticlassMetrics {
        accuracy: c.accuracy(),
        macro_f1,
        weighted_f1,
    })
}

/// Every metric reported for `task`: accuracy/precision/recall/f1 plus
/// macro/weighted F1 for the binary task, accuracy plus macro/weighted F1 for
/// the three-way task.
pub fn task_metrics(task: Task, preds: &[usize], golds: &[usize]) -> Result<MetricMap> {
    let mut m = MetricMap::new();
    let mc = multiclass_metrics(preds, golds, task.n_classes())?;
    m.insert("accuracy".into(), mc.accuracy);
    m.insert("macro_f1".into(), mc.macro_f1);
    m.insert("weighted_f1".into(), mc.weighted_f1);
    if let Some(pos) = task.positive_class() {
        let b = binary_metrics(preds, golds, pos)?;
        m.insert("precision".into(), b.precision);
        m.insert("recall".into(), b.recall);
        m.insert("f1".into(), b.f1);
    }
    Ok(m)
}

/// Name of the metric used for checkpoint selection and sweep summaries.
pub fn primary_metric(task: Task) -> &'static str {
    match task.positive_class() {
        Some(_) => "f1",
        None => "macro_f1",
    }
}

/// Predicted class of every sample.
pub fn predict_all(model: &Model, samples: &[Sample]) -> Result<Vec<usize>> {
    samples.iter().map(|s| model.predict_class(s)).collect()
}

pub fn evaluate(model: &Model, samples: &[Sample], task: Task) -> Result<MetricMap> {
    let preds = predict_all(model, samples)?;
    let golds: Vec<usize> = samples.iter().map(|s| s.label).collect();
    task_metrics(task, &preds, &golds)
}

/// Mean and population standard deviation per metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean: MetricMap,
    pub sd: MetricMap,
}

impl Aggregate {
    /// `"mean (sd)"` in percent with two decimals, e.g. `65.32 (0.41)`.
    pub fn format(&self, metric: &str) -> Option<String> {
        let (m, s) = (self.mean.get(metric)?, self.sd.get(metric)?);
        Some(format!("{:.2} ({:.2})", 100.0 * m, 100.0 * s))
    }
}

pub fn aggregate_runs(runs: &[MetricMap]) -> Result<Aggregate> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Input("no runs to aggregate".into()))?;
    for (i, r) in runs.iter().enumerate() {
        if !r.keys().eq(first.keys()) {
            return Err(Error::Input(format!("run {i} has different metric keys")));
        }
    }
    let n = runs.len() as f64;
    let mut mean = MetricMap::new();
    let mut sd = MetricMap::new();
    for key in first.keys() {
        let vals: Vec<f64> = runs.iter().map(|r| r[key]).collect();
        let mu = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        mean.insert(key.clone(), mu);
        sd.insert(key.clone(), var.sqrt());
    }
    Ok(Aggregate {
        runs: runs.len(),
        mean,
        sd,
    })
}

pub fn metrics_json(m: &MetricMap) -> String {
    serde_json::to_string_pretty(m).expect("metric maps serialise")
}

/// Header and value row, columns in key order.
pub fn metrics_csv(m: &MetricMap) -> String {
    let header: Vec<&str> = m.keys().map(String::as_str).collect();
    let row: Vec<String> = m.values().map(|v| v.to_string()).collect();
    format!("{}\n{}\n", header.join(","), row.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_perfect() {
        let m = binary_metrics(&[0, 1, 1, 0], &[0, 1, 1, 0], 1).unwrap();
        assert_eq!(m, BinaryMetrics { accuracy: 1.0, precision: 1.0, recall: 1.0, f1: 1.0 });
    }

    #[test]
    fn binary_worked_example() {
        // tp=2 fp=1 fn=1 tn=4
        let preds = [1, 1, 1, 0, 0, 0, 0, 0];
        let golds = [1, 1, 0, 1, 0, 0, 0, 0];
        let m = binary_metrics(&preds, &golds, 1).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.precision, 2.0 / 3.0);
        assert_eq!(m.recall, 2.0 / 3.0);
        assert_eq!(m.f1, 2.0 * (2.0 / 3.0) * (2.0 / 3.0) / (4.0 / 3.0));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn binary_zero_convention() {
        let m = binary_metrics(&[0, 0, 0], &[0, 0, 0], 1).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn length_mismatch_and_empty() {
        assert!(matches!(binary_metrics(&[0], &[0, 1], 1), Err(Error::Input(_))));
        assert!(matches!(multiclass_metrics(&[], &[], 3), Err(Error::Input(_))));
        assert!(matches!(multiclass_metrics(&[3], &[0], 3), Err(Error::Input(_))));
    }

    #[test]
    fn multiclass_worked_examples() {
        let m = multiclass_metrics(&[0, 1, 1, 2], &[0, 0, 1, 2], 3).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert!((m.macro_f1 - 7.0 / 9.0).abs() < 1e-15);
        assert!((m.weighted_f1 - 0.75).abs() < 1e-15);

        let m = multiclass_metrics(&[1, 1, 1], &[0, 1, 2], 3).unwrap();
        assert!((m.macro_f1 - 1.0 / 6.0).abs() < 1e-15);

        let m = multiclass_metrics(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!((m.accuracy, m.macro_f1, m.weighted_f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn aggregation() {
        let run = |v: f64| MetricMap::from([("accuracy".to_string(), v)]);
        let a = aggregate_runs(&[run(0.60), run(0.64)]).unwrap();
        assert!((a.mean["accuracy"] - 0.62).abs() < 1e-15);
        assert!((a.sd["accuracy"] - 0.02).abs() < 1e-15);
        assert_eq!(a.format("accuracy").unwrap(), "62.00 (2.00)");
        let single = aggregate_runs(&[run(0.5)]).unwrap();
        assert_eq!(single.sd["accuracy"], 0.0);
        let mut other = run(0.5);
        other.insert("f1".into(), 0.1);
        assert!(aggregate_runs(&[run(0.5), other]).is_err());
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn task_metric_keys() {
        let m = task_metrics(Task::Sarcasm2, &[0, 1], &[0, 1]).unwrap();
        assert_eq!(m.len(), 6);
        let m = task_metrics(Task::Sentiment3, &[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(m.keys().collect::<Vec<_>>(), ["accuracy", "macro_f1", "weighted_f1"]);
        assert_eq!(primary_metric(Task::Sentiment3), "macro_f1");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn pairs(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
            (1usize..60).prop_flat_map(move |n| {
                (
                    proptest::collection::vec(0..k, n),
                    proptest::collection::vec(0..k, n),
                )
            })
        }

        proptest! {
            #[test]
            fn metrics_are_bounded((preds, golds) in pairs(3)) {
                let m = multiclass_metrics(&preds, &golds, 3).unwrap();
                for v in [m.accuracy, m.macro_f1, m.weighted_f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }

            #[test]
            fn perfect_predictions_score_one((_, golds) in pairs(2)) {
                let m = binary_metrics(&golds, &golds, 1).unwrap();
                prop_assert_eq!(m.accuracy, 1.0);
                let has_positive = golds.contains(&1);
                prop_assert_eq!(m.f1, if has_positive { 1.0 } else { 0.0 });
            }

            #[test]
            fn binary_f1_is_harmonic_mean((preds, golds) in pairs(2)) {
                let m = binary_metrics(&preds, &golds, 1).unwrap();
                let want = if m.precision + m.recall == 0.0 {
                    0.0
                } else {
                    2.0 * m.precision * m.recall / (m.precision + m.recall)
                };
                prop_assert_eq!(m.f1, want);
            }

            #[test]
            fn relabelling_classes_permutes_per_class_scores((preds, golds) in pairs(3)) {
                let swap = |v: &[usize]| v.iter().map(|&c| 2 - c).collect::<Vec<_>>();
                let a = multiclass_metrics(&preds, &golds, 3).unwrap();
                let b = multiclass_metrics(&swap(&preds), &swap(&golds), 3).unwrap();
                prop_assert_eq!(a.accuracy, b.accuracy);
                prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-15);
                prop_assert!((a.weighted_f1 - b.weighted_f1).abs() < 1e-15);
            }
        }
    }
}
