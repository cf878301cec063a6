//! Classification metrics with minority/majority aggregation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::network::DualHeadNet;
use crate::sampling::batch_inputs;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
    pub minority_avg: Averages,
    pub majority_avg: Averages,
    pub macro_avg: Averages,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    /// Classes that were neither present nor predicted; their F1 is reported as 0.
    pub undefined_classes: Vec<usize>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn average<'a>(scores: impl Iterator<Item = &'a ClassScores>) -> Averages {
    let mut n = 0usize;
    let mut acc = Averages::default();
    for s in scores {
        n += 1;
        acc.precision += s.precision;
        acc.recall += s.recall;
        acc.f1 += s.f1;
    }
    if n > 0 {
        acc.precision /= n as f64;
        acc.recall /= n as f64;
        acc.f1 /= n as f64;
    }
    acc
}

impl Metrics {
    /// Metrics from `(prediction, truth)` pairs over `classes` classes.
    pub fn from_predictions(
        predictions: &[usize],
        truth: &[usize],
        classes: usize,
        minority: &BTreeSet<usize>,
    ) -> Result<Metrics> {
        if predictions.is_empty() || predictions.len() != truth.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} instances",
                predictions.len(),
                truth.len()
            )));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &t) in predictions.iter().zip(truth) {
            if p >= classes || t >= classes {
                return Err(Error::invalid(format!("class id outside [0, {classes})")));
            }
            confusion[t][p] += 1;
        }
        let mut undefined = Vec::new();
        let per_class: Vec<ClassScores> = (0..classes)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                if support == 0 && predicted == 0 {
                    undefined.push(c);
                }
                ClassScores {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        Ok(Metrics {
            accuracy: ratio(correct, predictions.len()),
            minority_avg: average(
                per_class
                    .iter()
                    .enumerate()
                    .filter(|(c, _)| minority.contains(c))
                    .map(|(_, s)| s),
            ),
            majority_avg: average(
                per_class
                    .iter()
                    .enumerate()
                    .filter(|(c, _)| !minority.contains(c))
                    .map(|(_, s)| s),
            ),
            macro_avg: average(per_class.iter()),
            per_class,
            confusion,
            undefined_classes: undefined,
        })
    }
}

/// Index of the largest probability; ties resolve to the lower class id.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(net: &DualHeadNet<f32>, dataset: &Dataset) -> Result<Vec<usize>> {
    let k = net.num_classes();
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in all.chunks(256) {
        let o = net.infer(&batch_inputs::<f32>(dataset, chunk), chunk.len())?;
        out.extend(o.probabilities.chunks_exact(k).map(argmax));
    }
    Ok(out)
}

pub fn evaluate(net: &DualHeadNet<f32>, test: &Dataset, minority: &BTreeSet<usize>) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    if test.num_classes() > net.num_classes() {
        return Err(Error::invalid(format!(
            "test set has {} classes, network predicts {}",
            test.num_classes(),
            net.num_classes()
        )));
    }
    let predictions = predict(net, test)?;
    let truth: Vec<usize> = test.instances().iter().map(|i| i.class_id).collect();
    Metrics::from_predictions(&predictions, &truth, net.num_classes(), minority)
}
