//! Accuracy, confusion matrix and support-weighted F1.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    /// F1 of one class; zero when precision or recall is undefined.
    pub fn f1(&self, class: usize) -> f64 {
        let tp = self.counts[class][class] as f64;
        let (pred, actual) = (self.predicted(class) as f64, self.support(class) as f64);
        if pred == 0.0 || actual == 0.0 {
            return 0.0;
        }
        let (precision, recall) = (tp / pred, tp / actual);
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }

    pub fn weighted_f1(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes())
            .map(|c| self.support(c) as f64 / total as f64 * self.f1(c))
            .sum()
    }
}

fn check_lengths(predictions: &[usize], targets: &[usize]) -> Result<()> {
    if predictions.len() != targets.len() {
        return Err(contract_err!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        ));
    }
    if targets.is_empty() {
        return Err(contract_err!("metrics need at least one sample"));
    }
    Ok(())
}

pub fn accuracy(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    check_lengths(predictions, targets)?;
    let correct = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / targets.len() as f64)
}

pub fn confusion(predictions: &[usize], targets: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    check_lengths(predictions, targets)?;
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predictions.iter().zip(targets) {
        if p >= classes || t >= classes {
            return Err(Error::Label(format!(
                "label pair (true {t}, predicted {p}) outside [0,{classes})"
            )));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

pub fn weighted_f1(predictions: &[usize], targets: &[usize], classes: usize) -> Result<f64> {
    Ok(confusion(predictions, targets, classes)?.weighted_f1())
}

/// Index of the largest value in each row of a `[rows, k]` buffer; the
/// lowest index wins ties.
pub fn argmax_rows(values: &[f32], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}
