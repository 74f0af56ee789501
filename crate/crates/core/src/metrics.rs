//! Confusion matrix, accuracy, macro-F1 and Cohen's kappa.
//!
//! Rows are the true class, columns the predicted class. A class whose
//! precision or recall has a zero denominator contributes an F1 of 0.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Domain(format!("confusion matrix needs at least 2 classes, got {k}")));
        }
        Ok(Self {
            k,
            counts: vec![0; k * k],
        })
    }

    /// Builds a matrix from paired label sequences.
    pub fn from_labels(k: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Dimension(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(k)?;
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if k < 2 || counts.len() != k * k {
            return Err(Error::Dimension(format!("{} counts do not form a {k} x {k} matrix", counts.len())));
        }
        Ok(Self { k, counts })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.k || predicted >= self.k {
            return Err(Error::Domain(format!(
                "label pair ({truth}, {predicted}) outside 0..{}",
                self.k
            )));
        }
        self.counts[truth * self.k + predicted] += 1;
        Ok(())
    }

    /// Adds another matrix of the same size (pooling across folds).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Dimension(format!("cannot merge {}-class into {}-class matrix", other.k, self.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.k).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, j)).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.k).all(|i| (0..self.k).all(|j| i == j || self.get(i, j) == 0))
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Domain("metrics of an empty confusion matrix".into())),
            n => Ok(n as f64),
        }
    }

    /// Agreement expected by chance from the row and column marginals.
    pub fn chance_agreement(&self) -> Result<f64> {
        let n = self.nonempty()?;
        Ok((0..self.k)
            .map(|i| self.row_sum(i) as f64 * self.col_sum(i) as f64)
            .sum::<f64>()
            / (n * n))
    }
}

/// Per-class precision, recall and F1, following the zero-denominator convention.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn class_scores(cm: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..cm.num_classes())
        .map(|i| {
            let tp = cm.get(i, i) as f64;
            let predicted = cm.col_sum(i) as f64;
            let actual = cm.row_sum(i) as f64;
            let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let recall = if actual > 0.0 { tp / actual } else { 0.0 };
            let f1 = if predicted > 0.0 && actual > 0.0 && precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores { precision, recall, f1 }
        })
        .collect()
}

/// Fraction of samples on the diagonal.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(cm.trace() as f64 / cm.nonempty()?)
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.nonempty()?;
    let scores = class_scores(cm);
    Ok(scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64)
}

/// `(p_o - p_e) / (1 - p_e)`; a fully degenerate matrix (`p_e == 1`) scores 1.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let po = accuracy(cm)?;
    let pe = cm.chance_agreement()?;
    if pe >= 1.0 {
        return Ok(if po >= 1.0 { 1.0 } else { 0.0 });
    }
    Ok((po - pe) / (1.0 - pe))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub matrix: ConfusionMatrix,
    pub acc: f64,
    pub mf1: f64,
    pub kappa: f64,
    pub per_class: Vec<ClassScores>,
}

impl MetricsReport {
    pub fn from_matrix(matrix: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            acc: accuracy(&matrix)?,
            mf1: macro_f1(&matrix)?,
            kappa: cohen_kappa(&matrix)?,
            per_class: class_scores(&matrix),
            matrix,
        })
    }
}

/// Stable text form with six-decimal reals, suitable for snapshot diffs.
impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = self.matrix.num_classes();
        writeln!(f, "classes={k}")?;
        writeln!(f, "samples={}", self.matrix.total())?;
        writeln!(f, "acc={:.6}", self.acc)?;
        writeln!(f, "mf1={:.6}", self.mf1)?;
        writeln!(f, "kappa={:.6}", self.kappa)?;
        for (i, s) in self.per_class.iter().enumerate() {
            writeln!(
                f,
                "class{i}.precision={:.6} class{i}.recall={:.6} class{i}.f1={:.6}",
                s.precision, s.recall, s.f1
            )?;
        }
        for i in 0..k {
            write!(f, "confusion{i}=")?;
            for j in 0..k {
                if j > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{}", self.matrix.get(i, j))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm2(a: u64, b: u64, c: u64, d: u64) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(2, vec![a, b, c, d]).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&cm2(5, 0, 0, 7)).unwrap(), 1.0);
        assert_eq!(accuracy(&cm2(3, 1, 1, 3)).unwrap(), 0.75);
        assert!(matches!(accuracy(&ConfusionMatrix::new(3).unwrap()), Err(Error::Domain(_))));
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&cm2(4, 0, 0, 4)).unwrap(), 1.0);
        // precision = recall = 3/4 for both classes
        let cm = cm2(3, 1, 1, 3);
        let s = class_scores(&cm);
        assert!((s[0].f1 - 0.75).abs() < 1e-15 && (s[1].f1 - 0.75).abs() < 1e-15);
        assert!((macro_f1(&cm).unwrap() - 0.75).abs() < 1e-15);
        // class 1 never predicted: its F1 is 0
        let cm = cm2(5, 0, 5, 0);
        let f1_class0 = class_scores(&cm)[0].f1;
        assert_eq!(class_scores(&cm)[1].f1, 0.0);
        assert_eq!(macro_f1(&cm).unwrap(), f1_class0 / 2.0);
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&cm2(10, 0, 0, 10)).unwrap(), 1.0);
        // everything predicted as class 0, truth balanced: p_o = p_e = 0.5
        assert_eq!(cohen_kappa(&cm2(10, 0, 10, 0)).unwrap(), 0.0);
        // single populated cell
        assert_eq!(cohen_kappa(&cm2(7, 0, 0, 0)).unwrap(), 1.0);
    }

    #[test]
    fn kappa_matches_accuracy_identity() {
        let cm = ConfusionMatrix::from_counts(3, vec![5, 2, 1, 0, 7, 3, 2, 2, 9]).unwrap();
        let pe = cm.chance_agreement().unwrap();
        let expected = (accuracy(&cm).unwrap() - pe) / (1.0 - pe);
        assert_eq!(cohen_kappa(&cm).unwrap(), expected);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        assert!(cm.record(2, 0).is_err());
        assert!(ConfusionMatrix::new(1).is_err());
        assert!(ConfusionMatrix::from_labels(2, &[0, 1], &[0]).is_err());
    }

    #[test]
    fn report_uses_six_decimals() {
        let report = MetricsReport::from_matrix(cm2(3, 1, 1, 3)).unwrap();
        let text = alloc::string::ToString::to_string(&report);
        assert!(text.contains("acc=0.750000"), "{text}");
        assert!(text.contains("kappa=0.500000"), "{text}");
        assert!(text.contains("confusion0=3,1"), "{text}");
    }
}
