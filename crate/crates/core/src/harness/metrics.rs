use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self { counts: vec![vec![0; n]; n] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if let Some(row) = counts.iter().find(|r| r.len() != n) {
            return Err(CalibError::Dimension { expected: n, got: row.len() });
        }
        Ok(Self { counts })
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hits: u64 = (0..self.counts.len()).map(|c| self.counts[c][c]).sum();
        hits as f64 / self.total().max(1) as f64
    }

    /// Precision, recall and F1 per class; any zero denominator gives 0.
    pub fn per_class(&self) -> Vec<ClassMetrics> {
        let n = self.counts.len();
        (0..n)
            .map(|c| {
                let tp = self.counts[c][c] as f64;
                let support: u64 = self.counts[c].iter().sum();
                let predicted: u64 = self.counts.iter().map(|r| r[c]).sum();
                let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
                let recall = if support == 0 { 0.0 } else { tp / support as f64 };
                let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
                ClassMetrics { precision, recall, f1, support }
            })
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        let per = self.per_class();
        per.iter().map(|m| m.f1).sum::<f64>() / per.len().max(1) as f64
    }
}

/// Unweighted mean of per-class F1 over a square count matrix.
pub fn macro_f1(confusion: &[Vec<u64>]) -> f64 {
    ConfusionMatrix::from_counts(confusion.to_vec()).map_or(0.0, |m| m.macro_f1())
}

/// Mean and sample standard deviation (`n − 1` denominator; 0 below two values).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
