//! Confusion matrices and F1 reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are reference labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidInput("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { classes: c, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.classes + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, reference: usize, predicted: usize) -> Result<()> {
        for label in [reference, predicted] {
            if label >= self.classes {
                return Err(Error::IndexOutOfRange { index: label, len: self.classes });
            }
        }
        self.counts[reference * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::InvalidInput("cannot merge confusion matrices of different sizes".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Applies a class relabeling `perm[old] = new` to rows and columns.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let c = self.classes;
        let mut seen = vec![false; c];
        if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidInput("not a permutation".into()));
        }
        let mut out = ConfusionMatrix::new(c);
        for r in 0..c {
            for p in 0..c {
                out.counts[perm[r] * c + perm[p]] = self.get(r, p);
            }
        }
        Ok(out)
    }

    /// Comma-separated counts with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("reference");
        for p in 0..self.classes {
            let _ = write!(s, ",pred_{p}");
        }
        s.push('\n');
        for r in 0..self.classes {
            let _ = write!(s, "{r}");
            for p in 0..self.classes {
                let _ = write!(s, ",{}", self.get(r, p));
            }
            s.push('\n');
        }
        s
    }
}

/// Pooled confusion matrix over all `(prediction, reference)` pairs.
pub fn score(predictions: &[usize], references: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &r) in predictions.iter().zip(references) {
        cm.add(r, p)?;
    }
    Ok(cm)
}

/// One confusion matrix per year position.
pub fn score_per_year(predictions: &[Vec<usize>], references: &[Vec<usize>], classes: usize) -> Result<Vec<ConfusionMatrix>> {
    if predictions.len() != references.len() {
        return Err(Error::InvalidInput("prediction and reference sample counts differ".into()));
    }
    let years = references.first().map_or(0, Vec::len);
    let mut out = vec![ConfusionMatrix::new(classes); years];
    for (p, r) in predictions.iter().zip(references) {
        if p.len() != years || r.len() != years {
            return Err(Error::InvalidInput("all samples must have the same number of years".into()));
        }
        for y in 0..years {
            out[y].add(r[y], p[y])?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<ClassScores>,
    pub mean_f1: f64,
    pub accuracy: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class scores and their unweighted mean. Zero-support classes count
/// as F1 = 0.
pub fn f1_report(cm: &ConfusionMatrix) -> F1Report {
    let c = cm.classes();
    let per_class: Vec<ClassScores> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let support: u64 = (0..c).map(|p| cm.get(k, p)).sum();
            let predicted: u64 = (0..c).map(|r| cm.get(r, k)).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassScores { precision, recall, f1, support }
        })
        .collect();
    // sorted summation keeps the mean bit-identical under class relabeling
    let mut f1s: Vec<f64> = per_class.iter().map(|s| s.f1).collect();
    f1s.sort_by(f64::total_cmp);
    let mean_f1 = if c == 0 { 0.0 } else { f1s.iter().sum::<f64>() / c as f64 };
    let correct: u64 = (0..c).map(|k| cm.get(k, k)).sum();
    F1Report { per_class, mean_f1, accuracy: ratio(correct, cm.total()), total: cm.total() }
}

impl F1Report {
    /// Fixed-width text table, percentages with two decimals.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:>6} {:>9} {:>9} {:>9} {:>9}\n", "class", "precision", "recall", "f1", "support");
        for (k, c) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                s,
                "{k:>6} {:>9.2} {:>9.2} {:>9.2} {:>9}",
                100.0 * c.precision,
                100.0 * c.recall,
                100.0 * c.f1,
                c.support
            );
        }
        let _ = writeln!(s, "{:>6} {:>9} {:>9} {:>9.2} {:>9}", "mF1", "", "", 100.0 * self.mean_f1, self.total);
        let _ = writeln!(s, "{:>6} {:>9} {:>9} {:>9.2}", "acc", "", "", 100.0 * self.accuracy);
        s
    }
}
