//! HMM layer over per-year emission scores.
//!
//! Parameters are joint log-priors over the labels of adjacent years (order 1,
//! `C × C`) or of three consecutive years (order 2, `C × C × C`), one table
//! per pair or triple, never shared across years. Transition and initial
//! probabilities are read off the joints by marginalizing, in either time
//! direction.
//!
//! Year and table indices in this module are 0-based: order-1 table `t`
//! links years `t` and `t + 1`; order-2 table `t` covers `t, t + 1, t + 2`.

mod cascade;
pub mod graph;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

pub use cascade::{
    backward_cascade, backward_cascade_order2, cascade, forward_cascade, forward_cascade_order2, fuse, fuse_order2,
    viterbi, CascadeResult, PairCascade,
};

use crate::autodiff::Tensor;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::math::logsumexp;

/// Which axis of a joint table is kept when marginalizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Keep the earliest year.
    Earlier,
    /// Keep the latest year.
    Later,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug)]
pub struct JointTransitionTable {
    order: usize,
    classes: usize,
    years: usize,
    tables: Vec<Tensor>,
    uniform_fallbacks: AtomicUsize,
}

impl Clone for JointTransitionTable {
    fn clone(&self) -> Self {
        JointTransitionTable {
            order: self.order,
            classes: self.classes,
            years: self.years,
            tables: self.tables.clone(),
            uniform_fallbacks: AtomicUsize::new(self.uniform_fallbacks()),
        }
    }
}

impl PartialEq for JointTransitionTable {
    fn eq(&self, other: &Self) -> bool {
        self.order == other.order && self.classes == other.classes && self.years == other.years && self.tables == other.tables
    }
}

fn table_count(order: usize, years: usize) -> usize {
    years.saturating_sub(order)
}

impl JointTransitionTable {
    /// Builds a table from per-table log weights (any additive offset); each
    /// table is normalized so its entries exponentiate to 1.
    pub fn from_log_weights(order: usize, classes: usize, years: usize, logits: Vec<Vec<f64>>) -> Result<Self> {
        let mut table = JointTransitionTable::build(order, classes, years, logits)?;
        table.normalize()?;
        Ok(table)
    }

    fn build(order: usize, classes: usize, years: usize, logits: Vec<Vec<f64>>) -> Result<Self> {
        if !(order == 1 || order == 2) {
            return Err(Error::InvalidInput(format!("HMM order must be 1 or 2, got {order}")));
        }
        if classes == 0 || years == 0 {
            return Err(Error::InvalidInput("classes and years must be positive".into()));
        }
        if order == 2 && years < 3 {
            return Err(Error::InvalidInput(format!("order-2 tables need at least 3 years, got {years}")));
        }
        if logits.len() != table_count(order, years) {
            return Err(Error::InvalidInput(format!(
                "expected {} tables for order {order} over {years} years, got {}",
                table_count(order, years),
                logits.len()
            )));
        }
        let shape = vec![classes; order + 1];
        let tables = logits
            .into_iter()
            .map(|t| {
                if t.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                    return Err(Error::NonFinite("joint table logits".into()));
                }
                Tensor::param(shape.clone(), t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(JointTransitionTable { order, classes, years, tables, uniform_fallbacks: AtomicUsize::new(0) })
    }

    /// Builds a table from joint probabilities (normalized per table).
    pub fn from_probabilities(order: usize, classes: usize, years: usize, probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.iter().flatten().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidInput("joint probabilities must be finite and non-negative".into()));
        }
        let logits = probs.into_iter().map(|t| t.into_iter().map(f64::ln).collect()).collect();
        JointTransitionTable::from_log_weights(order, classes, years, logits)
    }

    pub fn uniform(order: usize, classes: usize, years: usize) -> Result<Self> {
        let n = classes.pow(order as u32 + 1);
        JointTransitionTable::from_log_weights(order, classes, years, vec![vec![0.0; n]; table_count(order, years)])
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn years(&self) -> usize {
        self.years
    }

    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    /// Normalized log joint of table `t`, row-major.
    pub fn log_joint(&self, t: usize) -> Result<&[f64]> {
        self.tables.get(t).map(Tensor::data).ok_or(Error::IndexOutOfRange { index: t, len: self.tables.len() })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tables
    }

    /// Raw access for optimizers; call [`JointTransitionTable::normalize`] afterwards.
    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tables
    }

    /// Subtracts each table's log-sum-exp so it exponentiates to 1.
    pub fn normalize(&mut self) -> Result<()> {
        for t in &mut self.tables {
            let lse = logsumexp(t.data());
            if !lse.is_finite() {
                return Err(Error::NonFinite("joint table has no probability mass".into()));
            }
            t.data_mut().iter_mut().for_each(|v| *v -= lse);
        }
        Ok(())
    }

    /// Number of conditional rows replaced by a uniform row because the
    /// conditioning class had zero probability.
    pub fn uniform_fallbacks(&self) -> usize {
        self.uniform_fallbacks.load(Ordering::Relaxed)
    }

    /// Log marginal over the earliest (`Earlier`) or latest (`Later`) year of table `t`.
    pub fn marginal_prior(&self, t: usize, side: Side) -> Result<Vec<f64>> {
        let joint = self.log_joint(t)?;
        let c = self.classes;
        let inner = c.pow(self.order as u32);
        Ok(match side {
            Side::Earlier => (0..c).map(|i| logsumexp(&joint[i * inner..(i + 1) * inner])).collect(),
            Side::Later => (0..c)
                .map(|k| {
                    let col: Vec<f64> = (0..inner).map(|r| joint[r * c + k]).collect();
                    logsumexp(&col)
                })
                .collect(),
        })
    }

    /// Log pair marginal of order-2 table `t`: `(y, y+1)` for `Earlier`,
    /// `(y+1, y+2)` for `Later`, as a row-major `C × C` array.
    pub fn pair_marginal(&self, t: usize, side: Side) -> Result<Vec<f64>> {
        if self.order != 2 {
            return Err(Error::InvalidInput("pair marginals need an order-2 table".into()));
        }
        let joint = self.log_joint(t)?;
        let c = self.classes;
        Ok(match side {
            Side::Earlier => (0..c * c).map(|r| logsumexp(&joint[r * c..(r + 1) * c])).collect(),
            Side::Later => (0..c * c)
                .map(|jk| {
                    let col: Vec<f64> = (0..c).map(|i| joint[i * c * c + jk]).collect();
                    logsumexp(&col)
                })
                .collect(),
        })
    }

    fn conditional_rows(&self, rows: Vec<Vec<f64>>) -> Vec<f64> {
        let c = self.classes;
        let mut out = Vec::with_capacity(rows.len() * c);
        for row in rows {
            let marginal = logsumexp(&row);
            if marginal == f64::NEG_INFINITY {
                self.uniform_fallbacks.fetch_add(1, Ordering::Relaxed);
                out.extend(std::iter::repeat_n(-(c as f64).ln(), c));
            } else {
                out.extend(row.iter().map(|v| v - marginal));
            }
        }
        out
    }

    /// Order-1 conditional of table `t` as a `C × C` log matrix whose rows
    /// are the conditioning class: forward `log P(ω_{t+1} | ω_t)`, backward
    /// `log P(ω_t | ω_{t+1})`.
    pub fn conditional(&self, t: usize, direction: Direction) -> Result<Vec<f64>> {
        if self.order != 1 {
            return Err(Error::InvalidInput("conditional needs an order-1 table".into()));
        }
        let joint = self.log_joint(t)?;
        let c = self.classes;
        let rows = match direction {
            Direction::Forward => joint.chunks(c).map(<[f64]>::to_vec).collect(),
            Direction::Backward => (0..c).map(|j| (0..c).map(|i| joint[i * c + j]).collect()).collect(),
        };
        Ok(self.conditional_rows(rows))
    }

    /// Order-2 conditional of table `t` as a `C² × C` log matrix. Forward
    /// rows are `(ω_t, ω_{t+1})` predicting `ω_{t+2}`; backward rows are
    /// `(ω_{t+1}, ω_{t+2})` predicting `ω_t`.
    pub fn conditional2(&self, t: usize, direction: Direction) -> Result<Vec<f64>> {
        if self.order != 2 {
            return Err(Error::InvalidInput("conditional2 needs an order-2 table".into()));
        }
        let joint = self.log_joint(t)?;
        let c = self.classes;
        let rows = match direction {
            Direction::Forward => joint.chunks(c).map(<[f64]>::to_vec).collect(),
            Direction::Backward => {
                (0..c * c).map(|jk| (0..c).map(|i| joint[i * c * c + jk]).collect()).collect()
            }
        };
        Ok(self.conditional_rows(rows))
    }

    /// The same model with time running backwards: tables in reverse order
    /// with their axes reversed.
    pub fn reversed(&self) -> Self {
        let c = self.classes;
        let tables = self
            .tables
            .iter()
            .rev()
            .map(|t| {
                let src = t.data();
                let data = match self.order {
                    1 => (0..c * c).map(|f| src[(f % c) * c + f / c]).collect(),
                    _ => (0..c * c * c)
                        .map(|f| {
                            let (a, b, d) = (f / (c * c), (f / c) % c, f % c);
                            src[(d * c + b) * c + a]
                        })
                        .collect(),
                };
                Tensor::param(t.shape().to_vec(), data).expect("same shape")
            })
            .collect();
        JointTransitionTable {
            order: self.order,
            classes: c,
            years: self.years,
            tables,
            uniform_fallbacks: AtomicUsize::new(0),
        }
    }

    /// Order-1 pair tables implied by an order-2 table: pair `t` from triple
    /// `t` summed over its last year, and the final pair from the last triple
    /// summed over its first year.
    pub fn to_first_order(&self) -> Result<Self> {
        if self.order == 1 {
            return Ok(self.clone());
        }
        let mut pairs = Vec::with_capacity(self.years - 1);
        for t in 0..self.tables.len() {
            pairs.push(self.pair_marginal(t, Side::Earlier)?);
        }
        pairs.push(self.pair_marginal(self.tables.len() - 1, Side::Later)?);
        JointTransitionTable::from_log_weights(1, self.classes, self.years, pairs)
    }

    /// Largest absolute difference between the two marginals a shared year
    /// receives from neighbouring tables (probability scale).
    pub fn marginal_disagreement(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for t in 0..self.tables.len().saturating_sub(1) {
            let (a, b) = match self.order {
                1 => (self.marginal_prior(t, Side::Later), self.marginal_prior(t + 1, Side::Earlier)),
                _ => (self.pair_marginal(t, Side::Later), self.pair_marginal(t + 1, Side::Earlier)),
            };
            if let (Ok(a), Ok(b)) = (a, b) {
                for (x, y) in a.iter().zip(&b) {
                    worst = worst.max((x.exp() - y.exp()).abs());
                }
            }
        }
        worst
    }

    pub fn save(&self, dir: &Path, stage: &str) -> Result<()> {
        let names: Vec<String> = (1..=self.tables.len()).map(|y| format!("joint_y{y}")).collect();
        let arrays: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(&self.tables).collect();
        let metadata = serde_json::json!({
            "kind": "hmm",
            "stage": stage,
            "order": self.order,
            "classes": self.classes,
            "years": self.years,
        });
        checkpoint::write(dir, &arrays, metadata)
    }

    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let (manifest, arrays) = checkpoint::read(dir)?;
        let meta = &manifest.metadata;
        if meta["kind"] != "hmm" {
            return Err(Error::Stage(format!("{} is not an HMM checkpoint", dir.display())));
        }
        let field = |k: &str| {
            meta[k].as_u64().map(|v| v as usize).ok_or_else(|| Error::InvalidInput(format!("HMM manifest missing {k}")))
        };
        let (order, classes, years) = (field("order")?, field("classes")?, field("years")?);
        let mut logits = Vec::with_capacity(arrays.len());
        for (i, (name, t)) in arrays.into_iter().enumerate() {
            if name != format!("joint_y{}", i + 1) || t.shape() != vec![classes; order + 1].as_slice() {
                return Err(Error::InvalidInput(format!("unexpected array {name} with shape {:?}", t.shape())));
            }
            logits.push(t.data().to_vec());
        }
        let stage = meta["stage"].as_str().unwrap_or_default().to_string();
        let table = JointTransitionTable::build(order, classes, years, logits)?;
        for (i, t) in table.tables.iter().enumerate() {
            if logsumexp(t.data()).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("joint_y{} is not normalized", i + 1)));
            }
        }
        Ok((table, stage))
    }
}

/// Laplace-smoothed co-occurrence estimate of the joint tables:
/// `(count + α) / (total + α · C^(order+1))` per year pair or triple.
pub fn init_from_cooccurrence(
    label_sequences: &[Vec<usize>],
    classes: usize,
    years: usize,
    order: usize,
    alpha: f64,
) -> Result<JointTransitionTable> {
    if label_sequences.is_empty() {
        return Err(Error::InvalidInput("co-occurrence initialization needs training sequences".into()));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("smoothing must be non-negative, got {alpha}")));
    }
    if !(order == 1 || order == 2) {
        return Err(Error::InvalidInput(format!("HMM order must be 1 or 2, got {order}")));
    }
    for (i, s) in label_sequences.iter().enumerate() {
        if s.len() != years {
            return Err(Error::InvalidInput(format!("sequence {i} has {} years, expected {years}", s.len())));
        }
        if let Some(&l) = s.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidInput(format!("sequence {i} has label {l} >= {classes}")));
        }
    }
    let n = classes.pow(order as u32 + 1);
    let total = label_sequences.len() as f64;
    let probs = (0..table_count(order, years))
        .map(|t| {
            let mut counts = vec![0.0; n];
            for s in label_sequences {
                let flat = s[t..=t + order].iter().fold(0, |acc, &l| acc * classes + l);
                counts[flat] += 1.0;
            }
            let denom = total + alpha * n as f64;
            counts.into_iter().map(|k| (k + alpha) / denom).collect()
        })
        .collect();
    JointTransitionTable::from_probabilities(order, classes, years, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol || (x == y))
    }

    fn ln(v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| x.ln()).collect()
    }

    fn pair(p: [f64; 4]) -> JointTransitionTable {
        JointTransitionTable::from_probabilities(1, 2, 2, vec![p.to_vec()]).unwrap()
    }

    #[test]
    fn marginals_are_row_and_column_sums() {
        let t = pair([0.4, 0.1, 0.1, 0.4]);
        assert!(close(&t.marginal_prior(0, Side::Earlier).unwrap(), &ln(&[0.5, 0.5]), 1e-12));
        let t = pair([0.7, 0.0, 0.2, 0.1]);
        assert!(close(&t.marginal_prior(0, Side::Later).unwrap(), &ln(&[0.9, 0.1]), 1e-12));
        let u = JointTransitionTable::uniform(1, 3, 2).unwrap();
        for side in [Side::Earlier, Side::Later] {
            assert!(close(&u.marginal_prior(0, side).unwrap(), &ln(&[1.0 / 3.0; 3]), 1e-12));
        }
        assert!(matches!(t.marginal_prior(1, Side::Earlier), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn conditionals() {
        let t = pair([0.4, 0.1, 0.1, 0.4]);
        let expect = ln(&[0.8, 0.2, 0.2, 0.8]);
        assert!(close(&t.conditional(0, Direction::Forward).unwrap(), &expect, 1e-12));
        assert!(close(&t.conditional(0, Direction::Backward).unwrap(), &expect, 1e-12));
        let id = pair([0.5, 0.0, 0.0, 0.5]);
        assert!(close(&id.conditional(0, Direction::Forward).unwrap(), &[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0], 0.0));
        assert_eq!(id.uniform_fallbacks(), 0);
    }

    #[test]
    fn zero_marginal_row_is_uniform_and_counted() {
        let t = pair([0.6, 0.4, 0.0, 0.0]);
        let cond = t.conditional(0, Direction::Forward).unwrap();
        assert!(close(&cond[2..], &ln(&[0.5, 0.5]), 1e-12));
        assert_eq!(t.uniform_fallbacks(), 1);
        for row in cond.chunks(2) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cooccurrence_laplace() {
        // pairs (0,0)x3, (0,1)x1, (1,1)x4
        let mut seqs = vec![vec![0, 0]; 3];
        seqs.push(vec![0, 1]);
        seqs.extend(vec![vec![1, 1]; 4]);
        let t = init_from_cooccurrence(&seqs, 2, 2, 1, 1.0).unwrap();
        let expect = ln(&[4.0 / 12.0, 2.0 / 12.0, 1.0 / 12.0, 5.0 / 12.0]);
        assert!(close(t.log_joint(0).unwrap(), &expect, 1e-12));

        let t = init_from_cooccurrence(&[vec![1, 0], vec![1, 0]], 2, 2, 1, 0.0).unwrap();
        let j = t.log_joint(0).unwrap();
        assert_eq!(j[2], 0.0);
        assert!(j.iter().enumerate().all(|(i, &v)| i == 2 || v == f64::NEG_INFINITY));

        assert!(init_from_cooccurrence(&[], 2, 2, 1, 1.0).is_err());
    }

    #[test]
    fn cooccurrence_order2_counts_triples() {
        let seqs = vec![vec![0, 1, 0], vec![0, 1, 0], vec![1, 1, 1]];
        let t = init_from_cooccurrence(&seqs, 2, 3, 2, 0.0).unwrap();
        let j = t.log_joint(0).unwrap();
        assert!((j[0b010] - (2.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((j[0b111] - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(init_from_cooccurrence(&[vec![0, 1]], 2, 2, 2, 1.0).is_err());
    }

    #[test]
    fn tables_normalize_per_table() {
        let t = JointTransitionTable::from_log_weights(1, 2, 3, vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4]]).unwrap();
        for i in 0..2 {
            assert!(logsumexp(t.log_joint(i).unwrap()).abs() < 1e-12);
        }
        assert!(JointTransitionTable::from_log_weights(1, 2, 3, vec![vec![0.0; 4]]).is_err());
    }

    #[test]
    fn reversal_twice_is_identity() {
        let w: Vec<f64> = (0..27).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = JointTransitionTable::from_log_weights(2, 3, 3, vec![w]).unwrap();
        let back = t.reversed().reversed();
        assert!(close(back.log_joint(0).unwrap(), t.log_joint(0).unwrap(), 0.0));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w: Vec<Vec<f64>> = (0..2).map(|k| (0..8).map(|i| ((i + k) as f64).cos()).collect()).collect();
        let t = JointTransitionTable::from_log_weights(2, 2, 4, w).unwrap();
        t.save(dir.path(), "initialized").unwrap();
        let m = checkpoint::read_manifest(dir.path()).unwrap();
        assert_eq!(m.arrays[1].name, "joint_y2");
        assert_eq!(m.arrays[1].shape, vec![2, 2, 2]);
        let (u, stage) = JointTransitionTable::load(dir.path()).unwrap();
        assert_eq!(stage, "initialized");
        assert_eq!(t, u);
    }
}
