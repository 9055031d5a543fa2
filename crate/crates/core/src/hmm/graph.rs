//! Differentiable cascade recorded on a [`Tape`], used for fine-tuning.
//!
//! Table logits enter un-normalized; each table is normalized in the graph,
//! so gradients respect the sum-to-one constraint. `-inf` logits are
//! clamped to [`LOG_FLOOR`] when bound, which turns zero-marginal
//! conditional rows into uniform rows automatically.

use super::JointTransitionTable;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = -1e4;

/// Records every table as a trainable leaf.
pub fn bind_table(table: &JointTransitionTable, tape: &mut Tape) -> Vec<Var> {
    table
        .tensors()
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|&v| v.max(LOG_FLOOR)).collect();
            tape.leaf(&Tensor::param(t.shape().to_vec(), data).expect("same shape").with_requires_grad(t.requires_grad()))
        })
        .collect()
}

fn normalize(tape: &mut Tape, logits: Var) -> Result<Var> {
    let n = tape.shape(logits).iter().product();
    let flat = tape.reshape(logits, vec![n])?;
    let lse = tape.logsumexp(flat)?;
    tape.sub(logits, lse)
}

/// `m (C × C) + v` broadcast along rows: `out[i][j] = m[i][j] + v[i]`.
fn add_col(tape: &mut Tape, m: Var, v: Var) -> Result<Var> {
    let mt = tape.transpose(m)?;
    let s = tape.add(mt, v)?;
    tape.transpose(s)
}

fn sub_col(tape: &mut Tape, m: Var, v: Var) -> Result<Var> {
    let neg = tape.scale(v, -1.0)?;
    add_col(tape, m, neg)
}

/// Per-table quantities of an order-1 model in one time direction.
struct Pairwise {
    /// `C × C` normalized log joint, rows = earlier year.
    joint: Vec<Var>,
}

impl Pairwise {
    fn marginal_earlier(&self, tape: &mut Tape, t: usize) -> Result<Var> {
        tape.logsumexp(self.joint[t])
    }

    fn marginal_later(&self, tape: &mut Tape, t: usize) -> Result<Var> {
        let jt = tape.transpose(self.joint[t])?;
        tape.logsumexp(jt)
    }

    fn reversed(&self, tape: &mut Tape) -> Result<Pairwise> {
        let joint = self.joint.iter().rev().map(|&j| tape.transpose(j)).collect::<Result<_>>()?;
        Ok(Pairwise { joint })
    }

    fn forward(&self, tape: &mut Tape, classes: usize, emissions: &[Var]) -> Result<Vec<Var>> {
        let prior = match self.joint.is_empty() {
            true => tape.constant(vec![classes], vec![-(classes as f64).ln(); classes])?,
            false => self.marginal_earlier(tape, 0)?,
        };
        let mut out = vec![tape.add(emissions[0], prior)?];
        for y in 1..emissions.len() {
            let marg = self.marginal_earlier(tape, y - 1)?;
            let jt = tape.transpose(self.joint[y - 1])?;
            // cond_t[k][i] = log P(k | i)
            let cond_t = tape.sub(jt, marg)?;
            let terms = tape.add(cond_t, out[y - 1])?;
            let lse = tape.logsumexp(terms)?;
            out.push(tape.add(emissions[y], lse)?);
        }
        Ok(out)
    }
}

fn cascade_order1(tape: &mut Tape, classes: usize, tables: &[Var], emissions: &[Var]) -> Result<Vec<Var>> {
    let joint = tables.iter().map(|&t| normalize(tape, t)).collect::<Result<Vec<_>>>()?;
    let model = Pairwise { joint };
    let forward = model.forward(tape, classes, emissions)?;
    let reversed_em: Vec<Var> = emissions.iter().rev().copied().collect();
    let mut backward = model.reversed(tape)?.forward(tape, classes, &reversed_em)?;
    backward.reverse();

    let years = emissions.len();
    let last = model.joint.len();
    let mut fused = Vec::with_capacity(years);
    for y in 0..years {
        let prior = if last == 0 {
            tape.constant(vec![classes], vec![-(classes as f64).ln(); classes])?
        } else if y < last {
            model.marginal_earlier(tape, y)?
        } else {
            model.marginal_later(tape, last - 1)?
        };
        let s = tape.add(forward[y], backward[y])?;
        let s = tape.sub(s, emissions[y])?;
        fused.push(tape.sub(s, prior)?);
    }
    Ok(fused)
}

/// Order-2 tables as `C² × C` normalized log joints, rows `(first, middle)`.
struct Triplewise {
    joint: Vec<Var>,
    classes: usize,
}

impl Triplewise {
    fn pair_earlier(&self, tape: &mut Tape, t: usize) -> Result<Var> {
        let c = self.classes;
        let p = tape.logsumexp(self.joint[t])?;
        tape.reshape(p, vec![c, c])
    }

    fn pair_later(&self, tape: &mut Tape, t: usize) -> Result<Var> {
        let c = self.classes;
        let by_first = tape.reshape(self.joint[t], vec![c, c * c])?;
        let t2 = tape.transpose(by_first)?;
        let p = tape.logsumexp(t2)?;
        tape.reshape(p, vec![c, c])
    }

    fn reversed(&self, tape: &mut Tape) -> Result<Triplewise> {
        let c = self.classes;
        let index: Vec<usize> = (0..c * c * c)
            .map(|f| {
                let (a, b, d) = (f / (c * c), (f / c) % c, f % c);
                (d * c + b) * c + a
            })
            .collect();
        let joint = self
            .joint
            .iter()
            .rev()
            .map(|&j| tape.gather(j, &index, vec![c * c, c]))
            .collect::<Result<_>>()?;
        Ok(Triplewise { joint, classes: c })
    }

    /// Returns `(pairs, single)` as in [`super::PairCascade`]; `pairs[0]` is unused.
    fn forward(&self, tape: &mut Tape, emissions: &[Var]) -> Result<(Vec<Option<Var>>, Vec<Var>)> {
        let c = self.classes;
        let years = emissions.len();
        // regroup [k][i][j] → [j][k][i] so the sum over i runs along the last axis
        let regroup: Vec<usize> = (0..c * c * c)
            .map(|f| {
                let (j, k, i) = (f / (c * c), (f / c) % c, f % c);
                (k * c + i) * c + j
            })
            .collect();

        let mut pairs: Vec<Option<Var>> = vec![None; years];
        let base = self.pair_earlier(tape, 0)?;
        let base = add_col(tape, base, emissions[0])?;
        pairs[1] = Some(tape.add(base, emissions[1])?);
        for y in 1..years - 1 {
            let prev = pairs[y].expect("filled in order");
            let prev_flat = tape.reshape(prev, vec![c * c])?;
            let pair_marg = tape.logsumexp(self.joint[y - 1])?;
            let jt = tape.transpose(self.joint[y - 1])?;
            // [k][(i, j)] = log P(k | i, j) + F(i, j)
            let cond_t = tape.sub(jt, pair_marg)?;
            let terms = tape.add(cond_t, prev_flat)?;
            let grouped = tape.gather(terms, &regroup, vec![c * c, c])?;
            let lse = tape.logsumexp(grouped)?;
            let lse = tape.reshape(lse, vec![c, c])?;
            pairs[y + 1] = Some(tape.add(lse, emissions[y + 1])?);
        }

        let mut single = Vec::with_capacity(years);
        let first = self.pair_earlier(tape, 0)?;
        let first = tape.logsumexp(first)?;
        single.push(tape.add(emissions[0], first)?);
        for pair in pairs.iter().skip(1) {
            let pt = tape.transpose(pair.expect("filled"))?;
            single.push(tape.logsumexp(pt)?);
        }
        Ok((pairs, single))
    }
}

fn cascade_order2(tape: &mut Tape, classes: usize, tables: &[Var], emissions: &[Var]) -> Result<Vec<Var>> {
    let c = classes;
    let years = emissions.len();
    let joint = tables
        .iter()
        .map(|&t| {
            let n = normalize(tape, t)?;
            tape.reshape(n, vec![c * c, c])
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Triplewise { joint, classes: c };
    let (fwd, _) = model.forward(tape, emissions)?;
    let reversed_em: Vec<Var> = emissions.iter().rev().copied().collect();
    let (rev, _) = model.reversed(tape)?.forward(tape, &reversed_em)?;

    let last = model.joint.len() - 1;
    let mut fused_pairs = Vec::with_capacity(years - 1);
    for y in 0..years - 1 {
        let prior = if y <= last { model.pair_earlier(tape, y)? } else { model.pair_later(tape, last)? };
        let b = tape.transpose(rev[years - 1 - y].expect("filled"))?;
        let s = tape.add(fwd[y + 1].expect("filled"), b)?;
        let s = sub_col(tape, s, emissions[y])?;
        let s = tape.sub(s, emissions[y + 1])?;
        fused_pairs.push(tape.sub(s, prior)?);
    }
    let mut fused = Vec::with_capacity(years);
    for &pair in &fused_pairs {
        fused.push(tape.logsumexp(pair)?);
    }
    let tail = tape.transpose(fused_pairs[years - 2])?;
    fused.push(tape.logsumexp(tail)?);
    Ok(fused)
}

/// Fused per-year log vectors `log p(ω_y, x_all)` for bound table leaves
/// (from [`bind_table`]) and per-year emission vectors of shape `(C,)`.
pub fn fused(tape: &mut Tape, order: usize, classes: usize, tables: &[Var], emissions: &[Var]) -> Result<Vec<Var>> {
    let years = emissions.len();
    if years == 0 || tables.len() != years.saturating_sub(order) {
        return Err(Error::InvalidInput(format!(
            "{} tables do not match order {order} over {years} years",
            tables.len()
        )));
    }
    match order {
        1 => cascade_order1(tape, classes, tables, emissions),
        2 if years >= 3 => cascade_order2(tape, classes, tables, emissions),
        _ => Err(Error::InvalidInput(format!("unsupported order {order} for {years} years"))),
    }
}

/// Per-year log posteriors (log-softmax of the fused vectors).
pub fn log_posteriors(tape: &mut Tape, order: usize, classes: usize, tables: &[Var], emissions: &[Var]) -> Result<Vec<Var>> {
    fused(tape, order, classes, tables, emissions)?.into_iter().map(|f| tape.log_softmax(f)).collect()
}

/// `−Σ_y log posterior_y[label_y]` as a scalar.
pub fn cross_entropy(tape: &mut Tape, log_posteriors: &[Var], labels: &[usize]) -> Result<Var> {
    if log_posteriors.len() != labels.len() {
        return Err(Error::InvalidInput("one label per year required".into()));
    }
    let mut total: Option<Var> = None;
    for (&lp, &label) in log_posteriors.iter().zip(labels) {
        let picked = tape.gather(lp, &[label], vec![])?;
        total = Some(match total {
            None => picked,
            Some(t) => tape.add(t, picked)?,
        });
    }
    tape.scale(total.expect("at least one year"), -1.0)
}
