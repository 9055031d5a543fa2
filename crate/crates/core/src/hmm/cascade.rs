//! Log-space forward/backward cascades and their fusion.

use super::{Direction, JointTransitionTable, Side};
use crate::encoder::EmissionScores;
use crate::error::{Error, Result};
use crate::math::{argmax, logsumexp, softmax};

/// Per-year cascade vectors for one sample, all natural-log except `posteriors`.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeResult {
    /// `log p(ω_y, x_0..=y)`
    pub forward: Vec<Vec<f64>>,
    /// `log p(ω_y, x_y..)`
    pub backward: Vec<Vec<f64>>,
    /// `log p(ω_y, x_all)`
    pub fused: Vec<Vec<f64>>,
    pub posteriors: Vec<Vec<f64>>,
}

impl CascadeResult {
    /// Argmax label per year, ties to the lowest class index.
    pub fn labels(&self) -> Vec<usize> {
        self.posteriors.iter().map(|p| argmax(p)).collect()
    }

    /// `log p(x_all)` as seen from each year; equal across years when the
    /// table's marginals are mutually consistent.
    pub fn log_evidence(&self) -> Vec<f64> {
        self.fused.iter().map(|f| logsumexp(f)).collect()
    }
}

/// Order-2 cascade state.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCascade {
    /// Forward: `pairs[y]` is `log p(ω_{y-1}, ω_y, x_0..=y)` for `y ≥ 1`
    /// (`pairs[0]` is empty). Backward: `pairs[y]` is
    /// `log p(ω_y, ω_{y+1}, x_y..)` for `y ≤ Y-2` (`pairs[Y-1]` is empty).
    /// Each is row-major `C × C` in time order.
    pub pairs: Vec<Vec<f64>>,
    /// Single-year vectors, as in [`CascadeResult::forward`] / `backward`.
    pub single: Vec<Vec<f64>>,
}

fn check_emissions(table: &JointTransitionTable, emissions: &[EmissionScores]) -> Result<()> {
    if emissions.len() != table.years() {
        return Err(Error::InvalidInput(format!(
            "table covers {} years, got {} emission vectors",
            table.years(),
            emissions.len()
        )));
    }
    for (y, e) in emissions.iter().enumerate() {
        if e.classes() != table.classes() {
            return Err(Error::InvalidInput(format!(
                "year {y}: {} emission scores for {} classes",
                e.classes(),
                table.classes()
            )));
        }
        if e.log_scores.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite(format!("year {y} emission scores")));
        }
    }
    Ok(())
}

fn require_order(table: &JointTransitionTable, order: usize) -> Result<()> {
    if table.order() != order {
        return Err(Error::InvalidInput(format!("expected an order-{order} table, got order {}", table.order())));
    }
    Ok(())
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Prior of the first year for an order-1 table (uniform when `Y = 1`).
fn first_prior(table: &JointTransitionTable) -> Result<Vec<f64>> {
    if table.num_tables() == 0 {
        Ok(vec![-(table.classes() as f64).ln(); table.classes()])
    } else {
        table.marginal_prior(0, Side::Earlier)
    }
}

/// Prior used in the fusion denominator: earlier side of the table anchored
/// at `y`, later side of the last table for the final year.
fn year_prior(table: &JointTransitionTable, y: usize) -> Result<Vec<f64>> {
    let last = table.num_tables();
    if last == 0 {
        return first_prior(table);
    }
    if y < last {
        table.marginal_prior(y, Side::Earlier)
    } else {
        table.marginal_prior(last - 1, Side::Later)
    }
}

/// Order-1 forward cascade: `f_0 = e_0 + log P(ω_0)`,
/// `f_y(k) = e_y(k) + logsumexp_i(log P(k | i) + f_{y-1}(i))`.
pub fn forward_cascade(table: &JointTransitionTable, emissions: &[EmissionScores]) -> Result<Vec<Vec<f64>>> {
    require_order(table, 1)?;
    check_emissions(table, emissions)?;
    let c = table.classes();
    let mut out = Vec::with_capacity(emissions.len());
    out.push(add(&emissions[0].log_scores, &first_prior(table)?));
    let mut terms = vec![0.0; c];
    for y in 1..emissions.len() {
        let cond = table.conditional(y - 1, Direction::Forward)?;
        let prev = &out[y - 1];
        let next = (0..c)
            .map(|k| {
                for i in 0..c {
                    terms[i] = cond[i * c + k] + prev[i];
                }
                emissions[y].log_scores[k] + logsumexp(&terms)
            })
            .collect();
        out.push(next);
    }
    Ok(out)
}

/// Order-1 backward cascade: `b_{Y-1} = e_{Y-1} + log P(ω_{Y-1})` (later side),
/// `b_y(i) = e_y(i) + logsumexp_k(log P(i | k) + b_{y+1}(k))`.
pub fn backward_cascade(table: &JointTransitionTable, emissions: &[EmissionScores]) -> Result<Vec<Vec<f64>>> {
    require_order(table, 1)?;
    check_emissions(table, emissions)?;
    let reversed: Vec<EmissionScores> = emissions.iter().rev().cloned().collect();
    let mut out = forward_cascade(&table.reversed(), &reversed)?;
    out.reverse();
    Ok(out)
}

/// Forward/backward fusion:
/// `fused_y = f_y + b_y − e_y − log P(ω_y)`, posteriors by normalization.
pub fn fuse(
    table: &JointTransitionTable,
    emissions: &[EmissionScores],
    forward: &[Vec<f64>],
    backward: &[Vec<f64>],
) -> Result<CascadeResult> {
    require_order(table, 1)?;
    check_emissions(table, emissions)?;
    if forward.len() != emissions.len() || backward.len() != emissions.len() {
        return Err(Error::InvalidInput("forward/backward lengths do not match emissions".into()));
    }
    let mut fused = Vec::with_capacity(emissions.len());
    for y in 0..emissions.len() {
        let prior = year_prior(table, y)?;
        let row: Vec<f64> = (0..table.classes())
            .map(|k| forward[y][k] + backward[y][k] - emissions[y].log_scores[k] - prior[k])
            .collect();
        fused.push(sanitize(row, y)?);
    }
    Ok(finish(forward.to_vec(), backward.to_vec(), fused))
}

/// Entries of the fusion that are `-inf` minus `-inf` come out NaN; they
/// belong to states with no forward mass and are set to `-inf`.
fn sanitize(mut row: Vec<f64>, y: usize) -> Result<Vec<f64>> {
    for v in &mut row {
        if v.is_nan() {
            *v = f64::NEG_INFINITY;
        } else if *v == f64::INFINITY {
            return Err(Error::NonFinite(format!("fused year {y}")));
        }
    }
    Ok(row)
}

fn finish(forward: Vec<Vec<f64>>, backward: Vec<Vec<f64>>, fused: Vec<Vec<f64>>) -> CascadeResult {
    let posteriors = fused.iter().map(|f| softmax(f)).collect();
    CascadeResult { forward, backward, fused, posteriors }
}

/// Order-2 forward cascade over pair states: `F_1(i, j) = e_0(i) + e_1(j) +
/// log P(ω_0 = i, ω_1 = j)` and
/// `F_{y+1}(j, k) = e_{y+1}(k) + logsumexp_i(log P(k | i, j) + F_y(i, j))`.
pub fn forward_cascade_order2(table: &JointTransitionTable, emissions: &[EmissionScores]) -> Result<PairCascade> {
    require_order(table, 2)?;
    check_emissions(table, emissions)?;
    let c = table.classes();
    let years = emissions.len();
    let e = |y: usize| &emissions[y].log_scores;

    let mut pairs = vec![Vec::new(); years];
    let base = table.pair_marginal(0, Side::Earlier)?;
    pairs[1] = (0..c * c).map(|ij| base[ij] + e(0)[ij / c] + e(1)[ij % c]).collect();
    let mut terms = vec![0.0; c];
    for y in 1..years - 1 {
        let cond = table.conditional2(y - 1, Direction::Forward)?;
        let prev = &pairs[y];
        let next = (0..c * c)
            .map(|jk| {
                let (j, k) = (jk / c, jk % c);
                for i in 0..c {
                    terms[i] = cond[(i * c + j) * c + k] + prev[i * c + j];
                }
                e(y + 1)[k] + logsumexp(&terms)
            })
            .collect();
        pairs[y + 1] = next;
    }

    let mut single = Vec::with_capacity(years);
    single.push(add(e(0), &table.marginal_prior(0, Side::Earlier)?));
    for pair in &pairs[1..] {
        single.push((0..c).map(|j| logsumexp(&column(pair, c, j))).collect());
    }
    Ok(PairCascade { pairs, single })
}

fn column(m: &[f64], c: usize, j: usize) -> Vec<f64> {
    (0..c).map(|i| m[i * c + j]).collect()
}

fn transpose(m: &[f64], c: usize) -> Vec<f64> {
    (0..c * c).map(|f| m[(f % c) * c + f / c]).collect()
}

/// Order-2 backward cascade: the forward cascade of the time-reversed model.
pub fn backward_cascade_order2(table: &JointTransitionTable, emissions: &[EmissionScores]) -> Result<PairCascade> {
    require_order(table, 2)?;
    check_emissions(table, emissions)?;
    let c = table.classes();
    let years = emissions.len();
    let reversed: Vec<EmissionScores> = emissions.iter().rev().cloned().collect();
    let rev = forward_cascade_order2(&table.reversed(), &reversed)?;
    let mut pairs = vec![Vec::new(); years];
    for (y, slot) in pairs.iter_mut().enumerate().take(years - 1) {
        *slot = transpose(&rev.pairs[years - 1 - y], c);
    }
    let mut single = rev.single;
    single.reverse();
    Ok(PairCascade { pairs, single })
}

/// Order-2 fusion on pair states. For the pair `(y, y+1)`:
/// `F_{y+1} + B_y − e_y − e_{y+1} − log P(ω_y, ω_{y+1})`, then each year's
/// fused vector marginalizes its partner out.
pub fn fuse_order2(table: &JointTransitionTable, emissions: &[EmissionScores]) -> Result<CascadeResult> {
    let fwd = forward_cascade_order2(table, emissions)?;
    let bwd = backward_cascade_order2(table, emissions)?;
    let c = table.classes();
    let years = emissions.len();
    let last = table.num_tables() - 1;
    let mut fused_pairs = Vec::with_capacity(years - 1);
    for y in 0..years - 1 {
        let prior = if y <= last {
            table.pair_marginal(y, Side::Earlier)?
        } else {
            table.pair_marginal(last, Side::Later)?
        };
        let row: Vec<f64> = (0..c * c)
            .map(|jk| {
                let (j, k) = (jk / c, jk % c);
                fwd.pairs[y + 1][jk] + bwd.pairs[y][jk]
                    - emissions[y].log_scores[j]
                    - emissions[y + 1].log_scores[k]
                    - prior[jk]
            })
            .collect();
        fused_pairs.push(sanitize(row, y)?);
    }
    let mut fused = Vec::with_capacity(years);
    for pair in &fused_pairs {
        fused.push(pair.chunks(c).map(logsumexp).collect());
    }
    let tail = &fused_pairs[years - 2];
    fused.push((0..c).map(|k| logsumexp(&column(tail, c, k))).collect());
    Ok(finish(fwd.single, bwd.single, fused))
}

/// Full forward–backward pass for either order.
pub fn cascade(table: &JointTransitionTable, emissions: &[EmissionScores]) -> Result<CascadeResult> {
    match table.order() {
        1 => {
            let f = forward_cascade(table, emissions)?;
            let b = backward_cascade(table, emissions)?;
            fuse(table, emissions, &f, &b)
        }
        _ => fuse_order2(table, emissions),
    }
}

/// Most probable label sequence under an order-1 table (max-product cascade).
pub fn viterbi(table: &JointTransitionTable, emissions: &[EmissionScores]) -> Result<Vec<usize>> {
    require_order(table, 1)?;
    check_emissions(table, emissions)?;
    let c = table.classes();
    let mut score = add(&emissions[0].log_scores, &first_prior(table)?);
    let mut back = Vec::with_capacity(emissions.len());
    for y in 1..emissions.len() {
        let cond = table.conditional(y - 1, Direction::Forward)?;
        let mut next = vec![f64::NEG_INFINITY; c];
        let mut arg = vec![0; c];
        for k in 0..c {
            for i in 0..c {
                let s = score[i] + cond[i * c + k];
                if s > next[k] {
                    next[k] = s;
                    arg[k] = i;
                }
            }
            next[k] += emissions[y].log_scores[k];
        }
        back.push(arg);
        score = next;
    }
    let mut path = vec![argmax(&score)];
    for arg in back.iter().rev() {
        path.push(arg[*path.last().expect("non-empty")]);
    }
    path.reverse();
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn em(rows: &[&[f64]]) -> Vec<EmissionScores> {
        rows.iter().map(|r| EmissionScores::new(r.to_vec())).collect()
    }

    #[test]
    fn uniform_table_reproduces_emissions() {
        let t = JointTransitionTable::uniform(1, 3, 3).unwrap();
        let e = em(&[&[0.1, -2.0, 0.7], &[1.0, 1.5, -1.0], &[0.0, 0.0, 3.0]]);
        let r = cascade(&t, &e).unwrap();
        for (p, s) in r.posteriors.iter().zip(&e) {
            let want = softmax(&s.log_scores);
            for (a, b) in p.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn endpoints_cancel() {
        let t = JointTransitionTable::from_probabilities(1, 2, 3, vec![vec![0.4, 0.1, 0.2, 0.3], vec![0.3, 0.3, 0.1, 0.3]])
            .unwrap();
        let e = em(&[&[-0.2, -1.7], &[-1.1, -0.4], &[-0.9, -0.5]]);
        let r = cascade(&t, &e).unwrap();
        for k in 0..2 {
            assert!((r.fused[2][k] - r.forward[2][k]).abs() < 1e-12);
            assert!((r.fused[0][k] - r.backward[0][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_year_backward_is_emission_plus_prior() {
        let t = JointTransitionTable::uniform(1, 2, 1).unwrap();
        let e = em(&[&[-0.3, -1.2]]);
        let b = backward_cascade(&t, &e).unwrap();
        assert!((b[0][0] - (-0.3 - 2f64.ln())).abs() < 1e-15);
        let r = cascade(&t, &e).unwrap();
        assert!((r.posteriors[0][0] - softmax(&[-0.3, -1.2])[0]).abs() < 1e-12);
    }

    #[test]
    fn identity_transitions_propagate() {
        let t = JointTransitionTable::from_probabilities(1, 2, 3, vec![vec![0.5, 0.0, 0.0, 0.5]; 2]).unwrap();
        let e = em(&[&[0.0, -50.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let f = forward_cascade(&t, &e).unwrap();
        assert!(f.iter().all(|v| argmax(v) == 0));
        assert_eq!(viterbi(&t, &e).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn emission_count_mismatch() {
        let t = JointTransitionTable::uniform(1, 2, 3).unwrap();
        assert!(forward_cascade(&t, &em(&[&[0.0, 0.0]])).is_err());
        let t2 = JointTransitionTable::uniform(2, 2, 3).unwrap();
        assert!(forward_cascade(&t2, &em(&[&[0.0, 0.0][..]; 3])).is_err());
    }

    #[test]
    fn order2_uniform_reproduces_emissions() {
        let t = JointTransitionTable::uniform(2, 2, 4).unwrap();
        let e = em(&[&[0.3, -0.1], &[-2.0, 1.0], &[0.0, 0.5], &[1.0, -1.0]]);
        let r = cascade(&t, &e).unwrap();
        for (p, s) in r.posteriors.iter().zip(&e) {
            let want = softmax(&s.log_scores);
            assert!((p[0] - want[0]).abs() < 1e-12);
        }
    }
}
