//! Shared test oracles: random Markov chains turned into consistent joint
//! tables, and brute-force marginalization over every label sequence.
#![allow(dead_code)]

use cascade_hmm::encoder::EmissionScores;
use cascade_hmm::hmm::JointTransitionTable;
use cascade_hmm::math::{logsumexp, softmax};
use rand::Rng;

pub fn random_distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Row-stochastic `rows × C`, flattened.
pub fn random_rows(rng: &mut impl Rng, rows: usize, c: usize) -> Vec<f64> {
    (0..rows).flat_map(|_| random_distribution(rng, c)).collect()
}

/// Order-1 chain: initial distribution plus one transition per year pair.
pub struct Chain1 {
    pub classes: usize,
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
}

impl Chain1 {
    pub fn random(rng: &mut impl Rng, classes: usize, years: usize) -> Self {
        Chain1 {
            classes,
            initial: random_distribution(rng, classes),
            transitions: (1..years).map(|_| random_rows(rng, classes, classes)).collect(),
        }
    }

    pub fn joint_tables(&self) -> Vec<Vec<f64>> {
        let c = self.classes;
        let mut marginal = self.initial.clone();
        let mut out = Vec::new();
        for a in &self.transitions {
            let joint: Vec<f64> = (0..c * c).map(|f| marginal[f / c] * a[f]).collect();
            marginal = (0..c).map(|j| (0..c).map(|i| joint[i * c + j]).sum()).collect();
            out.push(joint);
        }
        out
    }

    pub fn table(&self) -> JointTransitionTable {
        let years = self.transitions.len() + 1;
        JointTransitionTable::from_probabilities(1, self.classes, years, self.joint_tables()).unwrap()
    }
}

/// Order-2 chain: first-pair distribution plus `C² × C` conditionals.
pub struct Chain2 {
    pub classes: usize,
    pub first_pair: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
}

impl Chain2 {
    pub fn random(rng: &mut impl Rng, classes: usize, years: usize) -> Self {
        let c = classes;
        let init = random_distribution(rng, c);
        let a = random_rows(rng, c, c);
        Chain2 {
            classes,
            first_pair: (0..c * c).map(|f| init[f / c] * a[f]).collect(),
            transitions: (2..years).map(|_| random_rows(rng, c * c, c)).collect(),
        }
    }

    /// Second-order chain whose conditionals ignore the older year.
    pub fn from_first_order(chain: &Chain1) -> Self {
        let c = chain.classes;
        Chain2 {
            classes: c,
            first_pair: chain.joint_tables()[0].clone(),
            transitions: chain.transitions[1..]
                .iter()
                .map(|a| (0..c * c * c).map(|f| a[(f / c) % c * c + f % c]).collect())
                .collect(),
        }
    }

    pub fn joint_tables(&self) -> Vec<Vec<f64>> {
        let c = self.classes;
        let mut pair = self.first_pair.clone();
        let mut out = Vec::new();
        for q in &self.transitions {
            let joint: Vec<f64> = (0..c * c * c).map(|f| pair[f / c] * q[f]).collect();
            pair = (0..c * c).map(|bc| (0..c).map(|a| joint[a * c * c + bc]).sum()).collect();
            out.push(joint);
        }
        out
    }

    pub fn table(&self) -> JointTransitionTable {
        let years = self.transitions.len() + 2;
        JointTransitionTable::from_probabilities(2, self.classes, years, self.joint_tables()).unwrap()
    }
}

pub fn random_emissions(rng: &mut impl Rng, classes: usize, years: usize) -> Vec<EmissionScores> {
    (0..years).map(|_| EmissionScores::new((0..classes).map(|_| rng.random_range(-4.0..2.0)).collect())).collect()
}

/// Every sequence in `[0, C)^Y`, in lexicographic order.
pub fn all_sequences(classes: usize, years: usize) -> Vec<Vec<usize>> {
    (0..classes.pow(years as u32))
        .map(|mut f| {
            let mut s = vec![0; years];
            for y in (0..years).rev() {
                s[y] = f % classes;
                f /= classes;
            }
            s
        })
        .collect()
}

/// `log P(ω)` of one label sequence read off a joint table chain: first
/// table's joint, then forward conditionals of each later table.
pub fn log_sequence_prior(table: &JointTransitionTable, seq: &[usize]) -> f64 {
    let c = table.classes();
    let order = table.order();
    let idx = |s: &[usize]| s.iter().fold(0, |acc, &l| acc * c + l);
    if table.num_tables() == 0 {
        return -(c as f64).ln();
    }
    let joint0 = table.log_joint(0).unwrap();
    let mut lp = joint0[idx(&seq[..=order])];
    for t in 1..table.num_tables() {
        let joint = table.log_joint(t).unwrap();
        let ctx = idx(&seq[t..t + order]);
        let row: Vec<f64> = (0..c).map(|k| joint[ctx * c + k]).collect();
        lp += joint[ctx * c + seq[t + order]] - logsumexp(&row);
    }
    lp
}

/// Per-year posteriors by explicit enumeration of all `C^Y` sequences.
pub fn brute_force_posteriors(table: &JointTransitionTable, emissions: &[EmissionScores]) -> Vec<Vec<f64>> {
    let (c, years) = (table.classes(), emissions.len());
    let mut per_year = vec![vec![Vec::new(); c]; years];
    for seq in all_sequences(c, years) {
        let score = log_sequence_prior(table, &seq)
            + seq.iter().zip(emissions).map(|(&l, e)| e.log_scores[l]).sum::<f64>();
        for (y, &l) in seq.iter().enumerate() {
            per_year[y][l].push(score);
        }
    }
    per_year
        .into_iter()
        .map(|classes| softmax(&classes.iter().map(|s| logsumexp(s)).collect::<Vec<_>>()))
        .collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
