mod support;

use cascade_hmm::autodiff::Tape;
use cascade_hmm::encoder::EmissionScores;
use cascade_hmm::hmm::{self, graph, JointTransitionTable};
use cascade_hmm::math::argmax;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::*;

fn problem(order: usize, c: usize, years: usize, seed: u64) -> (JointTransitionTable, Vec<EmissionScores>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = if order == 1 { Chain1::random(&mut rng, c, years).table() } else { Chain2::random(&mut rng, c, years).table() };
    (table, random_emissions(&mut rng, c, years))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn order1_matches_enumeration(c in 2usize..5, years in 1usize..5, seed in any::<u64>()) {
        let (table, em) = problem(1, c, years, seed);
        let r = hmm::cascade(&table, &em).unwrap();
        prop_assert!(max_abs_diff(&r.posteriors, &brute_force_posteriors(&table, &em)) < 1e-9);
    }

    #[test]
    fn order2_matches_enumeration(c in 2usize..4, years in 3usize..6, seed in any::<u64>()) {
        let (table, em) = problem(2, c, years, seed);
        let r = hmm::cascade(&table, &em).unwrap();
        prop_assert!(max_abs_diff(&r.posteriors, &brute_force_posteriors(&table, &em)) < 1e-9);
    }

    #[test]
    fn posteriors_are_distributions(order in 1usize..3, c in 2usize..5, years in 3usize..6, seed in any::<u64>()) {
        let (table, em) = problem(order, c, years, seed);
        for p in hmm::cascade(&table, &em).unwrap().posteriors {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
        }
    }

    #[test]
    fn time_reversal_mirrors_posteriors(order in 1usize..3, c in 2usize..4, years in 3usize..6, seed in any::<u64>()) {
        let (table, em) = problem(order, c, years, seed);
        let fwd = hmm::cascade(&table, &em).unwrap().posteriors;
        let rev_em: Vec<_> = em.iter().rev().cloned().collect();
        let mut rev = hmm::cascade(&table.reversed(), &rev_em).unwrap().posteriors;
        rev.reverse();
        prop_assert!(max_abs_diff(&fwd, &rev) < 1e-9);
    }

    #[test]
    fn emission_shifts_do_not_move_posteriors(order in 1usize..3, c in 2usize..5, years in 3usize..5, seed in any::<u64>(), shift in -50.0f64..50.0) {
        let (table, em) = problem(order, c, years, seed);
        let shifted: Vec<_> = em
            .iter()
            .enumerate()
            .map(|(y, e)| EmissionScores::new(e.log_scores.iter().map(|v| v + shift * (y as f64 + 1.0)).collect()))
            .collect();
        let a = hmm::cascade(&table, &em).unwrap().posteriors;
        let b = hmm::cascade(&table, &shifted).unwrap().posteriors;
        prop_assert!(max_abs_diff(&a, &b) < 1e-9);
    }

    #[test]
    fn viterbi_finds_the_best_sequence(c in 2usize..4, years in 2usize..5, seed in any::<u64>()) {
        let (table, em) = problem(1, c, years, seed);
        let score = |s: &[usize]| log_sequence_prior(&table, s) + s.iter().zip(&em).map(|(&l, e)| e.log_scores[l]).sum::<f64>();
        let best = all_sequences(c, years).into_iter().map(|s| score(&s)).fold(f64::NEG_INFINITY, f64::max);
        let path = hmm::viterbi(&table, &em).unwrap();
        prop_assert!((score(&path) - best).abs() < 1e-9);
    }

    #[test]
    fn graph_path_matches_pure_path(order in 1usize..3, c in 2usize..4, years in 3usize..5, seed in any::<u64>()) {
        let (table, em) = problem(order, c, years, seed);
        let mut tape = Tape::new();
        let tables = graph::bind_table(&table, &mut tape);
        let ems: Vec<_> = em.iter().map(|e| tape.constant(vec![c], e.log_scores.clone()).unwrap()).collect();
        let lp = graph::log_posteriors(&mut tape, order, c, &tables, &ems).unwrap();
        let pure = hmm::cascade(&table, &em).unwrap().posteriors;
        for (v, p) in lp.iter().zip(&pure) {
            for (a, b) in tape.value(*v).iter().zip(p) {
                prop_assert!((a.exp() - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cooccurrence_tables_are_normalized(c in 2usize..5, years in 2usize..5, n in 1usize..30, seed in any::<u64>(), alpha in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<Vec<usize>> = (0..n).map(|_| (0..years).map(|_| rand::Rng::random_range(&mut rng, 0..c)).collect()).collect();
        let t = hmm::init_from_cooccurrence(&seqs, c, years, 1, alpha).unwrap();
        for k in 0..t.num_tables() {
            prop_assert!(cascade_hmm::math::logsumexp(t.log_joint(k).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_transitions_pick_the_dominant_label() {
    // years disagree, but the chain cannot switch; enumeration says class 1 wins overall
    let p = vec![0.5, 0.0, 0.0, 0.5];
    let table = JointTransitionTable::from_probabilities(1, 2, 3, vec![p.clone(), p]).unwrap();
    let em = vec![
        EmissionScores::new(vec![0.0, -1.0]),
        EmissionScores::new(vec![-3.0, 0.0]),
        EmissionScores::new(vec![0.0, -0.5]),
    ];
    let oracle = brute_force_posteriors(&table, &em);
    let labels = hmm::cascade(&table, &em).unwrap().labels();
    let want = argmax(&oracle[0]);
    assert_eq!(want, 1);
    assert_eq!(labels, vec![want; 3]);
}

#[test]
fn single_year_uses_uniform_prior() {
    let table = JointTransitionTable::uniform(1, 3, 1).unwrap();
    let em = vec![EmissionScores::new(vec![0.2, -1.0, 0.7])];
    let r = hmm::cascade(&table, &em).unwrap();
    let want = cascade_hmm::math::softmax(&em[0].log_scores);
    assert!(max_abs_diff(&r.posteriors, &[want]) < 1e-12);
}

#[test]
fn order2_needs_three_years() {
    assert!(JointTransitionTable::uniform(2, 3, 2).is_err());
    assert!(hmm::init_from_cooccurrence(&[vec![0, 1]], 2, 2, 2, 1.0).is_err());
}

#[test]
fn save_load_is_bit_exact() {
    let (table, _) = problem(2, 3, 4, 11);
    let dir = tempfile::tempdir().unwrap();
    table.save(dir.path(), "initialized").unwrap();
    let (back, stage) = JointTransitionTable::load(dir.path()).unwrap();
    assert_eq!(stage, "initialized");
    for (a, b) in table.tensors().iter().zip(back.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
