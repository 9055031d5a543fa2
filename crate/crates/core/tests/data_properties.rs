use std::collections::BTreeMap;

use cascade_hmm::data::*;
use proptest::prelude::*;

fn seqs_strategy(c: usize, years: usize, n: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0..c, years), 1..n)
}

fn rotate(s: &[usize], k: usize) -> Vec<usize> {
    (0..s.len()).map(|i| s[(i + k) % s.len()]).collect()
}

/// Canonical form of a partition: sorted groups of member indices.
fn partition(assignment: &[usize]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in assignment.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}

proptest! {
    #[test]
    fn hamming_is_a_symmetric_premetric(a in prop::collection::vec(0usize..4, 1..8), seed in any::<u64>()) {
        let b: Vec<usize> = a.iter().enumerate().map(|(i, &x)| (x + (seed >> (i % 60)) as usize % 2) % 4).collect();
        let d = rotation_hamming(&a, &b).unwrap();
        prop_assert_eq!(d, rotation_hamming(&b, &a).unwrap());
        prop_assert!(d <= a.len());
        prop_assert_eq!(rotation_hamming(&a, &a).unwrap(), 0);
        for k in 0..a.len() {
            prop_assert_eq!(rotation_hamming(&a, &rotate(&a, k)).unwrap(), 0);
        }
    }

    #[test]
    fn threshold_zero_gives_rotation_orbits(seqs in seqs_strategy(3, 4, 25)) {
        let got = cluster(&seqs, 0.0).unwrap();
        for i in 0..seqs.len() {
            for j in 0..seqs.len() {
                let same_orbit = rotation_hamming(&seqs[i], &seqs[j]).unwrap() == 0;
                prop_assert_eq!(got[i] == got[j], same_orbit);
            }
        }
    }

    #[test]
    fn clustering_is_permutation_invariant(seqs in seqs_strategy(3, 4, 20), threshold in 0.0f64..3.0, seed in any::<u64>()) {
        let n = seqs.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let shuffled: Vec<Vec<usize>> = perm.iter().map(|&p| seqs[p].clone()).collect();
        let a = cluster(&seqs, threshold).unwrap();
        let b = cluster(&shuffled, threshold).unwrap();
        let mut b_back = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            b_back[p] = b[k];
        }
        prop_assert_eq!(partition(&a), partition(&b_back));
    }

    #[test]
    fn high_threshold_gives_one_cluster(seqs in seqs_strategy(4, 5, 15)) {
        prop_assert!(cluster(&seqs, 5.0).unwrap().iter().all(|&c| c == 0));
    }

    #[test]
    fn split_is_a_partition(clusters in prop::collection::vec(0usize..6, 1..200), seed in any::<u64>()) {
        let split = stratified_split(&clusters, [0.6, 0.2, 0.2], seed).unwrap();
        let mut all: Vec<usize> = split.train.iter().chain(&split.validation).chain(&split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..clusters.len()).collect::<Vec<_>>());
    }
}

#[test]
fn split_fractions_within_binomial_bounds() {
    let n = 10_000;
    let clusters: Vec<usize> = (0..n).map(|i| i % 37).collect();
    let split = stratified_split(&clusters, [0.6, 0.2, 0.2], 99).unwrap();
    for (got, p) in [(split.train.len(), 0.6), (split.validation.len(), 0.2), (split.test.len(), 0.2)] {
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((got as f64 / n as f64 - p).abs() <= 3.0 * sigma, "{got} vs {p}");
    }
}

#[test]
fn uniform_chain_pair_frequencies() {
    let preset = Preset { classes: 3, years: 2, timesteps: 2, bands: 1, noise_sigma: 0.0, ..Default::default() };
    let mut spec = SynthSpec::preset(&preset, 3).unwrap();
    spec.initial = vec![1.0 / 3.0; 3];
    spec.transitions = vec![vec![vec![1.0 / 3.0; 3]; 3]];
    let n = 10_000;
    let samples = generate(&spec, n, 4).unwrap();
    let mut counts = [0usize; 9];
    for s in &samples {
        let l = s.labels();
        counts[l[0] * 3 + l[1]] += 1;
    }
    let p = 1.0 / 9.0;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    for c in counts {
        assert!((c as f64 / n as f64 - p).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn same_labels_and_days_give_same_series_without_noise() {
    let preset = Preset { classes: 2, years: 2, timesteps: 5, bands: 3, noise_sigma: 0.0, ..Default::default() };
    let spec = SynthSpec::preset(&preset, 8).unwrap();
    let a = generate(&spec, 40, 2).unwrap();
    let b = generate(&spec, 40, 2).unwrap();
    assert_eq!(a, b);
    for s in &a {
        for t in &a {
            for (x, y) in s.years.iter().zip(&t.years) {
                if x.label == y.label && x.series.days() == y.series.days() {
                    assert_eq!(x.series, y.series);
                }
            }
        }
    }
}

#[test]
fn spec_validation() {
    let mut spec = SynthSpec::preset(&Preset::default(), 1).unwrap();
    spec.transitions[0][0][0] += 1e-6;
    assert!(spec.validate().is_err());
    let mut spec = SynthSpec::preset(&Preset::default(), 1).unwrap();
    spec.noise_sigma = -1.0;
    assert!(spec.validate().is_err());
    let json = serde_json::to_string(&SynthSpec::preset(&Preset::default(), 1).unwrap()).unwrap();
    let back: SynthSpec = serde_json::from_str(&json).unwrap();
    assert_eq!(back, SynthSpec::preset(&Preset::default(), 1).unwrap());
}
