use cascade_hmm::eval::*;
use proptest::prelude::*;

fn labels(c: usize, n: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (prop::collection::vec(0..c, n), prop::collection::vec(0..c, n))
}

proptest! {
    #[test]
    fn relabeling_preserves_mean_f1((p, r) in labels(5, 60), perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let cm = score(&p, &r, 5).unwrap();
        let a = f1_report(&cm);
        let b = f1_report(&cm.permuted(&perm).unwrap());
        prop_assert_eq!(a.mean_f1.to_bits(), b.mean_f1.to_bits());
        prop_assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn scores_stay_in_unit_interval((p, r) in labels(4, 40)) {
        let rep = f1_report(&score(&p, &r, 4).unwrap());
        for c in &rep.per_class {
            for v in [c.precision, c.recall, c.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        prop_assert!((0.0..=1.0).contains(&rep.mean_f1));
        prop_assert_eq!(score(&p, &r, 4).unwrap().total(), 40);
    }

    #[test]
    fn perfect_predictions_are_diagonal(r in prop::collection::vec(0usize..4, 1..50)) {
        let cm = score(&r, &r, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    prop_assert_eq!(cm.get(i, j), 0);
                }
            }
        }
        let rep = f1_report(&cm);
        let present = (0..4).filter(|&k| cm.get(k, k) > 0).count() as f64;
        prop_assert!((rep.mean_f1 - present / 4.0).abs() < 1e-15);
    }
}

#[test]
fn worked_example() {
    let cm = score(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
    let rep = f1_report(&cm);
    assert_eq!(rep.per_class[0].precision, 1.0);
    assert_eq!(rep.per_class[0].recall, 0.5);
    assert_eq!(rep.per_class[1].precision, 0.5);
    assert_eq!(rep.per_class[1].recall, 1.0);
    assert!((rep.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
    assert!((rep.mean_f1 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn diagonal_matrix_has_mean_f1_equal_accuracy() {
    let cm = ConfusionMatrix::from_rows(&[vec![4, 0, 0], vec![0, 1, 0], vec![0, 0, 7]]).unwrap();
    let rep = f1_report(&cm);
    assert_eq!(rep.mean_f1, 1.0);
    assert_eq!(rep.mean_f1, rep.accuracy);
}

#[test]
fn report_serializes() {
    let rep = f1_report(&score(&[0, 1], &[0, 1], 2).unwrap());
    let json = serde_json::to_string(&rep).unwrap();
    assert_eq!(serde_json::from_str::<F1Report>(&json).unwrap(), rep);
}
