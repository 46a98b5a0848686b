use approx::assert_abs_diff_eq;
use futh::metrics::{kappa, normalize_rows, overall_accuracy, precision_per_class, ConfusionMatrix, EvalReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Metrics recomputed from the explicit list of (truth, prediction) pairs.
struct Brute {
    oa: f64,
    kappa: f64,
    precision: Vec<f64>,
}

fn brute_force(k: usize, pairs: &[(usize, usize)]) -> Brute {
    let n = pairs.len() as f64;
    let agree = pairs.iter().filter(|(t, p)| t == p).count() as f64;
    let oa = agree / n;
    let mut chance = 0.0;
    let mut precision = Vec::new();
    for c in 0..k {
        let truth = pairs.iter().filter(|(t, _)| *t == c).count() as f64;
        let pred = pairs.iter().filter(|(_, p)| *p == c).count() as f64;
        chance += truth * pred;
        let hit = pairs.iter().filter(|(t, p)| *t == c && *p == c).count() as f64;
        precision.push(if pred == 0.0 { 0.0 } else { hit / pred });
    }
    let pe = chance / (n * n);
    let kappa = if pe == 1.0 { 0.0 } else { (oa - pe) / (1.0 - pe) };
    Brute { oa, kappa, precision }
}

#[test]
fn random_matrices_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..1000 {
        let k = rng.random_range(1..=10);
        let n = rng.random_range(1..200);
        let bias = rng.random_range(0.0..1.0);
        let pairs: Vec<(usize, usize)> = (0..n)
            .map(|_| {
                let t = rng.random_range(0..k);
                let p = if rng.random_bool(bias) { t } else { rng.random_range(0..k) };
                (t, p)
            })
            .collect();
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let cm = ConfusionMatrix::from_predictions(k, &truth, &pred).unwrap();
        let want = brute_force(k, &pairs);
        assert_abs_diff_eq!(overall_accuracy(&cm).unwrap(), want.oa, epsilon = 1e-9);
        assert_abs_diff_eq!(kappa(&cm).unwrap(), want.kappa, epsilon = 1e-9);
        for (got, w) in precision_per_class(&cm).iter().zip(&want.precision) {
            assert_abs_diff_eq!(got, w, epsilon = 1e-9);
        }
        let kv = kappa(&cm).unwrap();
        assert!((-1.0..=1.0).contains(&kv));
        let diagonal = pairs.iter().all(|(t, p)| t == p);
        // Outside the single-class case, kappa is 1 exactly on diagonal matrices.
        let single_class = pairs.iter().all(|(t, _)| *t == pairs[0].0);
        assert_eq!(kv == 1.0, diagonal && !single_class);
        for row in normalize_rows(&cm) {
            let s: f64 = row.iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn two_class_example() {
    let cm = ConfusionMatrix::from_counts(vec![vec![4, 1], vec![2, 3]]).unwrap();
    assert_abs_diff_eq!(overall_accuracy(&cm).unwrap(), 0.7, epsilon = 1e-12);
    assert_abs_diff_eq!(kappa(&cm).unwrap(), 0.4, epsilon = 1e-12);
    let p = precision_per_class(&cm);
    assert_abs_diff_eq!(p[0], 4.0 / 6.0, epsilon = 1e-12);
    assert_abs_diff_eq!(p[1], 0.75, epsilon = 1e-12);
}

#[test]
fn balanced_disagreement_scores_zero_kappa() {
    let cm = ConfusionMatrix::from_counts(vec![vec![1, 1], vec![1, 1]]).unwrap();
    assert_eq!(kappa(&cm).unwrap(), 0.0);
    let single = ConfusionMatrix::from_counts(vec![vec![5]]).unwrap();
    assert_eq!(kappa(&single).unwrap(), 0.0);
}

#[test]
fn rows_hold_the_ground_truth() {
    let cm = ConfusionMatrix::from_predictions(3, &[0, 0, 2], &[1, 1, 2]).unwrap();
    assert_eq!(cm.counts()[0][1], 2);
    assert_eq!(cm.counts()[1][0], 0);
}

#[test]
fn empty_matrix_and_bad_labels_are_errors() {
    assert!(overall_accuracy(&ConfusionMatrix::with_classes(3)).is_err());
    assert!(ConfusionMatrix::from_predictions(2, &[0, 2], &[0, 1]).is_err());
    assert!(ConfusionMatrix::from_counts(vec![vec![1, 2]]).is_err());
}

#[test]
fn report_text_round_trips() {
    let mut cm = ConfusionMatrix::from_counts(vec![vec![5, 1, 0], vec![2, 3, 1], vec![0, 0, 4]]).unwrap();
    cm.set_names(vec!["up:1".into(), "down:1".into(), "left:1".into()]).unwrap();
    let report = EvalReport::from_confusion(&cm).unwrap();
    let parsed = EvalReport::parse(&report.to_text()).unwrap();
    assert_eq!(parsed.to_text(), report.to_text());
    assert_eq!(parsed.class_names, report.class_names);
    assert_abs_diff_eq!(parsed.kappa, report.kappa, epsilon = 1e-12);
}
