use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realmerge_core::{
    auc, auc_counts, drop, drop_max, gain_unseen, render_table, EvalReport, ScoreSet,
};

fn brute_force(s: &ScoreSet) -> f64 {
    let mut wins = 0.0;
    for f in &s.fake_scores {
        for r in &s.real_scores {
            wins += if f > r {
                1.0
            } else if f == r {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (s.fake_scores.len() * s.real_scores.len()) as f64
}

#[test]
fn fixture_is_seven_ninths() {
    let s = ScoreSet::new("fixture", vec![0.9, 0.4, 0.7], vec![0.3, 0.8, 0.1]).unwrap();
    let a = auc(&s).unwrap();
    assert!((a - 7.0 / 9.0).abs() <= 1e-9);
    assert_eq!(format!("{a:.4}"), "0.7778");
    assert_eq!(auc_counts(&s).unwrap(), (14, 18));
}

#[test]
fn sorted_auc_matches_all_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..100 {
        let (nf, nr) = (rng.random_range(1..60), rng.random_range(1..60));
        // Coarse grid so ties are common.
        let levels = rng.random_range(2..20);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| rng.random_range(0..levels) as f64 / 7.0)
                .collect()
        };
        let s = ScoreSet::new(format!("case-{case}"), draw(nf), draw(nr)).unwrap();
        assert!(
            (auc(&s).unwrap() - brute_force(&s)).abs() <= 1e-12,
            "case {case}"
        );
    }
}

#[test]
fn swapping_classes_complements_the_counts() {
    let s = ScoreSet::new("t", vec![0.2, 0.5, 0.5, 0.9], vec![0.5, 0.1]).unwrap();
    let (u, total) = auc_counts(&s).unwrap();
    let (v, total2) = auc_counts(&s.swapped()).unwrap();
    assert_eq!(total, total2);
    assert_eq!(u + v, total);
}

#[test]
fn drop_and_gain_on_a_small_table() {
    let merged: BTreeMap<String, f64> = [("a".to_string(), 0.9), ("b".to_string(), 0.7)].into();
    let specialists: BTreeMap<String, f64> =
        [("a".to_string(), 0.95), ("b".to_string(), 0.6)].into();
    let report = EvalReport::new(
        "wa",
        serde_json::json!({"method": "wa"}),
        &merged,
        &specialists,
        Some((0.8, &[0.7, 0.75][..])),
    )
    .unwrap();
    assert!((report.drop_per_task["a"] - 0.05).abs() < 1e-12);
    assert!((report.drop_per_task["b"] + 0.1).abs() < 1e-12);
    assert!((report.drop_max - 0.05).abs() < 1e-12);
    assert!((report.gain_unseen.unwrap() - 0.05).abs() < 1e-12);
    let back: EvalReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    let table = render_table(&[report]);
    assert!(table.lines().next().unwrap().starts_with("method"));
    assert!(table.contains("+0.0500"));
}

#[test]
fn metric_domains_are_enforced() {
    assert!(drop(1.2, 0.5).is_err());
    assert!(drop_max(&[]).is_err());
    assert!(gain_unseen(0.5, &[]).is_err());
    assert!(ScoreSet::new("x", vec![], vec![0.1]).is_err());
    assert!(ScoreSet::new("x", vec![f64::NAN], vec![0.1]).is_err());
}

proptest! {
    #[test]
    fn strictly_increasing_maps_keep_auc(
        fake in proptest::collection::vec(-5.0f64..5.0, 1..40),
        real in proptest::collection::vec(-5.0f64..5.0, 1..40),
        scale in 0.01f64..10.0,
        shift in -3.0f64..3.0,
    ) {
        let s = ScoreSet::new("p", fake.clone(), real.clone()).unwrap();
        // On a quarter grid distinct scores stay distinct after `exp`, so the
        // map neither creates nor breaks ties.
        let map = |x: f64| (x * 4.0).round() / 4.0;
        let coarse = ScoreSet::new("p", fake.iter().map(|x| map(*x)).collect(), real.iter().map(|x| map(*x)).collect()).unwrap();
        let image = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| (scale * x + shift).exp()).collect() };
        let mapped = ScoreSet::new("p", image(&coarse.fake_scores), image(&coarse.real_scores)).unwrap();
        prop_assert_eq!(auc_counts(&coarse).unwrap(), auc_counts(&mapped).unwrap());
        prop_assert!((auc(&s).unwrap() - brute_force(&s)).abs() <= 1e-12);
    }
}
