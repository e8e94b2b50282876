mod common;

use common::qwk_oracle;
use mtscore::evalkit::{macro_f1, paired_t_test, qwk, qwk_detailed, student_t_two_sided, EvalReport};
use mtscore::numerics::Rng;

/// Every sequence of `len` labels below `c`.
fn sequences(len: usize, c: usize) -> Vec<Vec<usize>> {
    let total = c.pow(len as u32);
    (0..total)
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let d = code % c;
                    code /= c;
                    d
                })
                .collect()
        })
        .collect()
}

#[test]
fn qwk_agrees_with_brute_force_on_all_short_sequences() {
    let mut checked = 0;
    for c in 2..=3 {
        for len in 1..=5 {
            let all = sequences(len, c);
            for g in &all {
                for p in &all {
                    let got = qwk(g, p, c).unwrap();
                    let want = qwk_oracle(g, p, c);
                    assert!((got - want).abs() <= 1e-12, "{g:?} {p:?}: {got} vs {want}");
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, (4 + 16 + 64 + 256 + 1024) + (9 + 81 + 729 + 6561 + 59049));
}

#[test]
fn qwk_bounds_and_symmetry_on_random_data() {
    let mut rng = Rng::new(5);
    for _ in 0..500 {
        let c = 2 + rng.below(5);
        let n = 1 + rng.below(40);
        let g: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let k = qwk_detailed(&g, &p, c).unwrap();
        assert!((-1.0..=1.0).contains(&k.value), "{}", k.value);
        assert_eq!(k.value, qwk(&p, &g, c).unwrap());
        assert!((k.value - qwk_oracle(&g, &p, c)).abs() < 1e-12);
        assert_eq!(qwk(&g, &g, c).unwrap(), 1.0);
    }
}

#[test]
fn qwk_reference_fixtures() {
    assert_eq!(qwk(&[0, 1, 2], &[2, 1, 0], 3).unwrap(), -1.0);
    assert_eq!(qwk(&[0, 0, 1, 1], &[0, 0, 1, 0], 2).unwrap(), 0.5);
}

fn f1_oracle(g: &[usize], p: &[usize], c: usize) -> f64 {
    let mut scores = Vec::new();
    for k in 0..c {
        let tp = g.iter().zip(p).filter(|(a, b)| **a == k && **b == k).count() as f64;
        let fp = g.iter().zip(p).filter(|(a, b)| **a != k && **b == k).count() as f64;
        let fn_ = g.iter().zip(p).filter(|(a, b)| **a == k && **b != k).count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        scores.push(2.0 * tp / (2.0 * tp + fp + fn_));
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[test]
fn macro_f1_matches_counting_oracle() {
    let mut rng = Rng::new(8);
    for _ in 0..300 {
        let c = 2 + rng.below(5);
        let n = 1 + rng.below(30);
        let g: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        assert!((macro_f1(&g, &p, c).unwrap() - f1_oracle(&g, &p, c)).abs() < 1e-12);
    }
}

#[test]
fn student_t_matches_closed_forms() {
    for t in [0.0, 0.3, 1.0, 2.5, 7.0, 40.0] {
        // df = 1 is the Cauchy distribution, df = 2 has an algebraic tail
        let cauchy = 1.0 - 2.0 / std::f64::consts::PI * f64::atan(t);
        let df2 = 1.0 - t / (2.0 + t * t).sqrt();
        assert!((student_t_two_sided(t, 1.0) - cauchy).abs() < 1e-10, "t={t}");
        assert!((student_t_two_sided(t, 2.0) - df2).abs() < 1e-10, "t={t}");
        assert!((student_t_two_sided(-t, 2.0) - df2).abs() < 1e-10);
    }
}

#[test]
fn paired_t_test_on_a_hand_computed_case() {
    // differences 0.1, 0.02, 0.05: mean 0.056667, sd 0.040415
    let r = paired_t_test(&[0.8, 0.9, 0.85], &[0.7, 0.88, 0.8]).unwrap();
    let d = [0.1f64, 0.02, 0.05];
    let mean = d.iter().sum::<f64>() / 3.0;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    let t = mean / (sd / 3f64.sqrt());
    assert!((r.t - t).abs() < 1e-9);
    assert_eq!(r.df, 2);
    assert!((r.p - (1.0 - t / (2.0 + t * t).sqrt())).abs() < 1e-9);
}

#[test]
fn eval_report_serializes_in_fixed_order() {
    let r = EvalReport::from_labels("T01", &[0, 1, 1, 2], &[0, 1, 2, 2], 3).unwrap();
    let json = r.to_json();
    let keys = ["task_id", "n_test", "num_classes", "qwk", "qwk_degenerate", "accuracy", "macro_f1", "confusion"];
    let positions: Vec<usize> = keys.iter().map(|k| json.find(&format!("\"{k}\"")).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![0, 1, 1], vec![0, 0, 1]]);
}
