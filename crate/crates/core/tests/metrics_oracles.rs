//! Metric implementations against deliberately naive references.

use ctxmod_core::metrics::{lambda_jro, lambda_sro, pearson, peak_k, peak_tuning};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_pearson(y: &[f64], p: &[f64]) -> f64 {
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mp = p.iter().sum::<f64>() / n;
    let cov: f64 = y.iter().zip(p).map(|(a, b)| (a - my) * (b - mp)).sum();
    let vy: f64 = y.iter().map(|a| (a - my) * (a - my)).sum();
    let vp: f64 = p.iter().map(|b| (b - mp) * (b - mp)).sum();
    (cov / (vy * vp).sqrt()).clamp(-1.0, 1.0)
}

/// Position of `i` when `v` is sorted descending, earlier index first on
/// ties. Quadratic on purpose.
fn rank(v: &[f64], i: usize) -> usize {
    (0..v.len()).filter(|&j| v[j] > v[i] || (v[j] == v[i] && j < i)).count()
}

fn threshold(y: &[f64], k: usize) -> f64 {
    let mut s = y.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s[k - 1]
}

fn naive_jro(y: &[f64], p: &[f64], k: usize) -> f64 {
    let t = threshold(y, k);
    (0..y.len()).filter(|&i| rank(y, i) < k && p[i] >= t).count() as f64 / k as f64
}

fn naive_sro(y: &[f64], p: &[f64], k: usize) -> f64 {
    let t = threshold(y, k);
    (0..y.len()).filter(|&i| rank(p, i) < k && p[i] >= t).count() as f64 / k as f64
}

/// Values drawn from a small grid half the time so ties are common.
fn instance(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let n = rng.gen_range(2..=max_n);
    let coarse = rng.gen_bool(0.5);
    let draw = |rng: &mut ChaCha8Rng| if coarse { rng.gen_range(0..6) as f64 } else { rng.gen_range(-1.0..1.0) };
    let y: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
    let p: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
    let k = rng.gen_range(1..=n);
    (y, p, k)
}

#[test]
fn ten_thousand_instances_match_the_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let (y, p, k) = instance(&mut rng, 200);
        assert_eq!(lambda_jro(&y, &p, k).unwrap(), naive_jro(&y, &p, k), "{y:?} {p:?} {k}");
        assert_eq!(lambda_sro(&y, &p, k).unwrap(), naive_sro(&y, &p, k), "{y:?} {p:?} {k}");
        match pearson(&y, &p) {
            Ok(r) => assert_eq!(r, naive_pearson(&y, &p)),
            Err(_) => assert!(!naive_pearson(&y, &p).is_finite() || y.iter().all(|&v| v == y[0]) || p.iter().all(|&v| v == p[0])),
        }
    }
}

#[test]
fn separate_ordering_never_loses_to_joint_ordering() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100_000 {
        let (y, p, k) = instance(&mut rng, 60);
        assert!(lambda_sro(&y, &p, k).unwrap() >= lambda_jro(&y, &p, k).unwrap());
    }
}

#[test]
fn perfect_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [2, 10, 100, 1000] {
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert_eq!(pearson(&y, &y).unwrap(), 1.0);
        assert_eq!(peak_tuning(&y, &y, None).unwrap(), (100.0, 100.0));
    }
    assert_eq!(peak_k(1000), 10);
    assert_eq!(peak_tuning(&[1.0; 5], &[1.0; 5], None).unwrap(), (100.0, 100.0));
}

#[test]
fn bad_k_and_lengths_are_errors() {
    let y = [1.0, 2.0, 3.0];
    assert!(lambda_jro(&y, &y, 0).is_err());
    assert!(lambda_sro(&y, &y, 4).is_err());
    assert!(lambda_jro(&y, &y[..2], 1).is_err());
    assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
}

proptest! {
    #[test]
    fn pearson_is_affine_invariant(
        y in prop::collection::vec(-10.0f64..10.0, 3..50),
        a in 0.1f64..5.0,
        b in -5.0f64..5.0,
    ) {
        let p: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + (i as f64 * 0.37).sin()).collect();
        if let Ok(r) = pearson(&y, &p) {
            let q: Vec<f64> = p.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&y, &q).unwrap() - r).abs() < 1e-9);
            prop_assert!(r.abs() <= 1.0);
        }
    }

    #[test]
    fn lambdas_are_fractions_of_k(
        y in prop::collection::vec(0.0f64..1.0, 1..80),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = y.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
        let k = rng.gen_range(1..=y.len());
        for l in [lambda_jro(&y, &p, k).unwrap(), lambda_sro(&y, &p, k).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&l));
            prop_assert!(((l * k as f64).round() - l * k as f64).abs() < 1e-9);
        }
    }
}
