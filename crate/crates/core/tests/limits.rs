use fkpart::asymptotics::{gauss_hermite, hermite, hermite_limit_prediction, sample_covariance};
use proptest::prelude::*;

/// `H_{n+1}(x) = x H_n(x) - n H_{n-1}(x)`.
fn hermite_recurrence(q: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if q == 0 {
        return prev;
    }
    for n in 1..q {
        let next = x * cur - n as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Coefficients of `H_q(s x)^m` in powers of `x`, built by convolution.
fn power_coefficients(q: usize, s: f64, m: u32) -> Vec<f64> {
    let mut h = vec![0.0; q + 1];
    let mut prev = vec![1.0];
    let mut cur = vec![0.0, 1.0];
    if q == 0 {
        h = prev.clone();
    } else {
        for n in 1..q {
            let mut next = vec![0.0; n + 2];
            for (i, c) in cur.iter().enumerate() {
                next[i + 1] += c;
            }
            for (i, c) in prev.iter().enumerate() {
                next[i] -= n as f64 * c;
            }
            prev = cur;
            cur = next;
        }
        h[..cur.len()].copy_from_slice(&cur);
    }
    let scaled: Vec<f64> = h.iter().enumerate().map(|(i, c)| c * s.powi(i as i32)).collect();
    let mut out = vec![1.0];
    for _ in 0..m {
        let mut next = vec![0.0; out.len() + q];
        for (i, a) in out.iter().enumerate() {
            for (j, b) in scaled.iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        out = next;
    }
    out
}

/// `E Z^k = (k-1)!!` for even `k`.
fn normal_moment(k: usize) -> f64 {
    if k % 2 == 1 {
        0.0
    } else {
        (1..k).step_by(2).map(|v| v as f64).product()
    }
}

#[test]
fn gauss_hermite_weights_are_a_probability() {
    let (nodes, weights) = gauss_hermite(64);
    assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    assert!(nodes.windows(2).all(|w| w[0] < w[1]));
    let fourth: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x.powi(4)).sum();
    assert!((fourth - 3.0).abs() < 1e-11);
}

#[test]
fn unit_variance_moments_are_known() {
    // E H_2(Z)^2 = 2, E H_2(Z)^3 = 8, E H_3(Z)^2 = 6, E H_4(Z)^2 = 24
    for (q, m, want) in [(2, 2, 2.0), (2, 3, 8.0), (3, 2, 6.0), (4, 2, 24.0), (2, 1, 0.0)] {
        let got = hermite_limit_prediction(q, 1.0, m).unwrap();
        assert!((got - want).abs() < 1e-9 * want.max(1.0), "q = {q}, m = {m}: {got}");
    }
}

#[test]
fn negative_variance_is_rejected() {
    assert!(hermite_limit_prediction(2, -0.1, 2).is_err());
}

#[test]
fn sample_covariance_matches_direct_sums() {
    let rows = vec![vec![1.0, 2.0], vec![2.0, 1.0], vec![4.0, 0.5], vec![-1.0, 3.0]];
    let cov = sample_covariance(&rows).unwrap();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..2).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    for i in 0..2 {
        for j in 0..2 {
            let c = rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0);
            assert!((cov.k_hat[(i, j)] - c).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn hermite_matches_recurrence(q in 0usize..=8, x in -4.0f64..4.0) {
        let (a, b) = (hermite(q, x), hermite_recurrence(q, x));
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{} vs {}", a, b);
    }

    #[test]
    fn limit_moments_match_polynomial_expansion(q in 1usize..=4, m in 1u32..=4, variance in 0.05f64..3.0) {
        let coeffs = power_coefficients(q, variance.sqrt(), m);
        let want: f64 = coeffs.iter().enumerate().map(|(k, c)| c * normal_moment(k)).sum();
        let got = hermite_limit_prediction(q, variance, m).unwrap();
        prop_assert!((got - want).abs() <= 1e-8 * (1.0 + want.abs()), "{} vs {}", got, want);
    }
}
