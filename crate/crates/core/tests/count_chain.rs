//! The genetic system on a finite space, reduced to its occupation counts.
//!
//! With counts `c`, a particle at `a` moves to `b` at rate `L(a, b)` and
//! copies a particle at `b` at rate `V(a) c_b / N` (the uniform target
//! includes itself, which is a no-op). The count chain killed at rate
//! `η^N(V) = Σ c_a V(a) / N` gives `E γ^N_t(f)` exactly.

mod common;

use common::*;
use fkpart::harness::ks_two_sample;
use fkpart::models::{exact_gamma, FinitePotential, FiniteStateModel};
use fkpart::rng::Streams;
use fkpart::simulate::{
    advance_ring_driven, advance_uniformized, empirical_expectation, gamma_normalizer, init_ensemble, simulate,
    unnormalized_expectation,
};
use fkpart::estimate::Moments;
use proptest::prelude::*;

fn compositions(n: usize, s: usize) -> Vec<Vec<usize>> {
    if s == 1 {
        return vec![vec![n]];
    }
    (0..=n)
        .rev()
        .flat_map(|first| {
            compositions(n - first, s - 1).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

struct CountChain {
    states: Vec<Vec<usize>>,
    generator: Mat,
    killing: Vec<f64>,
    initial: Vec<f64>,
    n: usize,
}

impl CountChain {
    fn new(rates: &Mat, v: &[f64], eta0: &[f64], n: usize) -> Self {
        let s = rates.len();
        let states = compositions(n, s);
        let index = |c: &[usize]| states.iter().position(|x| x == c).unwrap();
        let mut generator = zeros(states.len());
        let nf = n as f64;
        for (ic, c) in states.iter().enumerate() {
            for a in 0..s {
                if c[a] == 0 {
                    continue;
                }
                for b in 0..s {
                    if a == b {
                        continue;
                    }
                    let rate = c[a] as f64 * (rates[a][b] + v[a] * c[b] as f64 / nf);
                    if rate > 0.0 {
                        let mut d = c.clone();
                        d[a] -= 1;
                        d[b] += 1;
                        generator[ic][index(&d)] += rate;
                        generator[ic][ic] -= rate;
                    }
                }
            }
        }
        let killing = states
            .iter()
            .map(|c| c.iter().zip(v).map(|(&k, x)| k as f64 * x).sum::<f64>() / nf)
            .collect();
        let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
        let initial = states
            .iter()
            .map(|c| {
                fact(n) / c.iter().map(|&k| fact(k)).product::<f64>()
                    * c.iter().zip(eta0).map(|(&k, p)| p.powi(k as i32)).product::<f64>()
            })
            .collect();
        Self {
            states,
            generator,
            killing,
            initial,
            n,
        }
    }

    fn empirical(&self, f: &[f64]) -> Vec<f64> {
        self.states
            .iter()
            .map(|c| c.iter().zip(f).map(|(&k, v)| k as f64 * v).sum::<f64>() / self.n as f64)
            .collect()
    }

    /// `E η^N_t(f)`.
    fn mean_eta(&self, f: &[f64], t: f64) -> f64 {
        dot(&row_times(&self.initial, &expm_taylor(&scale(&self.generator, t))), &self.empirical(f))
    }

    /// `E γ^N_t(f)`.
    fn mean_gamma(&self, f: &[f64], t: f64) -> f64 {
        let mut a = self.generator.clone();
        for (i, k) in self.killing.iter().enumerate() {
            a[i][i] -= k;
        }
        dot(&row_times(&self.initial, &expm_taylor(&scale(&a, t))), &self.empirical(f))
    }
}

fn model(rates: &Mat, v: &[f64], bound: f64, eta0: &[f64]) -> FiniteStateModel {
    FiniteStateModel::new(rates.clone(), FinitePotential::Table(v.to_vec()), bound, eta0.to_vec()).unwrap()
}

#[test]
fn count_chain_is_unbiased_for_gamma() {
    let (rates, v, bound, eta0) = three_state();
    let m = model(&rates, &v, bound, &eta0);
    let f = [1.0, -0.5, 2.0];
    for n in [1, 2, 3, 6] {
        let chain = CountChain::new(&rates, &v, &eta0, n);
        let exact = exact_gamma(&m, 1.2, &f).unwrap();
        let mean = chain.mean_gamma(&f, 1.2);
        assert!((mean - exact).abs() < 1e-10, "N = {n}: {mean} vs {exact}");
    }
}

/// Replica means of `η^N_t(f)`, `γ^N_t(f)` and `γ^N_t(1)`.
fn replica_means(
    m: &FiniteStateModel,
    n: usize,
    t: f64,
    f: &[f64],
    replicas: usize,
    seed: u64,
    ring_driven: Option<f64>,
) -> [Moments; 3] {
    let streams = Streams::new(seed);
    let mut out: [Moments; 3] = Default::default();
    for r in 0..replicas {
        let mut rng = streams.rng(r);
        let mut e = init_ensemble(m, n, &mut rng).unwrap();
        match ring_driven {
            Some(dt) => advance_ring_driven(m, &mut e, t, dt, &mut rng).unwrap(),
            None => advance_uniformized(m, &mut e, t, &mut rng).unwrap(),
        }
        out[0].push(empirical_expectation(&e, |&x| f[x]));
        out[1].push(unnormalized_expectation(&e, |&x| f[x]));
        out[2].push(gamma_normalizer(&e));
    }
    out
}

fn check_against_chain(ring_driven: Option<f64>, replicas: usize, seed: u64) {
    let (rates, v, bound, eta0) = three_state();
    let m = model(&rates, &v, bound, &eta0);
    let f = [1.0, -0.5, 2.0];
    let (n, t) = (3, 1.0);
    let chain = CountChain::new(&rates, &v, &eta0, n);
    let expected = [chain.mean_eta(&f, t), chain.mean_gamma(&f, t), chain.mean_gamma(&[1.0; 3], t)];
    let got = replica_means(&m, n, t, &f, replicas, seed, ring_driven);
    for (e, g) in expected.iter().zip(&got) {
        let est = g.estimate();
        assert!((est.value - e).abs() < 4.0 * est.se, "{} ± {} vs {e}", est.value, est.se);
    }
}

#[test]
fn uniformized_advance_matches_count_chain() {
    check_against_chain(None, 40_000, 11);
}

#[test]
fn ring_driven_advance_matches_count_chain() {
    check_against_chain(Some(0.002), 20_000, 12);
}

#[test]
fn small_n_bias_is_visible() {
    // E η^N_t(f) differs from η_t(f) at N = 2; the chain sees it
    let (rates, v, bound, eta0) = three_state();
    let m = model(&rates, &v, bound, &eta0);
    let f = [1.0, 0.0, 0.0];
    let exact = fkpart::models::exact_eta(&m, 1.0, &f).unwrap();
    let chain = CountChain::new(&rates, &v, &eta0, 2);
    assert!((chain.mean_eta(&f, 1.0) - exact).abs() > 1e-3);
    let large = CountChain::new(&rates, &v, &eta0, 12);
    assert!((large.mean_eta(&f, 1.0) - exact).abs() < (chain.mean_eta(&f, 1.0) - exact).abs());
}

#[test]
fn uniformized_and_ring_driven_agree_in_law() {
    let (rates, v, bound, eta0) = three_state();
    let m = model(&rates, &v, bound, &eta0);
    let f = [0.0, 1.0, std::f64::consts::SQRT_2];
    let (n, t, r) = (20, 1.0, 3000);
    let a = replica_values(&m, n, t, r, 21, None, &f);
    let b = replica_values(&m, n, t, r, 22, Some(0.01), &f);
    let (_, p) = ks_two_sample(&a, &b).unwrap();
    assert!(p > 0.01, "KS p = {p}");
}

fn replica_values(
    m: &FiniteStateModel,
    n: usize,
    t: f64,
    replicas: usize,
    seed: u64,
    ring_driven: Option<f64>,
    f: &[f64],
) -> Vec<f64> {
    let streams = Streams::new(seed);
    (0..replicas)
        .map(|r| {
            let mut rng = streams.rng(r);
            let mut e = init_ensemble(m, n, &mut rng).unwrap();
            match ring_driven {
                Some(dt) => advance_ring_driven(m, &mut e, t, dt, &mut rng).unwrap(),
                None => advance_uniformized(m, &mut e, t, &mut rng).unwrap(),
            }
            empirical_expectation(&e, |&x| f[x])
        })
        .collect()
}

#[test]
fn particles_are_exchangeable() {
    let (rates, v, bound, eta0) = three_state();
    let m = model(&rates, &v, bound, &eta0);
    let f = [0.0, 1.0, std::f64::consts::SQRT_2];
    let n = 10;
    let streams = Streams::new(5);
    let (mut first, mut last) = (Vec::new(), Vec::new());
    for r in 0..4000 {
        let mut rng = streams.rng(r);
        let e = simulate(&m, n, 1.0, 0.05, &mut rng).unwrap();
        first.push(f[e.particles()[0]]);
        last.push(f[e.particles()[n - 1]]);
    }
    let (_, p) = ks_two_sample(&first, &last).unwrap();
    assert!(p > 0.01, "KS p = {p}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reruns_are_bit_identical(seed in any::<u64>(), n in 1usize..30) {
        let (rates, v, bound, eta0) = three_state();
        let m = model(&rates, &v, bound, &eta0);
        let run = || simulate(&m, n, 0.8, 0.05, &mut Streams::new(seed).rng(0)).unwrap();
        let (a, b) = (run(), run());
        prop_assert_eq!(a.particles(), b.particles());
        prop_assert_eq!(a.potential_integral().to_bits(), b.potential_integral().to_bits());
    }

    #[test]
    fn gamma_factorizes(seed in any::<u64>(), n in 1usize..30) {
        let (rates, v, bound, eta0) = three_state();
        let m = model(&rates, &v, bound, &eta0);
        let e = simulate(&m, n, 1.0, 0.05, &mut Streams::new(seed).rng(0)).unwrap();
        let f = [0.25, -1.0, 3.0];
        let lhs = unnormalized_expectation(&e, |&x| f[x]);
        let rhs = gamma_normalizer(&e) * empirical_expectation(&e, |&x| f[x]);
        prop_assert!((lhs - rhs).abs() <= 1e-15 * (1.0 + rhs.abs()));
    }

    #[test]
    fn chain_gamma_is_unbiased_on_random_models(
        off in prop::collection::vec(0.0f64..1.5, 2),
        v in prop::collection::vec(0.0f64..1.0, 2),
        p0 in 0.05f64..0.95,
        n in 1usize..6,
        t in 0.1f64..2.0,
    ) {
        let rates = vec![vec![-off[0], off[0]], vec![off[1], -off[1]]];
        let eta0 = vec![p0, 1.0 - p0];
        let m = model(&rates, &v, 1.0, &eta0);
        let chain = CountChain::new(&rates, &v, &eta0, n);
        let f = [1.0, -2.0];
        let exact = exact_gamma(&m, t, &f).unwrap();
        prop_assert!((chain.mean_gamma(&f, t) - exact).abs() < 1e-10);
    }
}
