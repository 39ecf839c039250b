//! The auxiliary system against exact forward operators on `S^q`.

mod common;

use common::*;
use fkpart::asymptotics::{clt_covariance, laurent_fit, wick_delta, EstimateSeries, SeriesEntry};
use fkpart::auxiliary::{
    derivative_coefficients, derivative_formula, estimate_etk, q_measure_mixture, sample_unconditioned_path,
    w_kernel, wick_conditioned, FlowFallback, SamplerConfig, DEFAULT_TRUNCATION,
};
use fkpart::harness::ks_two_sample;
use fkpart::models::{exact_flow, FinitePotential, FiniteStateModel};
use fkpart::rng::Streams;
use fkpart::simulate::{empirical_expectation, simulate};
use fkpart::statistics::{Kernel, ScalarFn};
use proptest::prelude::*;

const T: f64 = 1.0;
const DT: f64 = 0.05;

fn model(rates: &Mat, v: &[f64], bound: f64, eta0: &[f64]) -> FiniteStateModel {
    FiniteStateModel::new(rates.clone(), FinitePotential::Table(v.to_vec()), bound, eta0.to_vec()).unwrap()
}

fn cfg(samples: usize) -> SamplerConfig {
    SamplerConfig::new(samples, DT).unwrap()
}

fn sup(f: &[f64]) -> f64 {
    f.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn within(est: fkpart::estimate::Estimate, exact: f64, z: f64) -> bool {
    (est.value - exact).abs() <= z * est.se + 1e-12
}

#[test]
fn van_loan_agrees_with_quadrature() {
    let (rates, v, bound, eta0) = three_state();
    let aux = AuxOracle::new(&rates, &v, bound, &eta0, 2);
    let table = product_table(&[1.0, -0.4, 0.7], &[0.2, 1.0, -1.5]);
    let vl = aux.etk(&table, T, 1);
    let quad = aux.e1_quadrature(&table, T, 400);
    assert!((vl - quad).abs() < 1e-10, "{vl} vs {quad}");
}

#[test]
fn zero_rings_factorize_into_flows() {
    let (rates, v, bound, eta0) = three_state();
    let aux = AuxOracle::new(&rates, &v, bound, &eta0, 2);
    let (f, g) = ([1.0, -0.4, 0.7], [0.2, 1.0, -1.5]);
    let gamma = gamma_vector(&rates, &v, &eta0, T);
    let e0 = aux.etk(&product_table(&f, &g), T, 0);
    assert!((e0 - dot(&gamma, &f) * dot(&gamma, &g)).abs() < 1e-12);
}

#[test]
fn pair_estimates_match_exact_values() {
    let (rates, v, bound, eta0) = three_state();
    let m = model(&rates, &v, bound, &eta0);
    let aux = AuxOracle::new(&rates, &v, bound, &eta0, 2);
    let (f, g) = (vec![1.0, -0.4, 0.7], vec![0.2, 1.0, -1.5]);
    let kernel = Kernel::product(
        vec![ScalarFn::from_table(f.clone()), ScalarFn::from_table(g.clone())],
        sup(&f) * sup(&g),
    )
    .unwrap();
    let table = product_table(&f, &g);
    for k in 0..=3 {
        let exact = aux.etk(&table, T, k);
        let est = estimate_etk(&m, &kernel, T, k, cfg(100_000), Streams::new(40).slot(k as u16)).unwrap();
        assert!(within(est, exact, 4.0), "k = {k}: {} ± {} vs {exact}", est.value, est.se);
    }
}

#[test]
fn triple_kernel_estimates_match_exact_values() {
    let (rates, v, bound, eta0) = two_state();
    let m = model(&rates, &v, bound, &eta0);
    let aux = AuxOracle::new(&rates, &v, bound, &eta0, 3);
    // symmetric table on {0,1}^3, indexed by the number of ones
    let by_ones = [0.5, -1.0, 2.0, 0.25];
    let table: Vec<f64> = tuples(2, 3).iter().map(|x| by_ones[x.iter().sum::<usize>()]).collect();
    let kernel = Kernel::from_table(3, 2, table.clone()).unwrap();
    for k in 0..=2 {
        let exact = aux.etk(&table, T, k);
        let est = estimate_etk(&m, &kernel, T, k, cfg(100_000), Streams::new(41).slot(k as u16)).unwrap();
        assert!(within(est, exact, 4.0), "k = {k}: {} ± {} vs {exact}", est.value, est.se);
    }
}

fn centered_two_state() -> (FiniteStateModel, AuxOracle, Vec<f64>) {
    let (rates, v, bound, eta0) = two_state();
    let m = model(&rates, &v, bound, &eta0);
    let eta = exact_flow(&m, T).unwrap().eta_vector;
    let f = centered(&[1.0, -0.5], &eta);
    let aux = AuxOracle::new(&rates, &v, bound, &eta0, 4);
    (m, aux, f)
}

#[test]
fn centered_kernels_vanish_below_half_order() {
    let (m, aux, f) = centered_two_state();
    let table = power_table(&f, 4);
    let kernel = Kernel::power(ScalarFn::from_table(f.clone()).centered(true), 4, sup(&f).powi(4)).unwrap();
    for k in 0..2 {
        let exact = aux.etk(&table, T, k);
        assert!(exact.abs() < 1e-12, "k = {k}: {exact}");
        let est = estimate_etk(&m, &kernel, T, k, cfg(50_000), Streams::new(42).slot(k as u16)).unwrap();
        assert!(within(est, 0.0, 3.0), "k = {k}: {} ± {}", est.value, est.se);
    }
    assert!(aux.etk(&table, T, 2).abs() > 1e-6);
}

#[test]
fn wick_conditioning_matches_ring_expansion() {
    let (m, aux, f) = centered_two_state();
    let table = power_table(&f, 4);
    let kernel = Kernel::power(ScalarFn::from_table(f.clone()).centered(true), 4, sup(&f).powi(4)).unwrap();
    let coeffs = derivative_coefficients(4, m_bound(&m), T, 2);
    let exact: f64 = coeffs.iter().enumerate().map(|(k, c)| c * aux.etk(&table, T, k)).sum();
    let wick = wick_conditioned(&m, &kernel, T, cfg(200_000), Streams::new(43)).unwrap();
    assert!(within(wick.derivative, exact, 4.0), "{} ± {} vs {exact}", wick.derivative.value, wick.derivative.se);
    assert!(within(wick.acceptance, 1.0 / 6.0, 4.0));
    let formula = derivative_formula(&m, &kernel, T, 2, cfg(200_000), Streams::new(44)).unwrap();
    let se = (wick.derivative.se.powi(2) + formula.se.powi(2)).sqrt();
    assert!((wick.derivative.value - formula.value).abs() <= 3.0 * se);
}

fn m_bound(m: &FiniteStateModel) -> f64 {
    use fkpart::models::FeynmanKacModel;
    m.potential_bound()
}

#[test]
fn derivative_formula_matches_exact_coefficients() {
    let (rates, v, bound, eta0) = three_state();
    let m = model(&rates, &v, bound, &eta0);
    let aux = AuxOracle::new(&rates, &v, bound, &eta0, 2);
    let f = vec![1.0, -0.4, 0.7];
    let table = power_table(&f, 2);
    let kernel = Kernel::power(ScalarFn::from_table(f.clone()), 2, sup(&f).powi(2)).unwrap();
    for r in 1..=2 {
        let coeffs = derivative_coefficients(2, bound, T, r);
        let exact: f64 = coeffs.iter().enumerate().map(|(k, c)| c * aux.etk(&table, T, k)).sum();
        let est = derivative_formula(&m, &kernel, T, r, cfg(100_000), Streams::new(45).slot(r as u16)).unwrap();
        assert!(within(est, exact, 4.0), "r = {r}: {} ± {} vs {exact}", est.value, est.se);
    }
}

#[test]
fn mixture_matches_unconditioned_generator() {
    let (rates, v, bound, eta0) = three_state();
    let m = model(&rates, &v, bound, &eta0);
    let f = vec![1.0, -0.4, 0.7];
    for q in [2usize, 3] {
        let aux = AuxOracle::new(&rates, &v, bound, &eta0, q);
        let table = power_table(&f, q);
        let kernel = Kernel::power(ScalarFn::from_table(f.clone()), q, sup(&f).powi(q as i32)).unwrap();
        for n in [10, 50] {
            let exact = aux.q_measure(&table, T, bound, n);
            let mix = q_measure_mixture(&m, &kernel, T, n, None, DEFAULT_TRUNCATION, cfg(100_000), Streams::new(46).n(n))
                .unwrap();
            assert!(within(mix.estimate, exact, 4.0), "q = {q}, N = {n}: {:?} vs {exact}", mix.estimate);
        }
    }
}

#[test]
fn laurent_fit_of_exact_series_recovers_first_derivative() {
    let (rates, v, bound, eta0) = three_state();
    let aux = AuxOracle::new(&rates, &v, bound, &eta0, 2);
    let table = power_table(&[1.0, -0.4, 0.7], 2);
    let entries = (0..10)
        .map(|i| {
            let n = 40 + 40 * i;
            SeriesEntry {
                n,
                estimate: aux.q_measure(&table, T, bound, n),
                se: 0.0,
                replicas: 0,
            }
        })
        .collect();
    let fit = laurent_fit(&EstimateSeries::new("exact", entries).unwrap(), 4).unwrap();
    let coeffs = derivative_coefficients(2, bound, T, 1);
    let d1: f64 = coeffs.iter().enumerate().map(|(k, c)| c * aux.etk(&table, T, k)).sum();
    let d0 = aux.etk(&table, T, 0);
    assert!((fit.coefficients[0] - d0).abs() < 1e-9, "{} vs {d0}", fit.coefficients[0]);
    assert!((fit.coefficients[1] - d1).abs() < 1e-5 * (1.0 + d1.abs()), "{} vs {d1}", fit.coefficients[1]);
}

/// `W_t(f ⊗ g)` from the exact one-ring expectation.
fn exact_w(aux: &AuxOracle, f: &[f64], g: &[f64], bound: f64, mass: f64) -> f64 {
    2.0 * bound * T / (mass * mass) * aux.etk(&product_table(f, g), T, 1)
}

#[test]
fn w_kernel_and_covariance_match_exact_values() {
    let (rates, v, bound, eta0) = three_state();
    let m = model(&rates, &v, bound, &eta0);
    let flow = exact_flow(&m, T).unwrap();
    let aux = AuxOracle::new(&rates, &v, bound, &eta0, 2);
    let f = centered(&[1.0, 0.0, std::f64::consts::SQRT_2], &flow.eta_vector);
    let g = centered(&[0.0, 1.0, -0.5], &flow.eta_vector);
    let sf = ScalarFn::from_table(f.clone()).centered(true);
    let sg = ScalarFn::from_table(g.clone()).centered(true);
    let w = w_kernel(&m, &sf, &sg, sup(&f) * sup(&g), T, cfg(200_000), FlowFallback::default(), Streams::new(47))
        .unwrap();
    let exact = exact_w(&aux, &f, &g, bound, flow.gamma_mass);
    assert!(w.centered);
    assert!(within(w.w, exact, 4.0), "{:?} vs {exact}", w.w);

    let cov = clt_covariance(
        &m,
        &[sf, sg],
        &[sup(&f), sup(&g)],
        T,
        cfg(200_000),
        FlowFallback::default(),
        Streams::new(48),
    )
    .unwrap();
    let fs = [&f, &g];
    for i in 0..2 {
        for j in 0..2 {
            let gram: f64 = (0..3).map(|s| flow.eta_vector[s] * fs[i][s] * fs[j][s]).sum();
            let k = gram + exact_w(&aux, fs[i], fs[j], bound, flow.gamma_mass);
            assert!((cov.gram[(i, j)] - gram).abs() < 1e-12);
            assert!(
                (cov.k[(i, j)] - k).abs() <= 4.0 * cov.se[(i, j)] + 1e-12,
                "K({i},{j}) = {} ± {} vs {k}",
                cov.k[(i, j)],
                cov.se[(i, j)]
            );
        }
    }
}

#[test]
fn wick_delta_sums_pairings() {
    let (rates, v, bound, eta0) = three_state();
    let m = model(&rates, &v, bound, &eta0);
    let flow = exact_flow(&m, T).unwrap();
    let aux = AuxOracle::new(&rates, &v, bound, &eta0, 2);
    let raw = [[1.0, 0.0, 0.3], [0.0, 1.0, 0.0], [0.5, -1.0, 2.0], [0.0, 0.0, 1.0]];
    let fs: Vec<Vec<f64>> = raw.iter().map(|r| centered(r, &flow.eta_vector)).collect();
    let w = |i: usize, j: usize| exact_w(&aux, &fs[i], &fs[j], bound, flow.gamma_mass);
    let exact = w(0, 1) * w(2, 3) + w(0, 2) * w(1, 3) + w(0, 3) * w(1, 2);
    let scalars: Vec<_> = fs.iter().map(|f| ScalarFn::from_table(f.clone()).centered(true)).collect();
    let bounds: Vec<f64> = fs.iter().map(|f| sup(f)).collect();
    let delta = wick_delta(&m, &scalars, &bounds, T, cfg(200_000), FlowFallback::default(), Streams::new(49)).unwrap();
    assert_eq!(delta.pair_kernels.len(), 6);
    assert!(within(delta.estimate, exact, 4.0), "{:?} vs {exact}", delta.estimate);
}

#[test]
fn auxiliary_system_with_q_equal_n_matches_genetic_law() {
    let (rates, v, bound, eta0) = three_state();
    let m = model(&rates, &v, bound, &eta0);
    let f = [0.0, 1.0, std::f64::consts::SQRT_2];
    let n = 6;
    let runs = 4000;
    let aux_streams = Streams::new(50);
    let gen_streams = Streams::new(51);
    let mut aux = Vec::with_capacity(runs);
    let mut gen = Vec::with_capacity(runs);
    for r in 0..runs {
        let path = sample_unconditioned_path(&m, n, n, T, DT, &mut aux_streams.rng(r)).unwrap();
        aux.push(path.final_states.iter().map(|&x| f[x]).sum::<f64>() / n as f64);
        let e = simulate(&m, n, T, DT, &mut gen_streams.rng(r)).unwrap();
        gen.push(empirical_expectation(&e, |&x| f[x]));
    }
    let (_, p) = ks_two_sample(&aux, &gen).unwrap();
    assert!(p > 0.01, "KS p = {p}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn centered_pair_mixture_respects_wick_bound(
        off in prop::collection::vec(0.1f64..1.5, 2),
        v in prop::collection::vec(0.0f64..1.0, 2),
        p0 in 0.1f64..0.9,
        seed in 0u64..1000,
    ) {
        // N |Q^N(F)| ≤ q(q-1) V_inf t / 1! · ‖F‖ for q = 2
        let rates = vec![vec![-off[0], off[0]], vec![off[1], -off[1]]];
        let m = model(&rates, &v, 1.0, &[p0, 1.0 - p0]);
        let eta = exact_flow(&m, T).unwrap().eta_vector;
        let f = centered(&[1.0, -1.0], &eta);
        let norm = sup(&f).powi(2);
        let kernel = Kernel::power(ScalarFn::from_table(f).centered(true), 2, norm).unwrap();
        let n = 200;
        let mix = q_measure_mixture(&m, &kernel, T, n, None, DEFAULT_TRUNCATION, cfg(20_000), Streams::new(seed).n(n))
            .unwrap();
        let scaled = n as f64 * mix.estimate.value.abs();
        let rel = mix.estimate.se / mix.estimate.value.abs().max(f64::MIN_POSITIVE);
        prop_assert!(scaled <= 2.0 * T * norm * (1.0 + 3.0 * rel), "N|Q| = {}", scaled);
    }

    #[test]
    fn conditional_law_ignores_particle_count(seed in 0u64..1000, k in 0usize..3) {
        // the conditional sampler has no N argument; two seeds agree in mean
        let (rates, v, bound, eta0) = two_state();
        let m = model(&rates, &v, bound, &eta0);
        let kernel = Kernel::power(ScalarFn::from_table(vec![1.0, -0.5]), 2, 1.0).unwrap();
        let a = estimate_etk(&m, &kernel, T, k, cfg(20_000), Streams::new(seed)).unwrap();
        let b = estimate_etk(&m, &kernel, T, k, cfg(20_000), Streams::new(seed + 1000)).unwrap();
        let se = (a.se.powi(2) + b.se.powi(2)).sqrt();
        prop_assert!((a.value - b.value).abs() <= 4.0 * se);
    }
}
