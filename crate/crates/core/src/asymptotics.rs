//! Laurent coefficients in `1/N`, Wick pairing sums, CLT covariances and
//! Hermite limits.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::auxiliary::{w_kernel, FlowFallback, SamplerConfig, WEstimate};
use crate::error::{domain, Error, Result};
use crate::estimate::{Estimate, Moments};
use crate::models::FeynmanKacModel;
use crate::rng::Streams;
use crate::simulate;
use crate::statistics::{factorial, pair_partitions, ScalarFn};

/// One point of a per-`N` Monte Carlo series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesEntry {
    pub n: usize,
    pub estimate: f64,
    pub se: f64,
    pub replicas: usize,
}

/// Estimates of `Θ^N` over a grid of particle counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSeries {
    pub label: String,
    entries: Vec<SeriesEntry>,
}

impl EstimateSeries {
    pub fn new(label: impl Into<String>, entries: Vec<SeriesEntry>) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].n >= w[1].n) {
            return Err(domain("series N values must be strictly increasing"));
        }
        if entries.iter().any(|e| !(e.se >= 0.0) || !e.estimate.is_finite()) {
            return Err(domain("series entries need finite estimates and nonnegative SEs"));
        }
        Ok(Self {
            label: label.into(),
            entries,
        })
    }

    pub fn entries(&self) -> &[SeriesEntry] {
        &self.entries
    }

    /// Multiplies each entry (and its SE) by `N^p`.
    pub fn scaled_by_power(&self, p: f64) -> Self {
        Self {
            label: format!("{} x N^{p}", self.label),
            entries: self
                .entries
                .iter()
                .map(|e| {
                    let s = (e.n as f64).powf(p);
                    SeriesEntry {
                        estimate: e.estimate * s,
                        se: e.se * s,
                        ..*e
                    }
                })
                .collect(),
        }
    }

    /// `∂Θ^N = N (Θ^N - Θ)` for each entry.
    pub fn discrete_derivative(&self, limit: f64) -> Vec<(usize, Estimate)> {
        self.entries
            .iter()
            .map(|e| {
                let n = e.n as f64;
                (
                    e.n,
                    Estimate {
                        value: n * (e.estimate - limit),
                        se: n * e.se,
                        samples: e.replicas,
                    },
                )
            })
            .collect()
    }
}

/// Weighted least squares fit of `Θ^N ≈ Σ_{l ≤ r} c_l / N^l`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaurentFit {
    pub coefficients: Vec<f64>,
    pub ses: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub condition: f64,
    /// Weighted residual sum of squares and its degrees of freedom.
    pub chi2: f64,
    pub dof: usize,
}

impl LaurentFit {
    pub fn coefficient(&self, l: usize) -> Estimate {
        Estimate {
            value: self.coefficients[l],
            se: self.ses[l],
            samples: 0,
        }
    }
}

/// Largest accepted condition number of the (weighted) design.
pub const MAX_CONDITION: f64 = 1e12;

/// Fits `c_0, .., c_r` against the basis `{1, 1/N, .., 1/N^r}` with
/// weights `1/SE²`. A series with every SE zero is fitted by ordinary
/// least squares and reported with zero covariance.
pub fn laurent_fit(series: &EstimateSeries, r: usize) -> Result<LaurentFit> {
    let entries = series.entries();
    let m = entries.len();
    if m < r + 2 {
        return Err(domain(format!(
            "an order-{r} fit needs at least {} N values, got {m}",
            r + 2
        )));
    }
    let exact = entries.iter().all(|e| e.se == 0.0);
    if !exact && entries.iter().any(|e| e.se == 0.0) {
        return Err(domain("cannot mix zero and positive standard errors"));
    }
    let p = r + 1;
    let x = DMatrix::from_fn(m, p, |i, l| {
        let w = if exact { 1.0 } else { 1.0 / entries[i].se };
        w * (entries[i].n as f64).powi(-(l as i32))
    });
    let y = DVector::from_fn(m, |i, _| {
        let w = if exact { 1.0 } else { 1.0 / entries[i].se };
        w * entries[i].estimate
    });
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::FitDegenerate { condition });
    }
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    // β = V Σ^{-1} Uᵀ y, Cov = V Σ^{-2} Vᵀ
    let uty = u.transpose() * &y;
    let mut beta = DVector::zeros(p);
    let mut cov = DMatrix::zeros(p, p);
    for k in 0..p {
        let s = svd.singular_values[k];
        let v = vt.row(k).transpose();
        beta += &v * (uty[k] / s);
        cov += &v * v.transpose() / (s * s);
    }
    let resid = &x * &beta - &y;
    let chi2 = resid.norm_squared();
    if exact {
        cov.fill(0.0);
    }
    let ses = (0..p).map(|l| cov[(l, l)].max(0.0).sqrt()).collect();
    Ok(LaurentFit {
        coefficients: beta.iter().copied().collect(),
        ses,
        covariance: cov,
        condition,
        chi2,
        dof: m - p,
    })
}

/// `Δ_{q/2}(F) = Σ_{pairings} Π_{{i,j}} W_t(f_i ⊗ f_j)` with a
/// delta-method standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct WickDelta {
    pub estimate: Estimate,
    /// One independent estimate per unordered pair `i < j`.
    pub pair_kernels: Vec<((usize, usize), WEstimate)>,
    pub centered: bool,
}

/// Assembles `Δ_{q/2}` from independent `W_t` estimates for each pair.
#[allow(clippy::too_many_arguments)]
pub fn wick_delta<M: FeynmanKacModel>(
    model: &M,
    fs: &[ScalarFn<M::State>],
    bounds: &[f64],
    t: f64,
    cfg: SamplerConfig,
    fallback: FlowFallback,
    streams: Streams,
) -> Result<WickDelta> {
    let q = fs.len();
    if q == 0 || q % 2 != 0 {
        return Err(domain(format!("Wick pairing needs an even number of functions, got {q}")));
    }
    if bounds.len() != q {
        return Err(domain("one bound per function is required"));
    }
    let mut pair_kernels = Vec::new();
    let mut slot = 0u16;
    for i in 0..q {
        for j in i + 1..q {
            let w = w_kernel(
                model,
                &fs[i],
                &fs[j],
                bounds[i] * bounds[j],
                t,
                cfg,
                fallback,
                streams.sub_slot(slot),
            )?;
            slot += 2;
            pair_kernels.push(((i, j), w));
        }
    }
    let centered = pair_kernels.iter().all(|(_, w)| w.centered);
    if model.exact_flow(t).is_some() && !centered {
        return Err(Error::InvariantViolation(
            "Wick pairing needs functions centered under the exact flow".into(),
        ));
    }
    let lookup = |a: usize, b: usize| -> &WEstimate {
        let key = (a.min(b), a.max(b));
        &pair_kernels.iter().find(|(p, _)| *p == key).expect("every pair estimated").1
    };
    let pairings = pair_partitions(q)?;
    let mut value = 0.0;
    let mut grad: Vec<f64> = vec![0.0; pair_kernels.len()];
    for pairing in &pairings {
        let vals: Vec<f64> = pairing.iter().map(|&(a, b)| lookup(a, b).w.value).collect();
        value += vals.iter().product::<f64>();
        for (slot, &(a, b)) in pairing.iter().enumerate() {
            let others: f64 = vals
                .iter()
                .enumerate()
                .filter(|&(s, _)| s != slot)
                .map(|(_, v)| v)
                .product();
            let key = (a.min(b), a.max(b));
            let idx = pair_kernels.iter().position(|(p, _)| *p == key).expect("pair exists");
            grad[idx] += others;
        }
    }
    let var: f64 = grad
        .iter()
        .zip(&pair_kernels)
        .map(|(g, (_, w))| (g * w.w.se).powi(2))
        .sum();
    Ok(WickDelta {
        estimate: Estimate {
            value,
            se: var.sqrt(),
            samples: pair_kernels.iter().map(|(_, w)| w.w.samples).sum(),
        },
        pair_kernels,
        centered,
    })
}

/// Theoretical CLT covariance `K(i,j) = η_t(f_i f_j) + W_t(f_i ⊗ f_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTheory {
    pub k: DMatrix<f64>,
    pub se: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub centered: bool,
}

/// Computes `K` for centered `f_1, .., f_d`. The Gram part is exact when
/// the model has an oracle and simulated otherwise.
#[allow(clippy::too_many_arguments)]
pub fn clt_covariance<M: FeynmanKacModel>(
    model: &M,
    fs: &[ScalarFn<M::State>],
    bounds: &[f64],
    t: f64,
    cfg: SamplerConfig,
    fallback: FlowFallback,
    streams: Streams,
) -> Result<CovarianceTheory> {
    let d = fs.len();
    if d == 0 || bounds.len() != d {
        return Err(domain("need at least one function and one bound per function"));
    }
    let mut gram = DMatrix::zeros(d, d);
    let mut gram_se = DMatrix::zeros(d, d);
    match (model.states(), model.exact_flow(t)) {
        (Some(states), Some(flow)) => {
            let flow = flow?;
            for i in 0..d {
                for j in 0..d {
                    gram[(i, j)] = states
                        .iter()
                        .zip(&flow.eta_vector)
                        .map(|(s, p)| p * fs[i].eval(s) * fs[j].eval(s))
                        .sum();
                }
            }
        }
        _ => {
            let mut acc = vec![Moments::default(); d * d];
            let gs = streams.sub_slot(4000);
            for r in 0..fallback.replicas.max(2) {
                let mut rng = gs.n(fallback.particles).rng(r);
                let e = simulate::simulate(model, fallback.particles, t, cfg.dt, &mut rng)?;
                for i in 0..d {
                    for j in 0..d {
                        acc[i * d + j].push(simulate::empirical_expectation(&e, |x| fs[i].eval(x) * fs[j].eval(x)));
                    }
                }
            }
            for i in 0..d {
                for j in 0..d {
                    let e = acc[i * d + j].estimate();
                    gram[(i, j)] = e.value;
                    gram_se[(i, j)] = e.se;
                }
            }
        }
    }
    let mut w = DMatrix::zeros(d, d);
    let mut w_se = DMatrix::zeros(d, d);
    let mut centered = true;
    let mut slot = 0u16;
    for i in 0..d {
        for j in i..d {
            let est = w_kernel(model, &fs[i], &fs[j], bounds[i] * bounds[j], t, cfg, fallback, streams.sub_slot(slot))?;
            slot += 2;
            centered &= est.centered;
            w[(i, j)] = est.w.value;
            w[(j, i)] = est.w.value;
            w_se[(i, j)] = est.w.se;
            w_se[(j, i)] = est.w.se;
        }
    }
    let k = &gram + &w;
    let se = gram_se.zip_map(&w_se, |a: f64, b: f64| a.hypot(b));
    Ok(CovarianceTheory {
        k,
        se,
        gram,
        w,
        centered,
    })
}

/// Sample covariance of fluctuation vectors with per-entry standard
/// errors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCovariance {
    pub k_hat: DMatrix<f64>,
    pub se: DMatrix<f64>,
    pub means: Vec<f64>,
    pub replicas: usize,
}

/// `rows[r][i]` is the `i`-th fluctuation of replica `r`.
pub fn sample_covariance(rows: &[Vec<f64>]) -> Result<SampleCovariance> {
    let r = rows.len();
    if r < 2 {
        return Err(domain("sample covariance needs at least 2 replicas"));
    }
    let d = rows[0].len();
    if rows.iter().any(|row| row.len() != d) {
        return Err(domain("ragged fluctuation matrix"));
    }
    let means: Vec<f64> = (0..d).map(|i| rows.iter().map(|row| row[i]).sum::<f64>() / r as f64).collect();
    let mut k_hat = DMatrix::zeros(d, d);
    let mut se = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let prods: Moments = rows.iter().map(|row| (row[i] - means[i]) * (row[j] - means[j])).collect();
            let c = prods.mean() * r as f64 / (r - 1) as f64;
            let s = prods.estimate().se;
            k_hat[(i, j)] = c;
            k_hat[(j, i)] = c;
            se[(i, j)] = s;
            se[(j, i)] = s;
        }
    }
    Ok(SampleCovariance {
        k_hat,
        se,
        means,
        replicas: r,
    })
}

/// Theory against sample, with marginal normality p-values.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub k_hat: DMatrix<f64>,
    pub k_theory: DMatrix<f64>,
    pub k_hat_se: DMatrix<f64>,
    pub k_theory_se: DMatrix<f64>,
    pub normality_p: Vec<f64>,
}

impl CovarianceReport {
    /// Every entry within `rel` relative error or `z` combined SEs.
    pub fn entrywise_agreement(&self, rel: f64, z: f64) -> bool {
        let d = self.k_hat.nrows();
        (0..d).all(|i| {
            (0..d).all(|j| {
                let a = self.k_hat[(i, j)];
                let b = self.k_theory[(i, j)];
                let diff = (a - b).abs();
                diff <= rel * b.abs() || diff <= z * self.k_hat_se[(i, j)].hypot(self.k_theory_se[(i, j)])
            })
        })
    }
}

/// Probabilists' Hermite polynomial from its explicit expansion
/// `H_q(x) = Σ_k (-1)^k q! / (2^k (q-2k)! k!) x^{q-2k}`.
pub fn hermite(q: usize, x: f64) -> f64 {
    (0..=q / 2)
        .map(|k| {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sign * factorial(q) / (2f64.powi(k as i32) * factorial(q - 2 * k) * factorial(k))
                * x.powi((q - 2 * k) as i32)
        })
        .sum()
}

/// Gauss-Hermite nodes and weights for `E f(Z)`, `Z ~ N(0, 1)`, by the
/// Golub-Welsch eigenvalue method. Weights sum to one.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1 / total).collect(),
    )
}

/// Number of Gauss-Hermite nodes used for limit moments.
pub const HERMITE_NODES: usize = 64;

/// `E[H_q(Z)^m]` for `Z ~ N(0, s²)`.
pub fn hermite_limit_prediction(q: usize, variance: f64, m: u32) -> Result<f64> {
    if !(variance >= 0.0) {
        return Err(domain(format!("variance must be nonnegative, got {variance}")));
    }
    let s = variance.sqrt();
    let (nodes, weights) = gauss_hermite(HERMITE_NODES);
    Ok(nodes
        .iter()
        .zip(&weights)
        .map(|(x, w)| w * hermite(q, s * x).powi(m as i32))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use rand_distr::{Distribution, StandardNormal};

    fn series(ns: &[usize], f: impl Fn(f64) -> f64, se: f64) -> EstimateSeries {
        EstimateSeries::new(
            "synthetic",
            ns.iter()
                .map(|&n| SeriesEntry {
                    n,
                    estimate: f(n as f64),
                    se,
                    replicas: 1,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn exact_two_term_series() {
        let s = series(&[25, 50, 100, 200, 400], |n| 1.5 - 4.0 / n, 0.0);
        let fit = laurent_fit(&s, 1).unwrap();
        assert!((fit.coefficients[0] - 1.5).abs() < 1e-10);
        assert!((fit.coefficients[1] + 4.0).abs() < 1e-10);
    }

    #[test]
    fn constant_series() {
        let s = series(&[10, 20, 40, 80], |_| 0.7, 0.0);
        let fit = laurent_fit(&s, 2).unwrap();
        assert!((fit.coefficients[0] - 0.7).abs() < 1e-10);
        assert!(fit.coefficients[1].abs() < 1e-8 && fit.coefficients[2].abs() < 1e-6);
    }

    #[test]
    fn noisy_quadratic_series() {
        let mut rng = Streams::new(21).rng(0);
        let ns = [25, 50, 100, 200, 400, 800];
        let sd = 1e-3;
        let s = EstimateSeries::new(
            "noisy",
            ns.iter()
                .map(|&n| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let x = n as f64;
                    SeriesEntry {
                        n,
                        estimate: 2.0 + 3.0 / x + 0.5 / (x * x) + sd * z,
                        se: sd,
                        replicas: 1,
                    }
                })
                .collect(),
        )
        .unwrap();
        let fit = laurent_fit(&s, 2).unwrap();
        for (c, truth) in fit.coefficients.iter().zip([2.0, 3.0, 0.5]) {
            let l = fit.coefficients.iter().position(|v| v == c).unwrap();
            assert!((c - truth).abs() < 3.0 * fit.ses[l], "c{l} = {c} ± {}", fit.ses[l]);
        }
    }

    #[test]
    fn fit_needs_enough_points() {
        let s = series(&[10, 20], |_| 1.0, 0.1);
        assert!(laurent_fit(&s, 1).is_err());
    }

    #[test]
    fn ill_conditioned_fit() {
        let s = series(&[1_000_000, 1_000_001, 1_000_002, 1_000_003, 1_000_004], |_| 1.0, 0.1);
        assert!(matches!(laurent_fit(&s, 3), Err(Error::FitDegenerate { .. })));
    }

    #[test]
    fn hermite_values() {
        assert_eq!(hermite(2, 0.0), -1.0);
        assert_eq!(hermite(1, 0.37), 0.37);
        assert_eq!(hermite(3, 2.0), 2.0);
        assert_eq!(hermite(0, 5.0), 1.0);
    }

    #[test]
    fn hermite_recurrence() {
        for &x in &[-1.3, 0.0, 0.4, 2.2] {
            for n in 1..8 {
                let lhs = hermite(n + 1, x);
                let rhs = x * hermite(n, x) - n as f64 * hermite(n - 1, x);
                assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
            }
        }
    }

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite(HERMITE_NODES);
        let moment = |p: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert!((moment(0) - 1.0).abs() < 1e-12);
        assert!(moment(1).abs() < 1e-12);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!((moment(4) - 3.0).abs() < 1e-11);
        assert!((moment(8) - 105.0).abs() < 1e-8);
    }

    #[test]
    fn hermite_limit_moments() {
        assert!(hermite_limit_prediction(2, 1.0, 1).unwrap().abs() < 1e-12);
        assert!((hermite_limit_prediction(2, 1.0, 2).unwrap() - 2.0).abs() < 1e-11);
        assert!((hermite_limit_prediction(2, 1.0, 3).unwrap() - 8.0).abs() < 1e-10);
        assert!((hermite_limit_prediction(1, 2.5, 2).unwrap() - 2.5).abs() < 1e-11);
    }

    #[test]
    fn sample_covariance_of_known_rows() {
        let rows = vec![vec![1.0, 2.0], vec![-1.0, 0.0], vec![0.0, -2.0]];
        let c = sample_covariance(&rows).unwrap();
        assert!((c.k_hat[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((c.k_hat[(0, 1)] - 1.0).abs() < 1e-15);
        assert!((c.k_hat[(1, 1)] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn discrete_derivative_of_exact_series() {
        let s = series(&[10, 100], |n| 2.0 + 5.0 / n, 0.0);
        for (_, d) in s.discrete_derivative(2.0) {
            assert!((d.value - 5.0).abs() < 1e-12);
        }
    }
}
