//! Goodness-of-fit and regression checks used by the acceptance suite.

use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Normal, Poisson};

use crate::error::{domain, Result};

/// Asymptotic Kolmogorov survival function `P(K > λ)`.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi theta form, fast for small λ
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=20)
            .map(|k| {
                let m = (2 * k - 1) as f64;
                (-m * m * c).exp()
            })
            .sum();
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    kolmogorov_sf((s + 0.12 + 0.11 / s) * d)
}

fn sorted(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(domain("samples must be finite"));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    Ok(xs)
}

/// One-sample Kolmogorov-Smirnov statistic and asymptotic p-value against
/// `Normal(mean, variance)`.
pub fn ks_normality(samples: &[f64], mean: f64, variance: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(domain("KS test needs at least one sample"));
    }
    if !(variance > 0.0) {
        return Err(domain(format!("variance must be positive, got {variance}")));
    }
    let xs = sorted(samples)?;
    let normal = Normal::new(mean, variance.sqrt()).map_err(|e| domain(e.to_string()))?;
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = normal.cdf(x);
            (c - i as f64 / n).max((i + 1) as f64 / n - c)
        })
        .fold(0.0, f64::max);
    Ok((d, ks_p_value(d, n)))
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(domain("KS test needs two nonempty samples"));
    }
    let (xs, ys) = (sorted(a)?, sorted(b)?);
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let v = xs[i].min(ys[j]);
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let n_eff = (n * m) as f64 / (n + m) as f64;
    Ok((d, ks_p_value(d, n_eff)))
}

/// Chi-square goodness of fit of ring counts against `Poisson(λt)`.
///
/// Bins are `{0}, {1}, ..` with an upper tail bin; adjacent bins are
/// pooled until every expected count is at least 5.
pub fn chi_square_poisson(counts: &[usize], lambda_t: f64) -> Result<ChiSquareResult> {
    if counts.is_empty() {
        return Err(domain("chi-square test needs at least one count"));
    }
    if !(lambda_t >= 0.0) {
        return Err(domain(format!("λt must be nonnegative, got {lambda_t}")));
    }
    let n = counts.len() as f64;
    let max_seen = counts.iter().copied().max().unwrap_or(0);
    let pmf = |k: usize| -> f64 {
        if lambda_t == 0.0 {
            f64::from(u8::from(k == 0))
        } else {
            Poisson::new(lambda_t).map(|p| p.pmf(k as u64)).unwrap_or(0.0)
        }
    };
    // (expected, observed) for k = 0..=max_seen, then the tail k > max_seen
    let mut bins: Vec<(f64, f64)> = (0..=max_seen)
        .map(|k| (n * pmf(k), counts.iter().filter(|&&c| c == k).count() as f64))
        .collect();
    if bins.iter().any(|&(e, o)| e == 0.0 && o > 0.0) {
        return Ok(ChiSquareResult {
            statistic: f64::INFINITY,
            dof: 0,
            p_value: 0.0,
        });
    }
    let head: f64 = bins.iter().map(|b| b.0).sum();
    bins.push(((n - head).max(0.0), 0.0));
    // pool from the right, then fold a small first bin forward
    let mut pooled: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for b in bins.into_iter().rev() {
        acc = (acc.0 + b.0, acc.1 + b.1);
        if acc.0 >= 5.0 {
            pooled.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.0 > 0.0 || acc.1 > 0.0 {
        match pooled.last_mut() {
            Some(last) => {
                last.0 += acc.0;
                last.1 += acc.1;
            }
            None => pooled.push(acc),
        }
    }
    let bins = pooled.len();
    let statistic: f64 = pooled
        .iter()
        .map(|&(e, o)| {
            if e > 0.0 {
                (o - e).powi(2) / e
            } else if o > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .sum();
    let dof = bins.saturating_sub(1);
    let p_value = if dof == 0 {
        if statistic.is_finite() && statistic < 1e-12 {
            1.0
        } else {
            0.0
        }
    } else if statistic.is_infinite() {
        0.0
    } else {
        let chi = ChiSquared::new(dof as f64).map_err(|e| domain(e.to_string()))?;
        chi.sf(statistic)
    };
    Ok(ChiSquareResult {
        statistic,
        dof,
        p_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Weighted regression of `log|estimate|` on `log N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub se: f64,
    pub intercept: f64,
    /// 95% normal interval for the slope.
    pub ci: (f64, f64),
    /// Entries with `|estimate| < 2 SE`, left out of the regression.
    pub flagged: Vec<bool>,
    /// Every flagged entry is compatible with the fitted line: the line's
    /// prediction does not exceed `|estimate| + 3 SE` there.
    pub one_sided_consistent: bool,
}

impl SlopeFit {
    pub fn any_flagged(&self) -> bool {
        self.flagged.iter().any(|&f| f)
    }

    pub fn predict(&self, n: f64) -> f64 {
        (self.intercept + self.slope * n.ln()).exp()
    }
}

pub fn slope_fit(ns: &[usize], estimates: &[f64], ses: &[f64]) -> Result<SlopeFit> {
    if ns.len() != estimates.len() || ns.len() != ses.len() {
        return Err(domain("slope fit inputs differ in length"));
    }
    let flagged: Vec<bool> = estimates
        .iter()
        .zip(ses)
        .map(|(e, s)| e.abs() < 2.0 * s || *e == 0.0)
        .collect();
    let used: Vec<usize> = (0..ns.len()).filter(|&i| !flagged[i]).collect();
    if used.len() < 2 {
        return Err(domain(format!(
            "only {} of {} entries exceed twice their standard error",
            used.len(),
            ns.len()
        )));
    }
    let exact = used.iter().all(|&i| ses[i] == 0.0);
    // weight 1/σ² with σ = SE / |estimate| on the log scale
    let w: Vec<f64> = used
        .iter()
        .map(|&i| if exact { 1.0 } else { (estimates[i] / ses[i]).powi(2) })
        .collect();
    let x: Vec<f64> = used.iter().map(|&i| (ns[i] as f64).ln()).collect();
    let y: Vec<f64> = used.iter().map(|&i| estimates[i].abs().ln()).collect();
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = w.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&x).map(|(w, x)| w * (x - xm).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(domain("slope fit needs at least two distinct N values"));
    }
    let sxy: f64 = w.iter().zip(&x).zip(&y).map(|((w, x), y)| w * (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let se = if exact { 0.0 } else { (1.0 / sxx).sqrt() };
    let mut fit = SlopeFit {
        slope,
        se,
        intercept,
        ci: (slope - 1.96 * se, slope + 1.96 * se),
        flagged: flagged.clone(),
        one_sided_consistent: true,
    };
    fit.one_sided_consistent = (0..ns.len())
        .filter(|&i| flagged[i])
        .all(|i| fit.predict(ns[i] as f64) <= estimates[i].abs() + 3.0 * ses[i]);
    Ok(fit)
}

/// Weighted least squares fit of signed values `b_N ≈ a N^p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    pub amplitude: f64,
    pub exponent: f64,
    /// From the curvature of the profiled residual sum of squares.
    pub exponent_se: f64,
    pub chi2: f64,
}

const EXPONENT_RANGE: (f64, f64) = (-4.0, 2.0);

/// Fits `a N^p` to signed estimates with weights `1/SE²`, profiling out
/// the amplitude. Unlike [`slope_fit`], entries near zero keep their sign
/// and weight, so no entry is dropped.
pub fn power_law_fit(ns: &[usize], values: &[f64], ses: &[f64]) -> Result<PowerLawFit> {
    if ns.len() != values.len() || ns.len() != ses.len() {
        return Err(domain("power-law fit inputs differ in length"));
    }
    if ns.len() < 3 {
        return Err(domain("power-law fit needs at least 3 points"));
    }
    if ses.iter().any(|s| !(*s > 0.0)) {
        return Err(domain("power-law fit needs positive standard errors"));
    }
    let w: Vec<f64> = ses.iter().map(|s| 1.0 / (s * s)).collect();
    let sbb: f64 = w.iter().zip(values).map(|(w, b)| w * b * b).sum();
    let profile = |p: f64| -> (f64, f64) {
        let (mut sxb, mut sxx) = (0.0, 0.0);
        for ((&n, &b), &w) in ns.iter().zip(values).zip(&w) {
            let x = (n as f64).powf(p);
            sxb += w * x * b;
            sxx += w * x * x;
        }
        let a = sxb / sxx;
        (sbb - a * sxb, a)
    };
    let (lo, hi) = EXPONENT_RANGE;
    let steps = 6000;
    let h = (hi - lo) / steps as f64;
    let mut best = (f64::INFINITY, lo);
    for i in 0..=steps {
        let p = lo + h * i as f64;
        let r = profile(p).0;
        if r < best.0 {
            best = (r, p);
        }
    }
    // golden-section refinement inside the bracketing grid cell
    let (mut a, mut b) = ((best.1 - h).max(lo), (best.1 + h).min(hi));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if profile(c).0 < profile(d).0 {
            b = d;
        } else {
            a = c;
        }
    }
    let p = 0.5 * (a + b);
    let (chi2, amplitude) = profile(p);
    let e = 1e-3;
    let curvature = (profile(p + e).0 - 2.0 * chi2 + profile(p - e).0) / (e * e);
    let exponent_se = if curvature > 0.0 { (2.0 / curvature).sqrt() } else { f64::INFINITY };
    Ok(PowerLawFit {
        amplitude,
        exponent: p,
        exponent_se,
        chi2,
    })
}

/// Lag-1 sample autocorrelation.
pub fn lag1_autocorrelation(xs: &[f64]) -> Result<f64> {
    if xs.len() < 3 {
        return Err(domain("autocorrelation needs at least 3 values"));
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let den: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    if den == 0.0 {
        return Ok(0.0);
    }
    let num: f64 = xs.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    Ok(num / den)
}
