//! The auxiliary q-particle system.
//!
//! Each ordered pair `(i, j)`, `i ≠ j`, of the `q` particles carries a
//! clock of rate `V_inf / N`. When it rings at `τ`, `ξ̂^i` copies `ξ̂^j`
//! with probability `V_τ(ξ̂^i) / V_inf` and is left unchanged otherwise.
//! Path functionals are weighted by
//!
//! ```text
//! F^e = F(ξ̂^1_t, .., ξ̂^q_t) · exp(-∫_0^t Σ_i V_s(ξ̂^i_s) ds).
//! ```
//!
//! Conditioned on `k` rings in `[0, t]`, ring times are sorted uniforms
//! and pairs are uniform among the `q(q-1)` ordered pairs, independent of
//! `N`. `E_{t,k}(F)` is the conditional mean of `F^e` given `k` rings.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::estimate::{monte_carlo, monte_carlo_at, Estimate, Moments, CHUNK};
use crate::models::FeynmanKacModel;
use crate::rng::{SimRng, Streams, MAX_STREAM_INDEX};
use crate::simulate;
use crate::statistics::{factorial, Kernel, ScalarFn};

/// One ring of a pair clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxRing {
    pub time: f64,
    pub i: usize,
    pub j: usize,
    pub accepted: bool,
}

/// A sampled trajectory of the auxiliary system.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxPath<S> {
    /// `snapshots[r]` holds the particles right after ring `r`.
    pub snapshots: Vec<Vec<S>>,
    pub final_states: Vec<S>,
    pub rings: Vec<AuxRing>,
    /// `∫_0^t Σ_i V_s(ξ̂^i_s) ds`.
    pub potential_integral: f64,
}

impl<S: 'static> AuxPath<S> {
    pub fn k(&self) -> usize {
        self.rings.len()
    }

    pub fn weight(&self) -> f64 {
        (-self.potential_integral).exp()
    }

    /// `F^e` for this path.
    pub fn weighted(&self, kernel: &Kernel<S>) -> f64 {
        let refs: Vec<&S> = self.final_states.iter().collect();
        kernel.eval(&refs) * self.weight()
    }
}

/// Number of samples and discretization step for auxiliary estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub samples: usize,
    pub dt: f64,
}

impl SamplerConfig {
    pub fn new(samples: usize, dt: f64) -> Result<Self> {
        if samples < 2 {
            return Err(domain(format!("need at least 2 samples, got {samples}")));
        }
        if !(dt > 0.0) {
            return Err(domain(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { samples, dt })
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(domain(format!("time horizon must be positive, got {t}")));
    }
    Ok(())
}

fn run_path<M: FeynmanKacModel, R: Rng + ?Sized>(
    model: &M,
    q: usize,
    t: f64,
    ring_times: &[f64],
    dt: f64,
    rng: &mut R,
) -> Result<AuxPath<M::State>> {
    let bound = model.potential_bound();
    let mut xs: Vec<M::State> = (0..q).map(|_| model.sample_initial(rng)).collect();
    let mut integral = 0.0;
    let mut now = 0.0;
    let mut rings = Vec::with_capacity(ring_times.len());
    let mut snapshots = Vec::with_capacity(ring_times.len());
    for &tau in ring_times {
        for x in xs.iter_mut() {
            integral += model.propagate(now, tau, x, dt, rng)?;
        }
        now = tau;
        let i = rng.random_range(0..q);
        let mut j = rng.random_range(0..q - 1);
        if j >= i {
            j += 1;
        }
        let p = model.potential(tau, &xs[i])? / bound;
        let accepted = rng.random::<f64>() < p;
        if accepted {
            xs[i] = xs[j].clone();
        }
        rings.push(AuxRing {
            time: tau,
            i,
            j,
            accepted,
        });
        snapshots.push(xs.clone());
    }
    for x in xs.iter_mut() {
        integral += model.propagate(now, t, x, dt, rng)?;
    }
    Ok(AuxPath {
        snapshots,
        final_states: xs,
        rings,
        potential_integral: integral,
    })
}

/// A path conditioned on exactly `k` rings in `[0, t]`. Takes no particle
/// count: the conditional law does not depend on `N`.
pub fn sample_conditional_path<M: FeynmanKacModel, R: Rng + ?Sized>(
    model: &M,
    q: usize,
    t: f64,
    k: usize,
    dt: f64,
    rng: &mut R,
) -> Result<AuxPath<M::State>> {
    if q == 0 {
        return Err(domain("the auxiliary system needs q >= 1"));
    }
    if k > 0 && q < 2 {
        return Err(domain("no ordered pairs exist for q = 1, so k must be 0"));
    }
    check_time(t)?;
    let mut times: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * t).collect();
    times.sort_by(f64::total_cmp);
    run_path(model, q, t, &times, dt, rng)
}

/// A path of the unconditioned system with `N` particles in the
/// background: the superposed pair clocks ring at rate `q(q-1) V_inf / N`.
pub fn sample_unconditioned_path<M: FeynmanKacModel, R: Rng + ?Sized>(
    model: &M,
    q: usize,
    n: usize,
    t: f64,
    dt: f64,
    rng: &mut R,
) -> Result<AuxPath<M::State>> {
    if q == 0 || n == 0 {
        return Err(domain("the auxiliary system needs q >= 1 and N >= 1"));
    }
    check_time(t)?;
    let rate = (q * (q - 1)) as f64 * model.potential_bound() / n as f64;
    let mut times = Vec::new();
    if rate > 0.0 {
        let clock = Exp::new(rate).map_err(|e| domain(e.to_string()))?;
        let mut s = clock.sample(rng);
        while s < t {
            times.push(s);
            s += clock.sample(rng);
        }
    }
    run_path(model, q, t, &times, dt, rng)
}

/// `E_{t,k}(F)` with its standard error, from `cfg.samples` conditional
/// paths.
pub fn estimate_etk<M: FeynmanKacModel>(
    model: &M,
    kernel: &Kernel<M::State>,
    t: f64,
    k: usize,
    cfg: SamplerConfig,
    streams: Streams,
) -> Result<Estimate> {
    estimate_etk_at(model, kernel, t, k, cfg, streams, 0)
}

fn estimate_etk_at<M: FeynmanKacModel>(
    model: &M,
    kernel: &Kernel<M::State>,
    t: f64,
    k: usize,
    cfg: SamplerConfig,
    streams: Streams,
    first_stream: usize,
) -> Result<Estimate> {
    let q = kernel.arity();
    if k > 0 && q < 2 {
        return Err(domain("no ordered pairs exist for q = 1, so k must be 0"));
    }
    check_time(t)?;
    monte_carlo_at(cfg.samples, streams, first_stream, |rng: &mut SimRng| {
        Ok(sample_conditional_path(model, q, t, k, cfg.dt, rng)?.weighted(kernel))
    })
}

/// `E'_{t,1}(f ⊗ g)`: two particles, one ring.
pub fn estimate_e1prime<M: FeynmanKacModel>(
    model: &M,
    f: &ScalarFn<M::State>,
    g: &ScalarFn<M::State>,
    bound: f64,
    t: f64,
    cfg: SamplerConfig,
    streams: Streams,
) -> Result<Estimate> {
    let kernel = Kernel::product(vec![f.clone(), g.clone()], bound)?;
    estimate_etk(model, &kernel, t, 1, cfg, streams)
}

/// `W_t(f ⊗ g)` together with the inputs used to form it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WEstimate {
    pub w: Estimate,
    pub e1prime: Estimate,
    pub gamma_mass: Estimate,
    /// `η_t(f)` and `η_t(g)`, exact or simulated.
    pub centering: (Estimate, Estimate),
    /// Both centerings are zero within 3 standard errors (or 1e-9 when
    /// exact).
    pub centered: bool,
}

/// Fallback used when the model has no exact oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowFallback {
    pub particles: usize,
    pub replicas: usize,
}

impl Default for FlowFallback {
    fn default() -> Self {
        Self {
            particles: 2000,
            replicas: 16,
        }
    }
}

/// `W_t(f ⊗ g) = 2 V_inf t / γ_t(1)² · E'_{t,1}(f ⊗ g)`.
///
/// Uses the slot of `streams` and the one after it.
///
/// `γ_t(1)` and the centering of `f`, `g` come from the exact oracle when
/// the model has one, and from genetic-system runs otherwise
/// (`E γ^N_t(1) = γ_t(1)` for every `N`).
#[allow(clippy::too_many_arguments)]
pub fn w_kernel<M: FeynmanKacModel>(
    model: &M,
    f: &ScalarFn<M::State>,
    g: &ScalarFn<M::State>,
    bound: f64,
    t: f64,
    cfg: SamplerConfig,
    fallback: FlowFallback,
    streams: Streams,
) -> Result<WEstimate> {
    check_time(t)?;
    let (gamma_mass, centering, centered) = flow_side(model, f, g, t, cfg.dt, fallback, streams.sub_slot(1))?;
    let e1 = estimate_e1prime(model, f, g, bound, t, cfg, streams)?;
    let c = 2.0 * model.potential_bound() * t;
    let gm = gamma_mass.value;
    let value = c * e1.value / (gm * gm);
    // delta method in (E', γ)
    let var = (c / (gm * gm) * e1.se).powi(2) + (2.0 * value / gm * gamma_mass.se).powi(2);
    Ok(WEstimate {
        w: Estimate {
            value,
            se: var.sqrt(),
            samples: e1.samples,
        },
        e1prime: e1,
        gamma_mass,
        centering,
        centered,
    })
}

fn flow_side<M: FeynmanKacModel>(
    model: &M,
    f: &ScalarFn<M::State>,
    g: &ScalarFn<M::State>,
    t: f64,
    dt: f64,
    fallback: FlowFallback,
    streams: Streams,
) -> Result<(Estimate, (Estimate, Estimate), bool)> {
    if let (Some(states), Some(flow)) = (model.states(), model.exact_flow(t)) {
        let flow = flow?;
        let eta = |h: &ScalarFn<M::State>| {
            states.iter().zip(&flow.eta_vector).map(|(s, p)| p * h.eval(s)).sum::<f64>()
        };
        let (ef, eg) = (eta(f), eta(g));
        let centered = ef.abs() <= 1e-9 && eg.abs() <= 1e-9;
        return Ok((
            Estimate::exact(flow.gamma_mass),
            (Estimate::exact(ef), Estimate::exact(eg)),
            centered,
        ));
    }
    if fallback.replicas < 2 || fallback.particles == 0 {
        return Err(domain("flow fallback needs at least 2 replicas and 1 particle"));
    }
    let mut gm = Moments::default();
    let mut mf = Moments::default();
    let mut mg = Moments::default();
    for r in 0..fallback.replicas {
        let mut rng = streams.n(fallback.particles).rng(r);
        let e = simulate::simulate(model, fallback.particles, t, dt, &mut rng)?;
        gm.push(simulate::gamma_normalizer(&e));
        mf.push(simulate::empirical_expectation(&e, |x| f.eval(x)));
        mg.push(simulate::empirical_expectation(&e, |x| g.eval(x)));
    }
    let (ef, eg) = (mf.estimate(), mg.estimate());
    let centered = ef.value.abs() <= 3.0 * ef.se && eg.value.abs() <= 3.0 * eg.se;
    Ok((gm.estimate(), (ef, eg), centered))
}

/// Poisson probabilities `P(k rings)` for `k = 0..=k_max`, and the tail
/// mass beyond `k_max`.
pub fn poisson_weights(lambda_t: f64, k_max: usize) -> (Vec<f64>, f64) {
    let mut w = Vec::with_capacity(k_max + 1);
    let mut p = (-lambda_t).exp();
    for k in 0..=k_max {
        if k > 0 {
            p *= lambda_t / k as f64;
        }
        w.push(p);
    }
    // sum the tail directly rather than as 1 - Σ to avoid cancellation
    let mut tail = 0.0;
    let mut k = k_max + 1;
    loop {
        p *= lambda_t / k as f64;
        tail += p;
        if p <= tail * 1e-17 || p == 0.0 {
            break;
        }
        k += 1;
    }
    (w, tail)
}

/// Smallest `K` with Poisson tail mass beyond `K` at most `tolerance`.
pub fn default_k_max(lambda_t: f64, tolerance: f64) -> usize {
    let mut k = 0;
    loop {
        let (_, tail) = poisson_weights(lambda_t, k);
        if tail <= tolerance {
            return k;
        }
        k += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureEstimate {
    pub estimate: Estimate,
    pub k_max: usize,
    /// `‖F‖_∞ · P(more than k_max rings)`.
    pub truncation_bound: f64,
    pub terms: Vec<(f64, Estimate)>,
}

/// Streams reserved for each ring count inside a mixture.
const STREAMS_PER_TERM: usize = 4096;

fn check_term_budget(samples: usize) -> Result<()> {
    let cap = STREAMS_PER_TERM * CHUNK;
    if samples > cap {
        return Err(domain(format!("at most {cap} samples per ring count, got {samples}")));
    }
    Ok(())
}

/// Default truncation tolerance for [`q_measure_mixture`].
pub const DEFAULT_TRUNCATION: f64 = 1e-10;

/// `Q^N_{t,q}(F) = Σ_k Pois(λt; k) E_{t,k}(F)`, `λ = q(q-1) V_inf / N`.
///
/// `cfg.samples` is a total budget: term `k` gets
/// `max(64, ceil(samples · P(k)))` paths. Without `k_max`, the smallest
/// truncation with `‖F‖_∞ · tail ≤ tolerance` is used.
#[allow(clippy::too_many_arguments)]
pub fn q_measure_mixture<M: FeynmanKacModel>(
    model: &M,
    kernel: &Kernel<M::State>,
    t: f64,
    n: usize,
    k_max: Option<usize>,
    tolerance: f64,
    cfg: SamplerConfig,
    streams: Streams,
) -> Result<MixtureEstimate> {
    check_time(t)?;
    let q = kernel.arity();
    if n < q {
        return Err(domain(format!("need N >= q, got N = {n}, q = {q}")));
    }
    let lambda_t = (q * (q - 1)) as f64 * model.potential_bound() * t / n as f64;
    let norm = kernel.bound().max(f64::MIN_POSITIVE);
    let k_max = match k_max {
        Some(k) => k,
        None => default_k_max(lambda_t, tolerance / norm),
    };
    let (weights, tail) = poisson_weights(lambda_t, k_max);
    let truncation_bound = tail * kernel.bound();
    if truncation_bound > tolerance {
        return Err(Error::ToleranceNotMet(format!(
            "truncating at K = {k_max} leaves {truncation_bound:.3e} > {tolerance:.3e}"
        )));
    }
    if (k_max + 1) * STREAMS_PER_TERM > MAX_STREAM_INDEX as usize {
        return Err(domain(format!("K = {k_max} is too large")));
    }
    let mut terms = Vec::with_capacity(k_max + 1);
    for (k, &w) in weights.iter().enumerate() {
        if q < 2 && k > 0 {
            break;
        }
        let m = ((cfg.samples as f64 * w).ceil() as usize).max(64);
        check_term_budget(m)?;
        let sub = SamplerConfig { samples: m, ..cfg };
        let e = estimate_etk_at(model, kernel, t, k, sub, streams, k * STREAMS_PER_TERM)?;
        terms.push((w, e));
    }
    Ok(MixtureEstimate {
        estimate: Estimate::linear_combination(&terms),
        k_max,
        truncation_bound,
        terms,
    })
}

/// Coefficients `c_k` of `∂^r Q = Σ_{k ≤ r} c_k E_{t,k}`:
/// `c_k = (-1)^{r-k} / (k! (r-k)!) · (q(q-1) V_inf t)^r`.
pub fn derivative_coefficients(q: usize, v_inf: f64, t: f64, r: usize) -> Vec<f64> {
    let a = (q * q.saturating_sub(1)) as f64 * v_inf * t;
    (0..=r)
        .map(|k| {
            let sign = if (r - k) % 2 == 0 { 1.0 } else { -1.0 };
            sign * a.powi(r as i32) / (factorial(k) * factorial(r - k))
        })
        .collect()
}

/// `∂^r Q_{t,q}(F)` from independent estimates of `E_{t,0}, .., E_{t,r}`.
pub fn derivative_formula<M: FeynmanKacModel>(
    model: &M,
    kernel: &Kernel<M::State>,
    t: f64,
    r: usize,
    cfg: SamplerConfig,
    streams: Streams,
) -> Result<Estimate> {
    check_time(t)?;
    let q = kernel.arity();
    check_term_budget(cfg.samples)?;
    let coeffs = derivative_coefficients(q, model.potential_bound(), t, r);
    let mut terms = Vec::with_capacity(r + 1);
    for (k, &c) in coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let e = estimate_etk_at(model, kernel, t, k, cfg, streams, k * STREAMS_PER_TERM)?;
        terms.push((c, e));
    }
    Ok(Estimate::linear_combination(&terms))
}

/// True when the rings pair up the `q` particles: exactly `q/2` rings whose
/// unordered pairs are disjoint.
pub fn is_wick_coupled<S>(path: &AuxPath<S>, q: usize) -> bool {
    if q % 2 != 0 || path.rings.len() != q / 2 {
        return false;
    }
    let mut seen = vec![false; q];
    for r in &path.rings {
        if seen[r.i] || seen[r.j] {
            return false;
        }
        seen[r.i] = true;
        seen[r.j] = true;
    }
    true
}

/// `P(W_t | q/2 rings) = q! / (q(q-1))^{q/2}`.
pub fn wick_coupling_probability(q: usize) -> f64 {
    factorial(q) / ((q * (q - 1)) as f64).powi((q / 2) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WickConditioned {
    /// `E(F^e | W_t)` over the accepted samples.
    pub conditional: Estimate,
    /// Fraction of `q/2`-ring samples that were Wick-coupled.
    pub acceptance: Estimate,
    /// `q! / (q/2)! · (V_inf t)^{q/2} · E(F^e | W_t)`.
    pub derivative: Estimate,
}

/// Rejection estimate of `E(F^e | W_t)` from `cfg.samples` paths with
/// `q/2` rings.
pub fn wick_conditioned<M: FeynmanKacModel>(
    model: &M,
    kernel: &Kernel<M::State>,
    t: f64,
    cfg: SamplerConfig,
    streams: Streams,
) -> Result<WickConditioned> {
    let q = kernel.arity();
    if q % 2 != 0 || q == 0 {
        return Err(domain(format!("Wick coupling needs an even arity, got {q}")));
    }
    check_time(t)?;
    // (coupled, F^e) per path; F^e is only evaluated on coupled paths
    let draws: Vec<(bool, f64)> = {
        let chunks = cfg.samples.div_ceil(CHUNK);
        let parts: Vec<Vec<(bool, f64)>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = streams.rng(c);
                let len = CHUNK.min(cfg.samples - c * CHUNK);
                (0..len)
                    .map(|_| {
                        let path = sample_conditional_path(model, q, t, q / 2, cfg.dt, &mut rng)?;
                        let ok = is_wick_coupled(&path, q);
                        Ok((ok, if ok { path.weighted(kernel) } else { 0.0 }))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        parts.into_iter().flatten().collect()
    };
    let acceptance: Moments = draws.iter().map(|&(ok, _)| f64::from(u8::from(ok))).collect();
    let conditional: Moments = draws.iter().filter(|d| d.0).map(|d| d.1).collect();
    if conditional.count() < 2 {
        return Err(Error::Degenerate("fewer than 2 Wick-coupled samples".into()));
    }
    let conditional = conditional.estimate();
    let c = factorial(q) / factorial(q / 2) * (model.potential_bound() * t).powi((q / 2) as i32);
    Ok(WickConditioned {
        conditional,
        acceptance: acceptance.estimate(),
        derivative: conditional.scale(c),
    })
}

/// Ring counts of `runs` unconditioned paths.
pub fn ring_counts<M: FeynmanKacModel>(
    model: &M,
    q: usize,
    n: usize,
    t: f64,
    dt: f64,
    runs: usize,
    streams: Streams,
) -> Result<Vec<usize>> {
    let chunks = runs.div_ceil(CHUNK);
    let parts: Vec<Vec<usize>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = streams.rng(c);
            let len = CHUNK.min(runs - c * CHUNK);
            (0..len)
                .map(|_| Ok(sample_unconditioned_path(model, q, n, t, dt, &mut rng)?.k()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Mean of a scalar over conditional paths, for diagnostics.
pub fn conditional_mean<M: FeynmanKacModel>(
    model: &M,
    q: usize,
    t: f64,
    k: usize,
    cfg: SamplerConfig,
    streams: Streams,
    stat: impl Fn(&AuxPath<M::State>) -> f64 + Sync,
) -> Result<Estimate> {
    monte_carlo(cfg.samples, streams, |rng: &mut SimRng| {
        Ok(stat(&sample_conditional_path(model, q, t, k, cfg.dt, rng)?))
    })
}
