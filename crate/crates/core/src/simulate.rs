//! The N-particle genetic system.
//!
//! Every particle carries a rate-`V_inf` clock. When particle `i` rings at
//! time `τ` it picks `j` uniformly in `{1, .., N}` (itself included) and
//! copies `ξ^j` with probability `V_τ(ξ^i) / V_inf`. Between rings the
//! particles move independently under the model's dynamics. The ensemble
//! also accumulates `∫ η^N_s(V_s) ds`, so that `γ^N_t(1)` is its negative
//! exponential.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{domain, Error, Result};
use crate::models::{FeynmanKacModel, FiniteStateModel};

/// One ring of a selection clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingEvent {
    pub time: f64,
    pub i: usize,
    pub j: usize,
    pub accepted: bool,
}

/// Interval on which `η^N_s(V_s)` was integrated, with its endpoint values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSegment {
    pub t0: f64,
    pub t1: f64,
    pub v0: f64,
    pub v1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub rings: Vec<RingEvent>,
    pub trace: Vec<TraceSegment>,
}

impl EventLog {
    /// `∫ η^N(V)` recomputed from the logged segments.
    pub fn trapezoid_integral(&self) -> f64 {
        self.trace.iter().map(|s| 0.5 * (s.v0 + s.v1) * (s.t1 - s.t0)).sum()
    }

    /// One CSV record per ring: `time,i,j,accepted`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "time,i,j,accepted")?;
        for r in &self.rings {
            writeln!(out, "{},{},{},{}", r.time, r.i, r.j, r.accepted)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<S> {
    particles: Vec<S>,
    time: f64,
    potential_integral: f64,
    log: Option<EventLog>,
}

impl<S> Ensemble<S> {
    pub fn from_particles(particles: Vec<S>) -> Result<Self> {
        if particles.is_empty() {
            return Err(domain("an ensemble needs at least one particle"));
        }
        Ok(Self {
            particles,
            time: 0.0,
            potential_integral: 0.0,
            log: None,
        })
    }

    /// Starts recording rings and integration segments.
    pub fn with_log(mut self) -> Self {
        self.log = Some(EventLog::default());
        self
    }

    pub fn particles(&self) -> &[S] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn potential_integral(&self) -> f64 {
        self.potential_integral
    }

    pub fn log(&self) -> Option<&EventLog> {
        self.log.as_ref()
    }

    fn record_ring(&mut self, ev: RingEvent) {
        if let Some(log) = &mut self.log {
            log.rings.push(ev);
        }
    }

    fn record_segment(&mut self, seg: TraceSegment) {
        if let Some(log) = &mut self.log {
            log.trace.push(seg);
        }
    }
}

/// `N` i.i.d. draws from `η_0` at time 0.
pub fn init_ensemble<M: FeynmanKacModel, R: Rng + ?Sized>(
    model: &M,
    n: usize,
    rng: &mut R,
) -> Result<Ensemble<M::State>> {
    if n == 0 {
        return Err(domain("particle count must be at least 1"));
    }
    Ensemble::from_particles((0..n).map(|_| model.sample_initial(rng)).collect())
}

/// Advances the genetic system to `t_end` using the model's preferred
/// algorithm.
pub fn advance_ensemble<M: FeynmanKacModel, R: Rng + ?Sized>(
    model: &M,
    ensemble: &mut Ensemble<M::State>,
    t_end: f64,
    dt: f64,
    rng: &mut R,
) -> Result<()> {
    check_advance(ensemble.time, t_end, dt)?;
    model.advance_ensemble(ensemble, t_end, dt, rng)?;
    let cap = model.potential_bound() * ensemble.time;
    let pi = ensemble.potential_integral;
    if !(pi >= -1e-12 && pi <= cap * (1.0 + 1e-12) + 1e-12) {
        return Err(Error::InvariantViolation(format!(
            "potential integral {pi} outside [0, {cap}]"
        )));
    }
    Ok(())
}

/// `init_ensemble` followed by `advance_ensemble` to `t`.
pub fn simulate<M: FeynmanKacModel, R: Rng + ?Sized>(
    model: &M,
    n: usize,
    t: f64,
    dt: f64,
    rng: &mut R,
) -> Result<Ensemble<M::State>> {
    let mut e = init_ensemble(model, n, rng)?;
    advance_ensemble(model, &mut e, t, dt, rng)?;
    Ok(e)
}

fn check_advance(now: f64, t_end: f64, dt: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(domain(format!("dt must be positive, got {dt}")));
    }
    if !(t_end >= now) {
        return Err(domain(format!("cannot advance from {now} back to {t_end}")));
    }
    Ok(())
}

fn mean_potential<M: FeynmanKacModel>(model: &M, t: f64, particles: &[M::State]) -> Result<f64> {
    let mut s = 0.0;
    for x in particles {
        s += model.potential(t, x)?;
    }
    Ok(s / particles.len() as f64)
}

/// Generic event-driven loop: exact superposed clock of rate `N V_inf`,
/// free dynamics in sub-steps of at most `dt`, trapezoid rule for
/// `∫ η^N(V)` at every sub-step boundary and ring time.
pub fn advance_ring_driven<M: FeynmanKacModel, R: Rng + ?Sized>(
    model: &M,
    ensemble: &mut Ensemble<M::State>,
    t_end: f64,
    dt: f64,
    rng: &mut R,
) -> Result<()> {
    check_advance(ensemble.time, t_end, dt)?;
    let n = ensemble.len();
    let bound = model.potential_bound();
    let clock = Exp::new(n as f64 * bound).map_err(|e| domain(e.to_string()))?;
    let mut t = ensemble.time;
    let mut v_now = mean_potential(model, t, &ensemble.particles)?;
    while t < t_end {
        let ring = t + clock.sample(rng);
        let stop = ring.min(t_end);
        while t < stop {
            let s = if stop - t > dt { t + dt } else { stop };
            for x in ensemble.particles.iter_mut() {
                model.step(t, x, s - t, rng)?;
            }
            let v_next = mean_potential(model, s, &ensemble.particles)?;
            ensemble.potential_integral += 0.5 * (v_now + v_next) * (s - t);
            ensemble.record_segment(TraceSegment {
                t0: t,
                t1: s,
                v0: v_now,
                v1: v_next,
            });
            v_now = v_next;
            t = s;
        }
        if ring < t_end {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            let p = model.potential(ring, &ensemble.particles[i])? / bound;
            let accepted = rng.random::<f64>() < p;
            if accepted && i != j {
                ensemble.particles[i] = ensemble.particles[j].clone();
                v_now = mean_potential(model, ring, &ensemble.particles)?;
            }
            ensemble.record_ring(RingEvent {
                time: ring,
                i,
                j,
                accepted,
            });
        }
    }
    ensemble.time = t_end;
    Ok(())
}

/// Exact event-driven loop for finite-state models.
///
/// Free jumps are uniformized at rate `r_max = max_s (-G(s,s))` per
/// particle and superposed with the selection clocks, giving one Poisson
/// stream of rate `N (r_max + V_inf)`. `η^N(V)` is piecewise constant
/// between events, so its integral is exact.
pub fn advance_uniformized<R: Rng + ?Sized>(
    model: &FiniteStateModel,
    ensemble: &mut Ensemble<usize>,
    t_end: f64,
    rng: &mut R,
) -> Result<()> {
    let n = ensemble.len();
    let bound = model.potential_bound();
    let r_max = model.max_exit_rate();
    let per_particle = r_max + bound;
    let clock = Exp::new(n as f64 * per_particle).map_err(|e| domain(e.to_string()))?;
    let potential = model.potential_fn();
    let mut counts = vec![0usize; model.num_states()];
    for &x in &ensemble.particles {
        counts[x] += 1;
    }
    let inv_n = 1.0 / n as f64;
    let mut t = ensemble.time;
    while t < t_end {
        let ev = t + clock.sample(rng);
        let stop = ev.min(t_end);
        ensemble.potential_integral += potential.integrate_counts(&counts, t, stop) * inv_n;
        if ensemble.log.is_some() {
            for (lo, hi, table) in potential.pieces(t, stop) {
                let v: f64 = counts.iter().zip(table).map(|(&c, v)| c as f64 * v).sum::<f64>() * inv_n;
                ensemble.record_segment(TraceSegment { t0: lo, t1: hi, v0: v, v1: v });
            }
        }
        t = stop;
        if ev >= t_end {
            break;
        }
        let i = rng.random_range(0..n);
        let u = rng.random::<f64>() * per_particle;
        let from = ensemble.particles[i];
        if u < r_max {
            let to = model.jump_target(from, u);
            if to != from {
                counts[from] -= 1;
                counts[to] += 1;
                ensemble.particles[i] = to;
            }
        } else {
            let j = rng.random_range(0..n);
            // u - r_max is uniform on [0, V_inf)
            let accepted = (u - r_max) < potential.value(ev, from);
            if accepted {
                let to = ensemble.particles[j];
                counts[from] -= 1;
                counts[to] += 1;
                ensemble.particles[i] = to;
            }
            ensemble.record_ring(RingEvent {
                time: ev,
                i,
                j,
                accepted,
            });
        }
    }
    ensemble.time = t_end;
    Ok(())
}

/// `η^N(f) = (1/N) Σ f(ξ^i)`.
pub fn empirical_expectation<S>(ensemble: &Ensemble<S>, f: impl Fn(&S) -> f64) -> f64 {
    ensemble.particles.iter().map(f).sum::<f64>() / ensemble.len() as f64
}

/// `γ^N_t(1) = exp(-∫ η^N_s(V_s) ds)`.
pub fn gamma_normalizer<S>(ensemble: &Ensemble<S>) -> f64 {
    (-ensemble.potential_integral).exp()
}

/// `γ^N_t(f) = γ^N_t(1) η^N_t(f)`.
pub fn unnormalized_expectation<S>(ensemble: &Ensemble<S>, f: impl Fn(&S) -> f64) -> f64 {
    gamma_normalizer(ensemble) * empirical_expectation(ensemble, f)
}
