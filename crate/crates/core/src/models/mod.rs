//! Simulatable Feynman-Kac models.
//!
//! A model bundles the free dynamics of a single particle, a bounded
//! nonnegative potential `V_t` with its declared bound `V_inf`, and the
//! initial law. Two families are provided: finite-state jump chains, which
//! come with an exact oracle for the flows `gamma_t` and `eta_t`, and
//! Euclidean diffusions discretized by Euler-Maruyama.

mod diffusion;
mod finite;
mod oracle;

use rand::Rng;

pub use diffusion::{DiffusionModel, EuclideanPotential, InitialLaw, Monomial};
pub use finite::{FinitePotential, FiniteStateModel};
pub use oracle::{exact_eta, exact_flow, exact_gamma, OracleResult};

use crate::error::{Error, Result};
use crate::simulate::{self, Ensemble};
use crate::statistics::{self, Kernel};

/// Dynamics, potential and initial law of a Feynman-Kac model.
///
/// Implementations are immutable once built and may be shared across
/// threads; all randomness comes from the generator passed to each call.
pub trait FeynmanKacModel: Send + Sync {
    type State: Clone + Send + Sync + std::fmt::Debug + 'static;

    /// The declared bound `V_inf`; also the rate of every selection clock.
    fn potential_bound(&self) -> f64;

    /// Raw potential value, without the bound check.
    fn potential_value(&self, t: f64, x: &Self::State) -> f64;

    /// Potential value, checked against `0 <= V <= V_inf`.
    fn potential(&self, t: f64, x: &Self::State) -> Result<f64> {
        let v = self.potential_value(t, x);
        let bound = self.potential_bound();
        if !(0.0..=bound).contains(&v) {
            return Err(Error::PotentialOutOfBounds {
                value: v,
                time: t,
                bound,
            });
        }
        Ok(v)
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State;

    /// Moves `x` from `t` to `t + dt` in place and returns the integral of
    /// the potential along the path over that interval.
    fn step<R: Rng + ?Sized>(&self, t: f64, x: &mut Self::State, dt: f64, rng: &mut R)
        -> Result<f64>;

    /// Moves `x` from `t0` to `t1` using steps of length at most `max_dt`.
    fn propagate<R: Rng + ?Sized>(
        &self,
        t0: f64,
        t1: f64,
        x: &mut Self::State,
        max_dt: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let mut t = t0;
        let mut integral = 0.0;
        while t < t1 {
            let s = if t1 - t > max_dt { t + max_dt } else { t1 };
            integral += self.step(t, x, s - t, rng)?;
            t = s;
        }
        Ok(integral)
    }

    /// Advances the genetic particle system to `t_end`.
    fn advance_ensemble<R: Rng + ?Sized>(
        &self,
        ensemble: &mut Ensemble<Self::State>,
        t_end: f64,
        dt: f64,
        rng: &mut R,
    ) -> Result<()>
    where
        Self: Sized,
    {
        simulate::advance_ring_driven(self, ensemble, t_end, dt, rng)
    }

    /// `m(points)^{⊙q}(F)`; models with a finite state space may count
    /// occupations instead of enumerating particles.
    fn u_statistic(&self, points: &[Self::State], kernel: &Kernel<Self::State>) -> Result<f64> {
        statistics::u_statistic(points, kernel)
    }

    /// Every state, when the state space is finite.
    fn states(&self) -> Option<Vec<Self::State>> {
        None
    }

    /// Exact flows at time `t`, when an oracle exists.
    fn exact_flow(&self, _t: f64) -> Option<Result<OracleResult>> {
        None
    }

    fn name(&self) -> &'static str;
}

/// One step of the free dynamics from `(t, x)`; returns the new state.
pub fn step_state<M: FeynmanKacModel, R: Rng + ?Sized>(
    model: &M,
    t: f64,
    x: &M::State,
    dt: f64,
    rng: &mut R,
) -> Result<M::State> {
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("step length must be positive, got {dt}")));
    }
    let mut y = x.clone();
    model.step(t, &mut y, dt, rng)?;
    Ok(y)
}

/// Exact `eta_t(f)` for any model with an oracle, evaluated on every state.
pub fn exact_expectation<M: FeynmanKacModel>(
    model: &M,
    t: f64,
    f: impl Fn(&M::State) -> f64,
) -> Option<Result<f64>> {
    let states = model.states()?;
    Some(model.exact_flow(t)?.map(|flow| {
        states
            .iter()
            .zip(&flow.eta_vector)
            .map(|(s, p)| p * f(s))
            .sum()
    }))
}
