use nalgebra::{DMatrix, RowDVector};

use super::{FeynmanKacModel, FiniteStateModel};
use crate::error::{Error, Result};
use crate::linalg::expm;

/// Exact unnormalized and normalized flows of a finite-state model.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub gamma_vector: Vec<f64>,
    /// `gamma_t(1)`.
    pub gamma_mass: f64,
    pub eta_vector: Vec<f64>,
}

impl OracleResult {
    pub fn gamma(&self, f: &[f64]) -> f64 {
        self.gamma_vector.iter().zip(f).map(|(g, v)| g * v).sum()
    }

    /// `γ_t(f) / γ_t(1)`; exactly 1 for the constant function.
    pub fn eta(&self, f: &[f64]) -> f64 {
        self.gamma(f) / self.gamma_mass
    }
}

/// Row vector `eta_0 · Π exp(Δ_i (G - diag V_i))` over the potential's
/// constant pieces on `[0, t]`.
pub(super) fn flow(model: &FiniteStateModel, t: f64) -> Result<OracleResult> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("time must be nonnegative, got {t}")));
    }
    let s = model.num_states();
    let mut row = RowDVector::from_row_slice(model.initial_law());
    if t > 0.0 {
        for (lo, hi, table) in model.potential_fn().pieces(0.0, t) {
            let mut gen = DMatrix::from_fn(s, s, |i, j| model.rate(i, j));
            for (i, v) in table.iter().enumerate() {
                gen[(i, i)] -= v;
            }
            row = row * expm(&(gen * (hi - lo)))?;
        }
    }
    let gamma_vector: Vec<f64> = row.iter().copied().collect();
    let gamma_mass: f64 = gamma_vector.iter().sum();
    if !(gamma_mass > 0.0) {
        return Err(Error::Degenerate(format!("gamma_t(1) = {gamma_mass} is not positive")));
    }
    let eta_vector = gamma_vector.iter().map(|g| g / gamma_mass).collect();
    Ok(OracleResult {
        gamma_vector,
        gamma_mass,
        eta_vector,
    })
}

fn require_finite<M: FeynmanKacModel>(model: &M, t: f64) -> Result<OracleResult> {
    model.exact_flow(t).unwrap_or_else(|| {
        Err(Error::UnsupportedModel(format!(
            "no exact oracle for {} models",
            model.name()
        )))
    })
}

/// Exact flows at time `t`.
pub fn exact_flow<M: FeynmanKacModel>(model: &M, t: f64) -> Result<OracleResult> {
    require_finite(model, t)
}

/// Exact `gamma_t(f)` for a per-state function `f`.
pub fn exact_gamma<M: FeynmanKacModel>(model: &M, t: f64, f: &[f64]) -> Result<f64> {
    let flow = require_finite(model, t)?;
    check_len(&flow, f)?;
    Ok(flow.gamma(f))
}

/// Exact `eta_t(f) = gamma_t(f) / gamma_t(1)`.
pub fn exact_eta<M: FeynmanKacModel>(model: &M, t: f64, f: &[f64]) -> Result<f64> {
    let flow = require_finite(model, t)?;
    check_len(&flow, f)?;
    Ok(flow.eta(f))
}

fn check_len(flow: &OracleResult, f: &[f64]) -> Result<()> {
    if f.len() != flow.gamma_vector.len() {
        return Err(Error::Domain(format!(
            "function has {} entries, model has {} states",
            f.len(),
            flow.gamma_vector.len()
        )));
    }
    Ok(())
}
