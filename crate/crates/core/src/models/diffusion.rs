use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FeynmanKacModel;
use crate::error::{domain, Error, Result};

/// Potential on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub enum EuclideanPotential {
    Constant(f64),
    /// `Σ c · Π x_i^{p_i}`, clipped to `[0, V_inf]`.
    Polynomial(Vec<Monomial>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coefficient: f64,
    pub powers: Vec<u32>,
}

impl EuclideanPotential {
    fn eval(&self, x: &[f64], bound: f64) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Polynomial(terms) => terms
                .iter()
                .map(|m| {
                    m.coefficient
                        * m.powers
                            .iter()
                            .zip(x)
                            .map(|(&p, &xi)| xi.powi(p as i32))
                            .product::<f64>()
                })
                .sum::<f64>()
                .clamp(0.0, bound),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// Independent coordinates `N(mean_i, sd_i^2)`.
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
}

/// `dX = (A X + b) dt + diag(σ) dB`, discretized by Euler-Maruyama.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    dim: usize,
    drift_matrix: Vec<f64>,
    drift_offset: Vec<f64>,
    diffusion: Vec<f64>,
    potential: EuclideanPotential,
    bound: f64,
    initial: InitialLaw,
}

impl DiffusionModel {
    /// `drift_matrix` is row-major `dim × dim`.
    pub fn new(
        dim: usize,
        drift_matrix: Vec<f64>,
        drift_offset: Vec<f64>,
        diffusion: Vec<f64>,
        potential: EuclideanPotential,
        bound: f64,
        initial: InitialLaw,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(domain("dimension must be positive"));
        }
        if drift_matrix.len() != dim * dim {
            return Err(domain(format!("drift matrix needs {} entries", dim * dim)));
        }
        if drift_offset.len() != dim || diffusion.len() != dim {
            return Err(domain(format!("drift offset and diffusion need {dim} entries")));
        }
        if drift_matrix.iter().chain(&drift_offset).chain(&diffusion).any(|v| !v.is_finite()) {
            return Err(domain("non-finite drift or diffusion coefficient"));
        }
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::InvariantViolation(format!("potential bound must be positive and finite, got {bound}")));
        }
        match &potential {
            EuclideanPotential::Constant(c) if !(0.0..=bound).contains(c) => {
                return Err(Error::InvariantViolation(format!("constant potential {c} outside [0, {bound}]")));
            }
            EuclideanPotential::Polynomial(terms) => {
                if let Some(m) = terms.iter().find(|m| m.powers.len() != dim) {
                    return Err(domain(format!("monomial has {} powers, expected {dim}", m.powers.len())));
                }
            }
            _ => {}
        }
        match &initial {
            InitialLaw::Point(x) if x.len() != dim => {
                return Err(domain("initial point has the wrong dimension"));
            }
            InitialLaw::Gaussian { mean, sd } => {
                if mean.len() != dim || sd.len() != dim {
                    return Err(domain("initial gaussian has the wrong dimension"));
                }
                if sd.iter().any(|s| !(*s >= 0.0)) {
                    return Err(domain("initial standard deviations must be nonnegative"));
                }
            }
            _ => {}
        }
        Ok(Self {
            dim,
            drift_matrix,
            drift_offset,
            diffusion,
            potential,
            bound,
            initial,
        })
    }

    /// Standard Brownian motion in one dimension started at the origin.
    pub fn brownian(potential: EuclideanPotential, bound: f64) -> Result<Self> {
        Self::new(1, vec![0.0], vec![0.0], vec![1.0], potential, bound, InitialLaw::Point(vec![0.0]))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, x: &[f64], i: usize) -> f64 {
        let row = &self.drift_matrix[i * self.dim..(i + 1) * self.dim];
        row.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>() + self.drift_offset[i]
    }
}

impl FeynmanKacModel for DiffusionModel {
    type State = Vec<f64>;

    fn potential_bound(&self) -> f64 {
        self.bound
    }

    fn potential_value(&self, _t: f64, x: &Vec<f64>) -> f64 {
        self.potential.eval(x, self.bound)
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.initial {
            InitialLaw::Point(x) => x.clone(),
            InitialLaw::Gaussian { mean, sd } => mean
                .iter()
                .zip(sd)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + s * z
                })
                .collect(),
        }
    }

    /// One Euler-Maruyama step; the potential integral uses the trapezoid rule.
    fn step<R: Rng + ?Sized>(&self, t: f64, x: &mut Vec<f64>, dt: f64, rng: &mut R) -> Result<f64> {
        let v0 = self.potential(t, x)?;
        let sq = dt.sqrt();
        let next: Vec<f64> = (0..self.dim)
            .map(|i| {
                let z: f64 = StandardNormal.sample(rng);
                x[i] + self.drift(x, i) * dt + self.diffusion[i] * sq * z
            })
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowup(format!("Euler-Maruyama step at t = {t} left the reals")));
        }
        *x = next;
        let v1 = self.potential(t + dt, x)?;
        Ok(0.5 * (v0 + v1) * dt)
    }

    fn name(&self) -> &'static str {
        "euclidean-diffusion"
    }
}
