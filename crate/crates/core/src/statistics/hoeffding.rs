//! Hoeffding decomposition of a symmetric kernel relative to a reference
//! measure `μ`:
//!
//! ```text
//! θ       = μ^{⊗q}(F)
//! F^{(k)} = F integrated against μ in its last q-k arguments
//! h^{(k)} = F^{(k)} - Σ_{j<k} Σ_{J ⊂ [k], |J| = j} h^{(j)}(x_J) - θ
//! ```
//!
//! Each `h^{(k)}` integrates to zero in any single argument.

use std::sync::Arc;

use super::{odometer, Kernel};
use crate::error::{domain, Error, Result};

/// Finitely supported probability measure.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure<S> {
    atoms: Vec<S>,
    weights: Vec<f64>,
}

impl<S> DiscreteMeasure<S> {
    pub fn new(atoms: Vec<S>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(domain("a discrete measure needs matching, nonempty atoms and weights"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(domain("measure weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(domain(format!("measure weights sum to {total}, expected 1")));
        }
        Ok(Self { atoms, weights })
    }

    /// Uniform weights on the given sample.
    pub fn empirical(atoms: Vec<S>) -> Result<Self> {
        let w = 1.0 / atoms.len().max(1) as f64;
        let n = atoms.len();
        Self::new(atoms, vec![w; n])
    }

    pub fn atoms(&self) -> &[S] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn integrate(&self, f: impl Fn(&S) -> f64) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(a, w)| w * f(a)).sum()
    }
}

impl DiscreteMeasure<usize> {
    /// Probability vector on `{0, .., S-1}`, e.g. an exact `η_t`.
    pub fn on_states(probabilities: &[f64]) -> Result<Self> {
        Self::new((0..probabilities.len()).collect(), probabilities.to_vec())
    }
}

/// `F^{(k)}`: integrates the last `q - k` arguments of `F_sym` against
/// `reference`.
pub fn hoeffding_project<S>(
    kernel: &Kernel<S>,
    k: usize,
    reference: &DiscreteMeasure<S>,
) -> Result<Kernel<S>>
where
    S: Clone + Send + Sync + 'static,
{
    let q = kernel.arity();
    if k == 0 || k > q {
        return Err(domain(format!("projection order must be in 1..={q}, got {k}")));
    }
    if k == q {
        return Ok(kernel.symmetrized());
    }
    let inner = kernel.clone();
    let reference = Arc::new(reference.clone());
    let free = q - k;
    Kernel::general(k, kernel.bound(), true, move |xs: &[&S]| {
        integrate_tail(&inner, xs, free, &reference)
    })
}

fn integrate_tail<S: 'static>(kernel: &Kernel<S>, head: &[&S], free: usize, reference: &DiscreteMeasure<S>) -> f64 {
    let atoms = reference.atoms();
    let weights = reference.weights();
    let mut idx = vec![0usize; free];
    let mut args: Vec<&S> = head.to_vec();
    args.extend(std::iter::repeat_n(&atoms[0], free));
    let k = head.len();
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for (slot, &a) in idx.iter().enumerate() {
            args[k + slot] = &atoms[a];
            w *= weights[a];
        }
        if w != 0.0 {
            total += w * kernel.eval_sym(&args);
        }
        if !odometer(&mut idx, atoms.len()) {
            break;
        }
    }
    total
}

/// `θ = μ^{⊗q}(F)`.
pub fn hoeffding_theta<S: 'static>(kernel: &Kernel<S>, reference: &DiscreteMeasure<S>) -> f64 {
    integrate_tail(kernel, &[], kernel.arity(), reference)
}

/// `Σ_{J ⊂ [q], |J| = j} h(x_J)` as a kernel of arity `q`.
pub fn subset_sum_kernel<S>(h: &Kernel<S>, q: usize) -> Result<Kernel<S>>
where
    S: Send + Sync + 'static,
{
    let j = h.arity();
    if j > q {
        return Err(domain(format!("cannot spread an arity-{j} kernel over {q} arguments")));
    }
    let subsets = Arc::new(subsets_of_size(q, j));
    let inner = h.clone();
    let bound = h.bound() * subsets.len() as f64;
    Kernel::general(q, bound, true, move |xs: &[&S]| {
        let mut buf: Vec<&S> = Vec::with_capacity(j);
        subsets
            .iter()
            .map(|sub| {
                buf.clear();
                buf.extend(sub.iter().map(|&i| xs[i]));
                inner.eval(&buf)
            })
            .sum()
    })
}

/// Sorted index subsets of `{0, .., n-1}` of size `k`.
pub(crate) fn subsets_of_size(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..(1 << n))
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m & (1 << i) != 0).collect())
        .collect()
}

/// `θ` and the degenerate components `h^{(1)}, .., h^{(q)}`.
#[derive(Debug, Clone)]
pub struct HoeffdingDecomposition<S> {
    pub theta: f64,
    /// `components[k-1] = h^{(k)}`.
    pub components: Vec<Kernel<S>>,
    /// `projections[k-1] = F^{(k)}`.
    pub projections: Vec<Kernel<S>>,
    pub reference: DiscreteMeasure<S>,
}

impl<S: Clone + Send + Sync + 'static> HoeffdingDecomposition<S> {
    pub fn arity(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, k: usize) -> &Kernel<S> {
        &self.components[k - 1]
    }

    /// `θ + Σ_j Σ_{|J|=j} h^{(j)}(x_J)`, which equals `F_sym(x)`.
    pub fn reconstruct(&self, xs: &[&S]) -> f64 {
        let q = xs.len();
        let mut total = self.theta;
        let mut buf: Vec<&S> = Vec::with_capacity(q);
        for (j, h) in self.components.iter().enumerate() {
            for sub in subsets_of_size(q, j + 1) {
                buf.clear();
                buf.extend(sub.iter().map(|&i| xs[i]));
                total += h.eval(&buf);
            }
        }
        total
    }

    /// Largest `|∫ h^{(k)}(.., y, ..) μ(dy)|` over every order `k`, every
    /// slot and every tuple of `probes` filling the other slots.
    pub fn max_degeneracy_residual(&self, probes: &[S]) -> f64 {
        let atoms = self.reference.atoms();
        let weights = self.reference.weights();
        let mut worst = 0.0f64;
        for (k1, h) in self.components.iter().enumerate() {
            let k = k1 + 1;
            let others = k - 1;
            let mut idx = vec![0usize; others];
            loop {
                for slot in 0..k {
                    let mut total = 0.0;
                    for (a, w) in atoms.iter().zip(weights) {
                        let mut args: Vec<&S> = idx.iter().map(|&i| &probes[i]).collect();
                        args.insert(slot, a);
                        total += w * h.eval(&args);
                    }
                    worst = worst.max(total.abs());
                }
                if others == 0 || !odometer(&mut idx, probes.len()) {
                    break;
                }
            }
        }
        worst
    }
}

impl HoeffdingDecomposition<usize> {
    /// Replaces every component and projection by its table on
    /// `{0, .., S-1}^k`.
    pub fn tabulated(&self, states: usize) -> Result<Self> {
        Ok(Self {
            theta: self.theta,
            components: self
                .components
                .iter()
                .map(|h| h.tabulated(states))
                .collect::<Result<_>>()?,
            projections: self
                .projections
                .iter()
                .map(|f| f.tabulated(states))
                .collect::<Result<_>>()?,
            reference: self.reference.clone(),
        })
    }
}

/// Number of probe points used by the degeneracy check.
const DEGENERACY_PROBES: usize = 4;

/// Builds `θ` and `h^{(1)}, .., h^{(q)}` recursively and checks that each
/// component is degenerate against `reference`.
pub fn hoeffding_decompose<S>(
    kernel: &Kernel<S>,
    reference: &DiscreteMeasure<S>,
) -> Result<HoeffdingDecomposition<S>>
where
    S: Clone + Send + Sync + 'static,
{
    let q = kernel.arity();
    let theta = hoeffding_theta(kernel, reference);
    let projections: Vec<Kernel<S>> = (1..=q)
        .map(|k| hoeffding_project(kernel, k, reference))
        .collect::<Result<_>>()?;
    let mut components: Vec<Kernel<S>> = Vec::with_capacity(q);
    for k in 1..=q {
        let fk = projections[k - 1].clone();
        let lower: Vec<(Kernel<S>, Vec<Vec<usize>>)> = components
            .iter()
            .enumerate()
            .map(|(j1, h)| (h.clone(), subsets_of_size(k, j1 + 1)))
            .collect();
        let bound = kernel.bound() * 2f64.powi(k as i32);
        let h = Kernel::general(k, bound, true, move |xs: &[&S]| {
            let mut v = fk.eval(xs) - theta;
            let mut buf: Vec<&S> = Vec::with_capacity(xs.len());
            for (h, subsets) in &lower {
                for sub in subsets {
                    buf.clear();
                    buf.extend(sub.iter().map(|&i| xs[i]));
                    v -= h.eval(&buf);
                }
            }
            v
        })?;
        components.push(h);
    }
    let dec = HoeffdingDecomposition {
        theta,
        components,
        projections,
        reference: reference.clone(),
    };
    let probes: Vec<S> = reference.atoms().iter().take(DEGENERACY_PROBES).cloned().collect();
    let residual = dec.max_degeneracy_residual(&probes);
    let scale = kernel.bound().max(1.0);
    if residual > 1e-9 * scale * 2f64.powi(q as i32) {
        return Err(Error::InvariantViolation(format!(
            "Hoeffding component fails to integrate to zero (residual {residual:.3e})"
        )));
    }
    Ok(dec)
}
