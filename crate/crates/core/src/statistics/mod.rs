//! Kernels and empirical U-statistics.
//!
//! For points `x = (x_1, .., x_N)` and a kernel `F` of arity `q`,
//!
//! ```text
//! m(x)^{⊗q}(F) = N^{-q}     Σ_{s ∈ [N]^q}    F(x_{s_1}, .., x_{s_q})
//! m(x)^{⊙q}(F) = (N)_q^{-1} Σ_{s injective}  F(x_{s_1}, .., x_{s_q})
//! ```

mod hoeffding;
mod partitions;

use std::fmt;
use std::sync::Arc;

pub use hoeffding::{
    hoeffding_decompose, hoeffding_project, hoeffding_theta, subset_sum_kernel, DiscreteMeasure,
    HoeffdingDecomposition,
};
pub use partitions::{pair_partitions, rubin_vitale, set_partitions};

use crate::error::{domain, Error, Result};

/// Largest supported kernel arity.
pub const MAX_ARITY: usize = 8;

type ScalarClosure<S> = Arc<dyn Fn(&S) -> f64 + Send + Sync>;
type TupleClosure<S> = Arc<dyn Fn(&[&S]) -> f64 + Send + Sync>;

/// Bounded univariate function with a declared centering flag.
pub struct ScalarFn<S> {
    f: ScalarClosure<S>,
    centered: bool,
}

impl<S> Clone for ScalarFn<S> {
    fn clone(&self) -> Self {
        Self {
            f: Arc::clone(&self.f),
            centered: self.centered,
        }
    }
}

impl<S> fmt::Debug for ScalarFn<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarFn").field("centered", &self.centered).finish()
    }
}

impl<S: 'static> ScalarFn<S> {
    pub fn new(f: impl Fn(&S) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            f: Arc::new(f),
            centered: false,
        }
    }

    pub fn centered(mut self, centered: bool) -> Self {
        self.centered = centered;
        self
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn eval(&self, x: &S) -> f64 {
        (self.f)(x)
    }

    pub fn product(&self, other: &ScalarFn<S>) -> ScalarFn<S> {
        let (a, b) = (Arc::clone(&self.f), Arc::clone(&other.f));
        ScalarFn::new(move |x| a(x) * b(x))
    }
}

impl ScalarFn<usize> {
    pub fn from_table(values: Vec<f64>) -> Self {
        Self::new(move |&s| values[s])
    }
}

pub enum KernelForm<S> {
    General(TupleClosure<S>),
    /// `f_1 ⊗ .. ⊗ f_q`, evaluated symmetrized.
    Product(Vec<ScalarFn<S>>),
}

impl<S> Clone for KernelForm<S> {
    fn clone(&self) -> Self {
        match self {
            Self::General(f) => Self::General(Arc::clone(f)),
            Self::Product(fs) => Self::Product(fs.clone()),
        }
    }
}

/// Bounded test function on `E^q`.
pub struct Kernel<S> {
    arity: usize,
    form: KernelForm<S>,
    bound: f64,
    symmetric: bool,
}

impl<S> Clone for Kernel<S> {
    fn clone(&self) -> Self {
        Self {
            arity: self.arity,
            form: self.form.clone(),
            bound: self.bound,
            symmetric: self.symmetric,
        }
    }
}

impl<S> fmt::Debug for Kernel<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let form = match &self.form {
            KernelForm::General(_) => "general",
            KernelForm::Product(_) => "product",
        };
        f.debug_struct("Kernel")
            .field("arity", &self.arity)
            .field("form", &form)
            .field("bound", &self.bound)
            .field("symmetric", &self.symmetric)
            .finish()
    }
}

fn check_arity(q: usize) -> Result<()> {
    if q == 0 || q > MAX_ARITY {
        return Err(domain(format!("kernel arity must be in 1..={MAX_ARITY}, got {q}")));
    }
    Ok(())
}

fn check_bound(bound: f64) -> Result<()> {
    if !(bound >= 0.0) || !bound.is_finite() {
        return Err(domain(format!("kernel bound must be finite and nonnegative, got {bound}")));
    }
    Ok(())
}

impl<S: 'static> Kernel<S> {
    /// Arbitrary kernel; `symmetric` declares invariance under permutations
    /// of the arguments.
    pub fn general(
        arity: usize,
        bound: f64,
        symmetric: bool,
        f: impl Fn(&[&S]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        check_arity(arity)?;
        check_bound(bound)?;
        Ok(Self {
            arity,
            form: KernelForm::General(Arc::new(f)),
            bound,
            symmetric,
        })
    }

    /// Symmetrized tensor product of univariate functions.
    pub fn product(factors: Vec<ScalarFn<S>>, bound: f64) -> Result<Self> {
        check_arity(factors.len())?;
        check_bound(bound)?;
        Ok(Self {
            arity: factors.len(),
            form: KernelForm::Product(factors),
            bound,
            symmetric: true,
        })
    }

    /// `f^{⊗q}`.
    pub fn power(f: ScalarFn<S>, q: usize, bound: f64) -> Result<Self> {
        Self::product(vec![f; q], bound)
    }

    pub fn constant(arity: usize, c: f64) -> Result<Self> {
        Self::general(arity, c.abs(), true, move |_| c)
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn is_product(&self) -> bool {
        matches!(self.form, KernelForm::Product(_))
    }

    pub fn factors(&self) -> Option<&[ScalarFn<S>]> {
        match &self.form {
            KernelForm::Product(fs) => Some(fs),
            KernelForm::General(_) => None,
        }
    }

    /// Every product factor is declared centered.
    pub fn is_centered_product(&self) -> bool {
        self.factors().is_some_and(|fs| fs.iter().all(ScalarFn::is_centered))
    }

    /// `F(x_1, .., x_q)`. Product kernels return their symmetrized value.
    pub fn eval(&self, xs: &[&S]) -> f64 {
        debug_assert_eq!(xs.len(), self.arity);
        match &self.form {
            KernelForm::General(f) => f(xs),
            KernelForm::Product(fs) => {
                let q = fs.len();
                if q == 1 {
                    return fs[0].eval(xs[0]);
                }
                let mut m = [0.0; MAX_ARITY * MAX_ARITY];
                for (a, f) in fs.iter().enumerate() {
                    for (b, x) in xs.iter().enumerate() {
                        m[a * q + b] = f.eval(x);
                    }
                }
                permanent(&m[..q * q], q) / factorial(q)
            }
        }
    }

    /// `F_sym(x) = (1/q!) Σ_σ F(x_σ)`.
    pub fn eval_sym(&self, xs: &[&S]) -> f64 {
        if self.symmetric {
            return self.eval(xs);
        }
        let q = self.arity;
        let mut perm: Vec<usize> = (0..q).collect();
        let mut buf: Vec<&S> = xs.to_vec();
        let mut total = 0.0;
        let mut count = 0usize;
        loop {
            for (slot, &p) in buf.iter_mut().zip(&perm) {
                *slot = xs[p];
            }
            total += self.eval(&buf);
            count += 1;
            if !next_permutation(&mut perm) {
                break;
            }
        }
        total / count as f64
    }

    /// `F_sym` as a kernel of its own.
    pub fn symmetrized(&self) -> Self
    where
        S: Send + Sync,
    {
        if self.symmetric {
            return self.clone();
        }
        let inner = self.clone();
        Self {
            arity: self.arity,
            form: KernelForm::General(Arc::new(move |xs| inner.eval_sym(xs))),
            bound: self.bound,
            symmetric: true,
        }
    }

    fn checked(&self, v: f64) -> Result<f64> {
        if !(v.abs() <= self.bound * (1.0 + 1e-12) + 1e-300) {
            return Err(Error::InvariantViolation(format!(
                "kernel value {v} exceeds the declared bound {}",
                self.bound
            )));
        }
        Ok(v)
    }
}

impl Kernel<usize> {
    /// Kernel on a finite state space from a table in row-major order:
    /// `F(s_1, .., s_q) = table[s_1 S^{q-1} + .. + s_q]`.
    pub fn from_table(arity: usize, states: usize, table: Vec<f64>) -> Result<Self> {
        check_arity(arity)?;
        if table.len() != states.pow(arity as u32) {
            return Err(domain(format!(
                "kernel table needs {} entries, got {}",
                states.pow(arity as u32),
                table.len()
            )));
        }
        let bound = table.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let symmetric = table_is_symmetric(arity, states, &table);
        Self::general(arity, bound, symmetric, move |xs| table[flat_index(xs, states)])
    }

    /// Tabulates this kernel on `{0, .., S-1}^q`.
    pub fn tabulated(&self, states: usize) -> Result<Self> {
        let q = self.arity;
        let mut table = Vec::with_capacity(states.pow(q as u32));
        let mut idx = vec![0usize; q];
        loop {
            let refs: Vec<&usize> = idx.iter().collect();
            table.push(self.eval(&refs));
            if !odometer(&mut idx, states) {
                break;
            }
        }
        let mut k = Self::from_table(q, states, table)?;
        k.bound = k.bound.max(self.bound);
        k.symmetric |= self.symmetric;
        Ok(k)
    }
}

fn flat_index(xs: &[&usize], states: usize) -> usize {
    xs.iter().fold(0, |acc, &&s| acc * states + s)
}

fn table_is_symmetric(q: usize, states: usize, table: &[f64]) -> bool {
    let mut idx = vec![0usize; q];
    loop {
        let base = table[idx.iter().fold(0, |a, &s| a * states + s)];
        for a in 0..q {
            for b in a + 1..q {
                let mut sw = idx.clone();
                sw.swap(a, b);
                if table[sw.iter().fold(0, |acc, &s| acc * states + s)] != base {
                    return false;
                }
            }
        }
        if !odometer(&mut idx, states) {
            return true;
        }
    }
}

/// Increments a base-`radix` counter; false once it wraps to zero.
pub(crate) fn odometer(idx: &mut [usize], radix: usize) -> bool {
    for d in idx.iter_mut().rev() {
        *d += 1;
        if *d < radix {
            return true;
        }
        *d = 0;
    }
    false
}

/// Lexicographic successor; false at the last permutation.
pub(crate) fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

pub fn factorial(q: usize) -> f64 {
    (1..=q).map(|k| k as f64).product()
}

/// Ryser's formula for the permanent of a row-major `q × q` matrix.
fn permanent(m: &[f64], q: usize) -> f64 {
    let mut total = 0.0;
    for mask in 1u32..(1 << q) {
        let mut prod = 1.0;
        for row in 0..q {
            let mut s = 0.0;
            for col in 0..q {
                if mask & (1 << col) != 0 {
                    s += m[row * q + col];
                }
            }
            prod *= s;
        }
        let sign = if (q as u32 - mask.count_ones()) % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * prod;
    }
    total
}

/// `(n)_q = n! / (n - q)!`, or an error on overflow.
pub fn falling_factorial(n: u64, q: u64) -> Result<u128> {
    if q > n {
        return Ok(0);
    }
    let mut acc: u128 = 1;
    for k in 0..q {
        acc = acc
            .checked_mul(u128::from(n - k))
            .ok_or_else(|| domain(format!("({n})_{q} overflows u128")))?;
    }
    Ok(acc)
}

pub(crate) fn falling_factorial_f64(n: usize, q: usize) -> f64 {
    (0..q).map(|k| (n - k) as f64).product()
}

fn binomial_f64(n: usize, k: usize) -> f64 {
    falling_factorial_f64(n, k) / factorial(k)
}

/// Threshold below which U-statistics enumerate all injections.
const DIRECT_MAX_ARITY: usize = 3;
const DIRECT_MAX_POINTS: usize = 12;

/// `m(x)^{⊙q}(F)`.
///
/// Product kernels go through the Rubin-Vitale expansion. General kernels
/// enumerate injections when `q <= 3` or `N <= 12`, and otherwise sum
/// `F_sym` over sorted index subsets.
pub fn u_statistic<S: 'static>(points: &[S], kernel: &Kernel<S>) -> Result<f64> {
    let n = points.len();
    let q = kernel.arity();
    if n < q {
        return Err(domain(format!("U-statistic of order {q} needs at least {q} points, got {n}")));
    }
    if kernel.is_product() {
        let total = rubin_vitale(points, kernel)?;
        return Ok(total / falling_factorial_f64(n, q));
    }
    if q <= DIRECT_MAX_ARITY || n <= DIRECT_MAX_POINTS {
        u_statistic_injections(points, kernel)
    } else {
        u_statistic_subsets(points, kernel)
    }
}

/// Direct average over ordered tuples of distinct indices.
pub fn u_statistic_injections<S: 'static>(points: &[S], kernel: &Kernel<S>) -> Result<f64> {
    let n = points.len();
    let q = kernel.arity();
    if n < q {
        return Err(domain(format!("U-statistic of order {q} needs at least {q} points, got {n}")));
    }
    let mut idx: Vec<usize> = (0..q).collect();
    let mut buf: Vec<&S> = idx.iter().map(|&i| &points[i]).collect();
    let mut total = 0.0;
    let mut used = vec![false; n];
    // depth-first enumeration of injections
    fn rec<'a, S: 'static>(
        depth: usize,
        points: &'a [S],
        kernel: &Kernel<S>,
        used: &mut [bool],
        idx: &mut [usize],
        buf: &mut Vec<&'a S>,
        total: &mut f64,
    ) -> Result<()> {
        if depth == idx.len() {
            *total += kernel.checked(kernel.eval(buf))?;
            return Ok(());
        }
        for i in 0..points.len() {
            if used[i] {
                continue;
            }
            used[i] = true;
            idx[depth] = i;
            buf[depth] = &points[i];
            rec(depth + 1, points, kernel, used, idx, buf, total)?;
            used[i] = false;
        }
        Ok(())
    }
    rec(0, points, kernel, &mut used, &mut idx, &mut buf, &mut total)?;
    Ok(total / falling_factorial_f64(n, q))
}

/// Average of `F_sym` over sorted index subsets of size `q`.
pub fn u_statistic_subsets<S: 'static>(points: &[S], kernel: &Kernel<S>) -> Result<f64> {
    let n = points.len();
    let q = kernel.arity();
    if n < q {
        return Err(domain(format!("U-statistic of order {q} needs at least {q} points, got {n}")));
    }
    let mut idx: Vec<usize> = (0..q).collect();
    let mut buf: Vec<&S> = idx.iter().map(|&i| &points[i]).collect();
    let mut total = 0.0;
    loop {
        for (slot, &i) in buf.iter_mut().zip(&idx) {
            *slot = &points[i];
        }
        total += kernel.checked(kernel.eval_sym(&buf))?;
        // next combination in lexicographic order
        let mut k = q;
        while k > 0 && idx[k - 1] == n - q + k - 1 {
            k -= 1;
        }
        if k == 0 {
            break;
        }
        idx[k - 1] += 1;
        for l in k..q {
            idx[l] = idx[l - 1] + 1;
        }
    }
    Ok(total / binomial_f64(n, q))
}

/// `m(x)^{⊙q}(F)` on a finite state space from occupation counts.
///
/// The number of injections landing on a state tuple `(s_1, .., s_q)` is
/// `Π_s (c_s)_{m_s}`, with `m_s` the multiplicity of `s` in the tuple.
pub fn u_statistic_from_counts(counts: &[usize], kernel: &Kernel<usize>) -> Result<f64> {
    let n: usize = counts.iter().sum();
    let q = kernel.arity();
    if n < q {
        return Err(domain(format!("U-statistic of order {q} needs at least {q} points, got {n}")));
    }
    let states = counts.len();
    let mut idx = vec![0usize; q];
    let mut used = vec![0usize; states];
    let mut total = 0.0;
    loop {
        used.iter_mut().for_each(|u| *u = 0);
        let mut weight = 1.0;
        for &s in &idx {
            let avail = counts[s].saturating_sub(used[s]);
            weight *= avail as f64;
            used[s] += 1;
        }
        if weight != 0.0 {
            let refs: Vec<&usize> = idx.iter().collect();
            total += weight * kernel.checked(kernel.eval(&refs))?;
        }
        if !odometer(&mut idx, states) {
            break;
        }
    }
    Ok(total / falling_factorial_f64(n, q))
}

/// `m(x)^{⊗q}(F)`: average over all `N^q` tuples with repetition.
pub fn tensor_statistic<S: 'static>(points: &[S], kernel: &Kernel<S>) -> Result<f64> {
    let n = points.len();
    if n == 0 {
        return Err(domain("tensor statistic of an empty point set"));
    }
    let q = kernel.arity();
    let mut idx = vec![0usize; q];
    let mut total = 0.0;
    loop {
        let refs: Vec<&S> = idx.iter().map(|&i| &points[i]).collect();
        total += kernel.checked(kernel.eval(&refs))?;
        if !odometer(&mut idx, n) {
            break;
        }
    }
    Ok(total / (n as f64).powi(q as i32))
}
