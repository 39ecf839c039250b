use rand::Rng;
use rand_distr::{Distribution, Exp};

use super::{FeynmanKacModel, OracleResult};
use crate::error::{domain, Error, Result};
use crate::simulate::{self, Ensemble};
use crate::statistics::{self, Kernel};

const LAW_TOLERANCE: f64 = 1e-12;

/// Potential on a finite state space: a per-state table, optionally
/// switching tables at fixed times.
#[derive(Debug, Clone, PartialEq)]
pub enum FinitePotential {
    Table(Vec<f64>),
    /// `tables[i]` is in force on `[breaks[i-1], breaks[i])`, with
    /// `breaks[-1] = 0` and the last table extending to infinity.
    Piecewise { breaks: Vec<f64>, tables: Vec<Vec<f64>> },
}

impl FinitePotential {
    pub fn constant(value: f64, states: usize) -> Self {
        Self::Table(vec![value; states])
    }

    fn piece_index(&self, t: f64) -> usize {
        match self {
            Self::Table(_) => 0,
            Self::Piecewise { breaks, .. } => breaks.partition_point(|&b| b <= t),
        }
    }

    fn table(&self, piece: usize) -> &[f64] {
        match self {
            Self::Table(v) => v,
            Self::Piecewise { tables, .. } => &tables[piece],
        }
    }

    pub fn value(&self, t: f64, state: usize) -> f64 {
        self.table(self.piece_index(t))[state]
    }

    /// Time intervals on which one table is in force, clipped to `[a, b]`.
    pub fn pieces(&self, a: f64, b: f64) -> Vec<(f64, f64, &[f64])> {
        match self {
            Self::Table(v) => vec![(a, b, v.as_slice())],
            Self::Piecewise { breaks, tables } => {
                let mut out = Vec::new();
                let mut lo = a;
                let mut piece = self.piece_index(a);
                while lo < b {
                    let hi = breaks.get(piece).copied().unwrap_or(f64::INFINITY).min(b);
                    out.push((lo, hi, tables[piece].as_slice()));
                    lo = hi;
                    piece += 1;
                }
                out
            }
        }
    }

    /// `∫_a^b V_s(state) ds`.
    pub fn integral(&self, state: usize, a: f64, b: f64) -> f64 {
        match self {
            Self::Table(v) => v[state] * (b - a),
            Self::Piecewise { .. } => self
                .pieces(a, b)
                .into_iter()
                .map(|(lo, hi, table)| table[state] * (hi - lo))
                .sum(),
        }
    }

    /// `Σ_s counts[s] ∫_a^b V_u(s) du`.
    pub fn integrate_counts(&self, counts: &[usize], a: f64, b: f64) -> f64 {
        self.pieces(a, b)
            .into_iter()
            .map(|(lo, hi, table)| {
                let rate: f64 = counts.iter().zip(table).map(|(&c, v)| c as f64 * v).sum();
                rate * (hi - lo)
            })
            .sum()
    }

    fn tables(&self) -> Vec<&[f64]> {
        match self {
            Self::Table(v) => vec![v.as_slice()],
            Self::Piecewise { tables, .. } => tables.iter().map(Vec::as_slice).collect(),
        }
    }

    fn is_time_constant(&self) -> bool {
        matches!(self, Self::Table(_))
    }
}

/// Continuous-time jump chain on `{0, .., S-1}` with a constant rate matrix.
#[derive(Debug, Clone)]
pub struct FiniteStateModel {
    states: usize,
    rates: Vec<f64>,
    exit_rates: Vec<f64>,
    max_exit_rate: f64,
    potential: FinitePotential,
    bound: f64,
    initial: Vec<f64>,
    initial_cdf: Vec<f64>,
}

impl FiniteStateModel {
    /// Validates and builds a model from a row-major rate matrix.
    pub fn new(
        rates: Vec<Vec<f64>>,
        potential: FinitePotential,
        bound: f64,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let states = rates.len();
        if states == 0 {
            return Err(domain("rate matrix must have at least one state"));
        }
        let mut flat = Vec::with_capacity(states * states);
        for (i, row) in rates.iter().enumerate() {
            if row.len() != states {
                return Err(domain(format!("rate matrix row {i} has {} entries, expected {states}", row.len())));
            }
            let scale: f64 = row.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvariantViolation(format!("rate[{i}][{j}] is not finite")));
                }
                if i != j && v < 0.0 {
                    return Err(Error::InvariantViolation(format!("off-diagonal rate[{i}][{j}] = {v} is negative")));
                }
            }
            let sum: f64 = row.iter().sum();
            if sum.abs() > 1e-12 * scale {
                return Err(Error::InvariantViolation(format!("rate matrix row {i} sums to {sum}, expected 0")));
            }
            flat.extend_from_slice(row);
        }
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::InvariantViolation(format!("potential bound must be positive and finite, got {bound}")));
        }
        if let FinitePotential::Piecewise { breaks, tables } = &potential {
            if tables.len() != breaks.len() + 1 {
                return Err(domain("piecewise potential needs one more table than break points"));
            }
            if breaks.iter().any(|b| !(*b > 0.0) || !b.is_finite())
                || breaks.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(domain("potential break points must be positive and strictly increasing"));
            }
        }
        for (p, table) in potential.tables().into_iter().enumerate() {
            if table.len() != states {
                return Err(domain(format!("potential table {p} has {} entries, expected {states}", table.len())));
            }
            for (s, &v) in table.iter().enumerate() {
                if !(0.0..=bound).contains(&v) {
                    return Err(Error::InvariantViolation(format!(
                        "potential table {p} state {s}: value {v} outside [0, {bound}]"
                    )));
                }
            }
        }
        if initial.len() != states {
            return Err(domain(format!("initial law has {} entries, expected {states}", initial.len())));
        }
        if initial.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvariantViolation("initial law has a negative entry".into()));
        }
        let total: f64 = initial.iter().sum();
        if (total - 1.0).abs() > LAW_TOLERANCE {
            return Err(Error::InvariantViolation(format!("initial law sums to {total}, expected 1")));
        }
        let mut acc = 0.0;
        let initial_cdf = initial
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let exit_rates: Vec<f64> = (0..states).map(|i| -flat[i * states + i]).collect();
        let max_exit_rate = exit_rates.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            states,
            rates: flat,
            exit_rates,
            max_exit_rate,
            potential,
            bound,
            initial,
            initial_cdf,
        })
    }

    /// Same chain and initial law under another potential.
    pub fn with_potential(&self, potential: FinitePotential, bound: f64) -> Result<Self> {
        let rows = (0..self.states).map(|i| self.rate_row(i).to_vec()).collect();
        Self::new(rows, potential, bound, self.initial.clone())
    }

    pub fn num_states(&self) -> usize {
        self.states
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates[from * self.states + to]
    }

    pub fn rate_row(&self, from: usize) -> &[f64] {
        &self.rates[from * self.states..(from + 1) * self.states]
    }

    pub fn exit_rate(&self, state: usize) -> f64 {
        self.exit_rates[state]
    }

    pub fn max_exit_rate(&self) -> f64 {
        self.max_exit_rate
    }

    pub fn initial_law(&self) -> &[f64] {
        &self.initial
    }

    pub fn potential_fn(&self) -> &FinitePotential {
        &self.potential
    }

    pub fn has_time_constant_potential(&self) -> bool {
        self.potential.is_time_constant()
    }

    /// Jump target for a state leaving `from`, chosen by `u ∈ [0, exit_rate)`.
    /// Returns `from` when `u` falls beyond the exit rate (a uniformization
    /// self-loop).
    pub(crate) fn jump_target(&self, from: usize, u: f64) -> usize {
        let mut acc = 0.0;
        for (to, &r) in self.rate_row(from).iter().enumerate() {
            if to == from {
                continue;
            }
            acc += r;
            if u < acc {
                return to;
            }
        }
        from
    }
}

impl FeynmanKacModel for FiniteStateModel {
    type State = usize;

    fn potential_bound(&self) -> f64 {
        self.bound
    }

    fn potential_value(&self, t: f64, x: &usize) -> f64 {
        self.potential.value(t, *x)
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let idx = self.initial_cdf.partition_point(|&c| c <= u);
        // guard against rounding in the last cumulative entry
        idx.min(self.states - 1)
    }

    /// Exact jump-chain path over `[t, t + dt]`.
    fn step<R: Rng + ?Sized>(&self, t: f64, x: &mut usize, dt: f64, rng: &mut R) -> Result<f64> {
        let end = t + dt;
        let mut now = t;
        let mut integral = 0.0;
        loop {
            let exit = self.exit_rates[*x];
            let hold = if exit > 0.0 {
                Exp::new(exit).expect("positive rate").sample(rng)
            } else {
                f64::INFINITY
            };
            let next = now + hold;
            if next >= end {
                integral += self.potential.integral(*x, now, end);
                return Ok(integral);
            }
            integral += self.potential.integral(*x, now, next);
            let u = rng.random::<f64>() * exit;
            *x = self.jump_target(*x, u);
            now = next;
        }
    }

    /// Exact on any interval, so no sub-stepping is needed.
    fn propagate<R: Rng + ?Sized>(
        &self,
        t0: f64,
        t1: f64,
        x: &mut usize,
        _max_dt: f64,
        rng: &mut R,
    ) -> Result<f64> {
        if t1 <= t0 {
            return Ok(0.0);
        }
        self.step(t0, x, t1 - t0, rng)
    }

    fn advance_ensemble<R: Rng + ?Sized>(
        &self,
        ensemble: &mut Ensemble<usize>,
        t_end: f64,
        dt: f64,
        rng: &mut R,
    ) -> Result<()> {
        if !(dt > 0.0) {
            return Err(domain(format!("dt must be positive, got {dt}")));
        }
        simulate::advance_uniformized(self, ensemble, t_end, rng)
    }

    fn u_statistic(&self, points: &[usize], kernel: &Kernel<usize>) -> Result<f64> {
        if kernel.is_product() {
            return statistics::u_statistic(points, kernel);
        }
        let mut counts = vec![0usize; self.states];
        for &p in points {
            counts[p] += 1;
        }
        statistics::u_statistic_from_counts(&counts, kernel)
    }

    fn states(&self) -> Option<Vec<usize>> {
        Some((0..self.states).collect())
    }

    fn exact_flow(&self, t: f64) -> Option<Result<OracleResult>> {
        Some(super::oracle::flow(self, t))
    }

    fn name(&self) -> &'static str {
        "finite-state"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    fn two_state() -> FiniteStateModel {
        FiniteStateModel::new(
            vec![vec![-1.0, 1.0], vec![2.0, -2.0]],
            FinitePotential::Table(vec![0.5, 1.0]),
            1.0,
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_rows() {
        let r = FiniteStateModel::new(
            vec![vec![-1.0, 0.5], vec![2.0, -2.0]],
            FinitePotential::constant(0.0, 2),
            1.0,
            vec![1.0, 0.0],
        );
        assert!(matches!(r, Err(Error::InvariantViolation(_))));
        let r = FiniteStateModel::new(
            vec![vec![1.0, -1.0], vec![2.0, -2.0]],
            FinitePotential::constant(0.0, 2),
            1.0,
            vec![1.0, 0.0],
        );
        assert!(matches!(r, Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn rejects_potential_above_bound() {
        let r = FiniteStateModel::new(
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            FinitePotential::Table(vec![0.5, 1.5]),
            1.0,
            vec![0.5, 0.5],
        );
        assert!(matches!(r, Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn rejects_unnormalized_initial_law() {
        let r = FiniteStateModel::new(
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            FinitePotential::constant(0.0, 2),
            1.0,
            vec![0.5, 0.6],
        );
        assert!(matches!(r, Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn frozen_chain_never_moves() {
        let m = FiniteStateModel::new(
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            FinitePotential::constant(0.3, 2),
            1.0,
            vec![0.5, 0.5],
        )
        .unwrap();
        let mut rng = Streams::new(3).rng(0);
        for s in 0..2 {
            let y = super::super::step_state(&m, 0.0, &s, 5.0, &mut rng).unwrap();
            assert_eq!(y, s);
            let mut x = s;
            let integral = m.step(0.0, &mut x, 2.0, &mut rng).unwrap();
            assert!((integral - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn piecewise_integral_splits_at_breaks() {
        let p = FinitePotential::Piecewise {
            breaks: vec![0.5, 1.0],
            tables: vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![4.0, 0.0]],
        };
        assert!((p.integral(0, 0.0, 2.0) - (0.5 + 1.0 + 4.0)).abs() < 1e-15);
        assert!((p.integral(0, 0.25, 0.75) - (0.25 + 0.5)).abs() < 1e-15);
        assert_eq!(p.value(0.5, 0), 2.0);
        assert!((p.integrate_counts(&[3, 7], 0.0, 1.0) - 3.0 * 1.5).abs() < 1e-15);
    }

    #[test]
    fn initial_sampling_frequencies() {
        let m = FiniteStateModel::new(
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            FinitePotential::constant(0.0, 2),
            1.0,
            vec![0.3, 0.7],
        )
        .unwrap();
        let mut rng = Streams::new(5).rng(0);
        let n = 100_000;
        let zeros = (0..n).filter(|_| m.sample_initial(&mut rng) == 0).count();
        let p = zeros as f64 / n as f64;
        let se = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((p - 0.3).abs() < 3.0 * se, "p = {p}");
    }

    #[test]
    fn exact_step_transition_probability() {
        // P(X_t = 1 | X_0 = 0) for the chain [[-1,1],[2,-2]] is (1 - e^{-3t})/3.
        let m = two_state();
        let mut rng = Streams::new(11).rng(0);
        let t = 0.4;
        let n = 200_000;
        let hits = (0..n)
            .filter(|_| super::super::step_state(&m, 0.0, &0, t, &mut rng).unwrap() == 1)
            .count();
        let p_exact = (1.0 - (-3.0f64 * t).exp()) / 3.0;
        let p = hits as f64 / n as f64;
        let se = (p_exact * (1.0 - p_exact) / n as f64).sqrt();
        assert!((p - p_exact).abs() < 4.0 * se, "{p} vs {p_exact}");
    }
}
