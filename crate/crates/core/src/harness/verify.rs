//! The acceptance suite: thirteen checks run against a finite-state model
//! whose flows are known exactly.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;

use super::{
    chi_square_poisson, ks_normality, power_law_fit, run_replicas, slope_fit, write_replica_csv,
    ExperimentPlan, Functional, ReplicaMatrix,
};
use crate::asymptotics::{
    clt_covariance, hermite_limit_prediction, laurent_fit, sample_covariance, wick_delta, CovarianceReport,
    EstimateSeries, SeriesEntry,
};
use crate::auxiliary::{
    conditional_mean, derivative_formula, is_wick_coupled, q_measure_mixture, ring_counts, wick_conditioned,
    wick_coupling_probability, FlowFallback, SamplerConfig, DEFAULT_TRUNCATION,
};
use crate::error::{domain, Error, Result};
use crate::estimate::{Estimate, Moments};
use crate::models::{FeynmanKacModel, FinitePotential, FiniteStateModel, OracleResult};
use crate::rng::Streams;
use crate::statistics::{
    falling_factorial_f64, hoeffding_decompose, pair_partitions, rubin_vitale, subset_sum_kernel, u_statistic,
    u_statistic_injections, u_statistic_subsets, DiscreteMeasure, Kernel, ScalarFn,
};

/// Identifier and short name of every criterion, in run order.
pub const CRITERIA: [(u8, &str); 13] = [
    (1, "algebraic-identities"),
    (2, "ring-law"),
    (3, "wick-coupling-probability"),
    (4, "oracle-convergence"),
    (5, "q-measure-consistency"),
    (6, "centered-rate"),
    (7, "derivative-cross-check"),
    (8, "wick-pairing"),
    (9, "clt-covariance"),
    (10, "degenerate-kernel-clt"),
    (11, "hermite-limit"),
    (12, "variance-bound"),
    (13, "determinism"),
];

pub fn criterion_name(id: u8) -> Option<&'static str> {
    CRITERIA.iter().find(|c| c.0 == id).map(|c| c.1)
}

/// Sample sizes and grids for each criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSizes {
    pub identity_particles: usize,
    pub ring_runs: usize,
    pub ring_arity: usize,
    pub ring_particles: usize,
    pub ring_bound: f64,
    pub coupling_samples: usize,
    pub convergence_grid: Vec<usize>,
    pub convergence_replicas: usize,
    pub mixture_grid: Vec<usize>,
    pub mixture_samples: usize,
    pub mixture_replicas: usize,
    pub rate_grid: Vec<usize>,
    pub rate_replicas: usize,
    pub derivative_grid: Vec<usize>,
    pub derivative_order: usize,
    pub derivative_samples: usize,
    pub formula_samples: usize,
    pub wick_grid: Vec<usize>,
    pub wick_order: usize,
    pub wick_replicas: usize,
    pub wick_samples: usize,
    pub clt_particles: usize,
    pub clt_replicas: usize,
    pub w_samples: usize,
    pub hermite_particles: usize,
    pub hermite_replicas: usize,
    pub variance_grid: Vec<usize>,
    pub variance_replicas: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            identity_particles: 7,
            ring_runs: 10_000,
            ring_arity: 3,
            ring_particles: 20,
            ring_bound: 1.0,
            coupling_samples: 10_000,
            convergence_grid: (1..=16).map(|k| 25 * k).collect(),
            convergence_replicas: 400,
            mixture_grid: vec![10, 50],
            mixture_samples: 200_000,
            mixture_replicas: 20_000,
            rate_grid: vec![25, 50, 100, 200, 400],
            rate_replicas: 2_000,
            derivative_grid: vec![20, 25, 30, 40, 50, 60, 80, 100, 140, 200],
            derivative_order: 2,
            derivative_samples: 4_000_000,
            formula_samples: 2_000_000,
            wick_grid: vec![50, 100, 200, 400],
            wick_order: 1,
            wick_replicas: 4_000,
            wick_samples: 2_000_000,
            clt_particles: 500,
            clt_replicas: 2_000,
            w_samples: 5_000_000,
            hermite_particles: 500,
            hermite_replicas: 2_000,
            variance_grid: vec![25, 50, 100, 200, 400],
            variance_replicas: 1_000,
        }
    }
}

/// Model, observables and sizes for a suite run.
///
/// `test_functions` are raw per-state tables; the suite centers them under
/// the exact `η_t`. `kernel_table` is a symmetric two-argument kernel in
/// row-major order.
#[derive(Debug, Clone)]
pub struct SuiteSettings {
    pub model: FiniteStateModel,
    pub t: f64,
    pub dt: f64,
    pub seed: u64,
    pub observable: Vec<f64>,
    pub test_functions: [Vec<f64>; 2],
    pub kernel_table: Vec<f64>,
    pub sizes: SuiteSizes,
}

/// A named CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: String,
    pub rows: Vec<String>,
}

impl Table {
    fn new(name: impl Into<String>, header: &str) -> Self {
        Self {
            name: name.into(),
            header: header.to_string(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: String) {
        self.rows.push(row);
    }

    pub fn write<W: std::io::Write>(&self, mut out: W, config_hash: &str, seed: u64) -> std::io::Result<()> {
        writeln!(out, "{}", super::header_line(config_hash, seed))?;
        writeln!(out, "{}", self.header)?;
        for r in &self.rows {
            writeln!(out, "{r}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CriterionOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub metrics: Vec<(String, f64)>,
    pub tables: Vec<Table>,
    pub replicas: Vec<(String, Vec<ReplicaMatrix>)>,
}

impl CriterionOutcome {
    fn new(id: u8) -> Self {
        Self {
            id,
            name: criterion_name(id).expect("known criterion"),
            passed: true,
            metrics: Vec::new(),
            tables: Vec::new(),
            replicas: Vec::new(),
        }
    }

    fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.push((key.into(), value));
    }

    fn require(&mut self, key: &str, ok: bool) {
        self.metric(key, f64::from(u8::from(ok)));
        self.passed &= ok;
    }

    pub fn metric_value(&self, key: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.0 == key).map(|m| m.1)
    }

    /// `criterion  4 oracle-convergence: PASS (k=v, ..)`.
    pub fn summary_line(&self) -> String {
        let mut s = format!(
            "criterion {:>2} {}: {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" }
        );
        let shown: Vec<String> = self.metrics.iter().map(|(k, v)| format!("{k}={}", fmt_metric(*v))).collect();
        if !shown.is_empty() {
            let _ = write!(s, " ({})", shown.join(", "));
        }
        s
    }

    /// Replica matrices as CSV text, for byte comparisons.
    pub fn replica_csv(&self, config_hash: &str, seed: u64) -> Vec<(String, Vec<u8>)> {
        self.replicas
            .iter()
            .map(|(label, m)| {
                let mut buf = Vec::new();
                write_replica_csv(&mut buf, config_hash, seed, label, m).expect("writing to memory");
                (label.clone(), buf)
            })
            .collect()
    }
}

/// Suite state shared by all criteria.
pub struct Suite {
    settings: SuiteSettings,
    flow: OracleResult,
    centered: [Vec<f64>; 2],
}

fn center(table: &[f64], eta: &[f64]) -> Vec<f64> {
    let m: f64 = table.iter().zip(eta).map(|(a, b)| a * b).sum();
    table.iter().map(|v| v - m).collect()
}

fn sup(table: &[f64]) -> f64 {
    table.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn fmt_metric(v: f64) -> String {
    let a = v.abs();
    if v == v.trunc() && a < 1e9 {
        format!("{v}")
    } else if (1e-3..1e6).contains(&a) {
        format!("{v:.6}")
    } else {
        format!("{v:.3e}")
    }
}

fn csv_row(values: &[String]) -> String {
    values.join(",")
}

macro_rules! row {
    ($($v:expr),* $(,)?) => { csv_row(&[$(format!("{}", $v)),*]) };
}

impl Suite {
    pub fn new(settings: SuiteSettings) -> Result<Self> {
        let s = settings.model.num_states();
        let tables = [&settings.observable, &settings.test_functions[0], &settings.test_functions[1]];
        if tables.iter().any(|t| t.len() != s) {
            return Err(domain(format!("every function table needs {s} entries")));
        }
        if settings.kernel_table.len() != s * s {
            return Err(domain(format!("the kernel table needs {} entries", s * s)));
        }
        if !(settings.t > 0.0) || !(settings.dt > 0.0) {
            return Err(domain("need t > 0 and dt > 0"));
        }
        let flow = crate::models::exact_flow(&settings.model, settings.t)?;
        let centered = [
            center(&settings.test_functions[0], &flow.eta_vector),
            center(&settings.test_functions[1], &flow.eta_vector),
        ];
        if centered.iter().any(|c| sup(c) < 1e-12) {
            return Err(domain("test functions must not be constant"));
        }
        Ok(Self {
            settings,
            flow,
            centered,
        })
    }

    pub fn settings(&self) -> &SuiteSettings {
        &self.settings
    }

    fn sizes(&self) -> &SuiteSizes {
        &self.settings.sizes
    }

    fn model(&self) -> &FiniteStateModel {
        &self.settings.model
    }

    fn streams(&self, id: u8) -> Streams {
        Streams::new(self.settings.seed).experiment(u16::from(id))
    }

    fn plan(&self, id: u8, grid: Vec<usize>, replicas: usize) -> Result<ExperimentPlan> {
        let name = criterion_name(id).expect("known criterion");
        ExperimentPlan::new(name, u16::from(id), grid, replicas, self.settings.t, self.settings.dt, self.settings.seed)
    }

    fn cfg(&self, samples: usize) -> Result<SamplerConfig> {
        SamplerConfig::new(samples, self.settings.dt)
    }

    fn centered_fn(&self, i: usize) -> (ScalarFn<usize>, f64) {
        let c = self.centered[i].clone();
        let bound = sup(&c);
        (ScalarFn::from_table(c).centered(true), bound)
    }

    fn gamma_mass(&self) -> f64 {
        self.flow.gamma_mass
    }

    /// Runs one criterion by id.
    pub fn run(&self, id: u8) -> Result<CriterionOutcome> {
        match id {
            1 => self.algebraic_identities(),
            2 => self.ring_law(),
            3 => self.coupling_probability(),
            4 => self.oracle_convergence(),
            5 => self.q_measure_consistency(),
            6 => self.centered_rate(),
            7 => self.derivative_cross_check(),
            8 => self.wick_pairing(),
            9 => self.clt_covariance(),
            10 => self.degenerate_clt(),
            11 => self.hermite_limit(),
            12 => self.variance_bound(),
            13 => self.determinism(),
            _ => Err(domain(format!("no criterion {id}"))),
        }
    }

    fn algebraic_identities(&self) -> Result<CriterionOutcome> {
        let mut out = CriterionOutcome::new(1);
        let mut table = Table::new("identities", "identity,case,value,reference,relative_error");
        let mut rng = self.streams(1).rng(0);
        let states = self.model().num_states();
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);

        // Hoeffding reconstruction of a symmetric arity-3 kernel
        let q = 3;
        let mut values: HashMap<Vec<usize>, f64> = HashMap::new();
        let mut flat = Vec::with_capacity(states.pow(q as u32));
        for code in 0..states.pow(q as u32) {
            let mut idx: Vec<usize> = (0..q).map(|k| code / states.pow((q - 1 - k) as u32) % states).collect();
            idx.sort_unstable();
            let v = *values.entry(idx).or_insert_with(|| rng.random_range(-1.0..1.0));
            flat.push(v);
        }
        let kernel = Kernel::from_table(q, states, flat.clone())?;
        let mut weights: Vec<f64> = (0..states).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let dec = hoeffding_decompose(&kernel, &DiscreteMeasure::on_states(&weights)?)?.tabulated(states)?;
        let mut worst_reconstruction = 0.0f64;
        for (code, &v) in flat.iter().enumerate() {
            let idx: Vec<usize> = (0..q).map(|k| code / states.pow((q - 1 - k) as u32) % states).collect();
            let refs: Vec<&usize> = idx.iter().collect();
            worst_reconstruction = worst_reconstruction.max(rel(dec.reconstruct(&refs), v));
        }
        table.push(row!("reconstruction", "all-tuples", "", "", worst_reconstruction));

        // U_q of the subset sum of h^(j) against (q)_j / j! U_j(h^(j))
        let n = self.sizes().identity_particles;
        let points: Vec<usize> = (0..n).map(|_| rng.random_range(0..states)).collect();
        let mut worst_reduction = 0.0f64;
        for j in 1..=q {
            let h = dec.component(j);
            let lhs = u_statistic_injections(&points, &subset_sum_kernel(h, q)?)?;
            let rhs = falling_factorial_f64(q, j) / crate::statistics::factorial(j) * u_statistic_injections(&points, h)?;
            let e = rel(lhs, rhs);
            worst_reduction = worst_reduction.max(e);
            table.push(row!("reduction", format!("j={j}"), lhs, rhs, e));
        }

        // Rubin-Vitale power sums against injection enumeration
        let mut worst_rv = 0.0f64;
        for arity in 1..=4 {
            for n in arity..=8 {
                let factors: Vec<ScalarFn<usize>> = (0..arity)
                    .map(|_| ScalarFn::from_table((0..states).map(|_| rng.random_range(-1.0..1.0)).collect()))
                    .collect();
                let k = Kernel::product(factors, 1.0)?;
                let pts: Vec<usize> = (0..n).map(|_| rng.random_range(0..states)).collect();
                let rv = rubin_vitale(&pts, &k)? / falling_factorial_f64(n, arity);
                let inj = u_statistic_injections(&pts, &k)?;
                let e = (rv - inj).abs() / inj.abs().max(1.0);
                worst_rv = worst_rv.max(e);
                table.push(row!("rubin-vitale", format!("q={arity};N={n}"), rv, inj, e));
            }
        }

        // symmetrization leaves U-statistics unchanged
        let asym: Vec<f64> = (0..states.pow(3)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = Kernel::from_table(3, states, asym)?;
        let pts: Vec<usize> = (0..6).map(|_| rng.random_range(0..states)).collect();
        let base = u_statistic_injections(&pts, &k)?;
        let mut worst_sym = 0.0f64;
        for (case, v) in [
            ("symmetrized", u_statistic_injections(&pts, &k.symmetrized())?),
            ("subsets", u_statistic_subsets(&pts, &k)?),
            ("dispatch", u_statistic(&pts, &k)?),
        ] {
            let e = rel(v, base);
            worst_sym = worst_sym.max(e);
            table.push(row!("symmetrization", case, v, base, e));
        }

        let mut counts_ok = true;
        for (q, expected) in [(2, 1), (4, 3), (6, 15), (8, 105)] {
            let got = pair_partitions(q)?.len();
            counts_ok &= got == expected;
            table.push(row!("pair-partitions", format!("q={q}"), got, expected, if got == expected { 0.0 } else { 1.0 }));
        }

        out.metric("reconstruction_rel_err", worst_reconstruction);
        out.metric("reduction_rel_err", worst_reduction);
        out.metric("rubin_vitale_rel_err", worst_rv);
        out.metric("symmetrization_rel_err", worst_sym);
        let tol = 1e-10;
        out.require(
            "within_tolerance",
            worst_reconstruction <= tol && worst_reduction <= tol && worst_rv <= tol && worst_sym <= tol,
        );
        out.require("pair_partition_counts", counts_ok);
        out.tables.push(table);
        Ok(out)
    }

    /// The model with its potential rescaled to a given bound.
    fn rescaled(&self, bound: f64) -> Result<FiniteStateModel> {
        let m = self.model();
        let c = bound / m.potential_bound();
        let potential = match m.potential_fn() {
            FinitePotential::Table(v) => FinitePotential::Table(v.iter().map(|x| x * c).collect()),
            FinitePotential::Piecewise { breaks, tables } => FinitePotential::Piecewise {
                breaks: breaks.clone(),
                tables: tables.iter().map(|t| t.iter().map(|x| x * c).collect()).collect(),
            },
        };
        m.with_potential(potential, bound)
    }

    fn ring_law(&self) -> Result<CriterionOutcome> {
        let mut out = CriterionOutcome::new(2);
        let z = self.sizes();
        let model = self.rescaled(z.ring_bound)?;
        let (q, n, t) = (z.ring_arity, z.ring_particles, self.settings.t);
        let counts = ring_counts(&model, q, n, t, self.settings.dt, z.ring_runs, self.streams(2))?;
        let lambda_t = (q * (q - 1)) as f64 * z.ring_bound * t / n as f64;
        let chi = chi_square_poisson(&counts, lambda_t)?;
        let mut table = Table::new("ring_counts", "rings,observed,expected");
        let max = counts.iter().copied().max().unwrap_or(0);
        for k in 0..=max {
            let obs = counts.iter().filter(|&&c| c == k).count();
            let p = (-lambda_t).exp() * lambda_t.powi(k as i32) / crate::statistics::factorial(k);
            table.push(row!(k, obs, p * counts.len() as f64));
        }
        out.metric("lambda_t", lambda_t);
        out.metric("chi2", chi.statistic);
        out.metric("dof", chi.dof as f64);
        out.metric("p_value", chi.p_value);
        out.require("p_above_0.01", chi.p_value > 0.01);
        out.tables.push(table);
        Ok(out)
    }

    fn coupling_probability(&self) -> Result<CriterionOutcome> {
        let mut out = CriterionOutcome::new(3);
        let q = 4;
        let m = self.sizes().coupling_samples;
        let est = conditional_mean(self.model(), q, self.settings.t, q / 2, self.cfg(m)?, self.streams(3), |p| {
            f64::from(u8::from(is_wick_coupled(p, q)))
        })?;
        let p = wick_coupling_probability(q);
        let se = (p * (1.0 - p) / m as f64).sqrt();
        out.metric("fraction", est.value);
        out.metric("expected", p);
        out.metric("binomial_se", se);
        out.require("within_3_se", (est.value - p).abs() <= 3.0 * se);
        Ok(out)
    }

    fn oracle_convergence(&self) -> Result<CriterionOutcome> {
        let mut out = CriterionOutcome::new(4);
        let z = self.sizes();
        let plan = self.plan(4, z.convergence_grid.clone(), z.convergence_replicas)?;
        let f = self.settings.observable.clone();
        let exact = self.flow.eta(&f);
        let mats = run_replicas(
            self.model(),
            &plan,
            &[("eta_f".to_string(), Functional::Eta(ScalarFn::from_table(f)))],
        )?;
        let ns: Vec<usize> = mats.iter().map(|m| m.n).collect();
        let means: Vec<Estimate> = mats.iter().map(|m| m.mean(0)).collect();
        let bias: Vec<f64> = means.iter().map(|e| e.value - exact).collect();
        let ses: Vec<f64> = means.iter().map(|e| e.se).collect();
        // weighted fit of bias = c / N
        let (mut num, mut den) = (0.0, 0.0);
        for ((&n, &b), &s) in ns.iter().zip(&bias).zip(&ses) {
            let x = 1.0 / n as f64;
            num += x * b / (s * s);
            den += x * x / (s * s);
        }
        let c = num / den;
        let mut table = Table::new("convergence", "n,mean,se,exact,bias,fitted_bias,within_3se");
        let mut all_within = true;
        for i in 0..ns.len() {
            let fitted = c / ns[i] as f64;
            let ok = (bias[i] - fitted).abs() <= 3.0 * ses[i];
            all_within &= ok;
            table.push(row!(ns[i], means[i].value, ses[i], exact, bias[i], fitted, ok));
        }
        let fit = power_law_fit(&ns, &bias, &ses)?;
        out.metric("exact_eta", exact);
        out.metric("bias_constant", c);
        out.metric("bias_slope", fit.exponent);
        out.metric("bias_slope_se", fit.exponent_se);
        out.require("means_within_3se_of_exact_plus_c_over_n", all_within);
        out.require("slope_within_0.4_of_-1", (fit.exponent + 1.0).abs() <= 0.4);
        out.tables.push(table);
        out.replicas.push((plan.label.clone(), mats));
        Ok(out)
    }

    fn q_measure_consistency(&self) -> Result<CriterionOutcome> {
        let mut out = CriterionOutcome::new(5);
        let z = self.sizes();
        let g = self.settings.observable.clone();
        let bound = sup(&g).powi(2);
        let kernel = Kernel::power(ScalarFn::from_table(g), 2, bound)?;
        let plan = self.plan(5, z.mixture_grid.clone(), z.mixture_replicas)?;
        let mats = run_replicas(
            self.model(),
            &plan,
            &[("gamma_q_u2".to_string(), Functional::WeightedUStatistic(kernel.clone()))],
        )?;
        let mut table = Table::new("q_measure", "n,mixture,mixture_se,k_max,direct,direct_se,z");
        let mut ok = true;
        for m in &mats {
            let mix = q_measure_mixture(
                self.model(),
                &kernel,
                self.settings.t,
                m.n,
                None,
                DEFAULT_TRUNCATION,
                self.cfg(z.mixture_samples)?,
                self.streams(5).sub_slot(1).n(m.n),
            )?;
            let direct = m.mean(0);
            let zscore = (mix.estimate.value - direct.value) / mix.estimate.se.hypot(direct.se);
            ok &= zscore.abs() <= 3.0;
            table.push(row!(m.n, mix.estimate.value, mix.estimate.se, mix.k_max, direct.value, direct.se, zscore));
            out.metric(format!("z_n{}", m.n), zscore);
        }
        out.require("agree_within_3se", ok);
        out.tables.push(table);
        out.replicas.push((plan.label.clone(), mats));
        Ok(out)
    }

    fn centered_rate(&self) -> Result<CriterionOutcome> {
        let mut out = CriterionOutcome::new(6);
        let z = self.sizes();
        let (f, fb) = self.centered_fn(0);
        let norm = fb * fb;
        let kernel = Kernel::power(f, 2, norm)?;
        let plan = self.plan(6, z.rate_grid.clone(), z.rate_replicas)?;
        let mats = run_replicas(
            self.model(),
            &plan,
            &[
                ("u2".to_string(), Functional::UStatistic(kernel.clone())),
                ("gamma_q_u2".to_string(), Functional::WeightedUStatistic(kernel)),
            ],
        )?;
        let ns: Vec<usize> = mats.iter().map(|m| m.n).collect();
        let p: Vec<Estimate> = mats.iter().map(|m| m.mean(0)).collect();
        let qn: Vec<Estimate> = mats.iter().map(|m| m.mean(1)).collect();
        let fit = slope_fit(
            &ns,
            &p.iter().map(|e| e.value).collect::<Vec<_>>(),
            &p.iter().map(|e| e.se).collect::<Vec<_>>(),
        )?;
        let cap = 2.0 * self.model().potential_bound() * self.settings.t * norm;
        let mut table = Table::new("rate", "n,p_mean,p_se,q_mean,q_se,n_abs_q,bound,flagged");
        let mut bound_ok = true;
        for i in 0..ns.len() {
            let n = ns[i] as f64;
            let rel_se = if qn[i].value != 0.0 { qn[i].se / qn[i].value.abs() } else { f64::INFINITY };
            let lhs = n * qn[i].value.abs();
            let rhs = cap * (1.0 + 3.0 * rel_se);
            bound_ok &= lhs <= rhs;
            table.push(row!(ns[i], p[i].value, p[i].se, qn[i].value, qn[i].se, lhs, rhs, fit.flagged[i]));
        }
        out.metric("slope", fit.slope);
        out.metric("slope_se", fit.se);
        out.metric("flagged", fit.flagged.iter().filter(|&&f| f).count() as f64);
        out.require("slope_within_0.3_of_-1", (fit.slope + 1.0).abs() <= 0.3);
        out.require("flagged_entries_consistent", fit.one_sided_consistent);
        out.require("bound_holds", bound_ok);
        out.tables.push(table);
        out.replicas.push((plan.label.clone(), mats));
        Ok(out)
    }

    fn derivative_cross_check(&self) -> Result<CriterionOutcome> {
        let mut out = CriterionOutcome::new(7);
        let z = self.sizes();
        let (f, fb) = self.centered_fn(0);
        let kernel = Kernel::power(f, 2, fb * fb)?;
        let t = self.settings.t;
        let formula = derivative_formula(self.model(), &kernel, t, 1, self.cfg(z.formula_samples)?, self.streams(7))?;
        let mut table = Table::new("q_series", "n,q_mixture,se,k_max");
        let mut entries = Vec::new();
        for &n in &z.derivative_grid {
            let mix = q_measure_mixture(
                self.model(),
                &kernel,
                t,
                n,
                None,
                DEFAULT_TRUNCATION,
                self.cfg(z.derivative_samples)?,
                self.streams(7).sub_slot(1).n(n),
            )?;
            table.push(row!(n, mix.estimate.value, mix.estimate.se, mix.k_max));
            entries.push(SeriesEntry {
                n,
                estimate: mix.estimate.value,
                se: mix.estimate.se,
                replicas: mix.estimate.samples,
            });
        }
        let fit = laurent_fit(&EstimateSeries::new("Q_t,2", entries)?, z.derivative_order)?;
        let c1 = fit.coefficient(1);
        let zscore = (formula.value - c1.value) / formula.se.hypot(c1.se);
        out.metric("formula", formula.value);
        out.metric("formula_se", formula.se);
        out.metric("fit_c1", c1.value);
        out.metric("fit_c1_se", c1.se);
        out.metric("z", zscore);
        out.require("agree_within_3se", zscore.abs() <= 3.0);
        out.tables.push(table);
        Ok(out)
    }

    fn wick_pairing(&self) -> Result<CriterionOutcome> {
        let mut out = CriterionOutcome::new(8);
        let z = self.sizes();
        let t = self.settings.t;
        let (f1, b1) = self.centered_fn(0);
        let (f2, b2) = self.centered_fn(1);
        let fs = vec![f1.clone(), f1, f2.clone(), f2];
        let bounds = [b1, b1, b2, b2];
        let kernel = Kernel::product(fs.clone(), bounds.iter().product())?;
        let delta = wick_delta(
            self.model(),
            &fs,
            &bounds,
            t,
            self.cfg(z.wick_samples)?,
            FlowFallback::default(),
            self.streams(8).sub_slot(100),
        )?;
        let plan = self.plan(8, z.wick_grid.clone(), z.wick_replicas)?;
        let mats = run_replicas(
            self.model(),
            &plan,
            &[
                ("u4".to_string(), Functional::UStatistic(kernel.clone())),
                ("gamma_q_u4".to_string(), Functional::WeightedUStatistic(kernel.clone())),
            ],
        )?;
        let g4 = self.gamma_mass().powi(4);
        let mut table = Table::new("wick_series", "n,n2_p,n2_p_se,n2_q_over_gamma4,n2_q_over_gamma4_se");
        let (mut pe, mut qe) = (Vec::new(), Vec::new());
        for m in &mats {
            let n2 = (m.n * m.n) as f64;
            let p = m.mean(0).scale(n2);
            let q = m.mean(1).scale(n2 / g4);
            table.push(row!(m.n, p.value, p.se, q.value, q.se));
            pe.push(SeriesEntry {
                n: m.n,
                estimate: p.value,
                se: p.se,
                replicas: m.rows.len(),
            });
            qe.push(SeriesEntry {
                n: m.n,
                estimate: q.value,
                se: q.se,
                replicas: m.rows.len(),
            });
        }
        let p_fit = laurent_fit(&EstimateSeries::new("N^2 P_t,4", pe)?, z.wick_order)?.coefficient(0);
        let q_fit = laurent_fit(&EstimateSeries::new("N^2 Q_t,4 / gamma^4", qe)?, z.wick_order)?.coefficient(0);
        let d = delta.estimate;
        let zs = |a: &Estimate, b: &Estimate| (a.value - b.value) / a.se.hypot(b.se);
        let (z_dp, z_dq, z_pq) = (zs(&d, &p_fit), zs(&d, &q_fit), zs(&p_fit, &q_fit));
        // the Wick-conditioned rejection estimator, reported alongside
        let cond = wick_conditioned(self.model(), &kernel, t, self.cfg(z.wick_samples)?, self.streams(8).sub_slot(200))?;
        let conditioned = cond.derivative.scale(1.0 / g4);
        let mut pairs = Table::new("pair_kernels", "i,j,w,w_se,e1prime,e1prime_se");
        for ((i, j), w) in &delta.pair_kernels {
            pairs.push(row!(i, j, w.w.value, w.w.se, w.e1prime.value, w.e1prime.se));
        }
        out.metric("delta", d.value);
        out.metric("delta_se", d.se);
        out.metric("p_fit", p_fit.value);
        out.metric("p_fit_se", p_fit.se);
        out.metric("q_fit", q_fit.value);
        out.metric("q_fit_se", q_fit.se);
        out.metric("wick_conditioned", conditioned.value);
        out.metric("wick_conditioned_se", conditioned.se);
        out.metric("z_delta_p", z_dp);
        out.metric("z_delta_q", z_dq);
        out.metric("z_p_q", z_pq);
        out.require("pairwise_within_3se", z_dp.abs() <= 3.0 && z_dq.abs() <= 3.0 && z_pq.abs() <= 3.0);
        out.tables.push(table);
        out.tables.push(pairs);
        out.replicas.push((plan.label.clone(), mats));
        Ok(out)
    }

    fn clt_covariance(&self) -> Result<CriterionOutcome> {
        let mut out = CriterionOutcome::new(9);
        let z = self.sizes();
        let (f1, b1) = self.centered_fn(0);
        let (f2, b2) = self.centered_fn(1);
        let fs = vec![f1.clone(), f2.clone()];
        let theory = clt_covariance(
            self.model(),
            &fs,
            &[b1, b2],
            self.settings.t,
            self.cfg(z.w_samples)?,
            FlowFallback::default(),
            self.streams(9).sub_slot(100),
        )?;
        if !theory.centered {
            return Err(Error::InvariantViolation("CLT functions are not centered".into()));
        }
        let plan = self.plan(9, vec![z.clt_particles], z.clt_replicas)?;
        let mats = run_replicas(
            self.model(),
            &plan,
            &[
                ("eta_f1".to_string(), Functional::Eta(f1)),
                ("eta_f2".to_string(), Functional::Eta(f2)),
            ],
        )?;
        let exact = [self.flow.eta(&self.centered[0]), self.flow.eta(&self.centered[1])];
        let root_n = (z.clt_particles as f64).sqrt();
        let rows: Vec<Vec<f64>> = mats[0]
            .rows
            .iter()
            .map(|r| vec![root_n * (r[0] - exact[0]), root_n * (r[1] - exact[1])])
            .collect();
        let sample = sample_covariance(&rows)?;
        let mut normality_p = Vec::new();
        for i in 0..2 {
            let col: Vec<f64> = rows.iter().map(|r| r[i]).collect();
            normality_p.push(ks_normality(&col, 0.0, theory.k[(i, i)])?.1);
        }
        let report = CovarianceReport {
            k_hat: sample.k_hat.clone(),
            k_theory: theory.k.clone(),
            k_hat_se: sample.se.clone(),
            k_theory_se: theory.se.clone(),
            normality_p: normality_p.clone(),
        };
        let mut table = Table::new("covariance", "i,j,k_hat,k_hat_se,k_theory,k_theory_se,gram,w");
        for i in 0..2 {
            for j in 0..2 {
                table.push(row!(
                    i,
                    j,
                    sample.k_hat[(i, j)],
                    sample.se[(i, j)],
                    theory.k[(i, j)],
                    theory.se[(i, j)],
                    theory.gram[(i, j)],
                    theory.w[(i, j)]
                ));
                if i <= j {
                    out.metric(format!("k_hat_{i}{j}"), sample.k_hat[(i, j)]);
                    out.metric(format!("k_theory_{i}{j}"), theory.k[(i, j)]);
                }
            }
        }
        out.metric("ks_p_f1", normality_p[0]);
        out.metric("ks_p_f2", normality_p[1]);
        out.require("covariance_agrees", report.entrywise_agreement(0.10, 3.0));
        out.require("normality_p_above_0.01", normality_p.iter().all(|&p| p > 0.01));
        out.tables.push(table);
        out.replicas.push((plan.label.clone(), mats));
        Ok(out)
    }

    fn degenerate_clt(&self) -> Result<CriterionOutcome> {
        let mut out = CriterionOutcome::new(10);
        let z = self.sizes();
        let states = self.model().num_states();
        let kernel = Kernel::from_table(2, states, self.settings.kernel_table.clone())?;
        if !kernel.is_symmetric() {
            return Err(domain("the kernel table must be symmetric"));
        }
        let reference = DiscreteMeasure::on_states(&self.flow.eta_vector)?;
        let dec = hoeffding_decompose(&kernel, &reference)?.tabulated(states)?;
        let h1: Vec<f64> = (0..states).map(|s| dec.component(1).eval(&[&s])).collect();
        if sup(&h1) < 1e-9 {
            return Err(domain("the kernel's first Hoeffding component vanishes"));
        }
        let h1_bound = sup(&h1);
        let theory = clt_covariance(
            self.model(),
            &[ScalarFn::from_table(h1.clone()).centered(true)],
            &[h1_bound],
            self.settings.t,
            self.cfg(z.w_samples)?,
            FlowFallback::default(),
            self.streams(10).sub_slot(100),
        )?;
        let q = 2.0;
        let predicted = q * q * theory.k[(0, 0)];
        let predicted_se = q * q * theory.se[(0, 0)];
        let plan = self.plan(10, vec![z.clt_particles], z.clt_replicas)?;
        let mats = run_replicas(self.model(), &plan, &[("u2".to_string(), Functional::UStatistic(kernel))])?;
        let root_n = (z.clt_particles as f64).sqrt();
        let xs: Vec<f64> = mats[0].column(0).iter().map(|u| root_n * (u - dec.theta)).collect();
        let var = xs.iter().copied().collect::<Moments>().variance();
        let (_, p) = ks_normality(&xs, 0.0, predicted)?;
        let rel = (var - predicted).abs() / predicted;
        out.metric("theta", dec.theta);
        out.metric("sample_variance", var);
        out.metric("predicted_variance", predicted);
        out.metric("predicted_variance_se", predicted_se);
        out.metric("relative_error", rel);
        out.metric("ks_p", p);
        out.require("variance_within_15pct", rel <= 0.15);
        out.require("normality_p_above_0.01", p > 0.01);
        let mut table = Table::new("hoeffding_h1", "state,h1,eta");
        for s in 0..states {
            table.push(row!(s, h1[s], self.flow.eta_vector[s]));
        }
        out.tables.push(table);
        out.replicas.push((plan.label.clone(), mats));
        Ok(out)
    }

    fn hermite_limit(&self) -> Result<CriterionOutcome> {
        let mut out = CriterionOutcome::new(11);
        let z = self.sizes();
        let states = self.model().num_states();
        let free = self
            .model()
            .with_potential(FinitePotential::constant(0.0, states), self.model().potential_bound())?;
        let eta = crate::models::exact_flow(&free, self.settings.t)?.eta_vector;
        let c = center(&self.settings.observable, &eta);
        let norm: f64 = c.iter().zip(&eta).map(|(v, p)| p * v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) {
            return Err(domain("the observable is constant under the free flow"));
        }
        let f: Vec<f64> = c.iter().map(|v| v / norm).collect();
        let bound = sup(&f).powi(2);
        let kernel = Kernel::power(ScalarFn::from_table(f).centered(true), 2, bound)?;
        let plan = self.plan(11, vec![z.hermite_particles], z.hermite_replicas)?;
        let mats = run_replicas(&free, &plan, &[("u2".to_string(), Functional::UStatistic(kernel))])?;
        let n = z.hermite_particles as f64;
        let xs: Vec<f64> = mats[0].column(0).iter().map(|u| n * u).collect();
        let mut table = Table::new("hermite_moments", "order,sample,se,predicted,z");
        let mut ok = true;
        for m in 1..=3u32 {
            let est = xs.iter().map(|x| x.powi(m as i32)).collect::<Moments>().estimate();
            let pred = hermite_limit_prediction(2, 1.0, m)?;
            let zscore = (est.value - pred) / est.se;
            ok &= zscore.abs() <= 3.0;
            table.push(row!(m, est.value, est.se, pred, zscore));
            out.metric(format!("moment_{m}"), est.value);
            out.metric(format!("moment_{m}_se"), est.se);
        }
        out.require("moments_within_3se", ok);
        out.tables.push(table);
        out.replicas.push((plan.label.clone(), mats));
        Ok(out)
    }

    fn variance_bound(&self) -> Result<CriterionOutcome> {
        let mut out = CriterionOutcome::new(12);
        let z = self.sizes();
        let (f, fb) = self.centered_fn(0);
        let kernel = Kernel::power(f, 2, fb * fb)?;
        let plan = self.plan(12, z.variance_grid.clone(), z.variance_replicas)?;
        let mats = run_replicas(self.model(), &plan, &[("u2".to_string(), Functional::UStatistic(kernel))])?;
        let mut table = Table::new("variance_bound", "n,n2_mean_square,se");
        let mut scaled = Vec::new();
        for m in &mats {
            let n2 = (m.n * m.n) as f64;
            let est = m.column(0).iter().map(|u| n2 * u * u).collect::<Moments>().estimate();
            table.push(row!(m.n, est.value, est.se));
            scaled.push(est.value);
        }
        let max = scaled.iter().copied().fold(f64::MIN, f64::max);
        let min = scaled.iter().copied().fold(f64::MAX, f64::min);
        let ratio = max / min;
        out.metric("max_over_min", ratio);
        out.require("ratio_below_3", min > 0.0 && ratio < 3.0);
        out.tables.push(table);
        out.replicas.push((plan.label.clone(), mats));
        Ok(out)
    }

    /// Reruns a reduced set of experiments and compares serialized output.
    fn determinism(&self) -> Result<CriterionOutcome> {
        let mut out = CriterionOutcome::new(13);
        let once = || -> Result<Vec<u8>> {
            let mut buf = Vec::new();
            let (f, fb) = self.centered_fn(0);
            let kernel = Kernel::power(f.clone(), 2, fb * fb)?;
            let plan = self.plan(13, vec![20, 40], 64)?;
            let mats = run_replicas(
                self.model(),
                &plan,
                &[
                    ("eta".to_string(), Functional::Eta(f.clone())),
                    ("u2".to_string(), Functional::UStatistic(kernel.clone())),
                ],
            )?;
            write_replica_csv(&mut buf, "", self.settings.seed, &plan.label, &mats)?;
            let counts = ring_counts(self.model(), 3, 20, self.settings.t, self.settings.dt, 3000, self.streams(13).sub_slot(1))?;
            buf.extend(format!("{counts:?}\n").bytes());
            let mix = q_measure_mixture(
                self.model(),
                &kernel,
                self.settings.t,
                20,
                None,
                DEFAULT_TRUNCATION,
                self.cfg(5000)?,
                self.streams(13).sub_slot(2),
            )?;
            buf.extend(format!("{:?}\n", mix.terms).bytes());
            let d = wick_delta(
                self.model(),
                &[f.clone(), f],
                &[fb, fb],
                self.settings.t,
                self.cfg(5000)?,
                FlowFallback::default(),
                self.streams(13).sub_slot(10),
            )?;
            buf.extend(format!("{:?}\n", d.estimate).bytes());
            Ok(buf)
        };
        let (a, b) = (once()?, once()?);
        out.metric("bytes", a.len() as f64);
        out.require("identical", a == b);
        Ok(out)
    }
}

/// Runs the selected criteria in order.
pub fn verify(suite: &Suite, selected: &[u8]) -> Result<Vec<CriterionOutcome>> {
    selected.iter().map(|&id| suite.run(id)).collect()
}
