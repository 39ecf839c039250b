//! Replicated experiments with deterministic seeding.
//!
//! Replica `r` at particle count `N` of experiment `e` draws from stream
//! `(seed, e, N, r)`, so the output does not depend on scheduling.

mod hypothesis;
pub mod verify;

use std::io::Write;

use rayon::prelude::*;

pub use hypothesis::{
    chi_square_poisson, ks_normality, ks_two_sample, lag1_autocorrelation, power_law_fit, slope_fit,
    ChiSquareResult, PowerLawFit, SlopeFit,
};

use crate::error::{domain, Error, Result};
use crate::estimate::{Estimate, Moments};
use crate::models::FeynmanKacModel;
use crate::rng::{Streams, MAX_STREAM_INDEX, MAX_STREAM_N};
use crate::simulate;
use crate::statistics::{Kernel, ScalarFn};

/// Grid, replication and seeding of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub label: String,
    pub experiment: u16,
    pub n_grid: Vec<usize>,
    pub replicas: usize,
    pub t: f64,
    pub dt: f64,
    pub seed: u64,
}

impl ExperimentPlan {
    pub fn new(
        label: impl Into<String>,
        experiment: u16,
        n_grid: Vec<usize>,
        replicas: usize,
        t: f64,
        dt: f64,
        seed: u64,
    ) -> Result<Self> {
        if replicas < 2 || replicas > MAX_STREAM_INDEX as usize {
            return Err(domain(format!("replica count must lie in [2, {MAX_STREAM_INDEX}], got {replicas}")));
        }
        if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(domain("N grid must be nonempty and strictly increasing"));
        }
        if n_grid[0] == 0 || *n_grid.last().expect("nonempty") > MAX_STREAM_N as usize {
            return Err(domain(format!("N values must lie in [1, {MAX_STREAM_N}]")));
        }
        if !(t >= 0.0 && t.is_finite()) || !(dt > 0.0) {
            return Err(domain("need t >= 0 and dt > 0"));
        }
        Ok(Self {
            label: label.into(),
            experiment,
            n_grid,
            replicas,
            t,
            dt,
            seed,
        })
    }

    pub fn streams(&self, n: usize) -> Streams {
        Streams::new(self.seed).experiment(self.experiment).n(n)
    }
}

/// A statistic of the particle system at the plan's horizon.
#[derive(Clone)]
pub enum Functional<S> {
    /// `η^N_t(f)`.
    Eta(ScalarFn<S>),
    /// `γ^N_t(f) = γ^N_t(1) η^N_t(f)`.
    Gamma(ScalarFn<S>),
    /// `γ^N_t(1)`.
    GammaMass,
    /// `(η^N_t)^{⊙q}(F)`.
    UStatistic(Kernel<S>),
    /// `γ^N_t(1)^q (η^N_t)^{⊙q}(F)`.
    WeightedUStatistic(Kernel<S>),
}

impl<S> std::fmt::Debug for Functional<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Functional::Eta(_) => "Eta",
            Functional::Gamma(_) => "Gamma",
            Functional::GammaMass => "GammaMass",
            Functional::UStatistic(_) => "UStatistic",
            Functional::WeightedUStatistic(_) => "WeightedUStatistic",
        };
        f.write_str(name)
    }
}

impl<S: 'static> Functional<S> {
    fn evaluate<M: FeynmanKacModel<State = S>>(&self, model: &M, ens: &simulate::Ensemble<S>) -> Result<f64> {
        Ok(match self {
            Functional::Eta(f) => simulate::empirical_expectation(ens, |x| f.eval(x)),
            Functional::Gamma(f) => simulate::unnormalized_expectation(ens, |x| f.eval(x)),
            Functional::GammaMass => simulate::gamma_normalizer(ens),
            Functional::UStatistic(k) => model.u_statistic(ens.particles(), k)?,
            Functional::WeightedUStatistic(k) => {
                let g = simulate::gamma_normalizer(ens);
                g.powi(k.arity() as i32) * model.u_statistic(ens.particles(), k)?
            }
        })
    }

    fn min_particles(&self) -> usize {
        match self {
            Functional::UStatistic(k) | Functional::WeightedUStatistic(k) => k.arity(),
            _ => 1,
        }
    }
}

/// `R × F` values at one particle count.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaMatrix {
    pub n: usize,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ReplicaMatrix {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn mean(&self, j: usize) -> Estimate {
        self.rows.iter().map(|r| r[j]).collect::<Moments>().estimate()
    }
}

/// Runs every `(N, replica)` of the plan and evaluates the functionals on
/// the ensemble at time `t`.
///
/// A failing replica aborts the run with its `(N, replica, seed)`.
pub fn run_replicas<M: FeynmanKacModel>(
    model: &M,
    plan: &ExperimentPlan,
    functionals: &[(String, Functional<M::State>)],
) -> Result<Vec<ReplicaMatrix>> {
    if let Some(need) = functionals.iter().map(|(_, f)| f.min_particles()).max() {
        if plan.n_grid[0] < need {
            return Err(domain(format!("N grid starts below the largest arity {need}")));
        }
    }
    let columns: Vec<String> = functionals.iter().map(|(n, _)| n.clone()).collect();
    plan.n_grid
        .iter()
        .map(|&n| {
            let streams = plan.streams(n);
            let rows = (0..plan.replicas)
                .into_par_iter()
                .map(|r| {
                    let run = || -> Result<Vec<f64>> {
                        let mut rng = streams.rng(r);
                        let ens = simulate::simulate(model, n, plan.t, plan.dt, &mut rng)?;
                        functionals.iter().map(|(_, f)| f.evaluate(model, &ens)).collect()
                    };
                    run().map_err(|e| Error::ReplicaFailed {
                        n,
                        replica: r,
                        seed: plan.seed,
                        source: Box::new(e),
                    })
                })
                .collect::<Vec<Result<Vec<f64>>>>();
            // first failure in replica order, whatever the scheduling
            let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
            Ok(ReplicaMatrix {
                n,
                columns: columns.clone(),
                rows,
            })
        })
        .collect()
}

/// Header line carried by every output file.
pub fn header_line(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash} seed={seed}")
}

/// One row per `N × replica × functional`.
pub fn write_replica_csv<W: Write>(
    mut out: W,
    config_hash: &str,
    seed: u64,
    label: &str,
    matrices: &[ReplicaMatrix],
) -> std::io::Result<()> {
    writeln!(out, "{}", header_line(config_hash, seed))?;
    writeln!(out, "experiment,n,replica,functional,value")?;
    for m in matrices {
        for (r, row) in m.rows.iter().enumerate() {
            for (c, v) in m.columns.iter().zip(row) {
                writeln!(out, "{label},{},{r},{c},{v}", m.n)?;
            }
        }
    }
    Ok(())
}
