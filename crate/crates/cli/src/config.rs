//! TOML run configuration.

use std::path::{Path, PathBuf};

use fkpart::harness::verify::{SuiteSettings, SuiteSizes};
use fkpart::models::{DiffusionModel, EuclideanPotential, FinitePotential, FiniteStateModel, InitialLaw, Monomial};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{field}: {message}")]
    Invariant { field: String, message: String },
}

impl ConfigError {
    fn invariant(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invariant {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Dotted field path for invariant errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            Self::Invariant { field, .. } => Some(field),
            _ => None,
        }
    }

    /// 1-based line for parse errors.
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::Parse { line, .. } => Some(*line),
            _ => None,
        }
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub functions: FunctionsSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub suite: SuiteSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    /// Jump chain on `{0, .., S-1}`; `rates` is the generator.
    Finite {
        rates: Vec<Vec<f64>>,
        potential: FunctionForm,
        v_inf: f64,
        initial: Vec<f64>,
    },
    /// `dX = (A X + b) dt + diag(σ) dB`.
    Diffusion {
        drift_matrix: Vec<Vec<f64>>,
        drift_offset: Vec<f64>,
        diffusion: Vec<f64>,
        potential: FunctionForm,
        v_inf: f64,
        initial: InitialSection,
    },
}

/// Named function forms. Finite models read `polynomial` in the state index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionForm {
    Constant { value: f64 },
    Table { values: Vec<f64> },
    Piecewise { breaks: Vec<f64>, tables: Vec<Vec<f64>> },
    Polynomial { terms: Vec<Term> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub coefficient: f64,
    pub powers: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSection {
    Point { x: Vec<f64> },
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub t: f64,
    pub dt: f64,
    pub seed: u64,
    #[serde(default = "default_grid")]
    pub n_grid: Vec<usize>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
}

fn default_grid() -> Vec<usize> {
    vec![25, 50, 100, 200, 400]
}

fn default_replicas() -> usize {
    400
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionsSection {
    pub observable: Option<FunctionForm>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test: Vec<FunctionForm>,
    /// Symmetric two-argument kernel as a matrix over states.
    pub kernel: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_directory() -> PathBuf {
    PathBuf::from("fkpart-out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            formats: default_formats(),
        }
    }
}

/// Overrides of the acceptance suite sizes; absent keys keep the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identity_particles: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_runs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_arity: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_particles: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ring_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coupling_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence_grid: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence_replicas: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixture_grid: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixture_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixture_replicas: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_grid: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_replicas: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derivative_grid: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derivative_order: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derivative_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub formula_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wick_grid: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wick_order: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wick_replicas: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wick_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clt_particles: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clt_replicas: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hermite_particles: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hermite_replicas: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance_grid: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance_replicas: Option<usize>,
}

macro_rules! apply {
    ($src:expr, $dst:expr, $($f:ident),* $(,)?) => {
        $( if let Some(v) = &$src.$f { $dst.$f = v.clone(); } )*
    };
}

impl SuiteSection {
    pub fn sizes(&self) -> SuiteSizes {
        let mut s = SuiteSizes::default();
        apply!(
            self,
            s,
            identity_particles,
            ring_runs,
            ring_arity,
            ring_particles,
            ring_bound,
            coupling_samples,
            convergence_grid,
            convergence_replicas,
            mixture_grid,
            mixture_samples,
            mixture_replicas,
            rate_grid,
            rate_replicas,
            derivative_grid,
            derivative_order,
            derivative_samples,
            formula_samples,
            wick_grid,
            wick_order,
            wick_replicas,
            wick_samples,
            clt_particles,
            clt_replicas,
            w_samples,
            hermite_particles,
            hermite_replicas,
            variance_grid,
            variance_replicas,
        );
        s
    }
}

/// Reads, parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_str(&text, path)
}

pub fn parse_str(text: &str, path: &Path) -> Result<Config> {
    let config: Config = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map(|s| line_column(text, s.start)).unwrap_or((1, 1));
        ConfigError::Parse {
            path: path.to_path_buf(),
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    config.validate()?;
    Ok(config)
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

fn finite_values(field: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ConfigError::invariant(format!("{field}[{i}]"), "value is not finite")),
        None => Ok(()),
    }
}

impl FunctionForm {
    /// Per-state table on a finite space of `states` states.
    fn table(&self, field: &str, states: usize) -> Result<Vec<f64>> {
        let values = match self {
            Self::Constant { value } => vec![*value; states],
            Self::Table { values } => {
                if values.len() != states {
                    return Err(ConfigError::invariant(
                        format!("{field}.values"),
                        format!("has {} entries, expected {states}", values.len()),
                    ));
                }
                values.clone()
            }
            Self::Polynomial { terms } => {
                for (i, t) in terms.iter().enumerate() {
                    if t.powers.len() != 1 {
                        return Err(ConfigError::invariant(
                            format!("{field}.terms[{i}].powers"),
                            "finite models take one power (of the state index)",
                        ));
                    }
                }
                (0..states)
                    .map(|s| terms.iter().map(|t| t.coefficient * (s as f64).powi(t.powers[0] as i32)).sum())
                    .collect()
            }
            Self::Piecewise { .. } => {
                return Err(ConfigError::invariant(field, "piecewise forms are only allowed for potentials"));
            }
        };
        finite_values(field, &values)?;
        Ok(values)
    }

    fn finite_potential(&self, field: &str, states: usize, bound: f64) -> Result<FinitePotential> {
        let check = |name: String, table: &[f64]| -> Result<()> {
            finite_values(&name, table)?;
            match table.iter().position(|v| !(0.0..=bound).contains(v)) {
                Some(i) => Err(ConfigError::invariant(
                    format!("{name}[{i}]"),
                    format!("potential value {} outside [0, v_inf = {bound}]", table[i]),
                )),
                None => Ok(()),
            }
        };
        match self {
            Self::Piecewise { breaks, tables } => {
                for (p, t) in tables.iter().enumerate() {
                    if t.len() != states {
                        return Err(ConfigError::invariant(
                            format!("{field}.tables[{p}]"),
                            format!("has {} entries, expected {states}", t.len()),
                        ));
                    }
                    check(format!("{field}.tables[{p}]"), t)?;
                }
                Ok(FinitePotential::Piecewise {
                    breaks: breaks.clone(),
                    tables: tables.clone(),
                })
            }
            Self::Polynomial { .. } => {
                let clipped = self.table(field, states)?.into_iter().map(|v| v.clamp(0.0, bound)).collect();
                Ok(FinitePotential::Table(clipped))
            }
            _ => {
                let t = self.table(field, states)?;
                let name = match self {
                    Self::Table { .. } => format!("{field}.values"),
                    _ => format!("{field}.value"),
                };
                check(name, &t)?;
                Ok(FinitePotential::Table(t))
            }
        }
    }

    fn euclidean_potential(&self, field: &str, dim: usize, bound: f64) -> Result<EuclideanPotential> {
        match self {
            Self::Constant { value } => {
                if !(0.0..=bound).contains(value) {
                    return Err(ConfigError::invariant(
                        format!("{field}.value"),
                        format!("potential value {value} outside [0, v_inf = {bound}]"),
                    ));
                }
                Ok(EuclideanPotential::Constant(*value))
            }
            Self::Polynomial { terms } => {
                let mut out = Vec::with_capacity(terms.len());
                for (i, t) in terms.iter().enumerate() {
                    if t.powers.len() != dim {
                        return Err(ConfigError::invariant(
                            format!("{field}.terms[{i}].powers"),
                            format!("has {} powers, expected {dim}", t.powers.len()),
                        ));
                    }
                    if !t.coefficient.is_finite() {
                        return Err(ConfigError::invariant(format!("{field}.terms[{i}].coefficient"), "not finite"));
                    }
                    out.push(Monomial {
                        coefficient: t.coefficient,
                        powers: t.powers.clone(),
                    });
                }
                Ok(EuclideanPotential::Polynomial(out))
            }
            _ => Err(ConfigError::invariant(
                field,
                "diffusion potentials must be `constant` or `polynomial`",
            )),
        }
    }

    /// Evaluates the form at a point of `R^d`.
    pub fn eval_point(&self, x: &[f64]) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Polynomial { terms } => terms
                .iter()
                .map(|t| {
                    t.coefficient * t.powers.iter().zip(x).map(|(&p, &xi)| xi.powi(p as i32)).product::<f64>()
                })
                .sum(),
            _ => f64::NAN,
        }
    }
}

/// A model built from the config.
#[derive(Debug, Clone)]
pub enum Model {
    Finite(FiniteStateModel),
    Diffusion(DiffusionModel),
}

fn core_error(field: &str, e: fkpart::Error) -> ConfigError {
    ConfigError::invariant(field, e.to_string())
}

impl ModelSection {
    pub fn num_states(&self) -> Option<usize> {
        match self {
            Self::Finite { rates, .. } => Some(rates.len()),
            Self::Diffusion { .. } => None,
        }
    }

    pub fn build(&self) -> Result<Model> {
        match self {
            Self::Finite {
                rates,
                potential,
                v_inf,
                initial,
            } => {
                let s = rates.len();
                if s == 0 {
                    return Err(ConfigError::invariant("model.rates", "needs at least one state"));
                }
                check_bound(*v_inf)?;
                for (i, row) in rates.iter().enumerate() {
                    let field = format!("model.rates[{i}]");
                    if row.len() != s {
                        return Err(ConfigError::invariant(field, format!("has {} entries, expected {s}", row.len())));
                    }
                    finite_values(&field, row)?;
                    if let Some(j) = (0..s).find(|&j| j != i && row[j] < 0.0) {
                        return Err(ConfigError::invariant(
                            format!("{field}[{j}]"),
                            format!("off-diagonal rate {} is negative", row[j]),
                        ));
                    }
                    let sum: f64 = row.iter().sum();
                    let scale = row.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
                    if sum.abs() > 1e-12 * scale {
                        return Err(ConfigError::invariant(field, format!("row sums to {sum}, expected 0")));
                    }
                }
                let pot = potential.finite_potential("model.potential", s, *v_inf)?;
                if initial.len() != s {
                    return Err(ConfigError::invariant(
                        "model.initial",
                        format!("has {} entries, expected {s}", initial.len()),
                    ));
                }
                if let Some(i) = initial.iter().position(|p| !(*p >= 0.0)) {
                    return Err(ConfigError::invariant(format!("model.initial[{i}]"), "probability is negative"));
                }
                let total: f64 = initial.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(ConfigError::invariant("model.initial", format!("sums to {total}, expected 1")));
                }
                FiniteStateModel::new(rates.clone(), pot, *v_inf, initial.clone())
                    .map(Model::Finite)
                    .map_err(|e| core_error("model", e))
            }
            Self::Diffusion {
                drift_matrix,
                drift_offset,
                diffusion,
                potential,
                v_inf,
                initial,
            } => {
                let d = drift_matrix.len();
                if d == 0 {
                    return Err(ConfigError::invariant("model.drift_matrix", "needs at least one row"));
                }
                check_bound(*v_inf)?;
                for (i, row) in drift_matrix.iter().enumerate() {
                    if row.len() != d {
                        return Err(ConfigError::invariant(
                            format!("model.drift_matrix[{i}]"),
                            format!("has {} entries, expected {d}", row.len()),
                        ));
                    }
                }
                if drift_offset.len() != d {
                    return Err(ConfigError::invariant("model.drift_offset", format!("expected {d} entries")));
                }
                if diffusion.len() != d {
                    return Err(ConfigError::invariant("model.diffusion", format!("expected {d} entries")));
                }
                let pot = potential.euclidean_potential("model.potential", d, *v_inf)?;
                let init = match initial {
                    InitialSection::Point { x } => InitialLaw::Point(x.clone()),
                    InitialSection::Gaussian { mean, sd } => InitialLaw::Gaussian {
                        mean: mean.clone(),
                        sd: sd.clone(),
                    },
                };
                DiffusionModel::new(
                    d,
                    drift_matrix.concat(),
                    drift_offset.clone(),
                    diffusion.clone(),
                    pot,
                    *v_inf,
                    init,
                )
                .map(Model::Diffusion)
                .map_err(|e| core_error("model", e))
            }
        }
    }
}

fn check_bound(v_inf: f64) -> Result<()> {
    if v_inf > 0.0 && v_inf.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::invariant("model.v_inf", format!("must be positive and finite, got {v_inf}")))
    }
}

impl Config {
    /// Checks every model, experiment and function invariant.
    pub fn validate(&self) -> Result<()> {
        self.model.build()?;
        let e = &self.experiment;
        if !(e.t > 0.0 && e.t.is_finite()) {
            return Err(ConfigError::invariant("experiment.t", format!("must be positive, got {}", e.t)));
        }
        if !(e.dt > 0.0 && e.dt.is_finite()) {
            return Err(ConfigError::invariant("experiment.dt", format!("must be positive, got {}", e.dt)));
        }
        if e.replicas < 2 {
            return Err(ConfigError::invariant("experiment.replicas", "need at least 2 replicas"));
        }
        if e.n_grid.is_empty() || e.n_grid[0] == 0 || e.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::invariant(
                "experiment.n_grid",
                "must be nonempty, positive and strictly increasing",
            ));
        }
        let f = &self.functions;
        if !f.test.is_empty() && f.test.len() != 2 {
            return Err(ConfigError::invariant("functions.test", "give exactly two test functions"));
        }
        match self.model.num_states() {
            Some(s) => {
                if let Some(o) = &f.observable {
                    o.table("functions.observable", s)?;
                }
                for (i, t) in f.test.iter().enumerate() {
                    t.table(&format!("functions.test[{i}]"), s)?;
                }
                if let Some(k) = &f.kernel {
                    if k.len() != s || k.iter().any(|r| r.len() != s) {
                        return Err(ConfigError::invariant("functions.kernel", format!("must be {s} x {s}")));
                    }
                    finite_values("functions.kernel", &k.concat())?;
                    for i in 0..s {
                        for j in 0..i {
                            if k[i][j] != k[j][i] {
                                return Err(ConfigError::invariant(
                                    format!("functions.kernel[{i}][{j}]"),
                                    "kernel must be symmetric",
                                ));
                            }
                        }
                    }
                }
            }
            None => {
                if f.kernel.is_some() {
                    return Err(ConfigError::invariant("functions.kernel", "kernels need a finite model"));
                }
                for (name, form) in f.observable.iter().map(|o| ("functions.observable".to_string(), o)).chain(
                    f.test.iter().enumerate().map(|(i, t)| (format!("functions.test[{i}]"), t)),
                ) {
                    if !matches!(form, FunctionForm::Constant { .. } | FunctionForm::Polynomial { .. }) {
                        return Err(ConfigError::invariant(name, "diffusion models take `constant` or `polynomial`"));
                    }
                }
            }
        }
        if self.output.formats.is_empty() {
            return Err(ConfigError::invariant("output.formats", "list at least one format"));
        }
        Ok(())
    }

    /// Canonical TOML text of the parsed config.
    pub fn normalized(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the normalized text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.normalized().as_bytes()))
    }

    /// Acceptance-suite settings; needs a finite model and all functions.
    pub fn suite_settings(&self, seed: u64) -> Result<SuiteSettings> {
        let model = match self.model.build()? {
            Model::Finite(m) => m,
            Model::Diffusion(_) => {
                return Err(ConfigError::invariant("model.kind", "the verification suite needs a finite model"));
            }
        };
        let s = model.num_states();
        let f = &self.functions;
        let observable = f
            .observable
            .as_ref()
            .ok_or_else(|| ConfigError::invariant("functions.observable", "required by the verification suite"))?
            .table("functions.observable", s)?;
        if f.test.len() != 2 {
            return Err(ConfigError::invariant("functions.test", "two test functions are required"));
        }
        let test_functions = [f.test[0].table("functions.test[0]", s)?, f.test[1].table("functions.test[1]", s)?];
        let kernel_table = f
            .kernel
            .as_ref()
            .ok_or_else(|| ConfigError::invariant("functions.kernel", "required by the verification suite"))?
            .concat();
        Ok(SuiteSettings {
            model,
            t: self.experiment.t,
            dt: self.experiment.dt,
            seed,
            observable,
            test_functions,
            kernel_table,
            sizes: self.suite.sizes(),
        })
    }
}
