mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fkpart::harness::verify::{CriterionOutcome, Suite, CRITERIA};
use fkpart::harness::{header_line, run_replicas, write_replica_csv, ExperimentPlan, Functional, ReplicaMatrix};
use fkpart::statistics::{Kernel, ScalarFn};
use serde::Serialize;
use serde_json::{json, Map, Value};

use config::{Config, ConfigError, Format, FunctionForm, Model};

const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Particle approximations of Feynman-Kac flows: simulation and verification.
#[derive(Debug, Parser)]
#[command(name = "fkpart", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed; overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output.directory`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for replica parallelism.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Glob over check names or ids, e.g. `clt-*` or `9`.
    #[arg(long, global = true, value_name = "GLOB")]
    filter: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Raw replica matrices over the experiment grid.
    Simulate,
    /// Laurent fits of the q-measure series against the closed form.
    Derivatives,
    /// Wick pairing term and its cross-checks.
    Wick,
    /// Limit covariance against replica covariance.
    Clt,
    /// Moments of the degenerate limit against Hermite predictions.
    Hermite,
    /// The full acceptance suite.
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Derivatives => "derivatives",
            Self::Wick => "wick",
            Self::Clt => "clt",
            Self::Hermite => "hermite",
            Self::Verify => "verify",
        }
    }

    fn criteria(self) -> Vec<u8> {
        match self {
            Self::Simulate => vec![],
            Self::Derivatives => vec![5, 7],
            Self::Wick => vec![3, 8],
            Self::Clt => vec![9, 10],
            Self::Hermite => vec![11],
            Self::Verify => CRITERIA.iter().map(|c| c.0).collect(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] fkpart::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Config(_) => "config",
            Self::Core(_) => "runtime",
            Self::Io { .. } => "io",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::Config(_) => EXIT_USAGE,
            Self::Core(_) | Self::Io { .. } => EXIT_RUNTIME,
        }
    }

    fn report(&self) -> Value {
        let mut v = json!({"status": "error", "kind": self.kind(), "message": self.to_string()});
        if let Self::Config(c) = self {
            if let Some(f) = c.field() {
                v["field"] = json!(f);
            }
            if let Some(l) = c.line() {
                v["line"] = json!(l);
            }
        }
        v
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Run {
    command: Command,
    config: Config,
    hash: String,
    seed: u64,
    out: PathBuf,
    filter: Option<glob::Pattern>,
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: &'a str,
    seed: u64,
    command: &'a str,
    passed: bool,
    checks: Vec<CheckReport>,
}

#[derive(Clone, Serialize)]
struct CheckReport {
    id: u8,
    name: String,
    passed: bool,
    metrics: Map<String, Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl CheckReport {
    fn from_outcome(o: &CriterionOutcome) -> Self {
        Self {
            id: o.id,
            name: o.name.to_string(),
            passed: o.passed,
            metrics: o.metrics.iter().map(|(k, v)| (k.clone(), json!(v))).collect(),
            error: None,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            if !usage {
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", json!({"status": "error", "kind": "usage", "message": e.kind().to_string()}));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", e.report());
            ExitCode::from(e.exit_code())
        }
    }
}

fn execute(cli: Cli) -> Result<u8, CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Usage("missing required option --config <PATH>".into()))?;
    if !path.is_file() {
        return Err(CliError::Usage(format!("config file {} does not exist", path.display())));
    }
    let config = config::parse_config(&path)?;
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    let filter = cli
        .filter
        .as_deref()
        .map(glob::Pattern::new)
        .transpose()
        .map_err(|e| CliError::Usage(format!("bad --filter pattern: {e}")))?;
    let run = Run {
        command: cli.command,
        hash: config.hash(),
        seed: cli.seed.unwrap_or(config.experiment.seed),
        out: cli.out.unwrap_or_else(|| config.output.directory.clone()),
        config,
        filter,
    };
    fs::create_dir_all(&run.out).map_err(io_err(&run.out))?;
    match run.command {
        Command::Simulate => simulate(&run),
        _ => checks(&run),
    }
}

fn selected(run: &Run) -> Vec<u8> {
    run.command
        .criteria()
        .into_iter()
        .filter(|&id| match &run.filter {
            None => true,
            Some(p) => {
                let name = fkpart::harness::verify::criterion_name(id).unwrap_or_default();
                p.matches(name) || p.matches(&id.to_string()) || p.matches(&format!("{id:02}"))
            }
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

fn checks(run: &Run) -> Result<u8, CliError> {
    let ids = selected(run);
    if ids.is_empty() {
        return Err(CliError::Usage(format!(
            "--filter selects none of the checks run by `{}`",
            run.command.name()
        )));
    }
    let suite = Suite::new(run.config.suite_settings(run.seed)?)?;
    let mut reports = Vec::new();
    for id in ids {
        match suite.run(id) {
            Ok(o) => {
                println!("{}", o.summary_line());
                write_outcome(run, &o)?;
                reports.push(CheckReport::from_outcome(&o));
            }
            Err(e) => {
                let name = fkpart::harness::verify::criterion_name(id).unwrap_or_default();
                println!("criterion {id:>2} {name}: FAIL (error: {e})");
                reports.push(CheckReport {
                    id,
                    name: name.to_string(),
                    passed: false,
                    metrics: Map::new(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let passed = reports.iter().all(|r| r.passed);
    write_summary(run, &reports, passed)?;
    if passed {
        return Ok(0);
    }
    let failed: Vec<Value> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| serde_json::to_value(r).expect("report serializes"))
        .collect();
    eprintln!(
        "{}",
        json!({"status": "failed", "command": run.command.name(), "seed": run.seed, "failed": failed})
    );
    Ok(EXIT_FAILED)
}

fn write_outcome(run: &Run, o: &CriterionOutcome) -> Result<(), CliError> {
    let dir = run.out.join(format!("{:02}-{}", o.id, o.name));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for t in &o.tables {
        let mut buf = Vec::new();
        t.write(&mut buf, &run.hash, run.seed).expect("writing to memory");
        write_file(&dir.join(format!("{}.csv", t.name)), &buf)?;
    }
    for (label, bytes) in o.replica_csv(&run.hash, run.seed) {
        write_file(&dir.join(format!("replicas-{label}.csv")), &bytes)?;
    }
    Ok(())
}

fn write_summary(run: &Run, reports: &[CheckReport], passed: bool) -> Result<(), CliError> {
    let formats = &run.config.output.formats;
    if formats.contains(&Format::Csv) {
        let mut s = format!("{}\nid,name,metric,value,passed\n", header_line(&run.hash, run.seed));
        for r in reports {
            for (k, v) in &r.metrics {
                s.push_str(&format!("{},{},{k},{v},{}\n", r.id, r.name, r.passed));
            }
            if let Some(e) = &r.error {
                s.push_str(&format!("{},{},error,\"{}\",false\n", r.id, r.name, e.replace('"', "'")));
            }
        }
        write_file(&run.out.join("summary.csv"), s.as_bytes())?;
    }
    if formats.contains(&Format::Json) {
        let summary = Summary {
            config_hash: &run.hash,
            seed: run.seed,
            command: run.command.name(),
            passed,
            checks: reports.to_vec(),
        };
        let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        text.push('\n');
        write_file(&run.out.join("summary.json"), text.as_bytes())?;
    }
    Ok(())
}

fn simulate(run: &Run) -> Result<u8, CliError> {
    let e = &run.config.experiment;
    let plan = ExperimentPlan::new("simulate", 0, e.n_grid.clone(), e.replicas, e.t, e.dt, run.seed)?;
    let functions = &run.config.functions;
    let mats = match run.config.model.build()? {
        Model::Finite(m) => {
            let s = m.num_states();
            let mut fs = vec![("gamma_mass".to_string(), Functional::GammaMass)];
            if let Some(o) = &functions.observable {
                let f = ScalarFn::from_table(finite_table(o, s));
                fs.push(("eta_observable".to_string(), Functional::Eta(f.clone())));
                fs.push(("gamma_observable".to_string(), Functional::Gamma(f)));
            }
            if let Some(k) = &functions.kernel {
                let kernel = Kernel::from_table(2, s, k.concat())?;
                fs.push(("u_kernel".to_string(), Functional::UStatistic(kernel)));
            }
            run_replicas(&m, &plan, &fs)?
        }
        Model::Diffusion(m) => {
            let mut fs = vec![("gamma_mass".to_string(), Functional::GammaMass)];
            if let Some(o) = functions.observable.clone() {
                let f = ScalarFn::new(move |x: &Vec<f64>| o.eval_point(x));
                fs.push(("eta_observable".to_string(), Functional::Eta(f.clone())));
                fs.push(("gamma_observable".to_string(), Functional::Gamma(f)));
            }
            run_replicas(&m, &plan, &fs)?
        }
    };
    let dir = run.out.join("simulate");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut buf = Vec::new();
    write_replica_csv(&mut buf, &run.hash, run.seed, "simulate", &mats).expect("writing to memory");
    write_file(&dir.join("replicas.csv"), &buf)?;
    write_file(&dir.join("means.csv"), means_csv(run, &mats).as_bytes())?;
    for m in &mats {
        for (j, c) in m.columns.iter().enumerate() {
            let est = m.mean(j);
            println!("n={} {c}: {} ± {}", m.n, est.value, est.se);
        }
    }
    Ok(0)
}

fn finite_table(form: &FunctionForm, states: usize) -> Vec<f64> {
    match form {
        FunctionForm::Constant { value } => vec![*value; states],
        FunctionForm::Table { values } => values.clone(),
        _ => (0..states).map(|s| form.eval_point(&[s as f64])).collect(),
    }
}

fn means_csv(run: &Run, mats: &[ReplicaMatrix]) -> String {
    let mut s = format!("{}\nn,functional,mean,se,replicas\n", header_line(&run.hash, run.seed));
    for m in mats {
        for (j, c) in m.columns.iter().enumerate() {
            let est = m.mean(j);
            s.push_str(&format!("{},{c},{},{},{}\n", m.n, est.value, est.se, m.rows.len()));
        }
    }
    s
}
