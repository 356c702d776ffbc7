//! Experiment configuration and the command-line driver.
//!
//! Configurations are flat `key = value` files. Any key can be overridden on
//! the command line with `--key value`. [`ExperimentConfig`] renders back to
//! the same format through `Display`, so a parsed config can be saved and
//! reloaded unchanged.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::accountant::{calibrate_iterations, default_alpha_grid, PrivacySpec, RdpAccountant};
use crate::data::{
    generate_synthetic, load_csv, partition, Dataset, PartitionScheme, PartitionSpec,
};
use crate::dpsgd::DpsgdHyper;
use crate::error::{Error, Result};
use crate::federation::{Federation, FederationConfig, RoundMetrics, SchedulerKind, Trajectory};
use crate::model::{ModelKind, ModelSpec};
use crate::rng::purpose_rng;
use crate::scheduler::{
    bound_g, bound_h, effective_horizon, DiagnosticBoundParams, SchedulerContext, DEFAULT_TAU_CAP,
};

const PURPOSE_INIT: u64 = 4;

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for a failure after the inputs were accepted.
pub const EXIT_RUNTIME: i32 = 1;
/// Exit code for rejected input: bad flags, config, data or budget.
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        num_features: usize,
        samples_per_class: usize,
        separation: f64,
    },
    /// `label,f1,f2,...` rows; the class count is inferred from the labels.
    Csv(PathBuf),
}

/// Where the iteration budget `R_c` comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    /// Calibrate `R_c` to this ε at the configured δ.
    Epsilon(f64),
    Iterations(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub data: DataSource,
    pub test_fraction: f64,
    pub partition: PartitionScheme,
    pub num_clients: usize,
    pub hyper: DpsgdHyper,
    pub budget: Option<Budget>,
    pub delta: f64,
    pub max_rounds: u64,
    pub scheduler: SchedulerKind,
    pub gamma: f64,
    pub tau_cap: u64,
    pub data_seed: u64,
    pub init_seed: u64,
    pub train_seed: u64,
    pub parallel: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::SoftmaxRegression,
            data: DataSource::Synthetic {
                num_classes: 4,
                num_features: 20,
                samples_per_class: 500,
                separation: 3.0,
            },
            test_fraction: 0.2,
            partition: PartitionScheme::Dirichlet { beta: 0.05 },
            num_clients: 10,
            hyper: DpsgdHyper {
                learning_rate: 0.5,
                clip_bound: 1.0,
                noise_multiplier: 1.0,
                sampling_rate: 0.015,
            },
            budget: None,
            delta: 1e-5,
            max_rounds: 100,
            scheduler: SchedulerKind::Adaptive,
            gamma: 10.0,
            tau_cap: DEFAULT_TAU_CAP,
            data_seed: 0,
            init_seed: 0,
            train_seed: 0,
            parallel: true,
            out: PathBuf::from("metrics.csv"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value {value:?} for {key}: expected true or false"
        ))),
    }
}

fn parse_scheduler(value: &str) -> Result<SchedulerKind> {
    if value == "ali" {
        return Ok(SchedulerKind::Adaptive);
    }
    match value.strip_prefix("fixed:") {
        Some(k) => Ok(SchedulerKind::Fixed(parse_value("scheduler", k)?)),
        None => Err(Error::Config(format!(
            "bad scheduler {value:?}: expected ali or fixed:K"
        ))),
    }
}

fn parse_model(value: &str) -> Result<ModelKind> {
    if value == "softmax" {
        return Ok(ModelKind::SoftmaxRegression);
    }
    match value.strip_prefix("mlp:") {
        Some(h) => Ok(ModelKind::Mlp {
            hidden: parse_value("model", h)?,
        }),
        None => Err(Error::Config(format!(
            "bad model {value:?}: expected softmax or mlp:H"
        ))),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting. Keys accept `-` in place of `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "model" => self.model = parse_model(value)?,
            "data" => {
                self.data = if value == "synthetic" {
                    match &self.data {
                        DataSource::Synthetic { .. } => self.data.clone(),
                        DataSource::Csv(_) => ExperimentConfig::default().data,
                    }
                } else if let Some(path) = value.strip_prefix("csv:") {
                    DataSource::Csv(PathBuf::from(path))
                } else {
                    return Err(Error::Config(format!(
                        "bad data {value:?}: expected synthetic or csv:PATH"
                    )));
                }
            }
            "num_classes" | "num_features" | "samples_per_class" | "separation" => {
                let DataSource::Synthetic {
                    num_classes,
                    num_features,
                    samples_per_class,
                    separation,
                } = &mut self.data
                else {
                    return Err(Error::Config(format!(
                        "{key} only applies to synthetic data"
                    )));
                };
                match key.as_str() {
                    "num_classes" => *num_classes = parse_value(&key, value)?,
                    "num_features" => *num_features = parse_value(&key, value)?,
                    "samples_per_class" => *samples_per_class = parse_value(&key, value)?,
                    _ => *separation = parse_value(&key, value)?,
                }
            }
            "test_fraction" => self.test_fraction = parse_value(&key, value)?,
            "partition" => {
                self.partition = match value {
                    "iid" => PartitionScheme::Iid,
                    "dirichlet" => match self.partition {
                        p @ PartitionScheme::Dirichlet { .. } => p,
                        PartitionScheme::Iid => PartitionScheme::Dirichlet { beta: 0.05 },
                    },
                    _ => {
                        return Err(Error::Config(format!(
                            "bad partition {value:?}: expected iid or dirichlet"
                        )))
                    }
                }
            }
            "beta" => {
                self.partition = PartitionScheme::Dirichlet {
                    beta: parse_value(&key, value)?,
                }
            }
            "clients" => self.num_clients = parse_value(&key, value)?,
            "learning_rate" => self.hyper.learning_rate = parse_value(&key, value)?,
            "clip" => self.hyper.clip_bound = parse_value(&key, value)?,
            "sigma" => self.hyper.noise_multiplier = parse_value(&key, value)?,
            "q" => self.hyper.sampling_rate = parse_value(&key, value)?,
            "epsilon" => self.set_budget(Budget::Epsilon(parse_value(&key, value)?))?,
            "rc" => self.set_budget(Budget::Iterations(parse_value(&key, value)?))?,
            "delta" => self.delta = parse_value(&key, value)?,
            "rs" => self.max_rounds = parse_value(&key, value)?,
            "scheduler" => self.scheduler = parse_scheduler(value)?,
            "gamma" => self.gamma = parse_value(&key, value)?,
            "tau_cap" => self.tau_cap = parse_value(&key, value)?,
            "seed" => {
                let seed = parse_value(&key, value)?;
                self.data_seed = seed;
                self.init_seed = seed;
                self.train_seed = seed;
            }
            "data_seed" => self.data_seed = parse_value(&key, value)?,
            "init_seed" => self.init_seed = parse_value(&key, value)?,
            "train_seed" => self.train_seed = parse_value(&key, value)?,
            "parallel" => self.parallel = parse_bool(&key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn set_budget(&mut self, budget: Budget) -> Result<()> {
        match (self.budget, budget) {
            (Some(Budget::Epsilon(_)), Budget::Iterations(_))
            | (Some(Budget::Iterations(_)), Budget::Epsilon(_)) => {
                Err(Error::Config("set exactly one of epsilon and rc".into()))
            }
            _ => {
                self.budget = Some(budget);
                Ok(())
            }
        }
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies `--key value` pairs in order.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --key, got {flag:?}")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k, v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Config(format!("missing value for --{key}")))?;
                    (key, v.clone())
                }
            };
            self.set(key, &value)?;
        }
        Ok(())
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.budget.is_none() {
            return Err(Error::Config("set exactly one of epsilon and rc".into()));
        }
        if let Some(Budget::Epsilon(_)) = self.budget {
            if !self.hyper.is_private() {
                return Err(Error::Config(
                    "an epsilon target needs sigma > 0; give rc instead".into(),
                ));
            }
        }
        if self.num_clients == 0 {
            return Err(Error::Config("clients must be at least 1".into()));
        }
        if let ModelKind::Mlp { hidden: 0 } = self.model {
            return Err(Error::Config("mlp hidden width must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must be in [0, 1), got {}",
                self.test_fraction
            )));
        }
        if let PartitionScheme::Dirichlet { beta } = self.partition {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::Config(format!("beta must be positive, got {beta}")));
            }
        }
        Ok(())
    }

    /// `R_c`, calibrating from ε when needed.
    pub fn resolve_iterations(&self) -> Result<u64> {
        match self.budget {
            Some(Budget::Iterations(rc)) => Ok(rc),
            Some(Budget::Epsilon(epsilon)) => {
                let spec = PrivacySpec::new(
                    epsilon,
                    self.delta,
                    self.hyper.sampling_rate,
                    self.hyper.noise_multiplier,
                )?;
                calibrate_iterations(&spec, &default_alpha_grid())
            }
            None => Err(Error::Config("set exactly one of epsilon and rc".into())),
        }
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.model {
            ModelKind::SoftmaxRegression => writeln!(f, "model = softmax")?,
            ModelKind::Mlp { hidden } => writeln!(f, "model = mlp:{hidden}")?,
        }
        match &self.data {
            DataSource::Synthetic {
                num_classes,
                num_features,
                samples_per_class,
                separation,
            } => {
                writeln!(f, "data = synthetic")?;
                writeln!(f, "num_classes = {num_classes}")?;
                writeln!(f, "num_features = {num_features}")?;
                writeln!(f, "samples_per_class = {samples_per_class}")?;
                writeln!(f, "separation = {separation}")?;
            }
            DataSource::Csv(path) => writeln!(f, "data = csv:{}", path.display())?,
        }
        writeln!(f, "test_fraction = {}", self.test_fraction)?;
        match self.partition {
            PartitionScheme::Iid => writeln!(f, "partition = iid")?,
            PartitionScheme::Dirichlet { beta } => {
                writeln!(f, "partition = dirichlet")?;
                writeln!(f, "beta = {beta}")?;
            }
        }
        writeln!(f, "clients = {}", self.num_clients)?;
        writeln!(f, "learning_rate = {}", self.hyper.learning_rate)?;
        writeln!(f, "clip = {}", self.hyper.clip_bound)?;
        writeln!(f, "sigma = {}", self.hyper.noise_multiplier)?;
        writeln!(f, "q = {}", self.hyper.sampling_rate)?;
        match self.budget {
            Some(Budget::Epsilon(e)) => writeln!(f, "epsilon = {e}")?,
            Some(Budget::Iterations(rc)) => writeln!(f, "rc = {rc}")?,
            None => {}
        }
        writeln!(f, "delta = {}", self.delta)?;
        writeln!(f, "rs = {}", self.max_rounds)?;
        match self.scheduler {
            SchedulerKind::Adaptive => writeln!(f, "scheduler = ali")?,
            SchedulerKind::Fixed(k) => writeln!(f, "scheduler = fixed:{k}")?,
        }
        writeln!(f, "gamma = {}", self.gamma)?;
        writeln!(f, "tau_cap = {}", self.tau_cap)?;
        writeln!(f, "data_seed = {}", self.data_seed)?;
        writeln!(f, "init_seed = {}", self.init_seed)?;
        writeln!(f, "train_seed = {}", self.train_seed)?;
        writeln!(f, "parallel = {}", self.parallel)?;
        writeln!(f, "out = {}", self.out.display())
    }
}

/// Data after holding out the test split and partitioning.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub clients: Vec<crate::data::ClientDataset>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let full = match &cfg.data {
        DataSource::Synthetic {
            num_classes,
            num_features,
            samples_per_class,
            separation,
        } => generate_synthetic(
            *num_classes,
            *num_features,
            *samples_per_class,
            *separation,
            cfg.data_seed,
        )?,
        DataSource::Csv(path) => load_csv(path, None)?,
    };
    let (train, test) = full.split(cfg.test_fraction, cfg.data_seed)?;
    let clients = partition(
        &train,
        &PartitionSpec {
            scheme: cfg.partition,
            num_clients: cfg.num_clients,
            seed: cfg.data_seed,
        },
    )?;
    Ok(PreparedData {
        train,
        test,
        clients,
    })
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub max_iterations: u64,
    pub epsilon_target: Option<f64>,
    pub trajectory: Trajectory,
}

/// Federation settings for a config whose data are already prepared.
pub fn federation_config(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    max_iterations: u64,
) -> FederationConfig {
    let model = ModelSpec {
        kind: cfg.model,
        num_features: data.train.num_features,
        num_classes: data.train.num_classes,
    };
    FederationConfig {
        model,
        hyper: cfg.hyper,
        max_rounds: cfg.max_rounds,
        max_iterations,
        scheduler: cfg.scheduler,
        gamma: cfg.gamma,
        tau_cap: cfg.tau_cap,
        delta: cfg.delta,
        alpha_grid: default_alpha_grid(),
        train_seed: cfg.train_seed,
        parallel: cfg.parallel,
    }
}

/// Runs a full experiment on prepared data.
pub fn run_prepared(cfg: &ExperimentConfig, data: &PreparedData) -> Result<ExperimentOutcome> {
    let max_iterations = cfg.resolve_iterations()?;
    let fed_cfg = federation_config(cfg, data, max_iterations);
    let init = fed_cfg
        .model
        .init_params(&mut purpose_rng(cfg.init_seed, PURPOSE_INIT));
    let federation = Federation::new(fed_cfg, &data.clients, &data.test.samples)?;
    let trajectory = federation.run(init)?;
    Ok(ExperimentOutcome {
        max_iterations,
        epsilon_target: match cfg.budget {
            Some(Budget::Epsilon(e)) => Some(e),
            _ => None,
        },
        trajectory,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    run_prepared(cfg, &data)
}

/// Writes the header and one row per round.
pub fn write_metrics<W: Write>(writer: W, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if metrics.is_empty() {
        w.write_record([
            "k",
            "t",
            "tau_executed",
            "tau_star_real",
            "mu_est",
            "epsilon_spent",
            "train_loss",
            "test_accuracy",
        ])?;
    }
    for row in metrics {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Parser)]
#[command(
    name = "dpfl",
    version,
    about = "Differentially private federated learning simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one federated training experiment and write per-round metrics.
    Run(RunArgs),
    /// Largest iteration count whose privacy loss stays within epsilon.
    Calibrate(CalibrateArgs),
    /// Privacy loss of a number of DPSGD iterations.
    Accountant(AccountantArgs),
    /// Emit the convergence bound h(tau) and G(tau) over a range of tau.
    Bound(BoundArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sets the data, init and training seeds at once.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metrics CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    /// Per-key overrides, e.g. `--rc 500 --scheduler fixed:3`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long)]
    pub q: f64,
    #[arg(long)]
    pub sigma: f64,
}

#[derive(Debug, Args)]
pub struct AccountantArgs {
    #[arg(long)]
    pub q: f64,
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub iterations: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[arg(long)]
    pub mu: f64,
    #[arg(long, default_value_t = 10.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Model dimension d.
    #[arg(long)]
    pub dim: usize,
    /// Smallest expected batch size.
    #[arg(long)]
    pub b_hat: f64,
    #[arg(long)]
    pub rs: u64,
    #[arg(long)]
    pub rc: u64,
    #[arg(long, default_value_t = 1)]
    pub tau_prev: u64,
    #[arg(long, default_value_t = 1.0)]
    pub lipschitz: f64,
    /// Initial squared distance to the optimum.
    #[arg(long, default_value_t = 1.0)]
    pub delta1: f64,
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
    #[arg(long, default_value_t = 1)]
    pub tau_min: u64,
    #[arg(long, default_value_t = 64)]
    pub tau_max: u64,
    /// Output path; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failure tagged with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

impl Failure {
    fn invalid(error: Error) -> Self {
        Self {
            code: EXIT_INVALID,
            error,
        }
    }

    fn runtime(error: Error) -> Self {
        Self {
            code: EXIT_RUNTIME,
            error,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.error {
            Error::InfeasibleBudget { .. } => write!(f, "{}", self.error),
            e => write!(f, "error: {e}"),
        }
    }
}

/// Executes a parsed command, writing summaries to `stdout`.
pub fn execute<W: Write>(cli: Cli, stdout: &mut W) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Run(args) => cmd_run(args, stdout),
        Command::Calibrate(args) => cmd_calibrate(&args, stdout),
        Command::Accountant(args) => cmd_accountant(&args, stdout),
        Command::Bound(args) => cmd_bound(&args, stdout),
    }
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::runtime(e.into())
}

fn cmd_run<W: Write>(args: RunArgs, stdout: &mut W) -> std::result::Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).map_err(Failure::invalid)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)
        .map_err(Failure::invalid)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())
            .map_err(Failure::invalid)?;
    }
    if let Some(out) = args.out {
        cfg.out = out;
    }
    if args.print_config {
        write!(stdout, "{cfg}").map_err(io_failure)?;
        return Ok(());
    }
    cfg.validate().map_err(Failure::invalid)?;
    if !cfg.hyper.is_private() {
        tracing::warn!("sigma = 0: non-private diagnostic run, no privacy guarantee");
    }
    let data = prepare_data(&cfg).map_err(Failure::invalid)?;
    let max_iterations = cfg.resolve_iterations().map_err(Failure::invalid)?;
    let fixed = ExperimentConfig {
        budget: Some(Budget::Iterations(max_iterations)),
        ..cfg.clone()
    };
    let outcome = run_prepared(&fixed, &data).map_err(Failure::runtime)?;
    let file = fs::File::create(&cfg.out).map_err(io_failure)?;
    write_metrics(std::io::BufWriter::new(file), &outcome.trajectory.metrics)
        .map_err(Failure::runtime)?;

    let state = &outcome.trajectory.final_state;
    let last = outcome.trajectory.metrics.last();
    let mut summary = || -> std::io::Result<()> {
        writeln!(stdout, "rounds = {}", state.round)?;
        writeln!(stdout, "iterations = {}", state.iterations)?;
        writeln!(stdout, "max_iterations = {max_iterations}")?;
        writeln!(stdout, "epsilon_spent = {}", state.epsilon_spent)?;
        if let Some(Budget::Epsilon(target)) = cfg.budget {
            writeln!(stdout, "epsilon_target = {target}")?;
        }
        match last {
            Some(row) => {
                writeln!(stdout, "final_train_loss = {}", row.train_loss)?;
                match row.test_accuracy {
                    Some(acc) => writeln!(stdout, "final_test_accuracy = {acc}")?,
                    None => writeln!(stdout, "final_test_accuracy = n/a")?,
                }
            }
            None => writeln!(stdout, "final_test_accuracy = n/a")?,
        }
        writeln!(stdout, "metrics = {}", cfg.out.display())
    };
    summary().map_err(io_failure)
}

fn cmd_calibrate<W: Write>(
    args: &CalibrateArgs,
    stdout: &mut W,
) -> std::result::Result<(), Failure> {
    let spec =
        PrivacySpec::new(args.epsilon, args.delta, args.q, args.sigma).map_err(Failure::invalid)?;
    let rc = calibrate_iterations(&spec, &default_alpha_grid()).map_err(Failure::invalid)?;
    writeln!(stdout, "{rc}").map_err(io_failure)
}

fn cmd_accountant<W: Write>(
    args: &AccountantArgs,
    stdout: &mut W,
) -> std::result::Result<(), Failure> {
    let acc =
        RdpAccountant::new(args.q, args.sigma, &default_alpha_grid()).map_err(Failure::invalid)?;
    let (eps, alpha) = acc
        .epsilon_and_order(args.iterations, args.delta)
        .map_err(Failure::invalid)?;
    writeln!(stdout, "epsilon = {eps}").map_err(io_failure)?;
    writeln!(stdout, "alpha = {alpha}").map_err(io_failure)
}

fn cmd_bound<W: Write>(args: &BoundArgs, stdout: &mut W) -> std::result::Result<(), Failure> {
    let ctx = SchedulerContext {
        mu: args.mu,
        gamma: args.gamma,
        clip_bound: args.clip,
        sigma: args.sigma,
        model_dim: args.dim,
        b_hat: args.b_hat,
        r_s: args.rs,
        r_c: args.rc,
        tau_prev: args.tau_prev,
        t_horizon: effective_horizon(args.rs, args.rc, args.tau_prev),
    };
    ctx.validate().map_err(Failure::invalid)?;
    let diag = DiagnosticBoundParams {
        lipschitz: args.lipschitz,
        delta1: args.delta1,
        eta: args.eta,
    };
    if !(diag.lipschitz > 0.0 && diag.delta1 >= 0.0 && diag.eta > 0.0) {
        return Err(Failure::invalid(Error::invalid(
            "lipschitz and eta must be positive, delta1 non-negative",
        )));
    }
    if args.tau_min == 0 || args.tau_min > args.tau_max {
        return Err(Failure::invalid(Error::invalid(
            "need 1 <= tau_min <= tau_max",
        )));
    }
    let mut sink: Box<dyn Write + '_> = match &args.out {
        Some(path) => Box::new(std::io::BufWriter::new(
            fs::File::create(path).map_err(io_failure)?,
        )),
        None => Box::new(&mut *stdout),
    };
    write_bound_csv(&mut sink, &ctx, &diag, args.tau_min..=args.tau_max).map_err(Failure::runtime)
}

/// `tau,h,G` rows for every integer τ in `taus`.
pub fn write_bound_csv<W: Write>(
    writer: W,
    ctx: &SchedulerContext,
    diag: &DiagnosticBoundParams,
    taus: std::ops::RangeInclusive<u64>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["tau", "h", "G"])?;
    for tau in taus {
        let t = tau as f64;
        w.write_record([
            tau.to_string(),
            bound_h(t, ctx, diag).to_string(),
            bound_g(t, ctx, diag).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
