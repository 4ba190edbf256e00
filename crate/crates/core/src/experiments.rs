//! Registry of the reproduced experiments and their override surface.
//!
//! Each entry fixes the market parameters, the payoff, the rollout settings
//! and the reference value a run is judged against. Lookups build a fresh
//! value every time, so overrides never leak between runs.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::ae_prior::leading_order_price;
use crate::market::{CorrelationRoot, ModelSpec, PayoffKind};
use crate::oracles::{
    bergman_purely_call_exact, benchmark, cole_hopf_mc, european_mc, BenchmarkKind, McEstimate, OracleError,
};
use crate::solver::{BsdeProblem, DriverKind, ReflectionSign, RolloutConfig, SolverError, Variant};

pub const EXPERIMENT_IDS: [&str; 9] = [
    "bergman_call_d1",
    "bergman_call_d30",
    "call_spread_d1",
    "call_spread_d30",
    "american_d1",
    "american_d50",
    "qg_d50_id",
    "qg_d50_corr",
    "qg_d50_extreme",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("unknown experiment `{0}`; known ids: {ids}", ids = EXPERIMENT_IDS.join(", "))]
    UnknownId(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// How the reference value of an experiment is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleBinding {
    /// Black-Scholes at the borrowing rate.
    ClosedForm,
    /// Cole-Hopf Monte Carlo under the physical measure.
    ColeHopf { n_paths: usize },
    /// Stored literature value, with an optional European Monte Carlo floor.
    Literature { key: &'static str, european_floor_paths: Option<usize> },
    /// No independent reference exists.
    None,
}

/// Where an expected value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ClosedForm,
    MonteCarlo,
    Literature,
    SolverReported,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::ClosedForm => "closed-form",
            Provenance::MonteCarlo => "monte-carlo",
            Provenance::Literature => "literature",
            Provenance::SolverReported => "solver-reported",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedValue {
    pub value: f64,
    pub uncertainty: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub id: &'static str,
    pub model: ModelSpec,
    pub payoff: PayoffKind,
    /// Rate at which the leading-order prior is evaluated.
    pub prior_rate: f64,
    pub rollout: RolloutConfig,
    pub oracle: OracleBinding,
    pub expected: Option<ExpectedValue>,
}

impl ExperimentConfig {
    pub fn problem(&self) -> Result<BsdeProblem, SolverError> {
        BsdeProblem::new(self.model.clone(), self.payoff, self.prior_rate)
    }

    /// Leading-order price at `(0, x0)`.
    pub fn leading_order_y0(&self) -> Result<f64, ExperimentError> {
        let root = CorrelationRoot::build(self.model.d, self.model.gamma).map_err(SolverError::from)?;
        leading_order_price(self.payoff, &self.model, &root, self.prior_rate, 0.0, &self.model.x0)
            .map_err(|e| ExperimentError::Solver(e.into()))
    }

    /// Copy with `o` applied and revalidated.
    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self, ExperimentError> {
        let r = &mut self.rollout;
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => { $(if let Some(v) = o.$field { $target = v; })* };
        }
        set!(
            use_ae => r.use_ae,
            learning_rate => r.learning_rate,
            n_time => r.n_time,
            batch_size => r.batch_size,
            valid_size => r.valid_size,
            max_steps => r.max_steps,
            seed => r.seed,
            display_stride => r.display_stride,
            lateral_weight => r.lateral_weight,
            penalty_epsilon => r.penalty_epsilon,
            variant => r.variant,
            reflection_sign => r.reflection_sign,
            lateral_after_reflection => r.lateral_after_reflection,
            yini => r.yini,
        );
        if r.variant == Variant::Plain && self.rollout.driver == DriverKind::ReflectedLinear {
            return Err(ExperimentError::Solver(SolverError::Config(
                "the reflected-linear experiments need the reflected or penalized variant".into(),
            )));
        }
        self.rollout.validate()?;
        Ok(self)
    }

    /// Evaluates the bound oracle. Monte Carlo bindings take `seed`.
    pub fn reference(&self, seed: u64) -> Result<Reference, ExperimentError> {
        let root = CorrelationRoot::build(self.model.d, self.model.gamma).map_err(SolverError::from)?;
        Ok(match self.oracle {
            OracleBinding::ClosedForm => Reference {
                value: bergman_purely_call_exact(&self.model, self.payoff)?,
                std_error: 0.0,
                provenance: Provenance::ClosedForm,
                floor: None,
            },
            OracleBinding::ColeHopf { n_paths } => {
                let e = cole_hopf_mc(&self.model, &root, self.model.quad_coeff, self.payoff, n_paths, seed)?;
                Reference { value: e.value, std_error: e.std_error, provenance: Provenance::MonteCarlo, floor: None }
            }
            OracleBinding::Literature { key, european_floor_paths } => {
                let b = benchmark(key)?;
                let floor = european_floor_paths
                    .map(|n| european_mc(&self.model, &root, self.payoff, n, seed))
                    .transpose()?;
                Reference {
                    value: b.value,
                    std_error: b.uncertainty,
                    provenance: match b.kind {
                        BenchmarkKind::Exact => Provenance::Literature,
                        BenchmarkKind::SolverReported => Provenance::SolverReported,
                    },
                    floor,
                }
            }
            OracleBinding::None => {
                return Err(ExperimentError::Oracle(OracleError::UnknownBenchmark(self.id.to_string())))
            }
        })
    }
}

/// Value of an evaluated oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub value: f64,
    pub std_error: f64,
    pub provenance: Provenance,
    /// European lower bound for American experiments.
    pub floor: Option<McEstimate>,
}

/// Optional replacements for the registered rollout settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub use_ae: Option<bool>,
    pub learning_rate: Option<f64>,
    pub n_time: Option<usize>,
    pub batch_size: Option<usize>,
    pub valid_size: Option<usize>,
    pub max_steps: Option<usize>,
    pub seed: Option<u64>,
    pub display_stride: Option<usize>,
    pub lateral_weight: Option<f64>,
    pub penalty_epsilon: Option<f64>,
    pub variant: Option<Variant>,
    pub reflection_sign: Option<ReflectionSign>,
    pub lateral_after_reflection: Option<bool>,
    pub yini: Option<[f64; 2]>,
}

impl Overrides {
    /// Fields set in `other` win.
    pub fn merged(&self, other: &Overrides) -> Overrides {
        macro_rules! pick {
            ($($f:ident),*) => { Overrides { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            use_ae,
            learning_rate,
            n_time,
            batch_size,
            valid_size,
            max_steps,
            seed,
            display_stride,
            lateral_weight,
            penalty_epsilon,
            variant,
            reflection_sign,
            lateral_after_reflection,
            yini
        )
    }
}

/// Contents of a flat `key = value` config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub experiment: Option<String>,
    pub out: Option<String>,
    pub overrides: Overrides,
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ExperimentError>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| ExperimentError::Config { line, msg: format!("bad value `{v}` for `{key}`: {e}") })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, ExperimentError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ExperimentError::Config { line, msg: format!("bad boolean `{v}` for `{key}`") }),
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
/// Keys mirror the command-line flags with underscores (`use_ae`,
/// `learning_rate`, `n_time`, `batch_size`, `iters`, `seed`, `out`, ...).
pub fn parse_config(text: &str) -> Result<ConfigFile, ExperimentError> {
    let mut cfg = ConfigFile::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .map(|(k, v)| (k.trim().replace('-', "_"), v.trim()))
            .ok_or_else(|| ExperimentError::Config { line, msg: format!("expected `key = value`, got `{body}`") })?;
        let o = &mut cfg.overrides;
        match key.as_str() {
            "experiment" => cfg.experiment = Some(value.to_string()),
            "out" => cfg.out = Some(value.to_string()),
            "use_ae" => o.use_ae = Some(parse_bool(line, &key, value)?),
            "learning_rate" => o.learning_rate = Some(parse_value(line, &key, value)?),
            "n_time" => o.n_time = Some(parse_value(line, &key, value)?),
            "batch_size" => o.batch_size = Some(parse_value(line, &key, value)?),
            "valid_size" => o.valid_size = Some(parse_value(line, &key, value)?),
            "iters" | "max_steps" => o.max_steps = Some(parse_value(line, &key, value)?),
            "seed" => o.seed = Some(parse_value(line, &key, value)?),
            "display_stride" => o.display_stride = Some(parse_value(line, &key, value)?),
            "lateral_weight" => o.lateral_weight = Some(parse_value(line, &key, value)?),
            "penalty_epsilon" => o.penalty_epsilon = Some(parse_value(line, &key, value)?),
            "variant" => o.variant = Some(parse_value(line, &key, value)?),
            "reflection_sign" => o.reflection_sign = Some(parse_value(line, &key, value)?),
            "lateral_after_reflection" => o.lateral_after_reflection = Some(parse_bool(line, &key, value)?),
            "yini" => {
                let (lo, hi) = value.split_once(',').ok_or_else(|| ExperimentError::Config {
                    line,
                    msg: format!("`yini` takes `low,high`, got `{value}`"),
                })?;
                o.yini = Some([parse_value(line, &key, lo.trim())?, parse_value(line, &key, hi.trim())?]);
            }
            other => return Err(ExperimentError::Config { line, msg: format!("unknown key `{other}`") }),
        }
    }
    Ok(cfg)
}

fn uniform_model(d: usize, mu: f64, sigma: f64, x0: f64, maturity: f64, gamma: f64) -> ModelSpec {
    let mut m = ModelSpec::uniform(d, mu, sigma, x0, maturity);
    m.gamma = gamma;
    m
}

fn bergman_call(d: usize, gamma: f64) -> (ModelSpec, PayoffKind) {
    let mut m = uniform_model(d, 0.05, 0.3, 100.0, 0.5, gamma);
    m.lending_rate = 0.01;
    m.borrowing_rate = 0.06;
    m.strikes = vec![103.0; d];
    (m, PayoffKind::CallPortfolio)
}

fn call_spread(d: usize, gamma: f64) -> (ModelSpec, PayoffKind) {
    let mut m = uniform_model(d, 0.05, 0.2, 100.0, 0.25, gamma);
    m.lending_rate = 0.01;
    m.borrowing_rate = 0.06;
    m.strikes = vec![95.0, 105.0];
    (m, PayoffKind::CallSpreadAvg)
}

fn american(d: usize, gamma: f64) -> (ModelSpec, PayoffKind) {
    let mut m = uniform_model(d, 0.02, 0.2, 110.0, 0.5, gamma);
    m.lending_rate = 0.03;
    m.dividend_yield = vec![0.07; d];
    m.strikes = vec![100.0];
    let kind = if d == 1 { PayoffKind::CallPortfolio } else { PayoffKind::BasketCall };
    if d == 1 {
        m.weights = vec![1.0];
    }
    (m, kind)
}

fn quadratic(a: f64, sigma: f64, gamma: f64) -> (ModelSpec, PayoffKind) {
    let mut m = uniform_model(50, 0.0, sigma, 100.0, 0.25, gamma);
    m.quad_coeff = a;
    m.strikes = vec![95.0, 105.0];
    (m, PayoffKind::CappedSpreadAvg)
}

const COLE_HOPF_PATHS: usize = 1_000_000;

/// Builds the registered configuration for `id`.
pub fn lookup(id: &str) -> Result<ExperimentConfig, ExperimentError> {
    let idx = EXPERIMENT_IDS.iter().position(|k| *k == id).ok_or_else(|| ExperimentError::UnknownId(id.into()))?;
    let id = EXPERIMENT_IDS[idx];
    let lit = |key: &'static str| {
        let b = benchmark(key).expect("registered benchmark");
        let provenance = match b.kind {
            BenchmarkKind::Exact => Provenance::Literature,
            BenchmarkKind::SolverReported => Provenance::SolverReported,
        };
        Some(ExpectedValue { value: b.value, uncertainty: b.uncertainty, provenance })
    };
    let mc = |key: &'static str| {
        let b = benchmark(key).expect("registered benchmark");
        Some(ExpectedValue { value: b.value, uncertainty: b.uncertainty, provenance: Provenance::MonteCarlo })
    };
    let closed = Some(ExpectedValue { value: 8.4672, uncertainty: 0.0, provenance: Provenance::ClosedForm });

    let ((model, payoff), variant, driver, n_time, oracle, expected) = match id {
        "bergman_call_d1" => (bergman_call(1, 0.0), Variant::Plain, DriverKind::Bergman, 50, OracleBinding::ClosedForm, closed),
        "bergman_call_d30" => {
            (bergman_call(30, 0.06), Variant::Plain, DriverKind::Bergman, 50, OracleBinding::ClosedForm, closed)
        }
        "call_spread_d1" => (
            call_spread(1, 0.0),
            Variant::Plain,
            DriverKind::Bergman,
            50,
            OracleBinding::Literature { key: "call_spread_d1", european_floor_paths: None },
            lit("call_spread_d1"),
        ),
        "call_spread_d30" => {
            (call_spread(30, 0.06), Variant::Plain, DriverKind::Bergman, 50, OracleBinding::None, None)
        }
        "american_d1" => (
            american(1, 0.0),
            Variant::Reflected,
            DriverKind::ReflectedLinear,
            100,
            OracleBinding::Literature { key: "american_d1", european_floor_paths: Some(1_000_000) },
            lit("american_d1"),
        ),
        "american_d50" => (
            american(50, 0.07),
            Variant::Reflected,
            DriverKind::ReflectedLinear,
            100,
            OracleBinding::Literature { key: "american_d50", european_floor_paths: Some(500_000) },
            lit("american_d50"),
        ),
        "qg_d50_id" => (
            quadratic(1.0, 0.2, 0.0),
            Variant::Plain,
            DriverKind::QuadraticGrowth,
            25,
            OracleBinding::ColeHopf { n_paths: COLE_HOPF_PATHS },
            mc("qg_d50_id"),
        ),
        "qg_d50_corr" => (
            quadratic(1.0, 0.2, 0.07),
            Variant::Plain,
            DriverKind::QuadraticGrowth,
            25,
            OracleBinding::ColeHopf { n_paths: COLE_HOPF_PATHS },
            mc("qg_d50_corr"),
        ),
        "qg_d50_extreme" => (
            quadratic(5.0, 1.0, 0.0),
            Variant::Plain,
            DriverKind::QuadraticGrowth,
            50,
            OracleBinding::ColeHopf { n_paths: COLE_HOPF_PATHS },
            mc("qg_d50_extreme"),
        ),
        _ => unreachable!("id validated above"),
    };
    let prior_rate = if driver == DriverKind::QuadraticGrowth { 0.0 } else { model.lending_rate };
    let mut rollout = RolloutConfig::new(variant, driver, n_time, model.maturity);
    rollout.max_steps = 5000;
    let mut cfg = ExperimentConfig { id, model, payoff, prior_rate, rollout, oracle, expected };
    let y = cfg.leading_order_y0()?;
    cfg.rollout.yini = [0.8 * y, 1.2 * y];
    Ok(cfg)
}

pub fn registry() -> Vec<ExperimentConfig> {
    EXPERIMENT_IDS.iter().map(|id| lookup(id).expect("registered id")).collect()
}
