//! Reference prices independent of the solver: closed forms, plain Monte
//! Carlo under the pricing measure, the Cole-Hopf estimator for the
//! quadratic-growth BSDE, and a table of literature benchmarks.

use thiserror::Error;

use crate::ae_prior::bs_call;
use crate::market::{derive_seed, map_blocks, payoff_row, CorrelationRoot, MarketError, Measure, ModelSpec, PayoffKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error("closed form needs a call portfolio with positive weights, got {0}")]
    NotPurelyCall(PayoffKind),
    #[error("Cole-Hopf estimator needs a nonzero quadratic coefficient")]
    ZeroCoefficient,
    #[error("Cole-Hopf estimator needs a bounded payoff, {0} is unbounded")]
    UnboundedPayoff(PayoffKind),
    #[error("at least two paths are needed for a standard error, got {0}")]
    TooFewPaths(usize),
    #[error("no literature benchmark stored under `{0}`")]
    UnknownBenchmark(String),
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

impl McEstimate {
    /// Whether `x` lies within `k` standard errors.
    pub fn covers(&self, x: f64, k: f64) -> bool {
        (x - self.value).abs() <= k * self.std_error
    }
}

/// When the hedge always borrows, the Bergman price is Black-Scholes with
/// the borrowing rate in place of the lending rate.
pub fn bergman_purely_call_exact(model: &ModelSpec, payoff: PayoffKind) -> Result<f64, OracleError> {
    model.validate()?;
    if payoff != PayoffKind::CallPortfolio || model.weights.iter().any(|q| *q <= 0.0) {
        return Err(OracleError::NotPurelyCall(payoff));
    }
    Ok((0..model.d)
        .map(|i| {
            model.weights[i]
                * bs_call(model.x0[i], model.strikes[i], model.borrowing_rate, 0.0, model.sigma[i], model.maturity)
        })
        .sum())
}

/// Running first and second moments, merged in block order.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v * v;
    }

    fn merge(self, o: Moments) -> Moments {
        Moments { n: self.n + o.n, sum: self.sum + o.sum, sum_sq: self.sum_sq + o.sum_sq }
    }

    fn mean_and_se(&self) -> (f64, f64) {
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (mean, (var / n).sqrt())
    }
}

/// `e^{-rT} E[Φ(X_T)]` under the pricing measure, one exact step per path.
pub fn european_mc(
    model: &ModelSpec,
    root: &CorrelationRoot,
    payoff: PayoffKind,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate, OracleError> {
    model.validate_degenerate()?;
    payoff.validate(model)?;
    if n_paths < 2 {
        return Err(OracleError::TooFewPaths(n_paths));
    }
    let d = model.d;
    let seed = derive_seed(seed, "oracle/european", 0);
    let blocks = map_blocks(model, root, Measure::Pricing, n_paths, 1, seed, |b| {
        let mut m = Moments::default();
        for row in b.terminal().chunks_exact(d) {
            m.push(payoff_row(payoff, model, row));
        }
        m
    });
    let total = blocks.into_iter().fold(Moments::default(), Moments::merge);
    let (mean, se) = total.mean_and_se();
    let disc = (-model.lending_rate * model.maturity).exp();
    Ok(McEstimate { value: disc * mean, std_error: disc * se, n_paths })
}

/// Per-block sums of `e^{a(Φ - shift)}` with a block-local shift, so that
/// large `aΦ` never overflows.
#[derive(Debug, Clone, Copy)]
struct ExpMoments {
    n: usize,
    shift: f64,
    sum: f64,
    sum_sq: f64,
    plain_sum: f64,
}

impl ExpMoments {
    fn rescale(self, shift: f64) -> ExpMoments {
        let s = (self.shift - shift).exp();
        ExpMoments { shift, sum: self.sum * s, sum_sq: self.sum_sq * s * s, ..self }
    }

    fn merge(self, o: ExpMoments) -> ExpMoments {
        let shift = self.shift.max(o.shift);
        let (a, b) = (self.rescale(shift), o.rescale(shift));
        ExpMoments {
            n: a.n + b.n,
            shift,
            sum: a.sum + b.sum,
            sum_sq: a.sum_sq + b.sum_sq,
            plain_sum: a.plain_sum + b.plain_sum,
        }
    }
}

/// Cole-Hopf estimate paired with the plain mean of `Φ` on the same paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColeHopfEstimate {
    pub y0: McEstimate,
    pub plain_mean: f64,
}

/// `Y_0 = (1/a) log E[e^{a Φ(X_T)}]` under the physical measure. The
/// standard error is carried through the log by the delta method.
pub fn cole_hopf_mc(
    model: &ModelSpec,
    root: &CorrelationRoot,
    a: f64,
    payoff: PayoffKind,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate, OracleError> {
    cole_hopf_with_plain(model, root, a, payoff, n_paths, seed).map(|e| e.y0)
}

pub fn cole_hopf_with_plain(
    model: &ModelSpec,
    root: &CorrelationRoot,
    a: f64,
    payoff: PayoffKind,
    n_paths: usize,
    seed: u64,
) -> Result<ColeHopfEstimate, OracleError> {
    model.validate_degenerate()?;
    payoff.validate(model)?;
    if a == 0.0 || !a.is_finite() {
        return Err(OracleError::ZeroCoefficient);
    }
    if payoff != PayoffKind::CappedSpreadAvg {
        return Err(OracleError::UnboundedPayoff(payoff));
    }
    if n_paths < 2 {
        return Err(OracleError::TooFewPaths(n_paths));
    }
    let d = model.d;
    let n_time = 1;
    let seed = derive_seed(seed, "oracle/cole_hopf", 0);
    let blocks = map_blocks(model, root, Measure::Physical, n_paths, n_time, seed, |b| {
        let vals: Vec<f64> = b.terminal().chunks_exact(d).map(|row| payoff_row(payoff, model, row)).collect();
        let shift = vals.iter().map(|v| a * v).fold(f64::NEG_INFINITY, f64::max);
        let mut m = ExpMoments { n: vals.len(), shift, sum: 0.0, sum_sq: 0.0, plain_sum: 0.0 };
        for v in &vals {
            let e = (a * v - shift).exp();
            m.sum += e;
            m.sum_sq += e * e;
            m.plain_sum += v;
        }
        m
    });
    let total = blocks.into_iter().reduce(ExpMoments::merge).expect("at least one block");
    let n = total.n as f64;
    let mean = total.sum / n;
    let var = ((total.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    let y0 = (mean.ln() + total.shift) / a;
    // d/dm (1/a) log m = 1/(a m)
    let se = (var / n).sqrt() / (a.abs() * mean);
    Ok(ColeHopfEstimate { y0: McEstimate { value: y0, std_error: se, n_paths }, plain_mean: total.plain_sum / n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkKind {
    /// Computed independently of any deep solver.
    Exact,
    /// Reported by a solver run; a regression target only.
    SolverReported,
}

/// A stored literature value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Benchmark {
    pub key: &'static str,
    pub value: f64,
    /// Stated uncertainty, zero when none was given.
    pub uncertainty: f64,
    pub kind: BenchmarkKind,
    pub source: &'static str,
}

pub const BENCHMARKS: &[Benchmark] = &[
    Benchmark {
        key: "bergman_call_d1",
        value: 8.4672,
        uncertainty: 0.0,
        kind: BenchmarkKind::Exact,
        source: "Black-Scholes with the borrowing rate",
    },
    Benchmark {
        key: "bergman_call_d30",
        value: 8.4672,
        uncertainty: 0.0,
        kind: BenchmarkKind::Exact,
        source: "identical legs; independent of correlation",
    },
    Benchmark {
        key: "call_spread_d1",
        value: 2.96,
        uncertainty: 0.01,
        kind: BenchmarkKind::Exact,
        source: "regression Monte Carlo with martingale basis functions",
    },
    Benchmark {
        key: "american_d1",
        value: 11.098,
        uncertainty: 0.0,
        kind: BenchmarkKind::Exact,
        source: "American call benchmark from the literature",
    },
    Benchmark {
        key: "american_d1/european",
        value: 10.421,
        uncertainty: 0.0,
        kind: BenchmarkKind::Exact,
        source: "European counterpart",
    },
    Benchmark {
        key: "american_d50",
        value: 9.7,
        uncertainty: 0.0,
        kind: BenchmarkKind::SolverReported,
        source: "solver-reported plateau, not exact",
    },
    Benchmark {
        key: "american_d50/european",
        value: 8.46,
        uncertainty: 0.0,
        kind: BenchmarkKind::Exact,
        source: "Monte Carlo, 500k paths",
    },
    Benchmark {
        key: "qg_d50_id",
        value: 5.01,
        uncertainty: 0.0,
        kind: BenchmarkKind::Exact,
        source: "Cole-Hopf Monte Carlo, 1e6 paths",
    },
    Benchmark {
        key: "qg_d50_corr",
        value: 6.78,
        uncertainty: 0.0,
        kind: BenchmarkKind::Exact,
        source: "Cole-Hopf Monte Carlo, 1e6 paths",
    },
    Benchmark {
        key: "qg_d50_extreme",
        value: 5.17,
        uncertainty: 0.01,
        kind: BenchmarkKind::Exact,
        source: "Cole-Hopf Monte Carlo, 1e6 paths",
    },
];

pub fn benchmark(key: &str) -> Result<&'static Benchmark, OracleError> {
    BENCHMARKS.iter().find(|b| b.key == key).ok_or_else(|| OracleError::UnknownBenchmark(key.to_string()))
}

/// Stored American-option references: `american_d1`, `american_d50` and
/// their `/european` counterparts.
pub fn american_reference(key: &str) -> Result<&'static Benchmark, OracleError> {
    if !key.starts_with("american_") {
        return Err(OracleError::UnknownBenchmark(key.to_string()));
    }
    benchmark(key)
}
