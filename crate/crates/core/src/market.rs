//! Market models, the one-parameter correlation root and correlated
//! geometric Brownian path sampling.
//!
//! Asset `i` follows
//!
//! ```text
//! dX^i = drift^i X^i dt + σ^i X^i Σ_α ρ_{i,α} dW^α
//! ```
//!
//! with `drift = μ` under the physical measure and `drift = r - y` under the
//! pricing measure. Paths are advanced with the exact log-normal step so every
//! price stays strictly positive at any grid resolution.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

/// Paths per RNG substream. Blocks are independent so sampling can be split
/// across threads without changing a single bit of the output.
pub const BLOCK_PATHS: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("correlation root is singular for d={d}, gamma={gamma}")]
    SingularCorrelation { d: usize, gamma: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("unknown payoff kind `{0}`")]
    UnknownPayoff(String),
}

/// All market and BSDE parameters for one experiment family.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub d: usize,
    /// Physical drift per asset (1/year).
    pub mu: Vec<f64>,
    /// Volatility per asset (1/sqrt(year)).
    pub sigma: Vec<f64>,
    /// Lending rate `r`.
    pub lending_rate: f64,
    /// Borrowing rate `R` (Bergman driver only).
    pub borrowing_rate: f64,
    /// Continuous dividend yield per asset.
    pub dividend_yield: Vec<f64>,
    pub x0: Vec<f64>,
    pub maturity: f64,
    /// Strike list; layout depends on the payoff kind.
    pub strikes: Vec<f64>,
    /// Per-asset payoff weights `q^i` (call portfolio only).
    pub weights: Vec<f64>,
    /// Quadratic coefficient `a` of the quadratic-growth driver.
    pub quad_coeff: f64,
    /// Correlation parameter of the structured root.
    pub gamma: f64,
}

impl ModelSpec {
    /// A model whose assets share drift, volatility and spot. Rates, dividends
    /// and strikes start at zero/empty; weights default to `1/d`.
    pub fn uniform(d: usize, mu: f64, sigma: f64, x0: f64, maturity: f64) -> Self {
        Self {
            d,
            mu: vec![mu; d],
            sigma: vec![sigma; d],
            lending_rate: 0.0,
            borrowing_rate: 0.0,
            dividend_yield: vec![0.0; d],
            x0: vec![x0; d],
            maturity,
            strikes: Vec::new(),
            weights: vec![1.0 / d.max(1) as f64; d],
            quad_coeff: 0.0,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        self.check(false)
    }

    /// Like [`validate`](Self::validate) but accepts zero volatilities, the
    /// deterministic limit used by samplers and Monte Carlo oracles.
    pub fn validate_degenerate(&self) -> Result<(), MarketError> {
        self.check(true)
    }

    fn check(&self, allow_zero_vol: bool) -> Result<(), MarketError> {
        let bad = |msg: String| Err(MarketError::InvalidModel(msg));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        for (name, len) in [
            ("mu", self.mu.len()),
            ("sigma", self.sigma.len()),
            ("dividend_yield", self.dividend_yield.len()),
            ("x0", self.x0.len()),
            ("weights", self.weights.len()),
        ] {
            if len != self.d {
                return bad(format!("{name} has length {len}, expected {}", self.d));
            }
        }
        if let Some(s) = self.sigma.iter().find(|s| !(**s > 0.0 || (allow_zero_vol && **s == 0.0))) {
            return bad(format!("sigma entries must be > 0, got {s}"));
        }
        if let Some(x) = self.x0.iter().find(|x| !(**x > 0.0)) {
            return bad(format!("x0 entries must be > 0, got {x}"));
        }
        if !(self.maturity > 0.0) {
            return bad(format!("maturity must be > 0, got {}", self.maturity));
        }
        Ok(())
    }

    /// Extra check for the lending/borrowing driver.
    pub fn validate_bergman(&self) -> Result<(), MarketError> {
        self.validate()?;
        if self.borrowing_rate < self.lending_rate {
            return Err(MarketError::InvalidModel(format!(
                "borrowing rate {} below lending rate {}",
                self.borrowing_rate, self.lending_rate
            )));
        }
        Ok(())
    }

    /// Copy of the model with the lending rate replaced.
    pub fn with_lending_rate(&self, rate: f64) -> Self {
        Self { lending_rate: rate, ..self.clone() }
    }
}

/// Closed set of terminal payoffs. Each has a matching leading-order prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PayoffKind {
    /// `Σ q^i (X^i - K^i)^+`, strikes per asset.
    CallPortfolio,
    /// `(1/d) Σ [(X^i - K1)^+ - 2 (X^i - K2)^+]`, strikes `[K1, K2]`.
    CallSpreadAvg,
    /// `((1/d) Σ X^i - K)^+`, strikes `[K]`.
    BasketCall,
    /// `(1/d) Σ [(X^i - K1)^+ - (X^i - K2)^+]`, strikes `[K1, K2]`.
    CappedSpreadAvg,
}

impl PayoffKind {
    pub const ALL: [PayoffKind; 4] = [
        PayoffKind::CallPortfolio,
        PayoffKind::CallSpreadAvg,
        PayoffKind::BasketCall,
        PayoffKind::CappedSpreadAvg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PayoffKind::CallPortfolio => "call_portfolio",
            PayoffKind::CallSpreadAvg => "call_spread_avg",
            PayoffKind::BasketCall => "basket_call",
            PayoffKind::CappedSpreadAvg => "capped_spread_avg",
        }
    }

    /// Checks that the model's strike and weight layout fits this payoff.
    pub fn validate(self, model: &ModelSpec) -> Result<(), MarketError> {
        let n = model.strikes.len();
        let ok = match self {
            PayoffKind::CallPortfolio => n == model.d && model.weights.len() == model.d,
            PayoffKind::BasketCall => n == 1,
            PayoffKind::CallSpreadAvg => n == 2,
            PayoffKind::CappedSpreadAvg => n == 2 && 0.0 < model.strikes[0] && model.strikes[0] < model.strikes[1],
        };
        if ok {
            Ok(())
        } else {
            Err(MarketError::InvalidModel(format!(
                "strikes {:?} do not fit payoff {} with d={}",
                model.strikes, self, model.d
            )))
        }
    }
}

impl fmt::Display for PayoffKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for PayoffKind {
    type Err = MarketError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PayoffKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| MarketError::UnknownPayoff(s.to_string()))
    }
}

#[inline]
fn pos(x: f64) -> f64 {
    x.max(0.0)
}

/// Payoff of a single price vector.
pub fn payoff_row(kind: PayoffKind, model: &ModelSpec, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    match kind {
        PayoffKind::CallPortfolio => x
            .iter()
            .zip(&model.strikes)
            .zip(&model.weights)
            .map(|((xi, k), q)| q * pos(xi - k))
            .sum(),
        PayoffKind::CallSpreadAvg => {
            let (k1, k2) = (model.strikes[0], model.strikes[1]);
            x.iter().map(|xi| pos(xi - k1) - 2.0 * pos(xi - k2)).sum::<f64>() / d
        }
        PayoffKind::BasketCall => pos(x.iter().sum::<f64>() / d - model.strikes[0]),
        PayoffKind::CappedSpreadAvg => {
            let (k1, k2) = (model.strikes[0], model.strikes[1]);
            x.iter().map(|xi| pos(xi - k1) - pos(xi - k2)).sum::<f64>() / d
        }
    }
}

/// Payoff per path of an `[n_paths × d]` row-major price block.
pub fn terminal_payoff(kind: PayoffKind, model: &ModelSpec, x_t: &[f64]) -> Result<Vec<f64>, MarketError> {
    kind.validate(model)?;
    if x_t.len() % model.d != 0 {
        return Err(MarketError::InvalidModel(format!(
            "price block of length {} is not a multiple of d={}",
            x_t.len(),
            model.d
        )));
    }
    Ok(x_t.chunks_exact(model.d).map(|row| payoff_row(kind, model, row)).collect())
}

/// The structured square root of the correlation matrix,
/// `ρ = ((1-γ) I + γ 11ᵀ) / sqrt(1 + (d-1)γ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRoot {
    d: usize,
    gamma: f64,
    scale: f64,
    rho: Vec<f64>,
    rho_inv: Vec<f64>,
    corr: Vec<f64>,
    pairwise_corr: f64,
}

impl CorrelationRoot {
    pub fn build(d: usize, gamma: f64) -> Result<Self, MarketError> {
        build_correlation_root(d, gamma)
    }

    pub fn identity(d: usize) -> Self {
        build_correlation_root(d, 0.0).expect("identity root is never singular")
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `ρ_{i,α}`, row-major.
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// `(ρ^{-1})_{α,i}`, row-major.
    pub fn rho_inv(&self) -> &[f64] {
        &self.rho_inv
    }

    /// `ρρᵀ`, row-major.
    pub fn correlation(&self) -> &[f64] {
        &self.corr
    }

    /// Common off-diagonal entry of `ρρᵀ` (0 when d = 1).
    pub fn pairwise_corr(&self) -> f64 {
        self.pairwise_corr
    }

    /// `out_i = Σ_α ρ_{i,α} v_α`, using the two-value structure of ρ.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let total: f64 = v.iter().sum();
        let off = self.scale * self.gamma;
        let diag = self.scale * (1.0 - self.gamma);
        if self.d == 1 {
            out[0] = v[0];
            return;
        }
        for (o, vi) in out.iter_mut().zip(v) {
            *o = diag * vi + off * total;
        }
    }
}

/// Builds ρ, its closed-form inverse and the implied pairwise correlation.
pub fn build_correlation_root(d: usize, gamma: f64) -> Result<CorrelationRoot, MarketError> {
    if d == 0 || !gamma.is_finite() {
        return Err(MarketError::SingularCorrelation { d, gamma });
    }
    if d == 1 {
        return Ok(CorrelationRoot {
            d,
            gamma,
            scale: 1.0,
            rho: vec![1.0],
            rho_inv: vec![1.0],
            corr: vec![1.0],
            pairwise_corr: 0.0,
        });
    }
    let df = d as f64;
    // Eigenvalues of (1-γ)I + γ11ᵀ are 1-γ (multiplicity d-1) and 1+(d-1)γ.
    let lam_small = 1.0 - gamma;
    let lam_big = 1.0 + (df - 1.0) * gamma;
    if lam_small.abs() < 1e-12 || lam_big.abs() < 1e-12 {
        return Err(MarketError::SingularCorrelation { d, gamma });
    }
    let norm2 = 1.0 + (df - 1.0) * gamma * gamma;
    let scale = 1.0 / norm2.sqrt();

    let mut rho = vec![scale * gamma; d * d];
    for i in 0..d {
        rho[i * d + i] = scale;
    }
    // Sherman-Morrison on (1-γ)I + γ11ᵀ, then undo the scale.
    let inv_off = -gamma / (lam_small * lam_big) / scale;
    let inv_diag = 1.0 / lam_small / scale + inv_off;
    let mut rho_inv = vec![inv_off; d * d];
    for i in 0..d {
        rho_inv[i * d + i] = inv_diag;
    }

    let pairwise_corr = (2.0 * gamma + (df - 2.0) * gamma * gamma) / norm2;
    let mut corr = vec![pairwise_corr; d * d];
    for i in 0..d {
        corr[i * d + i] = 1.0;
    }

    Ok(CorrelationRoot { d, gamma, scale, rho, rho_inv, corr, pairwise_corr })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    /// Drift `μ`.
    Physical,
    /// Drift `r - y`.
    Pricing,
}

/// Brownian increments and prices on a uniform grid.
///
/// Both arrays are stored time-major: step `t` holds an `[n_paths × d]`
/// row-major block, so a whole cross-section is one contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub n_paths: usize,
    pub d: usize,
    pub n_time: usize,
    pub dt: f64,
    pub measure: Measure,
    dw: Vec<f64>,
    x: Vec<f64>,
}

impl PathBatch {
    /// Increments over `[t h, (t+1) h)` for all paths.
    pub fn dw_step(&self, t: usize) -> &[f64] {
        let n = self.n_paths * self.d;
        &self.dw[t * n..(t + 1) * n]
    }

    /// Prices at grid point `t` (0..=n_time) for all paths.
    pub fn x_at(&self, t: usize) -> &[f64] {
        let n = self.n_paths * self.d;
        &self.x[t * n..(t + 1) * n]
    }

    pub fn terminal(&self) -> &[f64] {
        self.x_at(self.n_time)
    }

    pub fn dw(&self, path: usize, asset: usize, t: usize) -> f64 {
        self.dw_step(t)[path * self.d + asset]
    }

    pub fn x(&self, path: usize, asset: usize, t: usize) -> f64 {
        self.x_at(t)[path * self.d + asset]
    }

    fn concat(mut blocks: Vec<PathBatch>) -> PathBatch {
        if blocks.len() == 1 {
            return blocks.pop().unwrap();
        }
        let first = &blocks[0];
        let (d, n_time, dt, measure) = (first.d, first.n_time, first.dt, first.measure);
        let n_paths: usize = blocks.iter().map(|b| b.n_paths).sum();
        let mut dw = Vec::with_capacity(n_paths * d * n_time);
        let mut x = Vec::with_capacity(n_paths * d * (n_time + 1));
        for t in 0..n_time {
            for b in &blocks {
                dw.extend_from_slice(b.dw_step(t));
            }
        }
        for t in 0..=n_time {
            for b in &blocks {
                x.extend_from_slice(b.x_at(t));
            }
        }
        PathBatch { n_paths, d, n_time, dt, measure, dw, x }
    }
}

/// Mixes a run seed with a purpose label and an index so that training,
/// validation, initialisation and oracle streams never share state.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label, then splitmix64 finalisation.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_block(
    model: &ModelSpec,
    root: &CorrelationRoot,
    measure: Measure,
    n_paths: usize,
    n_time: usize,
    seed: u64,
    block: u64,
) -> PathBatch {
    let d = model.d;
    let h = model.maturity / n_time as f64;
    let sqrt_h = h.sqrt();
    let log_drift: Vec<f64> = (0..d)
        .map(|i| {
            let drift = match measure {
                Measure::Physical => model.mu[i],
                Measure::Pricing => model.lending_rate - model.dividend_yield[i],
            };
            (drift - 0.5 * model.sigma[i] * model.sigma[i]) * h
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);

    let n = n_paths * d;
    let mut dw = vec![0.0; n * n_time];
    let mut x = vec![0.0; n * (n_time + 1)];
    for p in 0..n_paths {
        x[p * d..(p + 1) * d].copy_from_slice(&model.x0);
    }
    let mut mixed = vec![0.0; d];
    for p in 0..n_paths {
        for t in 0..n_time {
            let inc = &mut dw[t * n + p * d..t * n + (p + 1) * d];
            for v in inc.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * sqrt_h;
            }
            root.apply(inc, &mut mixed);
            for i in 0..d {
                let prev = x[t * n + p * d + i];
                x[(t + 1) * n + p * d + i] = prev * (log_drift[i] + model.sigma[i] * mixed[i]).exp();
            }
        }
    }
    PathBatch { n_paths, d, n_time, dt: h, measure, dw, x }
}

fn block_sizes(n_paths: usize) -> Vec<usize> {
    let full = n_paths / BLOCK_PATHS;
    let rem = n_paths % BLOCK_PATHS;
    let mut sizes = vec![BLOCK_PATHS; full];
    if rem > 0 {
        sizes.push(rem);
    }
    sizes
}

/// Samples `n_paths` correlated paths with `n_time` exact log-normal steps.
///
/// The output depends only on the arguments; equal seeds give bit-identical
/// batches regardless of how many threads rayon uses.
pub fn sample_paths(
    model: &ModelSpec,
    root: &CorrelationRoot,
    measure: Measure,
    n_paths: usize,
    n_time: usize,
    seed: u64,
) -> PathBatch {
    assert!(n_paths >= 1, "n_paths must be positive");
    assert!(n_time >= 1, "n_time must be positive");
    assert_eq!(model.d, root.d(), "model and correlation root disagree on d");
    let blocks = map_blocks(model, root, measure, n_paths, n_time, seed, |b| b.clone());
    PathBatch::concat(blocks)
}

/// Samples the same paths as [`sample_paths`] block by block and maps each
/// block through `f`, returning the results in block order. Memory stays
/// bounded by one block per worker.
pub fn map_blocks<R, F>(
    model: &ModelSpec,
    root: &CorrelationRoot,
    measure: Measure,
    n_paths: usize,
    n_time: usize,
    seed: u64,
    f: F,
) -> Vec<R>
where
    R: Send,
    F: Fn(&PathBatch) -> R + Sync,
{
    assert!(n_time >= 1, "n_time must be positive");
    block_sizes(n_paths)
        .into_par_iter()
        .enumerate()
        .map(|(b, size)| f(&sample_block(model, root, measure, size, n_time, seed, b as u64)))
        .collect()
}
