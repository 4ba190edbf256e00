//! Deep BSDE forward rollout, its exact gradient and the training loop.
//!
//! The BSDE is written in forward form on a uniform grid with step `h`:
//!
//! ```text
//! Ŷ_{k+1} = Ŷ_k + f(Ŷ_k, Z_k) h + Z_k · ΔW_k
//! ```
//!
//! `Ŷ_0` is a trainable scalar, `Z_0` a trainable vector and `Z_k` for
//! `k ≥ 1` is produced by a per-step subnet evaluated on the prices `X_k`
//! (scaled by `1/d`). With the asymptotic-expansion prior switched on the
//! subnet only models the residual: `Z_k = Z^AE(t_k, X_k) + Z^Res_k`.
//!
//! The reflected variant learns increments of the reflecting process through
//! an extra head on each subnet and applies them only on paths sitting at or
//! below the barrier. The penalized variant replaces those increments with
//! `(1/ε) (Φ(X_k) - Ŷ_k)^+ h`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ae_prior::{z_ae, PriorError};
use crate::market::{
    derive_seed, payoff_row, sample_paths, CorrelationRoot, MarketError, Measure, ModelSpec, PathBatch, PayoffKind,
};
use crate::neuralnet::{init_subnet, Mode, NetConfig, NetError, OptimizerState, SubnetCache, SubnetParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("rollout diverged at time step {time_step}: {reason}")]
    Diverged { time_step: usize, reason: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Setup(SolverError),
    #[error("training failed at step {step}: {source}")]
    Failed {
        step: usize,
        #[source]
        source: SolverError,
        /// Records gathered before the failure.
        history: TrainHistory,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Plain,
    Reflected,
    Penalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverKind {
    /// Lending rate `r`, borrowing rate `R`.
    Bergman,
    /// Linear driver with dividend-adjusted market price of risk.
    ReflectedLinear,
    /// `(a/2)|Z|²` on the backward side.
    QuadraticGrowth,
}

/// Direction in which reflecting increments move `Ŷ` going forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReflectionSign {
    /// `Ŷ ← Ŷ - ΔL`, as the backward equation `... + L_T - L_t` implies.
    Subtract,
    /// `Ŷ ← Ŷ + ΔL`.
    Add,
}

impl ReflectionSign {
    fn factor(self) -> f64 {
        match self {
            ReflectionSign::Subtract => 1.0,
            ReflectionSign::Add => -1.0,
        }
    }
}

macro_rules! string_enum {
    ($ty:ty { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $name),* }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.pad(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = SolverError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok(Self::$variant),)*
                    _ => Err(SolverError::Config(format!("unknown {} `{s}`", stringify!($ty)))),
                }
            }
        }
    };
}

string_enum!(Variant { Plain => "plain", Reflected => "reflected", Penalized => "penalized" });
string_enum!(DriverKind { Bergman => "bergman", ReflectedLinear => "reflected_linear", QuadraticGrowth => "qg" });
string_enum!(ReflectionSign { Subtract => "subtract", Add => "add" });

/// Everything the rollout and the training loop need besides the model.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub variant: Variant,
    pub driver: DriverKind,
    pub n_time: usize,
    pub batch_size: usize,
    pub valid_size: usize,
    pub use_ae: bool,
    /// Interval for the uniform draw of the initial `Ŷ_0`.
    pub yini: [f64; 2],
    /// Weight `w` of the lateral (barrier) penalty.
    pub lateral_weight: f64,
    /// `ε` of the penalized variant.
    pub penalty_epsilon: f64,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub display_stride: usize,
    pub seed: u64,
    pub reflection_sign: ReflectionSign,
    /// Evaluate the lateral penalty after the reflecting increment instead of
    /// before it.
    pub lateral_after_reflection: bool,
    pub net: NetConfig,
    /// Abort once any `|Ŷ|` exceeds this.
    pub divergence_bound: f64,
}

impl RolloutConfig {
    /// Defaults: batch 64, validation 1024, lr 1e-3, stride 200, `w = 2/T`.
    pub fn new(variant: Variant, driver: DriverKind, n_time: usize, maturity: f64) -> Self {
        Self {
            variant,
            driver,
            n_time,
            batch_size: 64,
            valid_size: 1024,
            use_ae: true,
            yini: [0.0, 1.0],
            lateral_weight: 2.0 / maturity,
            penalty_epsilon: 0.2,
            learning_rate: 1e-3,
            max_steps: 5000,
            display_stride: 200,
            seed: 1,
            reflection_sign: ReflectionSign::Subtract,
            lateral_after_reflection: false,
            net: NetConfig::default(),
            divergence_bound: 1e8,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::Config(m));
        if self.n_time < 1 {
            return bad("n_time must be at least 1".into());
        }
        if self.batch_size < 2 || self.valid_size < 2 {
            return bad(format!(
                "batch_size ({}) and valid_size ({}) must be at least 2",
                self.batch_size, self.valid_size
            ));
        }
        if !(self.yini[0] <= self.yini[1]) {
            return bad(format!("Yini interval {:?} is reversed", self.yini));
        }
        if self.variant == Variant::Reflected && !(self.lateral_weight > 0.0) {
            return bad(format!("lateral weight must be positive, got {}", self.lateral_weight));
        }
        if self.variant == Variant::Penalized && !(self.penalty_epsilon > 0.0) {
            return bad(format!("penalty epsilon must be positive, got {}", self.penalty_epsilon));
        }
        if !(self.learning_rate > 0.0) || self.display_stride == 0 {
            return bad("learning rate must be positive and display stride nonzero".into());
        }
        Ok(())
    }
}

/// Model, correlation structure, terminal payoff and the rate at which the
/// leading-order prior is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeProblem {
    pub model: ModelSpec,
    pub root: CorrelationRoot,
    pub payoff: PayoffKind,
    pub prior_rate: f64,
}

impl BsdeProblem {
    pub fn new(model: ModelSpec, payoff: PayoffKind, prior_rate: f64) -> Result<Self, SolverError> {
        model.validate()?;
        payoff.validate(&model)?;
        let root = CorrelationRoot::build(model.d, model.gamma)?;
        Ok(Self { model, root, payoff, prior_rate })
    }

    pub fn d(&self) -> usize {
        self.model.d
    }
}

/// Driver in forward convention: `Ŷ ← Ŷ + f(Ŷ, Z) h + Z·ΔW`.
#[derive(Debug, Clone, PartialEq)]
pub struct Driver {
    kind: DriverKind,
    rate: f64,
    spread: f64,
    quad_coeff: f64,
    /// `Σ_i (ρ^{-1})_{α,i} λ^i / σ^i` with `λ` the market price of risk numerator.
    risk_coeff: Vec<f64>,
    /// `Σ_i (ρ^{-1})_{α,i} / σ^i`; dotted with Z gives total risky cash.
    position_coeff: Vec<f64>,
}

impl Driver {
    pub fn new(kind: DriverKind, model: &ModelSpec, root: &CorrelationRoot) -> Self {
        let d = model.d;
        let inv = root.rho_inv();
        let r = model.lending_rate;
        let excess: Vec<f64> = (0..d)
            .map(|i| match kind {
                DriverKind::Bergman => model.mu[i] - r,
                DriverKind::ReflectedLinear => model.mu[i] + model.dividend_yield[i] - r,
                DriverKind::QuadraticGrowth => 0.0,
            })
            .collect();
        let risk_coeff = (0..d).map(|a| (0..d).map(|i| inv[a * d + i] * excess[i] / model.sigma[i]).sum()).collect();
        let position_coeff = (0..d).map(|a| (0..d).map(|i| inv[a * d + i] / model.sigma[i]).sum()).collect();
        Self {
            kind,
            rate: r,
            spread: model.borrowing_rate - r,
            quad_coeff: model.quad_coeff,
            risk_coeff,
            position_coeff,
        }
    }

    pub fn kind(&self) -> DriverKind {
        self.kind
    }

    /// Value of `f`. When `dz` is given it receives `∂f/∂Z`; the second
    /// return value is `∂f/∂Y`.
    pub fn eval(&self, y: f64, z: &[f64], dz: Option<&mut [f64]>) -> (f64, f64) {
        match self.kind {
            DriverKind::QuadraticGrowth => {
                let a = self.quad_coeff;
                if let Some(dz) = dz {
                    dz.iter_mut().zip(z).for_each(|(g, zi)| *g = -a * zi);
                }
                (-qg_generator(a, z), 0.0)
            }
            DriverKind::ReflectedLinear => {
                let lin: f64 = z.iter().zip(&self.risk_coeff).map(|(a, b)| a * b).sum();
                if let Some(dz) = dz {
                    dz.copy_from_slice(&self.risk_coeff);
                }
                (self.rate * y + lin, self.rate)
            }
            DriverKind::Bergman => {
                let lin: f64 = z.iter().zip(&self.risk_coeff).map(|(a, b)| a * b).sum();
                let cash: f64 = z.iter().zip(&self.position_coeff).map(|(a, b)| a * b).sum();
                let borrowing = cash > y;
                let f = self.rate * y + lin - if borrowing { (cash - y) * self.spread } else { 0.0 };
                if let Some(dz) = dz {
                    for (a, g) in dz.iter_mut().enumerate() {
                        *g = self.risk_coeff[a] - if borrowing { self.spread * self.position_coeff[a] } else { 0.0 };
                    }
                }
                (f, self.rate + if borrowing { self.spread } else { 0.0 })
            }
        }
    }
}

fn eval_batch(kind: DriverKind, model: &ModelSpec, root: &CorrelationRoot, y: &[f64], z: &[f64]) -> Vec<f64> {
    let drv = Driver::new(kind, model, root);
    y.iter().zip(z.chunks_exact(model.d)).map(|(yi, zi)| drv.eval(*yi, zi, None).0).collect()
}

/// `rY + Σ Z^α (ρ^{-1})_{α,i}(μ^i - r)/σ^i - (Σ Z^α (ρ^{-1})_{α,i}/σ^i - Y)^+ (R - r)`.
pub fn bergman_driver(model: &ModelSpec, root: &CorrelationRoot, y: &[f64], z: &[f64]) -> Vec<f64> {
    eval_batch(DriverKind::Bergman, model, root, y, z)
}

/// `rY + Σ Z^α (ρ^{-1})_{α,i}(μ^i + y^i - r)/σ^i`.
pub fn reflected_driver(model: &ModelSpec, root: &CorrelationRoot, y: &[f64], z: &[f64]) -> Vec<f64> {
    eval_batch(DriverKind::ReflectedLinear, model, root, y, z)
}

/// `(a/2)|Z|²` for one control vector. It enters the forward update with a
/// minus sign.
pub fn qg_generator(a: f64, z: &[f64]) -> f64 {
    0.5 * a * z.iter().map(|v| v * v).sum::<f64>()
}

/// Quadratic generator per row of an `[n × d]` control block.
pub fn qg_driver(a: f64, z: &[f64], d: usize) -> Vec<f64> {
    z.chunks_exact(d).map(|row| qg_generator(a, row)).collect()
}

/// Cash held in each risky asset: `π^i = Σ_α Z^α (ρ^{-1})_{α,i} / σ^i`.
pub fn compute_hedge_positions(model: &ModelSpec, root: &CorrelationRoot, z: &[f64]) -> Vec<f64> {
    let d = model.d;
    let inv = root.rho_inv();
    let mut out = vec![0.0; z.len()];
    for (zr, pr) in z.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        for i in 0..d {
            pr[i] = (0..d).map(|a| zr[a] * inv[a * d + i]).sum::<f64>() / model.sigma[i];
        }
    }
    out
}

/// Inverse of [`compute_hedge_positions`]: `Z^α = Σ_i π^i σ^i ρ_{i,α}`.
pub fn control_from_positions(model: &ModelSpec, root: &CorrelationRoot, positions: &[f64]) -> Vec<f64> {
    let d = model.d;
    let rho = root.rho();
    let mut out = vec![0.0; positions.len()];
    for (pr, zr) in positions.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        for a in 0..d {
            zr[a] = (0..d).map(|i| pr[i] * model.sigma[i] * rho[i * d + a]).sum();
        }
    }
    out
}

/// Trainable scalars outside the subnets.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalVariables {
    pub y0: f64,
    pub z0: Vec<f64>,
}

/// All trainable state: globals plus one subnet per interior time step.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverParams {
    pub globals: GlobalVariables,
    /// `subnets[k - 1]` produces the control at step `k`.
    pub subnets: Vec<SubnetParams>,
}

impl SolverParams {
    /// `Ŷ_0 ~ U(Yini)`, `Z_0 ~ U(-0.1, 0.1)^d`, independent subnet draws.
    pub fn init(problem: &BsdeProblem, config: &RolloutConfig) -> Self {
        let d = problem.d();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init", 0));
        let [lo, hi] = config.yini;
        let y0 = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let z0 = (0..d).map(|_| rng.random_range(-0.1..0.1)).collect();
        let head = config.variant == Variant::Reflected;
        let subnets = (1..config.n_time)
            .map(|k| init_subnet(d, head, &config.net, derive_seed(config.seed, "subnet", k as u64)))
            .collect();
        Self { globals: GlobalVariables { y0, z0 }, subnets }
    }

    pub fn param_count(&self) -> usize {
        1 + self.globals.z0.len() + self.subnets.iter().map(|s| s.param_count()).sum::<usize>()
    }

    /// Trainable values in optimizer order: `Ŷ_0`, `Z_0`, then each subnet.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.push(self.globals.y0);
        out.extend_from_slice(&self.globals.z0);
        for s in &self.subnets {
            out.extend_from_slice(&s.weights);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten). Moving statistics are untouched.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<(), SolverError> {
        if flat.len() != self.param_count() {
            return Err(SolverError::Config(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        self.globals.y0 = flat[0];
        let d = self.globals.z0.len();
        self.globals.z0.copy_from_slice(&flat[1..1 + d]);
        let mut at = 1 + d;
        for s in &mut self.subnets {
            let n = s.weights.len();
            s.weights.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// Gradients laid out like [`SolverParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub y0: f64,
    pub z0: Vec<f64>,
    pub subnets: Vec<Vec<f64>>,
}

impl Gradients {
    /// Flattened in the same order the optimizer sees the parameters.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = vec![self.y0];
        out.extend_from_slice(&self.z0);
        for s in &self.subnets {
            out.extend_from_slice(s);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub max_abs_y: f64,
    /// Cumulative reflecting process at maturity, per path.
    pub l_cum: Vec<f64>,
    /// Mean of `w Σ_k ((Φ_k - Ŷ_k)^+)² h`.
    pub lateral_penalty: f64,
    /// Fraction of (path, step) pairs at or below the barrier.
    pub barrier_touch_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutput {
    pub loss: f64,
    pub terminal_loss: f64,
    pub yhat_terminal: Vec<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug)]
struct StepTape {
    y_pre: Vec<f64>,
    control: Vec<f64>,
    df_dz: Vec<f64>,
    df_dy: Vec<f64>,
    barrier: Vec<f64>,
    head_raw: Option<Vec<f64>>,
    l_path: Vec<f64>,
}

/// Intermediate values of a recorded rollout, consumed by [`backward`].
#[derive(Debug)]
pub struct Tape {
    steps: Vec<StepTape>,
    caches: Vec<SubnetCache>,
    terminal_gap: Vec<f64>,
    batch: usize,
}

impl Tape {
    /// Total control `Z_k` used at step `k`, `[batch × d]`.
    pub fn control(&self, k: usize) -> &[f64] {
        &self.steps[k].control
    }

    /// Running value `Ŷ_k` before the update of step `k`.
    pub fn y_before(&self, k: usize) -> &[f64] {
        &self.steps[k].y_pre
    }

    /// Cumulative reflecting process after step `k`, per path.
    pub fn l_cumulative(&self, k: usize) -> &[f64] {
        &self.steps[k].l_path
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }
}

fn check_batch(config: &RolloutConfig, problem: &BsdeProblem, params: &SolverParams, batch: &PathBatch) -> Result<(), SolverError> {
    if batch.n_time != config.n_time || batch.d != problem.d() {
        return Err(SolverError::Config(format!(
            "path batch has n_time={}, d={}; expected n_time={}, d={}",
            batch.n_time,
            batch.d,
            config.n_time,
            problem.d()
        )));
    }
    if params.subnets.len() + 1 != config.n_time || params.globals.z0.len() != problem.d() {
        return Err(SolverError::Config(format!(
            "parameter set has {} subnets for n_time={}",
            params.subnets.len(),
            config.n_time
        )));
    }
    Ok(())
}

fn run(
    config: &RolloutConfig,
    problem: &BsdeProblem,
    params: &mut SolverParams,
    batch: &PathBatch,
    mode: Mode,
    record: bool,
) -> Result<(RolloutOutput, Option<Tape>), SolverError> {
    check_batch(config, problem, params, batch)?;
    let d = problem.d();
    let n = batch.n_paths;
    let n_time = config.n_time;
    let h = batch.dt;
    let inv_d = 1.0 / d as f64;
    let model = &problem.model;
    let net_cfg = config.net;
    let reflected = config.variant == Variant::Reflected;
    let penalized = config.variant == Variant::Penalized;
    let sign = config.reflection_sign.factor();

    // Subnets depend only on prices, so every step is evaluated up front.
    let evaluated: Vec<_> = params
        .subnets
        .par_iter_mut()
        .enumerate()
        .map(|(j, net)| net.forward(batch.x_at(j + 1), n, mode, &net_cfg))
        .collect::<Result<_, _>>()?;
    let (outputs, caches): (Vec<_>, Vec<_>) = evaluated.into_iter().unzip();

    let priors: Vec<Option<Vec<f64>>> = (0..n_time)
        .into_par_iter()
        .map(|k| {
            config
                .use_ae
                .then(|| z_ae(problem.payoff, model, &problem.root, problem.prior_rate, k as f64 * h, batch.x_at(k)))
                .transpose()
        })
        .collect::<Result<_, _>>()?;

    let driver = Driver::new(config.driver, model, &problem.root);
    let w = config.lateral_weight;
    let mut y = vec![params.globals.y0; n];
    let mut l_cum = vec![0.0; n];
    let mut lateral = vec![0.0; n];
    let mut touches = 0usize;
    let mut max_abs_y = params.globals.y0.abs();
    let mut steps = Vec::with_capacity(if record { n_time } else { 0 });

    for k in 0..n_time {
        let mut control = vec![0.0; n * d];
        if k == 0 {
            for row in control.chunks_exact_mut(d) {
                row.copy_from_slice(&params.globals.z0);
            }
        } else {
            for (c, o) in control.iter_mut().zip(&outputs[k - 1].z) {
                *c = o * inv_d;
            }
        }
        if let Some(prior) = &priors[k] {
            control.iter_mut().zip(prior).for_each(|(c, p)| *c += p);
        }
        let barrier: Vec<f64> = if reflected || penalized {
            batch.x_at(k).chunks_exact(d).map(|row| payoff_row(problem.payoff, model, row)).collect()
        } else {
            Vec::new()
        };
        let head = if reflected && k > 0 { outputs[k - 1].head.as_deref() } else { None };
        let dw = batch.dw_step(k);
        let mut df_dz = vec![0.0; if record { n * d } else { d }];
        let mut df_dy = vec![0.0; n];
        let y_pre = y.clone();

        for p in 0..n {
            let zr = &control[p * d..(p + 1) * d];
            let dz_slot = if record { &mut df_dz[p * d..(p + 1) * d] } else { &mut df_dz[..] };
            let (f, fy) = driver.eval(y[p], zr, Some(dz_slot));
            df_dy[p] = fy;
            let noise: f64 = zr.iter().zip(&dw[p * d..(p + 1) * d]).map(|(a, b)| a * b).sum();
            let mut next = y[p] + f * h + noise;
            if reflected {
                let gate = y[p] <= barrier[p];
                let dl = match head {
                    Some(raw) if gate => raw[p].max(0.0) * h,
                    _ => 0.0,
                };
                let y_lat = if config.lateral_after_reflection { y[p] - sign * dl } else { y[p] };
                let viol = (barrier[p] - y_lat).max(0.0);
                lateral[p] += w * viol * viol * h;
                touches += gate as usize;
                l_cum[p] += dl;
                next -= sign * dl;
            } else if penalized {
                let push = (barrier[p] - y[p]).max(0.0) / config.penalty_epsilon * h;
                touches += (y[p] <= barrier[p]) as usize;
                l_cum[p] += push;
                next -= sign * push;
            }
            if !next.is_finite() || next.abs() > config.divergence_bound {
                return Err(SolverError::Diverged {
                    time_step: k,
                    reason: format!("|Y| reached {next:e} on path {p}"),
                });
            }
            max_abs_y = max_abs_y.max(next.abs());
            y[p] = next;
        }
        if record {
            steps.push(StepTape {
                y_pre,
                control,
                df_dz,
                df_dy,
                barrier,
                head_raw: head.map(|r| r.to_vec()),
                l_path: l_cum.clone(),
            });
        }
    }

    let terminal: Vec<f64> = batch.terminal().chunks_exact(d).map(|row| payoff_row(problem.payoff, model, row)).collect();
    let terminal_gap: Vec<f64> = y.iter().zip(&terminal).map(|(yv, phi)| yv - phi).collect();
    let terminal_loss = terminal_gap.iter().map(|g| g * g).sum::<f64>() / n as f64;
    let lateral_penalty = if reflected { lateral.iter().sum::<f64>() / n as f64 } else { 0.0 };
    let loss = terminal_loss + lateral_penalty;
    if !loss.is_finite() {
        return Err(SolverError::Diverged { time_step: n_time, reason: format!("loss is {loss}") });
    }

    let out = RolloutOutput {
        loss,
        terminal_loss,
        yhat_terminal: y,
        diagnostics: Diagnostics {
            max_abs_y,
            l_cum,
            lateral_penalty,
            barrier_touch_fraction: touches as f64 / (n * n_time) as f64,
        },
    };
    let tape = record.then(|| Tape { steps, caches, terminal_gap, batch: n });
    Ok((out, tape))
}

/// Forward rollout. Train mode uses batch statistics in every subnet and
/// updates their moving averages; the returned tape feeds [`backward`].
pub fn rollout(
    config: &RolloutConfig,
    problem: &BsdeProblem,
    params: &mut SolverParams,
    batch: &PathBatch,
    mode: Mode,
) -> Result<(RolloutOutput, Tape), SolverError> {
    let (out, tape) = run(config, problem, params, batch, mode, true)?;
    Ok((out, tape.expect("recorded rollout")))
}

/// Loss of the current parameters on `batch` without recording anything or
/// touching the moving statistics.
pub fn evaluate(
    config: &RolloutConfig,
    problem: &BsdeProblem,
    params: &SolverParams,
    batch: &PathBatch,
) -> Result<RolloutOutput, SolverError> {
    let mut scratch = params.clone();
    run(config, problem, &mut scratch, batch, Mode::Infer, false).map(|(out, _)| out)
}

/// Exact gradient of the rollout loss recorded in `tape`.
pub fn backward(
    config: &RolloutConfig,
    problem: &BsdeProblem,
    params: &SolverParams,
    batch: &PathBatch,
    tape: &Tape,
) -> Result<Gradients, SolverError> {
    let d = problem.d();
    let n = tape.batch;
    let nf = n as f64;
    let h = batch.dt;
    let inv_d = 1.0 / d as f64;
    let reflected = config.variant == Variant::Reflected;
    let penalized = config.variant == Variant::Penalized;
    let sign = config.reflection_sign.factor();
    let w = config.lateral_weight;

    // adjoint of Ŷ_k per path
    let mut adj: Vec<f64> = tape.terminal_gap.iter().map(|g| 2.0 * g / nf).collect();
    let mut z0 = vec![0.0; d];
    let mut dz_nets: Vec<Vec<f64>> = vec![Vec::new(); tape.steps.len().saturating_sub(1)];
    let mut dhead_nets: Vec<Option<Vec<f64>>> = vec![None; tape.steps.len().saturating_sub(1)];

    for (k, st) in tape.steps.iter().enumerate().rev() {
        let dw = batch.dw_step(k);
        let mut gz = vec![0.0; n * d];
        let mut ghead = st.head_raw.as_ref().map(|_| vec![0.0; n]);
        for p in 0..n {
            let a = adj[p];
            for j in 0..d {
                gz[p * d + j] = a * (st.df_dz[p * d + j] * h + dw[p * d + j]);
            }
            let y = st.y_pre[p];
            let mut a_prev = a * (1.0 + st.df_dy[p] * h);
            if reflected {
                let gate = y <= st.barrier[p];
                let raw = st.head_raw.as_ref().map(|r| r[p]);
                let dl = match raw {
                    Some(r) if gate => r.max(0.0) * h,
                    _ => 0.0,
                };
                // Ŷ_{k+1} = ... - sign·ΔL
                let mut g_dl = -sign * a;
                if config.lateral_after_reflection {
                    let viol = (st.barrier[p] - (y - sign * dl)).max(0.0);
                    a_prev -= 2.0 * w * viol * h / nf;
                    g_dl += 2.0 * w * viol * h * sign / nf;
                } else {
                    let viol = (st.barrier[p] - y).max(0.0);
                    a_prev -= 2.0 * w * viol * h / nf;
                }
                if let (Some(gh), Some(r)) = (ghead.as_mut(), raw) {
                    if gate && r > 0.0 {
                        gh[p] = g_dl * h;
                    }
                }
            } else if penalized && st.barrier[p] > y {
                a_prev += a * sign * h / config.penalty_epsilon;
            }
            adj[p] = a_prev;
        }
        if k == 0 {
            for row in gz.chunks_exact(d) {
                z0.iter_mut().zip(row).for_each(|(g, v)| *g += v);
            }
        } else {
            gz.iter_mut().for_each(|v| *v *= inv_d);
            dz_nets[k - 1] = gz;
            dhead_nets[k - 1] = ghead;
        }
    }

    let subnets = params
        .subnets
        .par_iter()
        .zip(tape.caches.par_iter())
        .zip(dz_nets.par_iter().zip(dhead_nets.par_iter()))
        .map(|((net, cache), (dz, dhead))| net.backward(cache, dz, dhead.as_deref()).map(|g| g.params))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(Gradients { y0: adj.iter().sum(), z0, subnets })
}

/// Train-mode rollout followed by [`backward`].
pub fn loss_and_gradient(
    config: &RolloutConfig,
    problem: &BsdeProblem,
    params: &mut SolverParams,
    batch: &PathBatch,
) -> Result<(RolloutOutput, Gradients), SolverError> {
    let (out, tape) = rollout(config, problem, params, batch, Mode::Train)?;
    let grads = backward(config, problem, params, batch, &tape)?;
    Ok((out, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub y0: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub params: SolverParams,
    pub optimizer: OptimizerState,
}

/// Trains with [`train_with`] and no progress callback.
pub fn train(config: &RolloutConfig, problem: &BsdeProblem) -> Result<TrainOutcome, TrainError> {
    train_with(config, problem, |_| {})
}

/// Runs `max_steps` Adam iterations on fresh physical-measure batches and
/// records validation loss and `Ŷ_0` every `display_stride` steps (plus the
/// initial state and the final step). Deterministic given the seed.
pub fn train_with(
    config: &RolloutConfig,
    problem: &BsdeProblem,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate().map_err(TrainError::Setup)?;
    if config.driver == DriverKind::Bergman {
        problem.model.validate_bergman().map_err(|e| TrainError::Setup(e.into()))?;
    }
    let start = Instant::now();
    let model = &problem.model;
    let root = &problem.root;
    let mut params = SolverParams::init(problem, config);
    let mut opt = OptimizerState::new(params.param_count(), config.learning_rate);
    let valid = sample_paths(
        model,
        root,
        Measure::Physical,
        config.valid_size,
        config.n_time,
        derive_seed(config.seed, "validation", 0),
    );
    let mut history = TrainHistory::default();

    let mut snapshot = |step: usize, params: &SolverParams, history: &mut TrainHistory| -> Result<(), TrainError> {
        let out = evaluate(config, problem, params, &valid).map_err(|source| TrainError::Failed {
            step,
            source,
            history: history.clone(),
        })?;
        let rec = TrainRecord { step, loss: out.loss, y0: params.globals.y0, elapsed_s: start.elapsed().as_secs_f64() };
        on_record(&rec);
        history.records.push(rec);
        Ok(())
    };

    snapshot(0, &params, &mut history)?;
    for step in 1..=config.max_steps {
        let batch = sample_paths(
            model,
            root,
            Measure::Physical,
            config.batch_size,
            config.n_time,
            derive_seed(config.seed, "train", step as u64),
        );
        let fail = |source: SolverError, history: &TrainHistory| TrainError::Failed { step, source, history: history.clone() };
        let (_, grads) = loss_and_gradient(config, problem, &mut params, &batch).map_err(|e| fail(e, &history))?;

        let SolverParams { globals, subnets } = &mut params;
        let mut groups: Vec<&mut [f64]> = Vec::with_capacity(2 + subnets.len());
        groups.push(std::slice::from_mut(&mut globals.y0));
        groups.push(&mut globals.z0);
        groups.extend(subnets.iter_mut().map(|s| s.weights.as_mut_slice()));
        let mut grad_groups: Vec<&[f64]> = Vec::with_capacity(groups.len());
        grad_groups.push(std::slice::from_ref(&grads.y0));
        grad_groups.push(&grads.z0);
        grad_groups.extend(grads.subnets.iter().map(|g| g.as_slice()));
        opt.step_segments(&mut groups, &grad_groups).map_err(|e| fail(e.into(), &history))?;

        if step % config.display_stride == 0 || step == config.max_steps {
            snapshot(step, &params, &mut history)?;
        }
    }
    Ok(TrainOutcome { history, params, optimizer: opt })
}
