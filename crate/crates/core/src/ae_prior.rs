//! Leading-order asymptotic-expansion priors.
//!
//! Linearising the driver leaves a Black-Scholes price process, so the
//! leading-order control is the Black-Scholes delta multiplied by `σ^i X^i`
//! and rotated through ρ. The basket call has no closed form and uses the
//! first-order small-diffusion (Gaussian) approximation instead.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use libm::erfc;
use thiserror::Error;

use crate::market::{CorrelationRoot, ModelSpec, PayoffKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("prior requested at t={t}, which is not before maturity {maturity}")]
    AtMaturity { t: f64, maturity: f64 },
    #[error("payoff {0} has no prior of this family")]
    WrongFamily(PayoffKind),
}

/// Standard normal CDF via the complementary error function; accurate to
/// roughly machine precision in both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn d_plus(x: f64, strike: f64, rate: f64, div: f64, sigma: f64, tau: f64) -> f64 {
    let vol = sigma * tau.sqrt();
    let forward = x * ((rate - div) * tau).exp();
    ((forward / strike).ln() + 0.5 * vol * vol) / vol
}

/// Black-Scholes call with continuous dividend yield. Returns intrinsic value
/// at `tau = 0`.
pub fn bs_call(x: f64, strike: f64, rate: f64, div: f64, sigma: f64, tau: f64) -> f64 {
    if tau <= 0.0 {
        return (x - strike).max(0.0);
    }
    let carry = (-div * tau).exp();
    if strike <= 0.0 {
        return x * carry;
    }
    let dp = d_plus(x, strike, rate, div, sigma, tau);
    let dm = dp - sigma * tau.sqrt();
    x * carry * norm_cdf(dp) - strike * (-rate * tau).exp() * norm_cdf(dm)
}

/// `e^{-div·tau} N(d_+)`.
pub fn bs_call_delta(x: f64, strike: f64, rate: f64, div: f64, sigma: f64, tau: f64) -> f64 {
    let carry = (-div * tau).exp();
    if strike <= 0.0 {
        return carry;
    }
    carry * norm_cdf(d_plus(x, strike, rate, div, sigma, tau))
}

fn time_to_maturity(model: &ModelSpec, t: f64) -> Result<f64, PriorError> {
    let tau = model.maturity - t;
    if tau > 0.0 {
        Ok(tau)
    } else {
        Err(PriorError::AtMaturity { t, maturity: model.maturity })
    }
}

/// Delta of the payoff leg on asset `i`, including payoff weights.
fn call_family_delta(kind: PayoffKind, model: &ModelSpec, rate: f64, i: usize, x: f64, tau: f64) -> f64 {
    let (y, s) = (model.dividend_yield[i], model.sigma[i]);
    let inv_d = 1.0 / model.d as f64;
    match kind {
        PayoffKind::CallPortfolio => model.weights[i] * bs_call_delta(x, model.strikes[i], rate, y, s, tau),
        PayoffKind::CallSpreadAvg => {
            let (k1, k2) = (model.strikes[0], model.strikes[1]);
            inv_d * (bs_call_delta(x, k1, rate, y, s, tau) - 2.0 * bs_call_delta(x, k2, rate, y, s, tau))
        }
        PayoffKind::CappedSpreadAvg => {
            let (k1, k2) = (model.strikes[0], model.strikes[1]);
            inv_d * (bs_call_delta(x, k1, rate, y, s, tau) - bs_call_delta(x, k2, rate, y, s, tau))
        }
        PayoffKind::BasketCall => unreachable!("basket call handled by z_ae_basket"),
    }
}

/// Rotates per-asset exposures `e_i = δ_i σ^i X^i` into Brownian coordinates:
/// `Z^α = Σ_i e_i ρ_{i,α}`.
fn rotate(root: &CorrelationRoot, exposure: &[f64], out: &mut [f64]) {
    let d = exposure.len();
    let rho = root.rho();
    out.iter_mut().for_each(|v| *v = 0.0);
    for (i, e) in exposure.iter().enumerate() {
        let row = &rho[i * d..(i + 1) * d];
        for (o, r) in out.iter_mut().zip(row) {
            *o += e * r;
        }
    }
}

/// Leading-order control for the call families on an `[n_paths × d]` block.
///
/// `rate` is the discount/forward rate of the linearised problem: the lending
/// rate for the lending/borrowing model and zero for the quadratic model.
pub fn z_ae_calls(
    model: &ModelSpec,
    root: &CorrelationRoot,
    kind: PayoffKind,
    rate: f64,
    t: f64,
    x_t: &[f64],
) -> Result<Vec<f64>, PriorError> {
    if kind == PayoffKind::BasketCall {
        return Err(PriorError::WrongFamily(kind));
    }
    let tau = time_to_maturity(model, t)?;
    let d = model.d;
    let mut out = vec![0.0; x_t.len()];
    let mut exposure = vec![0.0; d];
    for (row, z) in x_t.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        for (i, e) in exposure.iter_mut().enumerate() {
            *e = call_family_delta(kind, model, rate, i, row[i], tau) * model.sigma[i] * row[i];
        }
        rotate(root, &exposure, z);
    }
    Ok(out)
}

/// Small-diffusion quantities of the basket prior at one path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasketDeltaTerms {
    pub d_c: f64,
    pub sigma_tilde: f64,
    pub tau: f64,
}

fn basket_terms(model: &ModelSpec, root: &CorrelationRoot, tau: f64, row: &[f64]) -> BasketDeltaTerms {
    let d = model.d;
    let r = model.lending_rate;
    let strike = model.strikes[0];
    let forward: Vec<f64> = (0..d).map(|i| row[i] * ((r - model.dividend_yield[i]) * tau).exp()).collect();
    let vol_fwd: Vec<f64> = (0..d).map(|i| model.sigma[i] * forward[i]).collect();
    let corr = root.correlation();
    let mut quad = 0.0;
    for i in 0..d {
        let c = &corr[i * d..(i + 1) * d];
        quad += vol_fwd[i] * c.iter().zip(&vol_fwd).map(|(cij, vj)| cij * vj).sum::<f64>();
    }
    let sigma_tilde = quad.sqrt() / d as f64;
    let mean_fwd = forward.iter().sum::<f64>() / d as f64;
    let d_c = (mean_fwd - strike) / (sigma_tilde * tau.sqrt());
    BasketDeltaTerms { d_c, sigma_tilde, tau }
}

/// Small-diffusion prior for the basket call:
/// `Z^α = N(d_c) (1/d) Σ_i e^{-y^i τ} σ^i X^i ρ_{i,α}` at the lending rate.
pub fn z_ae_basket(
    model: &ModelSpec,
    root: &CorrelationRoot,
    t: f64,
    x_t: &[f64],
) -> Result<(Vec<f64>, Vec<BasketDeltaTerms>), PriorError> {
    let tau = time_to_maturity(model, t)?;
    let d = model.d;
    let inv_d = 1.0 / d as f64;
    let mut out = vec![0.0; x_t.len()];
    let mut terms = Vec::with_capacity(x_t.len() / d);
    let mut exposure = vec![0.0; d];
    for (row, z) in x_t.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let bt = basket_terms(model, root, tau, row);
        let weight = norm_cdf(bt.d_c) * inv_d;
        for (i, e) in exposure.iter_mut().enumerate() {
            *e = weight * (-model.dividend_yield[i] * tau).exp() * model.sigma[i] * row[i];
        }
        rotate(root, &exposure, z);
        terms.push(bt);
    }
    Ok((out, terms))
}

/// Dispatches to the prior matching `kind`. The basket prior always uses the
/// model's lending rate.
pub fn z_ae(
    kind: PayoffKind,
    model: &ModelSpec,
    root: &CorrelationRoot,
    rate: f64,
    t: f64,
    x_t: &[f64],
) -> Result<Vec<f64>, PriorError> {
    match kind {
        PayoffKind::BasketCall => z_ae_basket(model, root, t, x_t).map(|(z, _)| z),
        _ => z_ae_calls(model, root, kind, rate, t, x_t),
    }
}

/// Leading-order price `Y^(0)(t, x)` for one price vector.
///
/// Exact Black-Scholes for the call families. For the basket it is the
/// first-order Gaussian price `e^{-rτ}[(F̄-K)N(d_c) + σ̃√τ n(d_c)]`.
pub fn leading_order_price(
    kind: PayoffKind,
    model: &ModelSpec,
    root: &CorrelationRoot,
    rate: f64,
    t: f64,
    x: &[f64],
) -> Result<f64, PriorError> {
    let tau = time_to_maturity(model, t)?;
    let d = model.d;
    let leg = |i: usize, k: f64| bs_call(x[i], k, rate, model.dividend_yield[i], model.sigma[i], tau);
    let inv_d = 1.0 / d as f64;
    Ok(match kind {
        PayoffKind::CallPortfolio => (0..d).map(|i| model.weights[i] * leg(i, model.strikes[i])).sum(),
        PayoffKind::CallSpreadAvg => {
            let (k1, k2) = (model.strikes[0], model.strikes[1]);
            inv_d * (0..d).map(|i| leg(i, k1) - 2.0 * leg(i, k2)).sum::<f64>()
        }
        PayoffKind::CappedSpreadAvg => {
            let (k1, k2) = (model.strikes[0], model.strikes[1]);
            inv_d * (0..d).map(|i| leg(i, k1) - leg(i, k2)).sum::<f64>()
        }
        PayoffKind::BasketCall => {
            let bt = basket_terms(model, root, tau, x);
            basket_gaussian_price(model, t, x, bt.sigma_tilde)?
        }
    })
}

/// Gaussian basket price with the spread `σ̃` supplied by the caller. Its
/// gradient in `x` at fixed `σ̃` is the exposure behind [`z_ae_basket`].
pub fn basket_gaussian_price(model: &ModelSpec, t: f64, x: &[f64], sigma_tilde: f64) -> Result<f64, PriorError> {
    let tau = time_to_maturity(model, t)?;
    let r = model.lending_rate;
    let mean_fwd = (0..model.d).map(|i| x[i] * ((r - model.dividend_yield[i]) * tau).exp()).sum::<f64>() / model.d as f64;
    let spread = sigma_tilde * tau.sqrt();
    let d_c = (mean_fwd - model.strikes[0]) / spread;
    Ok((-r * tau).exp() * ((mean_fwd - model.strikes[0]) * norm_cdf(d_c) + spread * norm_pdf(d_c)))
}
