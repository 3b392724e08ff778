//! Privacy budget of the full pipeline: noisy-argmax queries on the
//! discriminative side composed with the latent-noise budget of the
//! generative side.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{DgdError, Result};

/// Default maximum moment order searched by the moments bound.
pub const DEFAULT_LAMBDA_MAX: u32 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    /// Per-query budget of the Laplace noisy argmax.
    pub eps0: f64,
    pub query_count: u64,
    pub delta: f64,
    /// Budget of the latent-noise reconstruction stream.
    pub eps1: f64,
    /// Latent code dimension.
    pub latent_dim: usize,
}

impl PrivacyLedger {
    pub fn new(eps0: f64, query_count: u64, delta: f64, eps1: f64, latent_dim: usize) -> Result<Self> {
        let ledger = PrivacyLedger {
            eps0,
            query_count,
            delta,
            eps1,
            latent_dim,
        };
        ledger.validate()?;
        Ok(ledger)
    }

    /// Ledger for Laplace aggregation with scale `b`, so `eps0 = 2 / b`.
    pub fn from_laplace_scale(
        scale: f64,
        query_count: u64,
        delta: f64,
        eps1: f64,
        latent_dim: usize,
    ) -> Result<Self> {
        if !(scale >= 0.0) {
            return Err(DgdError::Config(format!("noise scale must be non-negative, got {scale}")));
        }
        PrivacyLedger::new(2.0 / scale, query_count, delta, eps1, latent_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(DgdError::Config(format!(
                "delta must be in (0, 1), got {}",
                self.delta
            )));
        }
        if self.query_count > 0 && !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(DgdError::Config(format!(
                "queries need a finite positive eps0, got {} (noise-free aggregation is not private)",
                self.eps0
            )));
        }
        if !(self.eps1 >= 0.0 && self.eps1.is_finite()) {
            return Err(DgdError::Config(format!(
                "eps1 must be finite and non-negative, got {}",
                self.eps1
            )));
        }
        Ok(())
    }

    /// Charges `n` further mechanism invocations.
    pub fn record_queries(&mut self, n: u64) {
        self.query_count += n;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionMethod {
    Basic,
    Advanced,
    MomentsIndependent,
}

impl fmt::Display for CompositionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompositionMethod::Basic => "basic",
            CompositionMethod::Advanced => "advanced",
            CompositionMethod::MomentsIndependent => "moments_independent",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub method: CompositionMethod,
    pub eps_total: f64,
    pub delta: f64,
    /// Discriminative share of `eps_total`.
    pub eps_discriminative: f64,
    pub eps1: f64,
    pub eps0: f64,
    pub query_count: u64,
    pub c: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minimizing_lambda: Option<u32>,
}

impl BudgetReport {
    fn new(ledger: &PrivacyLedger, method: CompositionMethod, disc: f64, lambda: Option<u32>) -> Self {
        BudgetReport {
            method,
            eps_total: disc + ledger.eps1,
            delta: ledger.delta,
            eps_discriminative: disc,
            eps1: ledger.eps1,
            eps0: ledger.eps0,
            query_count: ledger.query_count,
            c: ledger.latent_dim,
            minimizing_lambda: lambda,
        }
    }
}

/// `eps = q * eps0 + eps1`.
pub fn compose_basic(ledger: &PrivacyLedger) -> Result<BudgetReport> {
    ledger.validate()?;
    let disc = if ledger.query_count == 0 {
        0.0
    } else {
        ledger.query_count as f64 * ledger.eps0
    };
    Ok(BudgetReport::new(ledger, CompositionMethod::Basic, disc, None))
}

/// `eps = q * eps0^2 + eps0 * sqrt(-2 q ln delta) + eps1`.
pub fn compose_advanced(ledger: &PrivacyLedger) -> Result<BudgetReport> {
    ledger.validate()?;
    let q = ledger.query_count as f64;
    let disc = if ledger.query_count == 0 {
        0.0
    } else {
        q * ledger.eps0 * ledger.eps0 + ledger.eps0 * (-2.0 * q * ledger.delta.ln()).sqrt()
    };
    Ok(BudgetReport::new(ledger, CompositionMethod::Advanced, disc, None))
}

/// Data-independent moments bound: each eps0-DP query has log-moment at most
/// `2 eps0^2 l (l + 1)`; moments add over queries and the tail bound gives
/// `eps = min_l (q * 2 eps0^2 l (l + 1) - ln delta) / l`, searched over
/// integer `l` in `1..=lambda_max`.
pub fn compose_moments_independent(ledger: &PrivacyLedger, lambda_max: u32) -> Result<BudgetReport> {
    ledger.validate()?;
    if lambda_max == 0 {
        return Err(DgdError::Config("lambda_max must be >= 1".into()));
    }
    if ledger.query_count == 0 {
        return Ok(BudgetReport::new(
            ledger,
            CompositionMethod::MomentsIndependent,
            0.0,
            None,
        ));
    }
    let q = ledger.query_count as f64;
    let e2 = ledger.eps0 * ledger.eps0;
    let ln_delta = ledger.delta.ln();
    let (lambda, disc) = (1..=lambda_max)
        .map(|l| {
            let lf = l as f64;
            (l, (q * 2.0 * e2 * lf * (lf + 1.0) - ln_delta) / lf)
        })
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    Ok(BudgetReport::new(
        ledger,
        CompositionMethod::MomentsIndependent,
        disc,
        Some(lambda),
    ))
}

/// Smallest of the three compositions, with its method recorded.
pub fn report_min(ledger: &PrivacyLedger) -> Result<BudgetReport> {
    let candidates = [
        compose_basic(ledger)?,
        compose_advanced(ledger)?,
        compose_moments_independent(ledger, DEFAULT_LAMBDA_MAX)?,
    ];
    Ok(candidates
        .into_iter()
        .reduce(|best, r| if r.eps_total < best.eps_total { r } else { best })
        .expect("three candidates"))
}

/// Laplace scale `2c / eps1` for clamped latent codes of dimension `c`.
pub fn generative_epsilon(eps1: f64, latent_dim: usize) -> Result<f64> {
    if !(eps1 > 0.0 && eps1.is_finite()) {
        return Err(DgdError::Config(format!("eps1 must be positive, got {eps1}")));
    }
    if latent_dim == 0 {
        return Err(DgdError::Config("latent dimension must be >= 1".into()));
    }
    Ok(2.0 * latent_dim as f64 / eps1)
}

/// Budget implied by latent noise of scale `b`: `eps1 = 2c / b`.
pub fn eps1_for_scale(scale: f64, latent_dim: usize) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(DgdError::Config(format!(
            "latent noise scale must be positive, got {scale}"
        )));
    }
    Ok(2.0 * latent_dim as f64 / scale)
}
