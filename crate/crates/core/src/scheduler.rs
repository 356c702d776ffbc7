//! Adaptive local iteration scheduling.
//!
//! After every aggregation the server estimates the strong-convexity
//! constant μ from client reports, refreshes the horizon
//! `T = min(R_s·τ_prev, R_c)` and evaluates
//!
//! ```text
//! τ* = sqrt(1 + (4/μ² + 3C² + 2ΓTμ + σ²C²d/B̂²) / ((2 + 1/T)(C² + σ²C²d/B̂²)))
//! ```
//!
//! When communication is not the binding resource (`R_s >= R_c`) the
//! schedule is the constant `τ = 1`.
//!
//! The convergence bound `h(τ)` and its per-round form `G(τ)` are exposed
//! for diagnostics; they satisfy `T·h(τ) = τ·G(τ)`.

use tracing::warn;

use crate::error::{Error, Result};

pub const MU_MIN: f64 = 1e-4;
pub const MU_MAX: f64 = 1e4;
/// Displacements shorter than this make a μ report invalid.
pub const MIN_DISPLACEMENT: f64 = 1e-9;
pub const DEFAULT_TAU_CAP: u64 = 64;

/// Inputs of the τ* formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerContext {
    pub mu: f64,
    pub gamma: f64,
    pub clip_bound: f64,
    pub sigma: f64,
    pub model_dim: usize,
    pub b_hat: f64,
    pub r_s: u64,
    pub r_c: u64,
    pub tau_prev: u64,
    pub t_horizon: u64,
}

impl SchedulerContext {
    /// Recomputes `t_horizon` from `r_s`, `r_c` and `tau_prev`.
    pub fn refresh_horizon(&mut self) {
        self.t_horizon = effective_horizon(self.r_s, self.r_c, self.tau_prev);
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mu", self.mu),
            ("clip bound", self.clip_bound),
            ("b_hat", self.b_hat),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        if self.model_dim == 0 || self.tau_prev == 0 || self.t_horizon == 0 {
            return Err(Error::invalid(
                "model dimension, previous tau and horizon must be at least 1",
            ));
        }
        Ok(())
    }

    /// Effective noise variance `σ²C²d/B̂²`.
    pub fn noise_term(&self) -> f64 {
        let c2 = self.clip_bound * self.clip_bound;
        self.sigma * self.sigma * c2 * self.model_dim as f64 / (self.b_hat * self.b_hat)
    }

    /// Per-step gradient variance proxy `C² + σ²C²d/B̂²`.
    pub fn variance_term(&self) -> f64 {
        self.clip_bound * self.clip_bound + self.noise_term()
    }
}

/// Constants of the convergence bound that τ* does not depend on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticBoundParams {
    pub lipschitz: f64,
    /// Initial squared distance to the optimum.
    pub delta1: f64,
    pub eta: f64,
}

/// A client's curvature probe `‖∇F_i(w_i) - ∇F_i(w)‖ / ‖w_i - w‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuReport {
    pub client: usize,
    pub ratio: f64,
    pub valid: bool,
}

impl MuReport {
    pub fn from_norms(client: usize, gradient_change: f64, displacement: f64) -> Self {
        let ratio = gradient_change / displacement;
        let valid = displacement >= MIN_DISPLACEMENT && ratio.is_finite() && ratio >= 0.0;
        Self {
            client,
            ratio: if valid { ratio } else { 0.0 },
            valid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuEstimate {
    pub mu: f64,
    /// True when no report was valid and the previous value was reused.
    pub fallback: bool,
}

/// Weighted mean of the valid ratios, renormalized over valid clients and
/// clamped to `[MU_MIN, MU_MAX]`. Returns `None` only when no report is
/// valid and there is no previous estimate.
pub fn estimate_mu(
    reports: &[MuReport],
    weights: &[f64],
    previous: Option<f64>,
) -> Result<Option<MuEstimate>> {
    let mut num = 0.0;
    let mut den = 0.0;
    for r in reports.iter().filter(|r| r.valid) {
        let p = *weights.get(r.client).ok_or_else(|| {
            Error::invalid(format!(
                "no weight for client {} ({} weights)",
                r.client,
                weights.len()
            ))
        })?;
        num += p * r.ratio;
        den += p;
    }
    if den > 0.0 {
        return Ok(Some(MuEstimate {
            mu: (num / den).clamp(MU_MIN, MU_MAX),
            fallback: false,
        }));
    }
    warn!("no valid curvature reports this round; keeping the previous mu estimate");
    Ok(previous.map(|mu| MuEstimate { mu, fallback: true }))
}

/// `min(R_s·τ_prev, R_c)`.
pub fn effective_horizon(r_s: u64, r_c: u64, tau_prev: u64) -> u64 {
    r_s.saturating_mul(tau_prev).min(r_c)
}

/// `q · min_i |D_i|`.
pub fn effective_b_hat(q: f64, client_sizes: &[usize]) -> Result<f64> {
    let min = client_sizes
        .iter()
        .copied()
        .min()
        .ok_or(Error::EmptyDataset)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!(
            "sampling rate must be in (0, 1], got {q}"
        )));
    }
    if min == 0 {
        return Err(Error::invalid("client dataset sizes must be at least 1"));
    }
    Ok(q * min as f64)
}

/// Real-valued τ* from the context.
pub fn tau_star_real(ctx: &SchedulerContext) -> f64 {
    assert!(
        ctx.mu > 0.0,
        "mu must be positive after clamping, got {}",
        ctx.mu
    );
    let t = ctx.t_horizon as f64;
    let c2 = ctx.clip_bound * ctx.clip_bound;
    let noise = ctx.noise_term();
    let numerator = 4.0 / (ctx.mu * ctx.mu) + 3.0 * c2 + 2.0 * ctx.gamma * t * ctx.mu + noise;
    let denominator = (2.0 + 1.0 / t) * (c2 + noise);
    (1.0 + numerator / denominator).sqrt()
}

/// Round half up, then clamp into `[1, min(cap, remaining)]`.
pub fn round_tau(tau_real: f64, cap: u64, remaining: u64) -> u64 {
    let upper = cap.min(remaining).max(1);
    let rounded = (tau_real + 0.5).floor();
    if rounded.is_nan() || rounded < 1.0 {
        1
    } else if rounded >= upper as f64 {
        upper
    } else {
        rounded as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauDecision {
    pub tau: u64,
    /// Present when the τ* formula was evaluated.
    pub tau_star_real: Option<f64>,
}

/// Local iteration count for the next round, given `iterations_done`
/// iterations already spent.
pub fn next_tau(ctx: &SchedulerContext, iterations_done: u64, tau_cap: u64) -> TauDecision {
    if ctx.r_s >= ctx.r_c {
        return TauDecision {
            tau: 1,
            tau_star_real: None,
        };
    }
    let real = tau_star_real(ctx);
    TauDecision {
        tau: round_tau(real, tau_cap, ctx.r_c.saturating_sub(iterations_done)),
        tau_star_real: Some(real),
    }
}

/// Coefficients `(a, b, c)` of `G(τ) = a·τ + b + c/τ`.
fn bound_coefficients(ctx: &SchedulerContext, diag: &DiagnosticBoundParams) -> (f64, f64, f64) {
    let l = diag.lipschitz;
    let eta_mu = 2.0 + diag.eta * ctx.mu;
    let v = ctx.variance_term();
    let a = l * eta_mu * v / 2.0;
    let b = (l * diag.delta1 - 2.0 * l * eta_mu * v) / 2.0;
    let c2 = ctx.clip_bound * ctx.clip_bound;
    let c = l
        * (eta_mu * v
            + 4.0 / (ctx.mu * ctx.mu)
            + 3.0 * c2
            + 2.0 * ctx.gamma / diag.eta
            + ctx.noise_term())
        / 2.0;
    (a, b, c)
}

/// Convergence upper bound `h(τ)` over horizon `ctx.t_horizon`.
pub fn bound_h(tau: f64, ctx: &SchedulerContext, diag: &DiagnosticBoundParams) -> f64 {
    let (a, b, c) = bound_coefficients(ctx, diag);
    (a * tau * tau + b * tau + c) / ctx.t_horizon as f64
}

/// Per-round rescaling `G(τ)` of the bound, with `h(τ) = (τ/T)·G(τ)`.
pub fn bound_g(tau: f64, ctx: &SchedulerContext, diag: &DiagnosticBoundParams) -> f64 {
    let (a, b, c) = bound_coefficients(ctx, diag);
    a * tau + b + c / tau
}

/// Continuous minimizer `sqrt(c/a)` of `G`.
pub fn bound_g_vertex(ctx: &SchedulerContext, diag: &DiagnosticBoundParams) -> f64 {
    let (a, _, c) = bound_coefficients(ctx, diag);
    (c / a).sqrt()
}
