//! Rényi-DP accounting for the sampled Gaussian mechanism.
//!
//! Per-iteration RDP at integer order α is `ln(A_α)/(α-1)` with
//!
//! ```text
//! A_α = Σ_{k=0}^{α} C(α,k) (1-q)^{α-k} q^k exp((k²-k)/(2σ²))
//! ```
//!
//! Identical iterations compose linearly, and an RDP curve converts to
//! (ε, δ)-DP through `min_α ε'(α) + ln(1/δ)/(α-1)`.

use crate::error::{Error, Result};

pub const MIN_ORDER: u32 = 2;
pub const MAX_ORDER: u32 = 64;

/// Upper end of the iteration search interval.
pub const MAX_CALIBRATED_ITERATIONS: u64 = 10_000_000_000;

/// Integer orders `2..=64`.
pub fn default_alpha_grid() -> Vec<u32> {
    (MIN_ORDER..=MAX_ORDER).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
}

impl PrivacySpec {
    pub fn new(
        epsilon: f64,
        delta: f64,
        sampling_rate: f64,
        noise_multiplier: f64,
    ) -> Result<Self> {
        let spec = Self {
            epsilon,
            delta,
            sampling_rate,
            noise_multiplier,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        check_delta(self.delta)?;
        check_mechanism(self.sampling_rate, self.noise_multiplier)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "delta must be in (0, 1), got {delta}"
        )))
    }
}

fn check_mechanism(q: f64, sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!(
            "sampling rate must be in [0, 1], got {q}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "noise multiplier must be positive for accounting, got {sigma}"
        )));
    }
    Ok(())
}

/// RDP values aligned with a strictly increasing grid of integer orders.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve {
    alphas: Vec<u32>,
    eps: Vec<f64>,
}

impl RdpCurve {
    pub fn new(alphas: Vec<u32>, eps: Vec<f64>) -> Result<Self> {
        Error::check_len("rdp curve", alphas.len(), eps.len())?;
        check_grid(&alphas)?;
        if let Some(e) = eps.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return Err(Error::invalid(format!(
                "rdp value must be finite and non-negative, got {e}"
            )));
        }
        Ok(Self { alphas, eps })
    }

    /// Per-iteration curve of the sampled Gaussian mechanism.
    pub fn sampled_gaussian(q: f64, sigma: f64, alphas: &[u32]) -> Result<Self> {
        check_grid(alphas)?;
        let eps = alphas
            .iter()
            .map(|&a| rdp_sgm_order(q, sigma, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            alphas: alphas.to_vec(),
            eps,
        })
    }

    pub fn alphas(&self) -> &[u32] {
        &self.alphas
    }

    pub fn values(&self) -> &[f64] {
        &self.eps
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

fn check_grid(alphas: &[u32]) -> Result<()> {
    if alphas.iter().any(|&a| a < MIN_ORDER) {
        return Err(Error::invalid("rdp orders must be integers >= 2"));
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("rdp order grid must be strictly increasing"));
    }
    Ok(())
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    let (n, k) = (f64::from(n), f64::from(k));
    libm::lgamma(n + 1.0) - libm::lgamma(k + 1.0) - libm::lgamma(n - k + 1.0)
}

/// `ln(e^x - 1)` for `x > 0`.
fn ln_expm1(x: f64) -> f64 {
    if x > 1.0 {
        x + (-(-x).exp_m1()).ln()
    } else {
        x.exp_m1().ln()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Per-iteration RDP `ε'(α)` of the sampled Gaussian mechanism.
///
/// The binomial weights sum to one, so `A_α - 1` is the same sum with each
/// exponential replaced by `exp(·) - 1`; the `k = 0, 1` terms vanish. That
/// positive sum is evaluated by log-sum-exp and `ln A_α = ln(1 + (A_α - 1))`
/// is recovered with a softplus, which stays accurate when `A_α ≈ 1`.
pub fn rdp_sgm_order(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if alpha < MIN_ORDER {
        return Err(Error::invalid(format!(
            "rdp order must be an integer >= 2, got {alpha}"
        )));
    }
    check_mechanism(q, sigma)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let two_var = 2.0 * sigma * sigma;
    let terms: Vec<f64> = (2..=alpha)
        .map(|k| {
            let kf = f64::from(k);
            let rest = f64::from(alpha - k);
            // (1-q)^0 = 1 even when q = 1
            let tail = if alpha == k { 0.0 } else { rest * ln_1mq };
            ln_binomial(alpha, k) + tail + kf * ln_q + ln_expm1((kf * kf - kf) / two_var)
        })
        .collect();
    let ln_a_minus_1 = log_sum_exp(&terms);
    let ln_a = ln_a_minus_1.max(0.0) + (-ln_a_minus_1.abs()).exp().ln_1p();
    Ok(ln_a / f64::from(alpha - 1))
}

/// `T`-fold composition of identical mechanisms.
pub fn compose(curve: &RdpCurve, iterations: u64) -> RdpCurve {
    let t = iterations as f64;
    RdpCurve {
        alphas: curve.alphas.clone(),
        eps: curve.eps.iter().map(|e| e * t).collect(),
    }
}

/// Smallest `ε'(α) + ln(1/δ)/(α-1)` over the grid and its order.
/// Ties resolve to the smallest order.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, u32)> {
    check_delta(delta)?;
    let ln_inv_delta = -delta.ln();
    curve
        .alphas
        .iter()
        .zip(&curve.eps)
        .map(|(&a, &e)| (e + ln_inv_delta / f64::from(a - 1), a))
        .fold(None, |best: Option<(f64, u32)>, cand| match best {
            Some(b) if b.0 <= cand.0 => Some(b),
            _ => Some(cand),
        })
        .ok_or_else(|| Error::invalid("empty rdp order grid"))
}

/// (ε, δ)-DP guarantee after `iterations` sampled Gaussian steps.
pub fn total_epsilon(
    q: f64,
    sigma: f64,
    iterations: u64,
    delta: f64,
    alphas: &[u32],
) -> Result<f64> {
    RdpAccountant::new(q, sigma, alphas)?.epsilon(iterations, delta)
}

/// Caches the per-iteration curve for repeated queries with fixed (q, σ).
#[derive(Debug, Clone)]
pub struct RdpAccountant {
    per_iteration: RdpCurve,
}

impl RdpAccountant {
    pub fn new(q: f64, sigma: f64, alphas: &[u32]) -> Result<Self> {
        Ok(Self {
            per_iteration: RdpCurve::sampled_gaussian(q, sigma, alphas)?,
        })
    }

    pub fn per_iteration(&self) -> &RdpCurve {
        &self.per_iteration
    }

    pub fn epsilon(&self, iterations: u64, delta: f64) -> Result<f64> {
        Ok(self.epsilon_and_order(iterations, delta)?.0)
    }

    pub fn epsilon_and_order(&self, iterations: u64, delta: f64) -> Result<(f64, u32)> {
        rdp_to_dp(&compose(&self.per_iteration, iterations), delta)
    }
}

/// Largest iteration count whose total ε stays within the target.
///
/// Bisects `[0, 10^10]` until the bracket has width one. The result `T`
/// satisfies `ε(T) <= target < ε(T+1)` unless it is the upper bound itself.
pub fn calibrate_iterations(spec: &PrivacySpec, alphas: &[u32]) -> Result<u64> {
    spec.validate()?;
    let acc = RdpAccountant::new(spec.sampling_rate, spec.noise_multiplier, alphas)?;
    let eps = |t: u64| acc.epsilon(t, spec.delta);

    let floor = eps(0)?;
    if floor > spec.epsilon {
        return Err(Error::InfeasibleBudget {
            target: spec.epsilon,
            floor,
        });
    }
    let (mut lo, mut hi) = (0u64, MAX_CALIBRATED_ITERATIONS);
    if eps(hi)? <= spec.epsilon {
        return Ok(hi);
    }
    // invariant: eps(lo) <= target < eps(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if eps(mid)? > spec.epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    assert!(
        eps(lo)? <= spec.epsilon && eps(lo + 1)? > spec.epsilon,
        "privacy loss is not monotone in the iteration count"
    );
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_sampling_is_gaussian_mechanism() {
        assert!((rdp_sgm_order(1.0, 1.0, 2).unwrap() - 1.0).abs() <= 1e-15);
        for sigma in [0.5, 1.0, 2.0, 5.0] {
            for a in default_alpha_grid() {
                let e = rdp_sgm_order(1.0, sigma, a).unwrap();
                let exact = f64::from(a) / (2.0 * sigma * sigma);
                assert!(
                    (e - exact).abs() <= 1e-12,
                    "alpha {a} sigma {sigma}: {e} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn zero_sampling_costs_nothing() {
        assert_eq!(rdp_sgm_order(0.0, 1.0, 7).unwrap(), 0.0);
    }

    #[test]
    fn order_two_hand_value() {
        let q: f64 = 0.015;
        let a2 = (1.0 - q).powi(2) + 2.0 * q * (1.0 - q) + q * q * 1f64.exp();
        // 40-digit reference: A_2 = 1.000386613411403, ln A_2 = 3.865386956951230e-4
        assert!((a2 - 1.000_386_613_411_403).abs() < 1e-14);
        let e = rdp_sgm_order(q, 1.0, 2).unwrap();
        assert!(
            (e - 3.865_386_956_951_23e-4).abs() <= 1e-12 * 3.87e-4,
            "{e}"
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(rdp_sgm_order(0.5, 1.0, 1).is_err());
        assert!(rdp_sgm_order(0.5, 0.0, 2).is_err());
        assert!(rdp_sgm_order(1.5, 1.0, 2).is_err());
        assert!(RdpCurve::new(vec![3, 2], vec![0.0, 0.0]).is_err());
        assert!(RdpCurve::new(vec![1, 2], vec![0.0, 0.0]).is_err());
        assert!(RdpCurve::new(vec![2], vec![-1.0]).is_err());
    }

    #[test]
    fn composition_scales_linearly() {
        let c = RdpCurve::new(vec![2, 3], vec![3.8657e-4, 1e-3]).unwrap();
        assert!(compose(&c, 0).values().iter().all(|v| *v == 0.0));
        assert_eq!(compose(&c, 1), c);
        let c500 = compose(&c, 500);
        assert!((c500.values()[0] - 0.193285).abs() < 1e-12);
        let added = (0..500).fold(0.0, |acc, _| acc + 3.8657e-4);
        assert!((c500.values()[0] - added).abs() < 1e-12);
    }

    #[test]
    fn conversion_examples() {
        let c = RdpCurve::new(vec![2], vec![0.1]).unwrap();
        let (e, a) = rdp_to_dp(&c, 1e-5).unwrap();
        assert_eq!(a, 2);
        assert!((e - (0.1 + 1e5f64.ln())).abs() < 1e-12);
        assert!((e - 11.6129).abs() < 1e-4);

        let grid = default_alpha_grid();
        let zeros = RdpCurve::new(grid.clone(), vec![0.0; grid.len()]).unwrap();
        let (e, a) = rdp_to_dp(&zeros, 0.99).unwrap();
        assert_eq!(a, 64);
        assert!((e - (1.0 / 0.99f64).ln() / 63.0).abs() < 1e-15);

        assert!(rdp_to_dp(&RdpCurve::new(vec![], vec![]).unwrap(), 1e-5).is_err());
        assert!(rdp_to_dp(&zeros, 1.0).is_err());
    }

    #[test]
    fn linear_curve_minimizer_near_calculus_optimum() {
        // eps'(a) = c a, objective c a + L/(a-1) is minimized at a = 1 + sqrt(L/c)
        let grid = default_alpha_grid();
        let delta: f64 = 1e-5;
        for c in [0.05, 0.5, 2.0] {
            let curve = RdpCurve::new(
                grid.clone(),
                grid.iter().map(|&a| c * f64::from(a)).collect(),
            )
            .unwrap();
            let (eps, best) = rdp_to_dp(&curve, delta).unwrap();
            let scan = grid
                .iter()
                .map(|&a| c * f64::from(a) - delta.ln() / f64::from(a - 1))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(eps, scan);
            let analytic = 1.0 + (-delta.ln() / c).sqrt();
            assert!(
                (f64::from(best) - analytic).abs() <= 1.0,
                "c {c}: {best} vs {analytic}"
            );
        }
    }

    #[test]
    fn zero_iterations_give_conversion_floor() {
        let e = total_epsilon(0.015, 1.0, 0, 1e-5, &default_alpha_grid()).unwrap();
        assert!((e - 1e5f64.ln() / 63.0).abs() < 1e-15);
    }

    #[test]
    fn single_gaussian_release_matches_scan() {
        let delta: f64 = 1e-5;
        let e = total_epsilon(1.0, 1.0, 1, delta, &default_alpha_grid()).unwrap();
        let scan = (2..=64)
            .map(|a| f64::from(a) / 2.0 - delta.ln() / f64::from(a - 1))
            .fold(f64::INFINITY, f64::min);
        assert!((e - scan).abs() < 1e-12);
        // alpha/2 + ln(1e5)/(alpha-1) bottoms out at alpha = 6
        assert!((e - (3.0 + 1e5f64.ln() / 5.0)).abs() < 1e-12, "{e}");
        let (_, best) = RdpAccountant::new(1.0, 1.0, &default_alpha_grid())
            .unwrap()
            .epsilon_and_order(1, delta)
            .unwrap();
        assert_eq!(best, 6);
    }

    #[test]
    fn epsilon_grows_with_iterations() {
        let g = default_alpha_grid();
        let e = |t| total_epsilon(0.015, 1.0, t, 1e-5, &g).unwrap();
        assert!(e(100) < e(200) && e(200) < e(400));
    }

    #[test]
    fn calibration_brackets_target() {
        let g = default_alpha_grid();
        let spec = PrivacySpec::new(2.0, 1e-5, 0.015, 1.0).unwrap();
        let t = calibrate_iterations(&spec, &g).unwrap();
        let acc = RdpAccountant::new(0.015, 1.0, &g).unwrap();
        assert!(acc.epsilon(t, 1e-5).unwrap() <= 2.0);
        assert!(acc.epsilon(t + 1, 1e-5).unwrap() > 2.0);
        let scan = (0u64..)
            .find(|&t| acc.epsilon(t + 1, 1e-5).unwrap() > 2.0)
            .unwrap();
        assert_eq!(t, scan);
    }

    #[test]
    fn huge_noise_hits_search_ceiling() {
        let spec = PrivacySpec::new(1.0, 1e-5, 0.015, 1e6).unwrap();
        assert_eq!(
            calibrate_iterations(&spec, &default_alpha_grid()).unwrap(),
            MAX_CALIBRATED_ITERATIONS
        );
    }

    #[test]
    fn infeasible_budget_is_reported() {
        let spec = PrivacySpec::new(0.1, 1e-5, 0.015, 1.0).unwrap();
        assert!(matches!(
            calibrate_iterations(&spec, &default_alpha_grid()),
            Err(Error::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn rdp_is_monotone_in_sampling_rate() {
        for sigma in [0.5, 1.0, 2.0] {
            for a in [2, 5, 17, 64] {
                let mut prev = 0.0;
                for i in 0..=100 {
                    let e = rdp_sgm_order(f64::from(i) / 100.0, sigma, a).unwrap();
                    assert!(e >= prev && e.is_finite());
                    prev = e;
                }
            }
        }
    }
}
