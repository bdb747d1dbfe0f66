//! Rényi DP accounting for subsampled Gaussian mechanisms.
//!
//! The per-step RDP of the Gaussian mechanism with sensitivity-relative
//! noise sigma is `alpha / (2 sigma^2)`. Under Poisson subsampling at
//! rate `q` the integer-order bound is
//!
//! ```text
//! eps(alpha) = ln( sum_{k=0}^{alpha} C(alpha,k) (1-q)^(alpha-k) q^k
//!                  * exp(k(k-1) / (2 sigma^2)) ) / (alpha - 1)
//! ```
//!
//! evaluated in log space. RDP composes additively over steps and
//! converts to (eps, delta)-DP via
//! `eps = min_alpha [ eps_alpha + ln(1/delta) / (alpha - 1) ]`.
//!
//! Fractional orders are tracked only for the unsubsampled mechanism
//! (q = 1); tighter fractional-order subsampled bounds are out of scope.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AccountantError {
    #[error("invalid accountant parameter: {0}")]
    Invalid(&'static str),
    #[error("numerical overflow in the RDP sum; use a larger noise multiplier")]
    Overflow,
    #[error("privacy budget eps={target} is infeasible at sigma=200 for q={q}, steps={steps}")]
    Infeasible { target: f64, q: f64, steps: usize },
}

/// Orders tracked by default: a few fractional orders close to 1 for the
/// unsubsampled case, the integers 2..=64, and 128/256/512 for very small
/// sampling rates.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75];
    orders.extend((2..=64).map(f64::from));
    orders.extend([128.0, 256.0, 512.0]);
    orders
}

/// RDP of the unsubsampled Gaussian mechanism: `alpha / (2 sigma^2)`.
pub fn rdp_gaussian(sigma: f64, alpha: f64) -> f64 {
    assert!(sigma > 0.0, "rdp_gaussian: sigma must be positive");
    assert!(alpha > 1.0, "rdp_gaussian: order must exceed 1");
    alpha / (2.0 * sigma * sigma)
}

/// Integer-order RDP of the Poisson-subsampled Gaussian mechanism,
/// evaluated in log space.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64, AccountantError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(AccountantError::Invalid("q must lie in [0, 1]"));
    }
    if sigma <= 0.0 {
        return Err(AccountantError::Invalid("sigma must be positive"));
    }
    if alpha < 2 {
        return Err(AccountantError::Invalid("integer order must be at least 2"));
    }
    if q == 0.0 {
        return Ok(0.0);
    }

    let a = f64::from(alpha);
    let ln_q = q.ln();
    let ln_1mq = if q < 1.0 { (-q).ln_1p() } else { f64::NEG_INFINITY };
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);

    // log-domain terms; binomial by recurrence ln C(a,k+1) = ln C(a,k) + ln(a-k) - ln(k+1)
    let mut terms = Vec::with_capacity(alpha as usize + 1);
    let mut ln_binom = 0.0f64;
    for k in 0..=alpha {
        let kf = f64::from(k);
        let mut t = ln_binom + kf * (kf - 1.0) * inv_2s2;
        if k > 0 {
            t += kf * ln_q;
        }
        if k < alpha {
            t += (a - kf) * ln_1mq;
        }
        terms.push(t);
        if k < alpha {
            ln_binom += (a - kf).ln() - (kf + 1.0).ln();
        }
    }

    // ln-sum-exp in ln_1p form: with the dominant term factored out, the
    // remainder stays tiny and no precision is lost when the total is
    // itself close to zero (small q).
    let (kmax, &max) = terms
        .iter()
        .enumerate()
        .max_by(|(_, x), (_, y)| x.total_cmp(y))
        .expect("nonempty");
    let rest: f64 = terms
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != kmax)
        .map(|(_, &t)| (t - max).exp())
        .sum();
    let log_total = max + rest.ln_1p();
    let eps = log_total / (a - 1.0);
    if !eps.is_finite() {
        return Err(AccountantError::Overflow);
    }
    Ok(eps)
}

/// RDP consumption at an increasing list of orders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    points: Vec<(f64, f64)>,
}

impl RdpCurve {
    pub fn from_points(points: Vec<(f64, f64)>) -> Self {
        assert!(!points.is_empty(), "RdpCurve: no orders");
        assert!(
            points.windows(2).all(|w| w[0].0 < w[1].0),
            "RdpCurve: orders must be strictly increasing"
        );
        Self { points }
    }

    /// Per-step curve of the subsampled Gaussian mechanism on the default
    /// order grid. At `q = 1` every order is tracked through the closed
    /// form; at `q < 1` only integer orders are usable.
    pub fn subsampled_gaussian(q: f64, sigma: f64) -> Result<Self, AccountantError> {
        Self::subsampled_gaussian_with_orders(q, sigma, &default_orders())
    }

    pub fn subsampled_gaussian_with_orders(
        q: f64,
        sigma: f64,
        orders: &[f64],
    ) -> Result<Self, AccountantError> {
        if !(0.0..=1.0).contains(&q) {
            return Err(AccountantError::Invalid("q must lie in [0, 1]"));
        }
        if sigma <= 0.0 {
            return Err(AccountantError::Invalid("sigma must be positive"));
        }
        let mut points = Vec::with_capacity(orders.len());
        for &alpha in orders {
            if q >= 1.0 {
                points.push((alpha, rdp_gaussian(sigma, alpha)));
            } else if q == 0.0 {
                points.push((alpha, 0.0));
            } else if alpha.fract() == 0.0 && alpha >= 2.0 {
                points.push((alpha, rdp_subsampled_gaussian(q, sigma, alpha as u32)?));
            }
        }
        if points.is_empty() {
            return Err(AccountantError::Invalid("no usable orders for subsampled accounting"));
        }
        Ok(Self::from_points(points))
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Linear composition: `steps` sequential applications.
    pub fn compose(&self, steps: usize) -> RdpCurve {
        RdpCurve {
            points: self
                .points
                .iter()
                .map(|&(a, e)| (a, e * steps as f64))
                .collect(),
        }
    }

    /// Pointwise sum of two curves over identical order grids.
    pub fn add(&self, other: &RdpCurve) -> RdpCurve {
        assert_eq!(
            self.points.len(),
            other.points.len(),
            "curve addition needs identical order grids"
        );
        RdpCurve {
            points: self
                .points
                .iter()
                .zip(&other.points)
                .map(|(&(a, e1), &(a2, e2))| {
                    assert_eq!(a, a2, "curve addition needs identical order grids");
                    (a, e1 + e2)
                })
                .collect(),
        }
    }

    /// Converts to (eps, delta)-DP:
    /// `eps = min_alpha [ eps_alpha + ln(1/delta)/(alpha - 1) ]`.
    /// Returns the minimum and its order.
    pub fn to_dp(&self, delta: f64) -> (f64, f64) {
        assert!(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
        let ln_inv_delta = (1.0 / delta).ln();
        let mut best = (f64::INFINITY, f64::NAN);
        for &(alpha, eps_alpha) in &self.points {
            let eps = eps_alpha + ln_inv_delta / (alpha - 1.0);
            if eps < best.0 {
                best = (eps, alpha);
            }
        }
        best
    }
}

/// (eps, best order) after `steps` applications of the subsampled
/// Gaussian mechanism.
pub fn epsilon_for(q: f64, sigma: f64, steps: usize, delta: f64) -> Result<(f64, f64), AccountantError> {
    Ok(RdpCurve::subsampled_gaussian(q, sigma)?.compose(steps).to_dp(delta))
}

/// Smallest noise multiplier in [0.3, 200] whose accounted epsilon stays
/// within `target_eps`, by 60 bisection iterations. The returned sigma
/// round-trips: accounting with it lands in `[0.99 * target, target]`
/// whenever the target is attainable inside the search bracket.
pub fn calibrate_sigma(
    target_eps: f64,
    delta: f64,
    q: f64,
    steps: usize,
) -> Result<f64, AccountantError> {
    if target_eps <= 0.0 {
        return Err(AccountantError::Invalid("target epsilon must be positive"));
    }
    if steps == 0 {
        return Err(AccountantError::Invalid("steps must be positive"));
    }
    const SIGMA_LO: f64 = 0.3;
    const SIGMA_HI: f64 = 200.0;
    let eps_at = |sigma: f64| -> Result<f64, AccountantError> {
        Ok(epsilon_for(q, sigma, steps, delta)?.0)
    };
    if eps_at(SIGMA_HI)? > target_eps {
        return Err(AccountantError::Infeasible { target: target_eps, q, steps });
    }
    if eps_at(SIGMA_LO)? <= target_eps {
        return Ok(SIGMA_LO);
    }
    let (mut lo, mut hi) = (SIGMA_LO, SIGMA_HI);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? <= target_eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Privacy spend of one training phase: a per-step curve scaled by the
/// number of steps consumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseLedger {
    pub q: f64,
    pub sigma: f64,
    pub steps: usize,
    per_step: RdpCurve,
}

impl PhaseLedger {
    pub fn new(q: f64, sigma: f64) -> Result<Self, AccountantError> {
        let per_step = RdpCurve::subsampled_gaussian(q, sigma)?;
        Ok(Self { q, sigma, steps: 0, per_step })
    }

    pub fn record_steps(&mut self, steps: usize) {
        self.steps += steps;
    }

    /// Accumulated curve after the recorded steps.
    pub fn curve(&self) -> RdpCurve {
        self.per_step.compose(self.steps)
    }

    /// (eps, best order) at the given delta.
    pub fn epsilon(&self, delta: f64) -> (f64, f64) {
        self.curve().to_dp(delta)
    }
}

/// Separate ledgers for the two phases. Pretraining and fine-tuning touch
/// disjoint datasets, so their budgets are reported independently rather
/// than composed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub pretrain: Option<PhaseLedger>,
    pub finetune: Option<PhaseLedger>,
}
