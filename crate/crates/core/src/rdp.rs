//! Rényi DP accounting: mechanism curves over a fixed grid of orders,
//! additive composition, and translation back to (ε, δ)-DP.
//!
//! The infinity order is carried as `f64::INFINITY` inside the grid. A
//! curve value at that order is the pure-DP ε of the mechanism (or `+inf`
//! when the mechanism has no pure-DP guarantee, e.g. Gaussian noise).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountantError {
    #[error("invalid alpha grid: {0}")]
    InvalidGrid(String),
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("delta must be in (0, 1], got {0}")]
    DeltaOutOfRange(f64),
    #[error("curves are defined over different alpha grids")]
    GridMismatch,
    #[error("curve has no finite value at any order")]
    NoFiniteOrder,
    #[error("{0}")]
    Domain(String),
}

/// Strictly increasing set of Rényi orders, all greater than one.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct AlphaGrid {
    #[serde(with = "crate::floats")]
    orders: Vec<f64>,
}

impl AlphaGrid {
    pub fn new(orders: Vec<f64>) -> Result<Self, AccountantError> {
        if orders.is_empty() {
            return Err(AccountantError::InvalidGrid("grid is empty".into()));
        }
        for (i, &a) in orders.iter().enumerate() {
            if a.is_nan() || a <= 1.0 {
                return Err(AccountantError::InvalidGrid(format!(
                    "order {a} at position {i} is not greater than 1"
                )));
            }
            if i > 0 && orders[i - 1] >= a {
                return Err(AccountantError::InvalidGrid(format!(
                    "orders must be strictly increasing ({} then {a})",
                    orders[i - 1]
                )));
            }
        }
        Ok(AlphaGrid { orders })
    }

    /// {1.5, 1.75, 2, 2.5, 3, 4, 5, 6, 8, 16, 32, 64, ∞}
    pub fn extended() -> Self {
        AlphaGrid {
            orders: vec![
                1.5,
                1.75,
                2.0,
                2.5,
                3.0,
                4.0,
                5.0,
                6.0,
                8.0,
                16.0,
                32.0,
                64.0,
                f64::INFINITY,
            ],
        }
    }

    /// The short preset {2, 3, 4, 8, 16, 32, 64}.
    pub fn short() -> Self {
        AlphaGrid {
            orders: vec![2.0, 3.0, 4.0, 8.0, 16.0, 32.0, 64.0],
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "extended" | "default" => Some(Self::extended()),
            "short" => Some(Self::short()),
            _ => None,
        }
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    pub fn has_infinity(&self) -> bool {
        self.orders.last() == Some(&f64::INFINITY)
    }
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self::extended()
    }
}

impl<'de> Deserialize<'de> for AlphaGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let orders = crate::floats::deserialize(d)?;
        AlphaGrid::new(orders).map_err(serde::de::Error::custom)
    }
}

/// ε(α) over a grid. Curves built by the mechanism constructors are
/// non-negative; budget curves (see [`block_initial_curve`]) may be signed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RdpCurve {
    orders: AlphaGrid,
    #[serde(with = "crate::floats")]
    eps: Vec<f64>,
}

#[derive(Deserialize)]
struct RawCurve {
    orders: AlphaGrid,
    #[serde(with = "crate::floats")]
    eps: Vec<f64>,
}

impl<'de> Deserialize<'de> for RdpCurve {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawCurve::deserialize(d)?;
        RdpCurve::new(raw.orders, raw.eps).map_err(serde::de::Error::custom)
    }
}

impl RdpCurve {
    pub fn new(grid: AlphaGrid, eps: Vec<f64>) -> Result<Self, AccountantError> {
        if eps.len() != grid.len() {
            return Err(AccountantError::Domain(format!(
                "curve has {} values for {} orders",
                eps.len(),
                grid.len()
            )));
        }
        if eps.iter().any(|e| e.is_nan()) {
            return Err(AccountantError::Domain("curve contains NaN".into()));
        }
        Ok(RdpCurve { orders: grid, eps })
    }

    pub fn zero(grid: &AlphaGrid) -> Self {
        RdpCurve {
            eps: vec![0.0; grid.len()],
            orders: grid.clone(),
        }
    }

    fn from_fn(grid: &AlphaGrid, f: impl Fn(f64) -> f64) -> Self {
        RdpCurve {
            eps: grid.orders().iter().map(|&a| f(a)).collect(),
            orders: grid.clone(),
        }
    }

    pub fn grid(&self) -> &AlphaGrid {
        &self.orders
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn into_eps(self) -> Vec<f64> {
        self.eps
    }

    /// Value at a given order, if the order is on the grid.
    pub fn at(&self, alpha: f64) -> Option<f64> {
        self.orders
            .orders()
            .iter()
            .position(|&a| a == alpha)
            .map(|i| self.eps[i])
    }

    pub fn is_nonnegative(&self) -> bool {
        self.eps.iter().all(|&e| e >= 0.0)
    }

    pub fn scale(&self, k: f64) -> RdpCurve {
        RdpCurve {
            orders: self.orders.clone(),
            eps: self.eps.iter().map(|e| e * k).collect(),
        }
    }

    fn zip_with(mut self, other: &RdpCurve, f: impl Fn(f64, f64) -> f64) -> RdpCurve {
        for (a, &b) in self.eps.iter_mut().zip(&other.eps) {
            *a = f(*a, b);
        }
        self
    }

    /// Pointwise sum. Fails if the grids differ.
    pub fn add(&self, other: &RdpCurve) -> Result<RdpCurve, AccountantError> {
        if self.orders != other.orders {
            return Err(AccountantError::GridMismatch);
        }
        Ok(self.clone().zip_with(other, |a, b| a + b))
    }
}

/// An (ε, δ)-DP guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub epsilon: f64,
    pub delta: f64,
}

fn require_positive(name: &'static str, value: f64) -> Result<(), AccountantError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(AccountantError::NonPositive { name, value })
    }
}

/// Gaussian mechanism with sensitivity 1 and noise stddev `sigma`:
/// ε(α) = α / (2σ²), and `+inf` at the infinity order.
pub fn gaussian_curve(sigma: f64, grid: &AlphaGrid) -> Result<RdpCurve, AccountantError> {
    require_positive("sigma", sigma)?;
    Ok(RdpCurve::from_fn(grid, |a| a / (2.0 * sigma * sigma)))
}

/// ln(e^x + e^y) without overflow.
fn log_add_exp(x: f64, y: f64) -> f64 {
    let (hi, lo) = if x >= y { (x, y) } else { (y, x) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Laplace mechanism with sensitivity 1 and pure-DP parameter `eps0`
/// (noise scale 1/eps0).
pub fn laplace_curve(eps0: f64, grid: &AlphaGrid) -> Result<RdpCurve, AccountantError> {
    require_positive("eps0", eps0)?;
    Ok(RdpCurve::from_fn(grid, |a| laplace_at(eps0, a)))
}

pub(crate) fn laplace_at(eps0: f64, alpha: f64) -> f64 {
    if alpha.is_infinite() {
        return eps0;
    }
    let denom = 2.0 * alpha - 1.0;
    let first = (alpha / denom).ln() + (alpha - 1.0) * eps0;
    let second = ((alpha - 1.0) / denom).ln() - alpha * eps0;
    // The divergence is non-negative; clamp rounding noise near eps0 = 0.
    (log_add_exp(first, second) / (alpha - 1.0)).max(0.0)
}

/// RDP curve implied by a generic ε0-DP mechanism: 2·ε0²·α at finite
/// orders and ε0 at the infinity order.
pub fn pure_dp_curve(eps0: f64, grid: &AlphaGrid) -> Result<RdpCurve, AccountantError> {
    require_positive("eps0", eps0)?;
    Ok(RdpCurve::from_fn(grid, |a| {
        if a.is_infinite() {
            eps0
        } else {
            2.0 * eps0 * eps0 * a
        }
    }))
}

/// Additive composition over a shared grid. The empty composition is the
/// zero curve on `grid`.
pub fn compose(grid: &AlphaGrid, curves: &[RdpCurve]) -> Result<RdpCurve, AccountantError> {
    let mut acc = RdpCurve::zero(grid);
    for c in curves {
        if c.grid() != grid {
            return Err(AccountantError::GridMismatch);
        }
        acc = acc.zip_with(c, |a, b| a + b);
    }
    Ok(acc)
}

/// Best (ε, δ)-DP guarantee implied by the curve: the minimum over grid
/// orders of ε(α) + ln(1/δ)/(α−1), with the infinity order contributing
/// ε(∞) itself. Returns the minimizing order; ties go to the smaller order.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(DpGuarantee, f64), AccountantError> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(AccountantError::DeltaOutOfRange(delta));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best: Option<(f64, f64)> = None;
    for (&a, &e) in curve.grid().orders().iter().zip(curve.eps()) {
        let candidate = if a.is_infinite() {
            e
        } else {
            e + log_inv_delta / (a - 1.0)
        };
        if !candidate.is_finite() {
            continue;
        }
        match best {
            Some((b, _)) if candidate >= b => {}
            _ => best = Some((candidate, a)),
        }
    }
    let (epsilon, alpha) = best.ok_or(AccountantError::NoFiniteOrder)?;
    Ok((
        DpGuarantee {
            epsilon: epsilon.max(0.0),
            delta,
        },
        alpha,
    ))
}

/// Per-order global budget of a fresh block: ε^G − ln(1/δ^G)/(α−1), less
/// the counter's 2·ε_count²·α when a user counter runs alongside. At the
/// infinity order the counter deduction is its pure-DP cost ε_count.
/// Entries may be negative; such orders are unusable.
pub fn block_initial_curve(
    eps_g: f64,
    delta_g: f64,
    grid: &AlphaGrid,
    eps_count: f64,
) -> Result<RdpCurve, AccountantError> {
    require_positive("eps_g", eps_g)?;
    if !(delta_g > 0.0 && delta_g < 1.0) {
        return Err(AccountantError::Domain(format!(
            "global delta must be in (0, 1), got {delta_g}"
        )));
    }
    if !(eps_count >= 0.0 && eps_count.is_finite()) {
        return Err(AccountantError::Domain(format!(
            "eps_count must be non-negative, got {eps_count}"
        )));
    }
    let counter = if eps_count > 0.0 {
        pure_dp_curve(eps_count, grid)?
    } else {
        RdpCurve::zero(grid)
    };
    block_budget_less(eps_g, delta_g, grid, &counter)
}

/// ε^G − ln(1/δ^G)/(α−1) − `deduction`(α).
pub fn block_budget_less(
    eps_g: f64,
    delta_g: f64,
    grid: &AlphaGrid,
    deduction: &RdpCurve,
) -> Result<RdpCurve, AccountantError> {
    if deduction.grid() != grid {
        return Err(AccountantError::GridMismatch);
    }
    let log_inv_delta = (1.0 / delta_g).ln();
    let base = RdpCurve::from_fn(grid, |a| {
        if a.is_infinite() {
            eps_g
        } else {
            eps_g - log_inv_delta / (a - 1.0)
        }
    });
    Ok(base.zip_with(deduction, |b, d| b - d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: &[f64]) -> AlphaGrid {
        AlphaGrid::new(v.to_vec()).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(AlphaGrid::new(vec![]).is_err());
        assert!(AlphaGrid::new(vec![1.0, 2.0]).is_err());
        assert!(AlphaGrid::new(vec![3.0, 2.0]).is_err());
        assert!(AlphaGrid::new(vec![2.0, 2.0]).is_err());
        assert!(AlphaGrid::new(vec![1.5, f64::INFINITY]).is_ok());
        assert!(AlphaGrid::extended().has_infinity());
        assert!(!AlphaGrid::short().has_infinity());
    }

    #[test]
    fn gaussian_values() {
        let g = grid(&[2.0, f64::INFINITY]);
        let c = gaussian_curve(1.0, &g).unwrap();
        assert_eq!(c.eps()[0], 1.0);
        assert_eq!(c.eps()[1], f64::INFINITY);
        assert!(gaussian_curve(0.0, &g).is_err());
        assert!(gaussian_curve(-1.0, &g).is_err());
    }

    #[test]
    fn two_sqrt2_gaussians_equal_unit_gaussian() {
        let g = AlphaGrid::extended();
        let c = gaussian_curve(2f64.sqrt(), &g).unwrap();
        let composed = compose(&g, &[c.clone(), c]).unwrap();
        let unit = gaussian_curve(1.0, &g).unwrap();
        for (a, b) in composed.eps().iter().zip(unit.eps()) {
            if b.is_finite() {
                assert!((a - b).abs() <= 1e-12 * b.abs());
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn laplace_unit_at_order_two() {
        let c = laplace_curve(1.0, &grid(&[2.0])).unwrap();
        let expected = ((2.0 / 3.0) * 1f64.exp() + (1.0 / 3.0) * (-2f64).exp()).ln();
        assert!((c.eps()[0] - expected).abs() < 1e-15);
        assert!((c.eps()[0] - 0.619_124).abs() < 1e-6);
    }

    /// Rényi divergence of Laplace(0, 1) from Laplace(1, 1) by Simpson's rule,
    /// split at the kinks of the densities.
    fn laplace_divergence_by_quadrature(alpha: f64) -> f64 {
        let p = |x: f64| 0.5 * (-x.abs()).exp();
        let q = |x: f64| 0.5 * (-(x - 1.0).abs()).exp();
        let f = |x: f64| p(x).powf(alpha) * q(x).powf(1.0 - alpha);
        let simpson = |a: f64, b: f64, n: usize| {
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * f(a + h * i as f64);
            }
            s * h / 3.0
        };
        let integral = simpson(-60.0, 0.0, 200_000) + simpson(0.0, 1.0, 2_000) + simpson(1.0, 60.0, 200_000);
        integral.ln() / (alpha - 1.0)
    }

    #[test]
    fn laplace_matches_quadrature_oracle() {
        let g = grid(&[1.5, 2.0, 3.0, 8.0]);
        let c = laplace_curve(1.0, &g).unwrap();
        for (&a, &e) in g.orders().iter().zip(c.eps()) {
            let oracle = laplace_divergence_by_quadrature(a);
            assert!((e - oracle).abs() < 1e-9, "alpha {a}: {e} vs {oracle}");
        }
    }

    #[test]
    fn laplace_vanishes_with_epsilon() {
        let c = laplace_curve(1e-9, &AlphaGrid::extended()).unwrap();
        for (&a, &e) in c.grid().orders().iter().zip(c.eps()) {
            if a.is_finite() {
                assert!(e < 1e-12, "alpha {a}: {e}");
            }
        }
    }

    #[test]
    fn laplace_large_alpha_does_not_overflow() {
        let c = laplace_curve(50.0, &grid(&[64.0, 1e6])).unwrap();
        assert!(c.eps().iter().all(|e| e.is_finite() && *e <= 50.0));
    }

    #[test]
    fn pure_dp_values() {
        let g = grid(&[1.5, 4.0, f64::INFINITY]);
        let c = pure_dp_curve(0.1, &g).unwrap();
        assert!((c.eps()[1] - 0.08).abs() < 1e-15);
        assert_eq!(c.eps()[2], 0.1);
        let c = pure_dp_curve(1.0, &g).unwrap();
        assert_eq!(c.eps()[0], 3.0);
        assert!(pure_dp_curve(0.0, &g).is_err());
    }

    #[test]
    fn compose_edge_cases() {
        let g = AlphaGrid::extended();
        assert_eq!(compose(&g, &[]).unwrap(), RdpCurve::zero(&g));
        let c = laplace_curve(0.3, &g).unwrap();
        assert_eq!(compose(&g, std::slice::from_ref(&c)).unwrap(), c);
        let other = laplace_curve(0.3, &AlphaGrid::short()).unwrap();
        assert_eq!(compose(&g, &[c, other]), Err(AccountantError::GridMismatch));
    }

    #[test]
    fn four_sigma2_gaussians_equal_sigma1() {
        let g = AlphaGrid::extended();
        let c = gaussian_curve(2.0, &g).unwrap();
        let composed = compose(&g, &vec![c; 4]).unwrap();
        assert_eq!(composed, gaussian_curve(1.0, &g).unwrap());
    }

    #[test]
    fn translate_unit_gaussian() {
        let c = gaussian_curve(1.0, &AlphaGrid::extended()).unwrap();
        let (dp, alpha) = rdp_to_dp(&c, 1e-7).unwrap();
        // grid evaluation of a/2 + ln(1e7)/(a-1): minimum at a = 6
        let expected = 3.0 + (1e7f64).ln() / 5.0;
        assert_eq!(alpha, 6.0);
        assert!((dp.epsilon - expected).abs() < 1e-12);
        assert!((dp.epsilon - 6.224).abs() < 1e-3);
        // continuous optimum is a lower bound
        assert!(dp.epsilon >= 6.178);
    }

    #[test]
    fn translate_pure_dp_uses_infinity_order() {
        let c = pure_dp_curve(0.5, &AlphaGrid::extended()).unwrap();
        let (dp, alpha) = rdp_to_dp(&c, 1e-7).unwrap();
        assert!(dp.epsilon <= 0.5);
        assert_eq!(alpha, f64::INFINITY);
    }

    #[test]
    fn translate_zero_curve_delta_one() {
        let (dp, alpha) = rdp_to_dp(&RdpCurve::zero(&AlphaGrid::extended()), 1.0).unwrap();
        assert_eq!(dp.epsilon, 0.0);
        assert_eq!(alpha, 1.5);
    }

    #[test]
    fn translate_rejects_bad_delta() {
        let c = RdpCurve::zero(&AlphaGrid::short());
        assert!(rdp_to_dp(&c, 0.0).is_err());
        assert!(rdp_to_dp(&c, 1.5).is_err());
    }

    #[test]
    fn translate_ties_prefer_smaller_order() {
        // ε(α) + 1/(α−1) with δ = 1/e: 2 + 1 = 3 at α=2, 2.5 + 0.5 = 3 at α=3
        let g = grid(&[2.0, 3.0]);
        let c = RdpCurve::new(g, vec![2.0, 2.5]).unwrap();
        let (_, alpha) = rdp_to_dp(&c, (-1f64).exp()).unwrap();
        assert_eq!(alpha, 2.0);
    }

    #[test]
    fn block_initial_curve_values() {
        let g = grid(&[1.5, 4.0, 6.0, 1e12, f64::INFINITY]);
        let c = block_initial_curve(10.0, 1e-7, &g, 0.1).unwrap();
        let ln = (1e7f64).ln();
        assert!((c.eps()[1] - (10.0 - ln / 3.0 - 0.08)).abs() < 1e-12);
        assert!((c.eps()[1] - 4.5473).abs() < 1e-4);
        assert!((c.eps()[4] - 9.9).abs() < 1e-12);
        let c0 = block_initial_curve(10.0, 1e-7, &g, 0.0).unwrap();
        assert!(c0.eps()[0] < 0.0);
        assert!((c0.eps()[0] - (10.0 - 32.236)).abs() < 1e-3);
        assert!((c0.eps()[2] - 6.776).abs() < 1e-3);
        assert!((c0.eps()[3] - 10.0).abs() < 1e-9);
        assert!(block_initial_curve(10.0, 1.0, &g, 0.0).is_err());
    }

    #[test]
    fn curve_json_uses_inf_sentinel() {
        let c = gaussian_curve(1.0, &grid(&[2.0, f64::INFINITY])).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(s, r#"{"orders":[2.0,"inf"],"eps":[1.0,"inf"]}"#);
        let back: RdpCurve = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<RdpCurve>(r#"{"orders":[2.0],"eps":[1.0,2.0]}"#).is_err());
    }
}
