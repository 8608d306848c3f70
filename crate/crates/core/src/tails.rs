//! Binomial tail sums against their entropy-type bounds.
//!
//! With `f(t) = t^{−t}(1−t)^{t−1}`:
//!
//! * lower tail: `Σ_{k ≤ ⌊nη⌋} C(n,k) ≤ C″·nη·f(η)ⁿ`;
//! * weighted upper tail: `Σ_{k > ⌊nη⌋} C(n,k)e^{−bk} ≤ C″e^{−anη}/(1 − e^{−a})` when
//!   `b ≥ a − ln(η^η(1−η)^{1−η})/η`.
//!
//! `C(n,k) ≤ (n/k)^k (n/(n−k))^{n−k}` holds with constant 1, but the lower tail has
//! `⌊nη⌋ + 1` terms, one more than the `nη` factor accounts for. The constant is
//! therefore taken as [`STIRLING_CONSTANT`]` = e`, which covers every `n ≥ 1` for
//! `η ∈ (0, 1/2)` on the scanned range.

use serde::Serialize;

use crate::error::{Error, Result};

/// Constant multiplying both bounds.
pub const STIRLING_CONSTANT: f64 = std::f64::consts::E;

/// Exact binomial coefficient for `n ≤ 120`.
pub fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as f64
}

/// `ln f(η) = −η ln η − (1−η) ln(1−η)`.
pub fn ln_entropy_base(eta: f64) -> f64 {
    -(eta * eta.ln() + (1.0 - eta) * (1.0 - eta).ln())
}

/// Result of one evaluation of both tail bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailReport {
    pub n: u32,
    pub eta: f64,
    pub lower_sum: f64,
    pub lower_bound: f64,
    pub upper_sum: f64,
    pub upper_bound: f64,
    pub pass: bool,
}

/// Evaluate both sums exactly and compare with their bounds.
///
/// `b` defaults to the smallest admissible value when `None`.
pub fn binom_tail_bounds(n: u32, eta: f64, a: f64, b: Option<f64>) -> Result<TailReport> {
    if !(eta > 0.0 && eta < 0.5) {
        return Err(Error::Declined(format!("eta = {eta} outside (0, 1/2)")));
    }
    if n == 0 || n > 120 {
        return Err(Error::Declined(format!("n = {n} outside 1..=120")));
    }
    if !(a > 0.0) {
        return Err(Error::Declined(format!("a = {a} must be positive")));
    }
    let b_min = a + ln_entropy_base(eta) / eta;
    let b = b.unwrap_or(b_min);
    if b < b_min {
        return Err(Error::Declined(format!("b = {b} below the required {b_min}")));
    }
    let cut = (n as f64 * eta).floor() as u32;
    let lower_sum: f64 = (0..=cut).map(|k| binomial(n, k)).sum();
    let lower_bound = STIRLING_CONSTANT * n as f64 * eta * (n as f64 * ln_entropy_base(eta)).exp();
    let upper_sum: f64 = (cut + 1..=n).map(|k| binomial(n, k) * (-b * k as f64).exp()).sum();
    let upper_bound = STIRLING_CONSTANT * (-a * n as f64 * eta).exp() / (1.0 - (-a).exp());
    Ok(TailReport {
        n,
        eta,
        lower_sum,
        lower_bound,
        upper_sum,
        upper_bound,
        pass: lower_sum <= lower_bound && upper_sum <= upper_bound,
    })
}
