//! Named constants of the expansion and filtering estimates, with checkable invariants.

use serde::{Deserialize, Serialize};

/// A failed inequality among the constants.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub group: &'static str,
    pub detail: String,
}

/// Cut lengths `l_k` for the staged pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CutSchedule {
    /// `l_k = scale·(4K″)⁻¹ e^{−7p₀C₀′ − (11p₀kC₀′η + l + p₀C₀′)}`, where `e^{−l}` is the
    /// shortest seed curve length and `K″ = K₁(p₀; λ̄)(K′+1)e^{8p₀C₀′}`.
    Theoretical { scale: f64, log_min_length: f64, k_prime: f64 },
    /// The same length at every stage.
    Constant { length: f64 },
    /// Explicit `l_1, …, l_m`.
    Explicit { lengths: Vec<f64> },
}

/// Radii `ρ(m)` at which stage `m` of a trace is measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RhoSchedule {
    /// `ρ(m) = ρ·e^{−13p₀mC₀′η}`.
    Theoretical { rho: f64 },
    /// `ρ(m) = ρ₀·2^{−m}`.
    Dyadic { rho0: f64 },
}

/// Constants shared by the estimators, the filters and the pipeline.
///
/// `λ = χ/δ`, `λ̄ = χ̄/δ` and `λ̂ = min{λ̄/2, 1}` are derived. When `chi` is absent it
/// defaults to `δC₁/(2N)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constants {
    pub c0_prime: f64,
    pub c0: f64,
    pub eps0: f64,
    pub c1: f64,
    pub n_uef: usize,
    pub delta: f64,
    #[serde(default)]
    pub chi: Option<f64>,
    pub chi_bar: f64,
    pub eta: f64,
    pub p0: usize,
    pub c: f64,
    #[serde(default)]
    pub beta1: Option<f64>,
    #[serde(default)]
    pub k_seed: f64,
    #[serde(default)]
    pub l_seed: f64,
    pub cut: CutSchedule,
    pub rho: RhoSchedule,
}

/// `C₂ = ln(4e/3)`, the additive constant of the moment-decay bound.
pub fn c2_markov() -> f64 {
    (4.0 * std::f64::consts::E / 3.0).ln()
}

/// Comparison constant `C₄ = 4N₀²(1089 + 8712(1 + ln 2))` with `N₀ = 19`.
pub fn c4_comparison() -> f64 {
    let n0: f64 = 19.0;
    4.0 * n0 * n0 * (1089.0 + 8712.0 * (1.0 + std::f64::consts::LN_2))
}

/// `ln(e^x − 1)` for `x > 0`, stable for large `x`.
fn ln_expm1(x: f64) -> f64 {
    if x > 30.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// `ln(1 − e^{−x})` for `x > 0`.
fn ln_one_minus_exp_neg(x: f64) -> f64 {
    (-(-x).exp_m1()).ln()
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `ln K₁(p₀; c)`, the curvature-growth constant, evaluated in log space.
pub fn ln_k1(p0: usize, c: f64, c0_prime: f64) -> f64 {
    let (p, cc) = (p0 as f64, c0_prime);
    let d5 = ln_expm1(5.0 * cc);
    let t1 = 3.0 * cc + 10.0 * p * cc - ln_expm1(5.0 * p * cc) - d5;
    let t3 = 3.0 * cc + 5.0 * p * cc - ln_one_minus_exp_neg(c * p) - d5;
    let ln_k1_prime = log_sum_exp(&[t1, 0.0, t3]);
    log_sum_exp(&[6.0 * p * cc + ln_k1_prime, 3.0 * cc + ln_expm1(5.0 * p * cc) - d5])
}

/// `ln K₂(p₀; c)`, the log-Lipschitz growth constant, evaluated in log space.
pub fn ln_k2(p0: usize, c: f64, c0_prime: f64) -> f64 {
    let (p, cc) = (p0 as f64, c0_prime);
    let lk1 = ln_k1(p0, c, c0_prime);
    let ln_k2_prime = (2.0 * p).ln() + lk1 + (2.0 + p) * cc;
    let inner = log_sum_exp(&[4.0 * p * cc - ln_expm1(2.0 * p * cc), c * p - ln_one_minus_exp_neg(c * p / 2.0)]);
    let ln_k2_pp = log_sum_exp(&[0.0, ln_k2_prime + inner]);
    log_sum_exp(&[p * cc + ln_k2_pp, (2.0 * p).ln() + (3.0 + 2.0 * p) * cc + lk1])
}

impl Constants {
    pub fn chi(&self) -> f64 {
        self.chi.unwrap_or(self.delta * self.c1 / (2.0 * self.n_uef as f64))
    }

    pub fn lambda(&self) -> f64 {
        self.chi() / self.delta
    }

    pub fn lambda_bar(&self) -> f64 {
        self.chi_bar / self.delta
    }

    pub fn lambda_hat(&self) -> f64 {
        (self.lambda_bar() / 2.0).min(1.0)
    }

    /// Transversality threshold `5e^{C₀ − λ̂n}`.
    pub fn transversality_threshold(&self, n: usize) -> f64 {
        5.0 * (self.c0 - self.lambda_hat() * n as f64).exp()
    }

    /// Moment-decay hypothesis on `δ`.
    pub fn check_moment_decay(&self) -> Vec<Violation> {
        let n = self.n_uef as f64;
        let upper =
            (1.0 / (n * self.c0_prime)).min(1.0 / (2.0 * self.c1)).min(self.c1 / (n * self.c0_prime).powi(2) / 2.0);
        let mut v = Vec::new();
        if !(self.delta > 0.0 && self.delta < upper) {
            v.push(Violation { group: "moment_decay", detail: format!("delta = {} not in (0, {upper})", self.delta) });
        }
        v
    }

    /// Range of `χ̄` and the size restriction on `ε₀`.
    pub fn check_rates(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let upper = self.chi().min(self.delta * self.c0_prime / 2.0);
        if !(self.chi_bar > 0.0 && self.chi_bar < upper) {
            v.push(Violation { group: "rates", detail: format!("chi_bar = {} not in (0, {upper})", self.chi_bar) });
        }
        let mut eps_upper =
            self.c0.min(self.c0_prime).min(self.chi_bar / (2.0 * self.delta)).min(self.lambda_bar() / 8.0);
        if let Some(b) = self.beta1 {
            eps_upper = eps_upper.min(self.lambda_hat() * b / 7.0);
        }
        if !(self.eps0 > 0.0 && self.eps0 < eps_upper) {
            v.push(Violation { group: "rates", detail: format!("eps0 = {} not in (0, {eps_upper})", self.eps0) });
        }
        v
    }

    /// `ε₀ < c/2 < C₀′/2` and `C₀/(C₀′p₀) < η < c/(2c + k·C₀′)`; `k = 6` for curvature
    /// growth and `k = 16` for density growth.
    fn check_growth(&self, group: &'static str, k: f64) -> Vec<Violation> {
        let mut v = Vec::new();
        if !(self.eps0 < self.c / 2.0 && self.c / 2.0 < self.c0_prime / 2.0) {
            v.push(Violation {
                group,
                detail: format!("need eps0 < c/2 < C0'/2 (eps0={}, c={}, C0'={})", self.eps0, self.c, self.c0_prime),
            });
        }
        let lo = self.c0 / (self.c0_prime * self.p0 as f64);
        let hi = self.c / (2.0 * self.c + k * self.c0_prime);
        if !(lo < self.eta && self.eta < hi) {
            v.push(Violation { group, detail: format!("eta = {} not in ({lo}, {hi})", self.eta) });
        }
        v
    }

    pub fn check_curvature_growth(&self) -> Vec<Violation> {
        self.check_growth("curvature_growth", 6.0)
    }

    pub fn check_density_growth(&self) -> Vec<Violation> {
        self.check_growth("density_growth", 16.0)
    }

    /// Restrictions on `η` used by the staged pipeline.
    pub fn check_pipeline(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let lam = self.lambda();
        let lb = self.lambda_bar();
        let lh = self.lambda_hat();
        let mut bound = (1.0f64 / 13.0).min(lb / (13.0 * self.c0_prime));
        if let Some(b) = self.beta1 {
            bound = bound
                .min((lam - lb) / b)
                .min(1.0 / b)
                .min(lh * b / 112.0)
                .min(lh * b / (3328.0 * self.c0_prime + 2.0 * lh * b));
        }
        if !(self.eta > 0.0 && self.eta < bound) {
            v.push(Violation { group: "pipeline", detail: format!("eta = {} not in (0, {bound})", self.eta) });
        }
        if 8.0 * self.eps0 >= lb {
            v.push(Violation { group: "pipeline", detail: format!("need 8 eps0 < lambda_bar = {lb}") });
        }
        v
    }

    /// Every check.
    pub fn violations(&self) -> Vec<Violation> {
        let mut v = self.check_moment_decay();
        v.extend(self.check_rates());
        v.extend(self.check_curvature_growth());
        v.extend(self.check_density_growth());
        v.extend(self.check_pipeline());
        v
    }

    /// Cut length of stage `k` (1-based).
    pub fn cut_length(&self, k: usize) -> f64 {
        match &self.cut {
            CutSchedule::Constant { length } => *length,
            CutSchedule::Explicit { lengths } => lengths[(k - 1).min(lengths.len() - 1)],
            CutSchedule::Theoretical { scale, log_min_length, k_prime } => {
                let (p, cc) = (self.p0 as f64, self.c0_prime);
                let ln_kpp = ln_k1(self.p0, self.lambda_bar(), cc) + (k_prime + 1.0).ln() + 8.0 * p * cc;
                let expo = -7.0 * p * cc - (11.0 * p * k as f64 * cc * self.eta + log_min_length + p * cc);
                scale * (expo - ln_kpp - 4f64.ln()).exp()
            }
        }
    }

    /// Radius for trace stage `m`.
    pub fn rho_at(&self, m: usize) -> f64 {
        match self.rho {
            RhoSchedule::Theoretical { rho } => rho * (-13.0 * (self.p0 * m) as f64 * self.c0_prime * self.eta).exp(),
            RhoSchedule::Dyadic { rho0 } => rho0 * 0.5f64.powi(m as i32),
        }
    }

    /// Desk-scale defaults for the perturbed two-letter system.
    pub fn desk_default() -> Self {
        Constants {
            c0_prime: 0.6,
            c0: 0.05,
            eps0: 0.001,
            c1: 0.3,
            n_uef: 8,
            delta: 0.1,
            chi: None,
            chi_bar: 0.001,
            eta: 0.34,
            p0: 10,
            c: 0.1,
            beta1: None,
            k_seed: 0.0,
            l_seed: 0.0,
            cut: CutSchedule::Constant { length: 0.05 },
            rho: RhoSchedule::Dyadic { rho0: 0.04 },
        }
    }
}
