//! Finite-time hyperbolicity of the derivative cocycle: singular data, pulled-back
//! directions, expansion certificates, moment decay, Jacobian-range statistics, angle
//! tails, transversality and distortion probes.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{word_derivative, word_preimage, Constants, Diffeo, System, Word, DEFAULT_WORD_CAP};
use crate::error::{Error, Result};
use crate::linalg::{Mat2, Vec2};
use crate::rng::{stream_rng, Rng};
use crate::stats::{bootstrap_ci, fit_line, Estimate, LineFit, BOOTSTRAP_RESAMPLES};
use crate::torus::{dist, line_angle, ProjectiveDirection, TorusPoint};

/// Singular values closer than this relative gap leave the splitting undefined.
pub const SPLIT_TOL: f64 = 1e-9;

/// Width of the Monte Carlo confidence band, in standard errors.
pub const CI_SIGMAS: f64 = 3.0;

/// Most expanded and most contracted directions of a derivative product at its base point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SingularData {
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub eu: ProjectiveDirection,
    pub es: ProjectiveDirection,
    pub defined: bool,
}

impl SingularData {
    /// From a product matrix and an independently accumulated `|det|`.
    pub fn of_matrix(m: &Mat2, abs_det: f64) -> Self {
        let svd = m.svd(Some(abs_det));
        SingularData {
            lambda_u: svd.s1,
            lambda_s: svd.s2,
            eu: ProjectiveDirection::new(svd.right_u).expect("unit"),
            es: ProjectiveDirection::new(svd.right_s).expect("unit"),
            defined: svd.s1 > svd.s2 * (1.0 + SPLIT_TOL),
        }
    }
}

/// Singular data of `Df^n(x)` for a nonempty word.
pub fn singular_data(table: &[Arc<Diffeo>], word: &Word, x: &TorusPoint) -> Result<SingularData> {
    if word.is_empty() {
        return Err(Error::InvalidInput("singular data needs a nonempty word".into()));
    }
    let (m, lj, _) = word_derivative(table, &word.indices, x);
    Ok(SingularData::of_matrix(&m, lj.exp()))
}

/// Images at `x` of the singular directions of the word taken at `f^{−n}(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PulledDirections {
    pub vu: ProjectiveDirection,
    pub vs: ProjectiveDirection,
}

/// `V^u = Df^n E^u` and `V^s = Df^n E^s` with both taken at the `n`-step preimage of `x`.
///
/// `V^u` is the direction most contracted by `(Df^n)⁻¹`; these are the left singular
/// vectors of the product, which avoids pushing the tiny stable vector forward.
pub fn pulled_directions(table: &[Arc<Diffeo>], word: &Word, x: &TorusPoint) -> Result<PulledDirections> {
    if word.is_empty() {
        return Err(Error::Undefined("empty word has equal singular values".into()));
    }
    let y = word_preimage(table, &word.indices, x)?;
    let (m, lj, _) = word_derivative(table, &word.indices, &y);
    let svd = m.svd(Some(lj.exp()));
    if svd.s1 <= svd.s2 * (1.0 + SPLIT_TOL) {
        return Err(Error::Undefined(format!("singular values {} and {} coincide", svd.s1, svd.s2)));
    }
    Ok(PulledDirections {
        vu: ProjectiveDirection::new(svd.left_u).expect("unit"),
        vs: ProjectiveDirection::new(svd.left_s).expect("unit"),
    })
}

/// A cone of tangent lines `{θ : |θ − center| ≤ half_width}` (angles modulo π).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cone {
    pub center: f64,
    pub half_width: f64,
}

impl Cone {
    pub fn contains(&self, v: Vec2) -> bool {
        line_angle(v, Vec2::from_angle(self.center)) <= self.half_width + 1e-15
    }
}

/// Sampled unit directions: `count` equally spaced lines, or spanning the cone inclusive.
pub fn directions(count: usize, cone: Option<&Cone>) -> Vec<Vec2> {
    match cone {
        None => (0..count).map(|j| Vec2::from_angle(PI * j as f64 / count as f64)).collect(),
        Some(c) if count == 1 => vec![Vec2::from_angle(c.center)],
        Some(c) => (0..count)
            .map(|j| Vec2::from_angle(c.center - c.half_width + 2.0 * c.half_width * j as f64 / (count - 1) as f64))
            .collect(),
    }
}

/// Regular `n × n` grid of base points.
pub fn point_grid(n: usize) -> Vec<TorusPoint> {
    let h = 1.0 / n as f64;
    (0..n * n).map(|k| TorusPoint::from_lift(Vec2::new((k / n) as f64 * h, (k % n) as f64 * h))).collect()
}

/// How averages over words are computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WordAverage {
    /// Enumerate when `|support|^N ≤ cap`, otherwise sample.
    Auto {
        cap: usize,
        samples: usize,
        seed: u64,
    },
    Exact,
    MonteCarlo {
        samples: usize,
        seed: u64,
    },
}

impl Default for WordAverage {
    fn default() -> Self {
        WordAverage::Auto { cap: 1 << 20, samples: 4096, seed: 0 }
    }
}

/// Settings for [`certify_uef`] and [`certify_uep`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub n: usize,
    pub x_grid: usize,
    pub v_grid: usize,
    #[serde(default)]
    pub cone: Option<Cone>,
    #[serde(default)]
    pub average: WordAverage,
}

impl CertifyConfig {
    pub fn new(n: usize) -> Self {
        CertifyConfig { n, x_grid: 48, v_grid: 64, cone: None, average: WordAverage::default() }
    }
}

/// Outcome of an expansion certificate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertificateReport {
    pub past: bool,
    pub n: usize,
    /// Smallest grid value of the averaged log-expansion.
    pub bound: f64,
    /// `bound` for exact enumeration; smallest lower confidence limit for sampling.
    pub bound_lower: f64,
    pub witness_x: TorusPoint,
    pub witness_angle: f64,
    pub exact: bool,
    pub words: usize,
    pub pass: bool,
    /// Per grid point and direction: `(x index, v index, value)`.
    #[serde(skip)]
    pub table: Vec<(usize, usize, f64)>,
}

/// Averages `E ln‖Df^N(x)v‖` over the grid and reports the minimum.
pub fn certify_uef(sys: &System, cfg: &CertifyConfig) -> Result<CertificateReport> {
    certify(sys, cfg, false)
}

/// Averages `E ln‖(Df^N(f^{−N}x))⁻¹v‖` over the grid and reports the minimum.
pub fn certify_uep(sys: &System, cfg: &CertifyConfig) -> Result<CertificateReport> {
    if cfg.cone.is_some() {
        return Err(Error::InvalidInput("the past certificate ranges over all unit vectors".into()));
    }
    certify(sys, cfg, true)
}

fn quad_form(m: &Mat2) -> (f64, f64, f64) {
    (m.a * m.a + m.c * m.c, m.a * m.b + m.c * m.d, m.b * m.b + m.d * m.d)
}

fn log_norms(m: &Mat2, dirs: &[Vec2], out: &mut [f64], weight: f64) {
    let (p, q, r) = quad_form(m);
    for (acc, v) in out.iter_mut().zip(dirs) {
        *acc += weight * 0.5 * (p * v.x * v.x + 2.0 * q * v.x * v.y + r * v.y * v.y).ln();
    }
}

/// Depth-first enumeration of all words from `x`, sharing prefixes.
///
/// `past` follows the backward chain `Q ← Df_i(f_i⁻¹ y)⁻¹ Q`, `y ← f_i⁻¹ y`.
fn enumerate_products(
    sys: &System,
    depth: usize,
    past: bool,
    x: TorusPoint,
    prod: Mat2,
    weight: f64,
    leaf: &mut dyn FnMut(&Mat2, f64),
) -> Result<()> {
    if depth == 0 {
        leaf(&prod, weight);
        return Ok(());
    }
    for &(i, p) in sys.measure.atoms() {
        let f = &sys.table[i];
        let (next, step) = if past {
            let y = f.inverse_eval(&x)?;
            let d = f.derivative(y.lift());
            (y, d.inverse().ok_or_else(|| Error::Undefined("singular derivative".into()))? * prod)
        } else {
            (f.eval(&x), f.derivative(x.lift()) * prod)
        };
        enumerate_products(sys, depth - 1, past, next, step, weight * p, leaf)?;
    }
    Ok(())
}

/// Product of one word at `x`, forward or along the backward chain (letters drawn from
/// the end of the word first).
fn word_product(sys: &System, word: &[usize], past: bool, x: &TorusPoint) -> Result<Mat2> {
    if !past {
        return Ok(word_derivative(&sys.table, word, x).0);
    }
    let mut y = *x;
    let mut q = Mat2::IDENTITY;
    for &i in word.iter().rev() {
        let f = &sys.table[i];
        y = f.inverse_eval(&y)?;
        q = f.derivative(y.lift()).inverse().ok_or_else(|| Error::Undefined("singular derivative".into()))? * q;
    }
    Ok(q)
}

fn use_exact(sys: &System, n: usize, avg: &WordAverage) -> Result<bool> {
    let count = (sys.measure.support_size() as f64).powi(n as i32);
    match avg {
        WordAverage::Exact if count > DEFAULT_WORD_CAP as f64 => {
            Err(Error::EnumerationCap { count, cap: DEFAULT_WORD_CAP })
        }
        WordAverage::Exact => Ok(true),
        WordAverage::Auto { cap, .. } => Ok(count <= *cap as f64),
        WordAverage::MonteCarlo { .. } => Ok(false),
    }
}

fn sample_words(sys: &System, n: usize, samples: usize, seed: u64) -> Vec<Word> {
    let mut rng = stream_rng(seed, 0);
    let sampler = sys.measure.sampler();
    (0..samples).map(|_| sampler.sample(n, &mut rng)).collect()
}

fn certify(sys: &System, cfg: &CertifyConfig, past: bool) -> Result<CertificateReport> {
    if cfg.x_grid == 0 || cfg.v_grid == 0 {
        return Err(Error::InvalidInput("grids must be nonempty".into()));
    }
    let dirs = directions(cfg.v_grid, cfg.cone.as_ref());
    let grid = point_grid(cfg.x_grid);
    let exact = use_exact(sys, cfg.n, &cfg.average)?;
    // The derivative of a linear system does not depend on the base point.
    let points: &[TorusPoint] = if sys.is_linear() { &grid[..1] } else { &grid };
    let per_point: Vec<(Vec<f64>, Vec<f64>)> = if exact {
        points
            .par_iter()
            .map(|x| {
                let mut acc = vec![0.0; dirs.len()];
                enumerate_products(sys, cfg.n, past, *x, Mat2::IDENTITY, 1.0, &mut |m, w| {
                    log_norms(m, &dirs, &mut acc, w)
                })?;
                Ok((acc.clone(), acc))
            })
            .collect::<Result<_>>()?
    } else {
        let (samples, seed) = match cfg.average {
            WordAverage::Auto { samples, seed, .. } | WordAverage::MonteCarlo { samples, seed } => (samples, seed),
            WordAverage::Exact => unreachable!("exact handled above"),
        };
        let words = sample_words(sys, cfg.n, samples, seed);
        points
            .par_iter()
            .map(|x| {
                let mut sum = vec![0.0; dirs.len()];
                let mut sq = vec![0.0; dirs.len()];
                let mut one = vec![0.0; dirs.len()];
                for w in &words {
                    let m = word_product(sys, &w.indices, past, x)?;
                    one.iter_mut().for_each(|v| *v = 0.0);
                    log_norms(&m, &dirs, &mut one, 1.0);
                    for k in 0..dirs.len() {
                        sum[k] += one[k];
                        sq[k] += one[k] * one[k];
                    }
                }
                let n = words.len() as f64;
                let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
                let lower = mean
                    .iter()
                    .zip(&sq)
                    .map(|(m, s)| {
                        let var = ((s / n - m * m) * n / (n - 1.0).max(1.0)).max(0.0);
                        m - CI_SIGMAS * (var / n).sqrt()
                    })
                    .collect();
                Ok((mean, lower))
            })
            .collect::<Result<_>>()?
    };
    let mut table = Vec::with_capacity(per_point.len() * dirs.len());
    let (mut bound, mut bound_lower, mut wx, mut wv) = (f64::INFINITY, f64::INFINITY, 0, 0);
    for (ix, (mean, lower)) in per_point.iter().enumerate() {
        for (iv, (&m, &l)) in mean.iter().zip(lower).enumerate() {
            table.push((ix, iv, m));
            if m < bound {
                bound = m;
                wx = ix;
                wv = iv;
            }
            bound_lower = bound_lower.min(l);
        }
    }
    let words = if exact {
        sys.measure.support_size().pow(cfg.n as u32)
    } else {
        match cfg.average {
            WordAverage::Auto { samples, .. } | WordAverage::MonteCarlo { samples, .. } => samples,
            WordAverage::Exact => 0,
        }
    };
    Ok(CertificateReport {
        past,
        n: cfg.n,
        bound,
        bound_lower,
        witness_x: points[wx],
        witness_angle: dirs[wv].y.atan2(dirs[wv].x),
        exact,
        words,
        pass: bound_lower > 0.0,
        table,
    })
}

/// Exact word average of the certificate integrand at one `(x, v)`.
pub fn expansion_integral(sys: &System, n: usize, past: bool, x: &TorusPoint, v: Vec2) -> Result<f64> {
    let mut acc = [0.0];
    let u = v.normalized().ok_or(Error::ZeroVector)?;
    enumerate_products(sys, n, past, *x, Mat2::IDENTITY, 1.0, &mut |m, w| log_norms(m, &[u], &mut acc, w))?;
    Ok(acc[0])
}

/// Settings for [`moment_decay`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentConfig {
    pub delta: f64,
    pub n_max: usize,
    pub samples: usize,
    pub seed: u64,
    pub past: bool,
}

/// `s_n = E‖·‖^{−δ}` for `n = 1..=n_max` and the fitted decay rate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentSeries {
    pub delta: f64,
    pub s: Vec<f64>,
    pub std_err: Vec<f64>,
    /// `−slope` of `ln s_n` over the tail half.
    pub chi_hat: f64,
    pub chi_ci: Option<(f64, f64)>,
    /// `ln‖·‖` per sampled word and step.
    #[serde(skip)]
    pub log_norms: Vec<Vec<f64>>,
}

/// Markov post-processing at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MarkovTail {
    /// Empirical `P(‖·‖^{−δ} ≥ e^{−C}e^{−nχ̄})`.
    pub tail: f64,
    /// `e^{C}e^{nχ̄}·s_n` from the same samples.
    pub markov_bound: f64,
    pub holds: bool,
}

impl MomentSeries {
    fn fit_window(&self) -> std::ops::Range<usize> {
        let n = self.s.len();
        n / 2..n
    }

    /// Markov's inequality `tail ≤ e^{C}e^{nχ̄}s_n` on the empirical measure.
    pub fn markov_tail(&self, n: usize, c: f64, chi_bar: f64) -> MarkovTail {
        let level = (-c - n as f64 * chi_bar).exp();
        let hits = self.log_norms.iter().filter(|row| (-self.delta * row[n - 1]).exp() >= level).count();
        let tail = hits as f64 / self.log_norms.len() as f64;
        let markov_bound = self.s[n - 1] / level;
        MarkovTail { tail, markov_bound, holds: tail <= markov_bound * (1.0 + 1e-12) }
    }

    /// Steps where `s_n ≤ e^{C₂}e^{−nχ}` fails.
    pub fn bound_violations(&self, c2: f64, chi: f64) -> Vec<usize> {
        (1..=self.s.len()).filter(|&n| self.s[n - 1] > (c2 - n as f64 * chi).exp()).collect()
    }
}

fn decay_fit(s: &[f64], window: std::ops::Range<usize>) -> Option<LineFit> {
    let xs: Vec<f64> = window.clone().map(|k| (k + 1) as f64).collect();
    let ys: Vec<f64> = window.map(|k| s[k].ln()).collect();
    fit_line(&xs, &ys)
}

/// Sample words and record `‖Df^n(x)v‖` (or the past analogue) along every prefix.
pub fn moment_decay(sys: &System, cfg: &MomentConfig, x: &TorusPoint, v: Vec2) -> Result<MomentSeries> {
    if cfg.n_max < 2 || cfg.samples < 2 {
        return Err(Error::InvalidInput("need n_max ≥ 2 and at least two samples".into()));
    }
    let u = v.normalized().ok_or(Error::ZeroVector)?;
    let words = sample_words(sys, cfg.n_max, cfg.samples, cfg.seed);
    let log_norms: Vec<Vec<f64>> =
        words.par_iter().map(|w| prefix_log_norms(sys, &w.indices, cfg.past, x, u)).collect::<Result<_>>()?;
    let moments = |rows: &[&Vec<f64>]| -> Vec<f64> {
        (0..cfg.n_max)
            .map(|k| rows.iter().map(|r| (-cfg.delta * r[k]).exp()).sum::<f64>() / rows.len() as f64)
            .collect()
    };
    let refs: Vec<&Vec<f64>> = log_norms.iter().collect();
    let s = moments(&refs);
    let std_err = (0..cfg.n_max)
        .map(|k| {
            let vals: Vec<f64> = log_norms.iter().map(|r| (-cfg.delta * r[k]).exp()).collect();
            Estimate::from_samples(&vals).std_err
        })
        .collect();
    let window = cfg.n_max / 2..cfg.n_max;
    let chi_hat = decay_fit(&s, window.clone()).map_or(f64::NAN, |f| -f.slope);
    let mut rng = stream_rng(cfg.seed, 1);
    let chi_ci = bootstrap_ci(&refs, BOOTSTRAP_RESAMPLES, 0.95, &mut rng, |rows| {
        decay_fit(&moments(rows), window.clone()).map(|f| -f.slope)
    });
    let series = MomentSeries { delta: cfg.delta, s, std_err, chi_hat, chi_ci, log_norms };
    debug_assert_eq!(series.fit_window(), window);
    Ok(series)
}

fn prefix_log_norms(sys: &System, word: &[usize], past: bool, x: &TorusPoint, u: Vec2) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(word.len());
    let mut y = *x;
    // Track the image vector with a running log-scale to avoid overflow.
    let mut vec = u;
    let mut log_scale = 0.0;
    for &i in word {
        let f = &sys.table[i];
        vec = if past {
            y = f.inverse_eval(&y)?;
            f.derivative(y.lift()).inverse().ok_or_else(|| Error::Undefined("singular derivative".into()))? * vec
        } else {
            let d = f.derivative(y.lift());
            y = f.eval(&y);
            d * vec
        };
        let nrm = vec.norm();
        log_scale += nrm.ln();
        vec = vec.scale(1.0 / nrm);
        out.push(log_scale);
    }
    Ok(out)
}

/// Largest `ε₂` allowed for a given `ε₁` by the nearly-conservative frequency estimate:
/// `−ln ε₂ > 1/ε₁ − ln ε₁ − ((1−ε₁)/ε₁)ln(1−ε₁)`.
pub fn conservative_mass_threshold(eps1: f64) -> f64 {
    let rhs = 1.0 / eps1 - eps1.ln() - (1.0 - eps1) / eps1 * (1.0 - eps1).ln();
    (-rhs).exp()
}

/// Whether `Jac f^n(x) ∈ (e^{−C₀−2nε₀}, e^{C₀+2nε₀})` at every grid point.
pub fn is_nearly_conservative(table: &[Arc<Diffeo>], word: &[usize], grid: &[TorusPoint], c0: f64, eps0: f64) -> bool {
    let bound = c0 + 2.0 * word.len() as f64 * eps0;
    grid.iter().all(|x| word_derivative(table, word, x).1.abs() < bound)
}

/// Fraction of sampled length-`n` words whose Jacobian stays in the nearly-conservative
/// window on an `x_grid²` grid.
pub fn jac_range_freq(
    sys: &System,
    n: usize,
    c0: f64,
    eps0: f64,
    x_grid: usize,
    samples: usize,
    seed: u64,
) -> Estimate {
    let grid = point_grid(x_grid);
    let words = sample_words(sys, n, samples, seed);
    let hits: Vec<f64> = words
        .par_iter()
        .map(|w| if is_nearly_conservative(&sys.table, &w.indices, &grid, c0, eps0) { 1.0 } else { 0.0 })
        .collect();
    Estimate::from_samples(&hits)
}

/// Which direction an angle tail measures against the fixed vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleMode {
    /// `E^s_{ωⁿ}(x)`.
    StableVsV,
    /// `V^u_{−ωⁿ}(x)`.
    PulledUnstableVsV,
}

/// Empirical tail `P(η)` at dyadic `η` with a power-law fit `P ≈ C₃η^{β₁}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AngleTail {
    pub etas: Vec<f64>,
    pub probs: Vec<f64>,
    pub beta_hat: f64,
    pub c3_hat: f64,
    pub beta_ci: Option<(f64, f64)>,
    pub reliable: bool,
    /// Sampled angles; undefined directions are recorded as `−1`.
    #[serde(skip)]
    pub angles: Vec<f64>,
}

fn tail_probs(angles: &[f64], etas: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = angles.to_vec();
    sorted.sort_by(f64::total_cmp);
    etas.iter().map(|&e| sorted.partition_point(|&a| a < e) as f64 / angles.len() as f64).collect()
}

fn tail_fit(etas: &[f64], probs: &[f64], floor: f64) -> Option<LineFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        etas.iter().zip(probs).filter(|(_, &p)| p > floor).map(|(e, p)| (e.ln(), p.ln())).unzip();
    if xs.len() < 3 {
        return None;
    }
    fit_line(&xs, &ys)
}

/// Angle of the chosen direction against `v` for one word; `None` when undefined.
pub fn word_angle(sys: &System, word: &Word, x: &TorusPoint, v: Vec2, mode: AngleMode) -> Result<Option<f64>> {
    match mode {
        AngleMode::StableVsV => {
            let sd = singular_data(&sys.table, word, x)?;
            Ok(sd.defined.then(|| line_angle(sd.es.unit(), v)))
        }
        AngleMode::PulledUnstableVsV => match pulled_directions(&sys.table, word, x) {
            Ok(pd) => Ok(Some(line_angle(pd.vu.unit(), v))),
            Err(Error::Undefined(_)) => Ok(None),
            Err(e) => Err(e),
        },
    }
}

/// Sample `samples` words of length `n` and tabulate the angle tail.
pub fn angle_tail(
    sys: &System,
    n: usize,
    x: &TorusPoint,
    v: Vec2,
    mode: AngleMode,
    samples: usize,
    seed: u64,
) -> Result<AngleTail> {
    let words = sample_words(sys, n, samples, seed);
    let angles: Vec<f64> =
        words.par_iter().map(|w| word_angle(sys, w, x, v, mode).map(|a| a.unwrap_or(-1.0))).collect::<Result<_>>()?;
    let floor_eta = (-(n as f64)).exp().max(1e-15);
    let etas: Vec<f64> = (0..).map(|j| 0.5f64.powi(j)).take_while(|&e| e >= floor_eta).collect();
    let probs = tail_probs(&angles, &etas);
    let floor = 10.0 / samples as f64;
    let fit = tail_fit(&etas, &probs, floor);
    let mut rng = stream_rng(seed, 1);
    let beta_ci = fit.and_then(|_| {
        bootstrap_ci(&angles, BOOTSTRAP_RESAMPLES, 0.95, &mut rng, |a| {
            tail_fit(&etas, &tail_probs(a, &etas), floor).map(|f| f.slope)
        })
    });
    Ok(AngleTail {
        etas,
        probs,
        beta_hat: fit.map_or(f64::NAN, |f| f.slope),
        c3_hat: fit.map_or(f64::NAN, |f| f.intercept.exp()),
        beta_ci,
        reliable: fit.is_some(),
        angles,
    })
}

/// Whether both pulled unstable directions are defined at `z` and at angle at least
/// `5e^{C₀ − λ̂n}`.
pub fn transverse(sys: &System, word1: &Word, word2: &Word, z: &TorusPoint, k: &Constants) -> Result<bool> {
    if word1.len() != word2.len() {
        return Err(Error::InvalidInput(format!("word lengths {} and {} differ", word1.len(), word2.len())));
    }
    let d1 = match pulled_directions(&sys.table, word1, z) {
        Ok(d) => d,
        Err(Error::Undefined(_)) => return Ok(false),
        Err(e) => return Err(e),
    };
    let d2 = match pulled_directions(&sys.table, word2, z) {
        Ok(d) => d,
        Err(Error::Undefined(_)) => return Ok(false),
        Err(e) => return Err(e),
    };
    Ok(line_angle(d1.vu.unit(), d2.vu.unit()) >= k.transversality_threshold(word1.len()))
}

/// Fraction of independent word pairs that are transverse at `z`.
pub fn transverse_fraction(
    sys: &System,
    n: usize,
    z: &TorusPoint,
    k: &Constants,
    pairs: usize,
    seed: u64,
) -> Result<Estimate> {
    let words = sample_words(sys, n, 2 * pairs, seed);
    let hits: Vec<f64> = words
        .par_chunks(2)
        .map(|p| transverse(sys, &p[0], &p[1], z, k).map(|t| if t { 1.0 } else { 0.0 }))
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&hits))
}

/// A measured quantity next to the bound it should respect.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Checked {
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Checked {
    fn at_most(value: f64, bound: f64) -> Self {
        Checked { value, bound, pass: value <= bound }
    }
}

/// Measurements of a distortion probe.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistortionReport {
    /// Worst ratio of `d(f^{n−k}x, f^{n−k}y)` to `2e^{(k−6n)C₀′}` over `k`.
    pub trajectory: Checked,
    pub vector_deviation: Checked,
    pub angle_deviation: Checked,
    /// `∡(E^s(x), E^s(y))` against `½e^{−nC₀′}`; `None` if a splitting is undefined.
    pub stable_gap: Option<Checked>,
    /// `‖Df^n(x)|_v‖·‖Df^n(y)|_{E^s(y)}‖` and its window `[lo, hi]`.
    pub product: Option<(f64, f64, f64, bool)>,
}

/// Distortion measurements for two points whose images stay `e^{−6nC₀′}`-close to the
/// image of `z`.
pub fn distortion_probe(
    sys: &System,
    word: &Word,
    z: &TorusPoint,
    x: &TorusPoint,
    y: &TorusPoint,
    v: Vec2,
    k: &Constants,
) -> Result<DistortionReport> {
    let n = word.len();
    let nf = n as f64;
    let cp = k.c0_prime;
    let radius = (-6.0 * nf * cp).exp();
    let t = &sys.table;
    let fz = word_derivative(t, &word.indices, z).2;
    let (mx, ljx, fx) = word_derivative(t, &word.indices, x);
    let (my, ljy, fy) = word_derivative(t, &word.indices, y);
    if dist(&fx, &fz) > radius || dist(&fy, &fz) > radius {
        return Err(Error::Declined(format!("images leave the ball of radius {radius:e} about f^n(z)")));
    }
    let u = v.normalized().ok_or(Error::ZeroVector)?;
    // k counts steps back from n: compare f^{n−k}x and f^{n−k}y.
    let mut worst: f64 = 0.0;
    let (mut px, mut py) = (*x, *y);
    for step in 0..=n {
        let back = n - step;
        let bound = 2.0 * ((back as f64 - 6.0 * nf) * cp).exp();
        worst = worst.max(dist(&px, &py) / bound);
        if step < n {
            let f = &t[word.indices[step]];
            px = f.eval(&px);
            py = f.eval(&py);
        }
    }
    let tight = (-3.0 * nf * cp).exp();
    let (wx, wy) = (mx * u, my * u);
    let sx = SingularData::of_matrix(&mx, ljx.exp());
    let sy = SingularData::of_matrix(&my, ljy.exp());
    let stable_gap = (sx.defined && sy.defined)
        .then(|| Checked::at_most(line_angle(sx.es.unit(), sy.es.unit()), 0.5 * (-nf * cp).exp()));
    let product = sy.defined.then(|| {
        let val = wx.norm() * sy.lambda_s;
        let lo = (-nf * (2.0 * k.eps0 + k.eta) - k.c0 - 2.0).exp();
        let hi = (2.0 * k.eps0 * nf + k.c0 + 2.0).exp();
        (val, lo, hi, lo <= val && val <= hi)
    });
    Ok(DistortionReport {
        trajectory: Checked::at_most(worst, 1.0),
        vector_deviation: Checked::at_most((wx - wy).norm(), tight),
        angle_deviation: Checked::at_most(line_angle(wx, wy), tight),
        stable_gap,
        product,
    })
}

/// Draw a uniform random unit vector.
pub fn random_unit(rng: &mut Rng) -> Vec2 {
    use rand::Rng as _;
    Vec2::from_angle(rng.gen_range(0.0..PI))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DrivingMeasure, Mode};
    use rand::Rng as _;

    fn pt(x: f64, y: f64) -> TorusPoint {
        TorusPoint::new(x, y).unwrap()
    }

    fn cat() -> System {
        System::builtin("cat").unwrap()
    }

    const GOLDEN: f64 = 1.618_033_988_749_895;

    #[test]
    fn singular_data_of_cat_map() {
        let sd = singular_data(&cat().table, &Word::new(vec![0]), &pt(0.3, 0.1)).unwrap();
        assert!((sd.lambda_u - (3.0 + 5f64.sqrt()) / 2.0).abs() < 1e-12);
        assert!((sd.lambda_s - (3.0 - 5f64.sqrt()) / 2.0).abs() < 1e-12);
        let eig = ProjectiveDirection::new(Vec2::new(GOLDEN, 1.0)).unwrap();
        assert!(line_angle(sd.eu.unit(), eig.unit()) < 1e-12);
        assert!(sd.defined);
        assert!(line_angle(sd.eu.unit(), sd.es.unit()) > PI / 2.0 - 1e-12);
    }

    #[test]
    fn conformal_product_is_undefined() {
        let rot = System::single(Diffeo::linear("R", [[0, -1], [1, 0]]).unwrap());
        let sd = singular_data(&rot.table, &Word::new(vec![0, 0, 0]), &pt(0.2, 0.7)).unwrap();
        assert!(!sd.defined);
        assert!(singular_data(&rot.table, &Word::default(), &pt(0.2, 0.7)).is_err());
    }

    #[test]
    fn singular_values_match_jacobian_and_images() {
        let sys = System::ab_perturbed(0.03).unwrap();
        let mut rng = stream_rng(11, 0);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=20);
            let w = sys.measure.sample_word(n, &mut rng);
            let x = pt(rng.gen(), rng.gen());
            let (m, lj, _) = word_derivative(&sys.table, &w.indices, &x);
            let sd = singular_data(&sys.table, &w, &x).unwrap();
            assert!((sd.lambda_u * sd.lambda_s / lj.exp() - 1.0).abs() < 1e-9);
            assert!(((m * sd.eu.unit()).norm() / sd.lambda_u - 1.0).abs() < 1e-8);
            if sd.lambda_u < 1e6 {
                assert!(((m * sd.es.unit()).norm() / sd.lambda_s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pulled_directions_of_cat_map() {
        let sys = cat();
        let w = Word::new(vec![0; 4]);
        let pd = pulled_directions(&sys.table, &w, &pt(0.4, 0.2)).unwrap();
        assert!(line_angle(pd.vu.unit(), Vec2::new(GOLDEN, 1.0)) < 1e-10);
        let id = System::single(Diffeo::identity());
        assert!(matches!(
            pulled_directions(&id.table, &Word::new(vec![0, 0]), &pt(0.1, 0.1)),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn pulled_unstable_is_most_contracted_by_inverse() {
        let sys = System::ab_perturbed(0.02).unwrap();
        let mut rng = stream_rng(5, 0);
        for _ in 0..20 {
            let w = sys.measure.sample_word(6, &mut rng);
            let x = pt(rng.gen(), rng.gen());
            let pd = pulled_directions(&sys.table, &w, &x).unwrap();
            let y = word_preimage(&sys.table, &w.indices, &x).unwrap();
            let inv = word_derivative(&sys.table, &w.indices, &y).0.inverse().unwrap();
            let at_vu = (inv * pd.vu.unit()).norm();
            for j in 0..360 {
                let d = Vec2::from_angle(PI * j as f64 / 360.0);
                assert!(at_vu <= (inv * d).norm() * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn uef_one_step_witness() {
        let sys = System::ab();
        let v = Vec2::new(1.0, -1.0).scale(0.5f64.sqrt());
        let val = expansion_integral(&sys, 1, false, &pt(0.2, 0.3), v).unwrap();
        assert!((val + 2f64.ln() / 2.0).abs() < 1e-12);
        let mut cfg = CertifyConfig::new(1);
        cfg.x_grid = 4;
        cfg.v_grid = 8;
        let rep = certify_uef(&sys, &cfg).unwrap();
        assert!(rep.exact && !rep.pass);
        assert!((rep.bound + 2f64.ln() / 2.0).abs() < 1e-12);
        let witness = expansion_integral(&sys, 1, false, &rep.witness_x, Vec2::from_angle(rep.witness_angle)).unwrap();
        assert!((witness - rep.bound).abs() < 1e-14);
    }

    #[test]
    fn uef_in_unstable_cone_of_cat_map() {
        let sys = cat();
        let cone = Cone { center: (1.0 / GOLDEN).atan(), half_width: 0.3 };
        let mut cfg = CertifyConfig::new(1);
        cfg.x_grid = 3;
        cfg.v_grid = 33;
        cfg.cone = Some(cone);
        let rep = certify_uef(&sys, &cfg).unwrap();
        let m = sys.table[0].linear_part();
        let scan = directions(2001, Some(&cone)).iter().map(|v| (m * *v).norm().ln()).fold(f64::INFINITY, f64::min);
        assert!(rep.pass && rep.bound >= scan - 1e-12);
    }

    #[test]
    fn uep_of_hyperbolic_map_in_stable_direction() {
        let sys = cat();
        let m = sys.table[0].linear_part();
        let svd = m.svd(None);
        let val = expansion_integral(&sys, 1, true, &pt(0.1, 0.6), svd.left_s).unwrap();
        assert!((val - svd.s1.ln()).abs() < 1e-12);
    }

    #[test]
    fn direction_average_is_nonnegative_for_volume_preserving_maps() {
        let mut rng = stream_rng(9, 0);
        let mats = [[[2, 1], [1, 1]], [[1, 3], [0, 1]], [[3, 2], [4, 3]], [[0, 1], [-1, 0]]];
        for m in mats {
            let sys = System::single(Diffeo::linear("M", m).unwrap());
            let x = pt(rng.gen(), rng.gen());
            let dirs = directions(4096, None);
            let avg = dirs.iter().map(|&v| expansion_integral(&sys, 1, true, &x, v).unwrap()).sum::<f64>() / 4096.0;
            assert!(avg >= -1e-9, "{m:?}: {avg}");
        }
    }

    #[test]
    fn certificates_turn_positive_for_ab() {
        let sys = System::ab();
        let mut cfg = CertifyConfig::new(6);
        cfg.x_grid = 4;
        let f = certify_uef(&sys, &cfg).unwrap();
        let p = certify_uep(&sys, &cfg).unwrap();
        assert!(f.pass && p.pass, "{} {}", f.bound, p.bound);
        // Monte Carlo agrees with enumeration within its band.
        cfg.average = WordAverage::MonteCarlo { samples: 4000, seed: 3 };
        let mc = certify_uef(&sys, &cfg).unwrap();
        assert!(mc.bound_lower <= f.bound + 1e-12 && (mc.bound - f.bound).abs() < 0.1);
    }

    #[test]
    fn certificate_ignores_atom_order() {
        let a = System::ab_perturbed(0.02).unwrap();
        let mut b = a.clone();
        b.measure = DrivingMeasure::new(vec![(1, 0.5), (0, 0.5)]).unwrap();
        let mut cfg = CertifyConfig::new(3);
        cfg.x_grid = 3;
        cfg.v_grid = 6;
        let (ra, rb) = (certify_uef(&a, &cfg).unwrap(), certify_uef(&b, &cfg).unwrap());
        assert!((ra.bound - rb.bound).abs() < 1e-12);
        let (pa, pb) = (certify_uep(&a, &cfg).unwrap(), certify_uep(&b, &cfg).unwrap());
        assert!((pa.bound - pb.bound).abs() < 1e-12);
    }

    #[test]
    fn moment_decay_single_atom_is_exact() {
        let sys = cat();
        let lam = (3.0 + 5f64.sqrt()) / 2.0;
        let cfg = MomentConfig { delta: 0.1, n_max: 10, samples: 4, seed: 0, past: false };
        let s = moment_decay(&sys, &cfg, &pt(0.3, 0.3), Vec2::new(GOLDEN, 1.0)).unwrap();
        for (k, sn) in s.s.iter().enumerate() {
            assert!((sn / lam.powf(-0.1 * (k + 1) as f64) - 1.0).abs() < 1e-9);
        }
        assert!((s.chi_hat - 0.1 * lam.ln()).abs() < 1e-9);
    }

    #[test]
    fn markov_tail_holds_on_the_sample() {
        let sys = System::ab();
        let cfg = MomentConfig { delta: 0.1, n_max: 12, samples: 500, seed: 4, past: true };
        let s = moment_decay(&sys, &cfg, &pt(0.3, 0.3), Vec2::new(1.0, 0.0)).unwrap();
        for n in 1..=12 {
            for c in [-1.0, 0.0, 2.0] {
                assert!(s.markov_tail(n, c, 0.01).holds);
            }
        }
    }

    #[test]
    fn nearly_conservative_fraction() {
        let sys = System::ab_perturbed(0.02).unwrap();
        let e = jac_range_freq(&sys, 5, 0.01, 0.001, 8, 50, 1);
        assert_eq!(e.mean, 1.0);
        let dis = Diffeo::new("d", [[1, 0], [0, 1]], vec![Mode { k: [0, 1], amp: [0.0, 0.1], phase: 0.0 }]).unwrap();
        let e = jac_range_freq(&System::single(dis), 10, 0.01, 0.001, 8, 10, 1);
        assert_eq!(e.mean, 0.0);
        assert!(conservative_mass_threshold(0.1) < 1e-4);
    }

    #[test]
    fn angle_tail_is_monotone() {
        let sys = System::ab();
        let t = angle_tail(&sys, 12, &pt(0.2, 0.4), Vec2::new(1.0, 0.0), AngleMode::StableVsV, 2000, 2).unwrap();
        assert!(t.probs.windows(2).all(|w| w[0] >= w[1]));
        let single = angle_tail(&cat(), 5, &pt(0.2, 0.4), Vec2::new(1.0, 0.0), AngleMode::StableVsV, 50, 2).unwrap();
        let a0 = single.angles[0];
        assert!(single.angles.iter().all(|&a| a == a0));
        for (e, p) in single.etas.iter().zip(&single.probs) {
            assert_eq!(*p, if *e > a0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn transversality_conventions() {
        let sys = System::ab();
        let mut k = Constants::desk_default();
        let w = Word::new(vec![0, 1, 1, 0, 1, 0, 0, 1]);
        assert!(!transverse(&sys, &w, &w, &pt(0.3, 0.3), &k).unwrap());
        assert!(transverse(&sys, &w, &Word::new(vec![0]), &pt(0.3, 0.3), &k).is_err());
        let w2 = Word::new(vec![1, 0, 0, 1, 0, 1, 1, 0]);
        let a1 = pulled_directions(&sys.table, &w, &pt(0.3, 0.3)).unwrap().vu.unit();
        let a2 = pulled_directions(&sys.table, &w2, &pt(0.3, 0.3)).unwrap().vu.unit();
        let angle = line_angle(a1, a2);
        // Tune C₀ so that the threshold is exactly the measured angle.
        k.c0 = (angle / 5.0).ln() + k.lambda_hat() * 8.0;
        assert!(transverse(&sys, &w, &w2, &pt(0.3, 0.3), &k).unwrap());
    }

    #[test]
    fn distortion_probe_gates_and_degenerate_case() {
        let sys = System::ab();
        let k = Constants::desk_default();
        let w = Word::new(vec![0, 1, 0]);
        let z = pt(0.3, 0.4);
        let rep = distortion_probe(&sys, &w, &z, &z, &z, Vec2::new(1.0, 0.0), &k).unwrap();
        assert_eq!(rep.vector_deviation.value, 0.0);
        assert_eq!(rep.angle_deviation.value, 0.0);
        assert_eq!(rep.trajectory.value, 0.0);
        assert!(rep.vector_deviation.pass && rep.trajectory.pass);
        assert!(matches!(
            distortion_probe(&sys, &w, &z, &pt(0.5, 0.5), &z, Vec2::new(1.0, 0.0), &k),
            Err(Error::Declined(_))
        ));
    }

    #[test]
    fn distortion_probe_on_pulled_back_ball() {
        let sys = System::ab_perturbed(0.02).unwrap();
        let mut k = Constants::desk_default();
        k.c0_prime = 2.0;
        let w = Word::new(vec![0, 1]);
        let z = pt(0.37, 0.61);
        let fz = word_derivative(&sys.table, &w.indices, &z).2;
        let r = 0.5 * (-6.0 * 2.0 * k.c0_prime).exp();
        let x = word_preimage(&sys.table, &w.indices, &fz.translate(Vec2::new(r, 0.0))).unwrap();
        let y = word_preimage(&sys.table, &w.indices, &fz.translate(Vec2::new(0.0, -r))).unwrap();
        let rep = distortion_probe(&sys, &w, &z, &x, &y, Vec2::new(0.6, 0.8), &k).unwrap();
        assert!(rep.trajectory.pass && rep.vector_deviation.pass && rep.angle_deviation.pass);
        assert!(rep.vector_deviation.value > 0.0);
        assert!(rep.stable_gap.unwrap().pass);
    }
}
