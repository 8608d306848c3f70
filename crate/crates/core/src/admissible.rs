//! Curve-supported measures, their pushforwards, good-word filtering and the staged
//! good/bad convolution pipeline.
//!
//! An atom stores its density against the seed parameter `u` of its curve as
//! `q(u) = exp(a + b·u)`. Pushing a curve forward reparametrizes nothing in `u`, so `q` is
//! invariant and masses stay analytic; the arclength density is `q(u)/‖c_u(u)‖`, which
//! is exactly the old density divided by `‖Df γ̇‖`.

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::{point_grid, Cone, SingularData};
use crate::curves::{Curve, Node};
use crate::dynamics::{word_derivative, Constants, Diffeo, System, Word};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Rng};
use crate::seminorm::PointCloudMeasure;
use crate::stats::Estimate;
use crate::torus::line_angle;

/// Atoms lighter than this are dropped after each pipeline stage.
pub const DROP_BELOW: f64 = 1e-12;

/// Word sets up to this size are enumerated exactly.
pub const ENUMERATION_LIMIT: usize = 4096;

/// A measure on one curve with log-linear density in the seed parameter.
#[derive(Clone, Debug)]
pub struct CurveMeasureAtom {
    curve: Curve,
    log_q0: f64,
    slope: f64,
}

/// `∫_{u0}^{u1} exp(a + b·u) du`.
fn exp_integral(a: f64, b: f64, u0: f64, u1: f64) -> f64 {
    if b == 0.0 {
        a.exp() * (u1 - u0)
    } else {
        (a + b * u0).exp() * (b * (u1 - u0)).exp_m1() / b
    }
}

impl CurveMeasureAtom {
    /// Density `exp(log_density0 + slope·u)` against the seed parameter, which is
    /// arclength for segments and arcs.
    pub fn new(curve: Curve, log_density0: f64, slope: f64) -> Result<Self> {
        if !(log_density0.is_finite() && slope.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(CurveMeasureAtom { curve, log_q0: log_density0, slope })
    }

    /// Uniform in the seed parameter with the given total mass.
    pub fn uniform(curve: Curve, mass: f64) -> Result<Self> {
        if !(mass > 0.0) {
            return Err(Error::InvalidInput(format!("atom mass {mass} must be positive")));
        }
        let (u0, u1) = curve.domain();
        CurveMeasureAtom::new(curve, (mass / (u1 - u0)).ln(), 0.0)
    }

    pub fn curve(&self) -> &Curve {
        &self.curve
    }

    pub fn mass(&self) -> f64 {
        let (u0, u1) = self.curve.domain();
        self.mass_between(u0, u1)
    }

    /// Mass carried by seed parameters in `[u0, u1]`.
    pub fn mass_between(&self, u0: f64, u1: f64) -> f64 {
        exp_integral(self.log_q0, self.slope, u0, u1)
    }

    /// Log of the arclength density at a node.
    pub fn log_density(&self, n: &Node) -> f64 {
        self.log_q0 + self.slope * n.u - n.speed().ln()
    }

    /// Largest `|Δ log density|/Δs` between adjacent nodes.
    pub fn log_lipschitz(&self) -> f64 {
        self.curve
            .nodes()
            .windows(2)
            .map(|w| (self.log_density(&w[1]) - self.log_density(&w[0])).abs() / (w[1].s - w[0].s))
            .filter(|x| x.is_finite())
            .fold(0.0, f64::max)
    }

    /// `d log density / ds` at a node.
    fn log_density_slope(&self, n: &Node) -> f64 {
        (self.slope - n.speed_u() / n.speed()) / n.speed()
    }

    /// Mass from node values by the endpoint-corrected trapezoid rule in arclength, for
    /// cross-checking the analytic mass.
    pub fn quadrature_mass(&self) -> f64 {
        self.curve
            .nodes()
            .windows(2)
            .map(|w| {
                let h = w[1].s - w[0].s;
                let (r0, r1) = (self.log_density(&w[0]).exp(), self.log_density(&w[1]).exp());
                let (d0, d1) = (r0 * self.log_density_slope(&w[0]), r1 * self.log_density_slope(&w[1]));
                0.5 * h * (r0 + r1) + h * h / 12.0 * (d0 - d1)
            })
            .sum()
    }

    /// Same curve with mass multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> Self {
        CurveMeasureAtom { curve: self.curve.clone(), log_q0: self.log_q0 + factor.ln(), slope: self.slope }
    }

    fn with_curve(&self, curve: Curve) -> Self {
        CurveMeasureAtom { curve, log_q0: self.log_q0, slope: self.slope }
    }

    /// `f_*` of the atom.
    pub fn push(&self, f: &Arc<Diffeo>) -> Self {
        self.with_curve(self.curve.push_diffeo(f))
    }

    pub fn push_word(&self, table: &[Arc<Diffeo>], word: &[usize]) -> Self {
        self.with_curve(self.curve.push_word(table, word))
    }

    /// `(Δ_a)_*` of the atom: the restrictions to the pieces of its curve.
    pub fn pieces(&self, a: f64) -> Result<Vec<Self>> {
        Ok(self.curve.pieces(a)?.into_iter().map(|c| self.with_curve(c)).collect())
    }
}

/// A finite sum of curve atoms with measured curvature and log-Lipschitz bounds.
#[derive(Clone, Debug, Default)]
pub struct AdmissibleMeasure {
    atoms: Vec<CurveMeasureAtom>,
    k: f64,
    l: f64,
    mass: f64,
}

/// Summary statistics of an admissible measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdmissibleSummary {
    pub atoms: usize,
    pub k: f64,
    pub l: f64,
    pub mass: f64,
}

/// Wrap atoms into a measure; an empty list is the zero measure.
pub fn make_admissible(atoms: Vec<CurveMeasureAtom>) -> AdmissibleMeasure {
    let k = atoms.iter().map(|a| a.curve.max_abs_curvature()).fold(0.0, f64::max);
    let l = atoms.iter().map(CurveMeasureAtom::log_lipschitz).fold(0.0, f64::max);
    let mass = atoms.iter().map(CurveMeasureAtom::mass).sum();
    AdmissibleMeasure { atoms, k, l, mass }
}

impl AdmissibleMeasure {
    pub fn atoms(&self) -> &[CurveMeasureAtom] {
        &self.atoms
    }

    /// Largest node curvature.
    pub fn k(&self) -> f64 {
        self.k
    }

    /// Largest atom log-Lipschitz constant.
    pub fn l(&self) -> f64 {
        self.l
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn summary(&self) -> AdmissibleSummary {
        AdmissibleSummary { atoms: self.atoms.len(), k: self.k, l: self.l, mass: self.mass }
    }

    pub fn union(parts: Vec<AdmissibleMeasure>) -> AdmissibleMeasure {
        make_admissible(parts.into_iter().flat_map(|p| p.atoms).collect())
    }

    /// Whether every node tangent lies in the cone.
    pub fn tangent_to(&self, cone: &Cone) -> bool {
        self.atoms.iter().all(|a| a.curve.nodes().iter().all(|n| cone.contains(n.tangent())))
    }

    /// `(Δ_a)_*` atomwise.
    pub fn cut(&self, a: f64) -> Result<AdmissibleMeasure> {
        let mut out = Vec::new();
        for atom in &self.atoms {
            out.extend(atom.pieces(a)?);
        }
        Ok(make_admissible(out))
    }

    /// `𝖯_*` sampled at `samples_per_unit_length` points per unit arclength.
    ///
    /// Each sample carries the exact mass of its arclength cell.
    pub fn project(&self, samples_per_unit_length: f64) -> Result<PointCloudMeasure> {
        if !(samples_per_unit_length > 0.0) {
            return Err(Error::InvalidInput(format!("sampling density {samples_per_unit_length} must be positive")));
        }
        let parts: Vec<(Vec<_>, Vec<f64>)> = self
            .atoms
            .par_iter()
            .map(|a| {
                let len = a.curve.length();
                let count = ((len * samples_per_unit_length).ceil() as usize).max(1);
                let h = len / count as f64;
                let bounds: Vec<f64> = (0..=count).map(|i| a.curve.u_at(i as f64 * h)).collect();
                let pts = (0..count).map(|i| a.curve.point_at((i as f64 + 0.5) * h)).collect();
                let ws = bounds.windows(2).map(|b| a.mass_between(b[0], b[1])).collect();
                (pts, ws)
            })
            .collect();
        let (points, weights): (Vec<_>, Vec<_>) =
            parts.into_iter().fold((Vec::new(), Vec::new()), |(mut p, mut w), (pp, ww)| {
                p.extend(pp);
                w.extend(ww);
                (p, w)
            });
        PointCloudMeasure::new(points, weights, 1.0 / samples_per_unit_length)
    }
}

/// `F_#` of an admissible measure.
pub fn push_admissible(f: &Arc<Diffeo>, nu: &AdmissibleMeasure) -> AdmissibleMeasure {
    make_admissible(nu.atoms.par_iter().map(|a| a.push(f)).collect())
}

/// The three conditions of a good word, evaluated on the node cover of a curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GoodWord {
    /// `‖Df^n γ̇(t)‖ ≥ 2e^{λ̄n}` everywhere.
    pub expands: bool,
    /// `∢(γ̇(t), E^s(γ(t))) ≥ 2e^{−ηn}` everywhere; false where `E^s` is undefined.
    pub transverse: bool,
    /// The word is nearly conservative.
    pub conservative: bool,
}

impl GoodWord {
    pub fn good(&self) -> bool {
        self.expands && self.transverse && self.conservative
    }
}

/// Nearly-conservative test on a fixed grid of base points.
#[derive(Clone, Debug)]
pub struct ConservativeTest {
    grid: Vec<jac::Point>,
    c0: f64,
    eps0: f64,
}

mod jac {
    pub type Point = crate::torus::TorusPoint;
}

impl ConservativeTest {
    pub fn new(grid_n: usize, c0: f64, eps0: f64) -> Self {
        ConservativeTest { grid: point_grid(grid_n), c0, eps0 }
    }

    pub fn check(&self, table: &[Arc<Diffeo>], word: &[usize]) -> bool {
        crate::cocycle::is_nearly_conservative(table, word, &self.grid, self.c0, self.eps0)
    }
}

/// Expansion and transversality flags of `word` along `curve`, stopping early once both
/// have failed.
fn geometric_flags(table: &[Arc<Diffeo>], word: &[usize], curve: &Curve, eta: f64, lambda_bar: f64) -> (bool, bool) {
    let n = word.len() as f64;
    let min_stretch = 2.0 * (lambda_bar * n).exp();
    let min_angle = 2.0 * (-eta * n).exp();
    let (mut expands, mut transverse) = (true, true);
    for node in curve.cover() {
        let t = node.tangent();
        let (m, lj, _) = word_derivative(table, word, &node.point());
        if (m * t).norm() < min_stretch {
            expands = false;
        }
        let sd = SingularData::of_matrix(&m, lj.exp());
        if !sd.defined || line_angle(t, sd.es.unit()) < min_angle {
            transverse = false;
        }
        if !expands && !transverse {
            break;
        }
    }
    (expands, transverse)
}

/// Whether `word` is `η`-good for `curve`.
pub fn good_word(
    table: &[Arc<Diffeo>],
    word: &Word,
    curve: &Curve,
    eta: f64,
    k: &Constants,
    nc: &ConservativeTest,
) -> GoodWord {
    let (expands, transverse) = geometric_flags(table, &word.indices, curve, eta, k.lambda_bar());
    GoodWord { expands, transverse, conservative: nc.check(table, &word.indices) }
}

/// How convolution words are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WordSet {
    /// Every word when there are at most `cap`, otherwise `samples` i.i.d. words.
    Auto {
        cap: usize,
        samples: usize,
        seed: u64,
    },
    Exact,
    Sampled {
        samples: usize,
        seed: u64,
    },
}

impl Default for WordSet {
    fn default() -> Self {
        WordSet::Auto { cap: ENUMERATION_LIMIT, samples: 1024, seed: 0 }
    }
}

/// Words with weights summing to 1, and whether they are the exact distribution.
fn choose_words(sys: &System, n: usize, words: WordSet, stream: u64) -> Result<(Vec<(Word, f64)>, bool)> {
    let sampled = |samples: usize, seed: u64| {
        let mut rng = stream_rng(seed, stream);
        let sampler = sys.measure.sampler();
        let w = 1.0 / samples as f64;
        (0..samples).map(|_| (sampler.sample(n, &mut rng), w)).collect::<Vec<_>>()
    };
    match words {
        WordSet::Exact => Ok((sys.measure.enumerate_words(n, usize::MAX)?, true)),
        WordSet::Sampled { samples, seed } => Ok((sampled(samples, seed), false)),
        WordSet::Auto { cap, samples, seed } => match sys.measure.enumerate_words(n, cap) {
            Ok(w) => Ok((w, true)),
            Err(Error::EnumerationCap { .. }) => Ok((sampled(samples, seed), false)),
            Err(e) => Err(e),
        },
    }
}

/// Good and bad parts of an `n`-step convolution after cutting to length `a`.
#[derive(Clone, Debug)]
pub struct GoodConvolution {
    pub good: AdmissibleMeasure,
    pub bad: AdmissibleMeasure,
    pub good_mass: f64,
    pub bad_mass: f64,
    /// Whether the word distribution was enumerated exactly.
    pub exact: bool,
    pub words: usize,
}

/// `μ^{*n,good,η}_{(a)} * ν̃` and its complement.
pub fn good_convolution(
    sys: &System,
    nu: &AdmissibleMeasure,
    n: usize,
    eta: f64,
    a: f64,
    k: &Constants,
    words: WordSet,
    nc_grid: usize,
) -> Result<GoodConvolution> {
    let cut = nu.cut(a)?;
    let (ws, exact) = choose_words(sys, n, words, 0)?;
    let nc = ConservativeTest::new(nc_grid, k.c0, k.eps0);
    let conservative: Vec<bool> = ws.par_iter().map(|(w, _)| nc.check(&sys.table, &w.indices)).collect();
    let pairs: Vec<(usize, usize)> = (0..cut.atoms.len()).flat_map(|i| (0..ws.len()).map(move |j| (i, j))).collect();
    let results: Vec<(bool, CurveMeasureAtom)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let atom = &cut.atoms[i];
            let (w, p) = &ws[j];
            let good = conservative[j] && {
                let (e, t) = geometric_flags(&sys.table, &w.indices, &atom.curve, eta, k.lambda_bar());
                e && t
            };
            (good, atom.scaled(*p).push_word(&sys.table, &w.indices))
        })
        .collect();
    let (good, bad): (Vec<_>, Vec<_>) = results.into_iter().partition(|r| r.0);
    let good = make_admissible(good.into_iter().map(|r| r.1).collect());
    let bad = make_admissible(bad.into_iter().map(|r| r.1).collect());
    Ok(GoodConvolution { good_mass: good.mass(), bad_mass: bad.mass(), good, bad, exact, words: ws.len() })
}

/// Fraction of i.i.d. length-`n` words that are `η`-good for `curve`.
pub fn good_word_fraction(
    sys: &System,
    curve: &Curve,
    n: usize,
    eta: f64,
    k: &Constants,
    samples: usize,
    seed: u64,
    nc_grid: usize,
) -> Estimate {
    let nc = ConservativeTest::new(nc_grid, k.c0, k.eps0);
    let mut rng = stream_rng(seed, n as u64);
    let sampler = sys.measure.sampler();
    let words: Vec<Word> = (0..samples).map(|_| sampler.sample(n, &mut rng)).collect();
    let hits: Vec<f64> =
        words.par_iter().map(|w| if good_word(&sys.table, w, curve, eta, k, &nc).good() { 1.0 } else { 0.0 }).collect();
    Estimate::from_samples(&hits)
}

/// Block class in a filtering sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Good,
    Bad,
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Class::Good => "g",
            Class::Bad => "b",
        })
    }
}

/// Render a class sequence as a string of `g`/`b`.
pub fn class_string(seq: &[Class]) -> String {
    seq.iter().map(Class::to_string).collect()
}

/// Every prefix of length `k` has at most `kη` bad entries (with `1e−12` slack so that
/// `η = 1/3` written in decimal behaves as intended).
pub fn in_wm(seq: &[Class], eta: f64) -> bool {
    let mut bad = 0usize;
    seq.iter().enumerate().all(|(i, c)| {
        bad += usize::from(*c == Class::Bad);
        bad as f64 <= (i + 1) as f64 * eta + 1e-12
    })
}

/// All sequences of `𝒲_m(η)` in lexicographic order with good first.
pub fn wm_eta(m: usize, eta: f64, cap: usize) -> Result<Vec<Vec<Class>>> {
    let count = 2f64.powi(m as i32);
    if count > cap as f64 {
        return Err(Error::EnumerationCap { count, cap });
    }
    let mut out = Vec::new();
    let mut seq = Vec::with_capacity(m);
    fn rec(m: usize, eta: f64, seq: &mut Vec<Class>, out: &mut Vec<Vec<Class>>) {
        if !in_wm(seq, eta) {
            return;
        }
        if seq.len() == m {
            out.push(seq.clone());
            return;
        }
        for c in [Class::Good, Class::Bad] {
            seq.push(c);
            rec(m, eta, seq, out);
            seq.pop();
        }
    }
    rec(m, eta, &mut seq, &mut out);
    Ok(out)
}

/// Settings of the staged pipeline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    /// Unfiltered letters applied before the first stage.
    pub d: usize,
    pub p0: usize,
    pub m: usize,
    pub eta: f64,
    /// Largest number of atoms carried per class branch; heavier branches are resampled.
    pub budget: usize,
    pub words: WordSet,
    pub nc_grid: usize,
    pub seed: u64,
    /// Run even when the constants fail the pipeline inequalities.
    pub override_constants: bool,
}

impl PipelineConfig {
    pub fn new(p0: usize, m: usize, eta: f64) -> Self {
        PipelineConfig {
            d: 0,
            p0,
            m,
            eta,
            budget: 64,
            words: WordSet::default(),
            nc_grid: 16,
            seed: 0,
            override_constants: false,
        }
    }
}

/// One ledger row: a class branch after a stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerRow {
    pub stage: usize,
    /// Classes `σ_{m−stage+1} … σ_m`, written in that order.
    pub sigma_class: String,
    pub retained_mass: f64,
    pub discarded_mass: f64,
    pub k: f64,
    pub l: f64,
    pub atom_count: usize,
}

/// Output of the staged pipeline.
#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub measure: AdmissibleMeasure,
    pub total_mass: f64,
    pub retained_mass: f64,
    pub discarded_mass: f64,
    pub ledger: Vec<LedgerRow>,
    pub cut_lengths: Vec<f64>,
    /// Whether every word distribution was enumerated and no branch was resampled.
    pub exact: bool,
    pub warnings: Vec<String>,
}

impl PipelineResult {
    /// `retained + discarded − total`.
    pub fn ledger_gap(&self) -> f64 {
        self.retained_mass + self.discarded_mass - self.total_mass
    }

    /// CSV `stage,sigma_class,retained_mass,discarded_mass,K,L,atom_count`.
    pub fn ledger_csv(&self) -> String {
        let mut out = String::from("stage,sigma_class,retained_mass,discarded_mass,K,L,atom_count\n");
        for r in &self.ledger {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.stage, r.sigma_class, r.retained_mass, r.discarded_mass, r.k, r.l, r.atom_count
            ));
        }
        out
    }
}

/// Systematic resampling to `budget` atoms, preserving total mass exactly up to rounding.
/// Systematic resampling of `masses` down to `budget` draws.
///
/// Returns `(index, factor)` for each survivor; scaling survivor `i` by its factor keeps
/// the total mass exactly. `None` when no resampling is needed.
fn systematic(masses: &[f64], budget: usize, rng: &mut Rng) -> Option<Vec<(usize, f64)>> {
    if masses.len() <= budget {
        return None;
    }
    let total: f64 = masses.iter().sum();
    let step = total / budget as f64;
    let mut pick = rng.gen::<f64>() * step;
    let mut acc = 0.0;
    let mut counts = vec![0usize; masses.len()];
    let mut j = 0;
    for (i, m) in masses.iter().enumerate() {
        acc += m;
        while j < budget && pick < acc {
            counts[i] += 1;
            pick += step;
            j += 1;
        }
    }
    // Rounding can leave the last draw unassigned; give it to the heaviest atom.
    if j < budget {
        let heaviest = masses.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i);
        counts[heaviest] += budget - j;
    }
    Some(counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(i, &c)| (i, c as f64 * step / masses[i])).collect())
}

fn resample(atoms: Vec<CurveMeasureAtom>, budget: usize, rng: &mut Rng) -> (Vec<CurveMeasureAtom>, bool) {
    let masses: Vec<f64> = atoms.iter().map(CurveMeasureAtom::mass).collect();
    match systematic(&masses, budget, rng) {
        None => (atoms, false),
        Some(sel) => (sel.iter().map(|&(i, f)| atoms[i].scaled(f)).collect(), true),
    }
}

fn drop_light(atoms: Vec<CurveMeasureAtom>) -> (Vec<CurveMeasureAtom>, f64) {
    let (keep, drop): (Vec<_>, Vec<_>) = atoms.into_iter().partition(|a| a.mass() >= DROP_BELOW);
    (keep, drop.iter().map(CurveMeasureAtom::mass).fold(0.0, |a, b| a + b))
}

/// A class suffix `σ_j … σ_m` can still complete into `𝒲_m(η)`: the best completion
/// makes every earlier block good.
fn suffix_feasible(suffix: &[Class], m: usize, eta: f64) -> bool {
    let mut seq = vec![Class::Good; m - suffix.len()];
    seq.extend_from_slice(suffix);
    in_wm(&seq, eta)
}

struct Branch {
    /// `σ_{m−k+1} … σ_m` after `k` stages.
    suffix: Vec<Class>,
    atoms: Vec<CurveMeasureAtom>,
}

/// Unfiltered `μ^{*n} * ν` on curve atoms, resampled to `budget` atoms when the
/// (atom, word) product is larger. Returns the atoms and whether no sampling occurred.
pub fn convolve(
    sys: &System,
    atoms: &[CurveMeasureAtom],
    n: usize,
    budget: usize,
    words: WordSet,
    seed: u64,
) -> Result<(Vec<CurveMeasureAtom>, bool)> {
    if n == 0 {
        return Ok((atoms.to_vec(), true));
    }
    if budget == 0 {
        return Err(Error::InvalidInput("budget must be positive".into()));
    }
    let (ws, exact) = choose_words(sys, n, words, derive_seed(seed, 0))?;
    let mut rng = stream_rng(seed, derive_seed(0, 1));
    let (atoms, thinned) = resample(atoms.to_vec(), budget, &mut rng);
    let pairs: Vec<(usize, usize)> = (0..atoms.len()).flat_map(|i| (0..ws.len()).map(move |j| (i, j))).collect();
    let (sel, resampled) = resample_pairs(&atoms, &ws, &pairs, budget, &mut rng);
    let pushed = sel.par_iter().map(|(a, j)| a.push_word(&sys.table, &ws[*j].0.indices)).collect();
    Ok((pushed, exact && !thinned && !resampled))
}

/// `ν_{d,m,c} = Σ_{σ̄ ∈ 𝒲_m(η)} ν̃_{σ̄}`, with a mass ledger.
///
/// Stage `k` cuts every atom to length `l_k`, splits each (piece, word) pair by the
/// good-word test into the `g` and `b` children, and discards children whose class
/// suffix cannot complete into `𝒲_m(η)`. Branches holding more than `budget` atoms are
/// resampled with mass-proportional systematic resampling, which keeps branch masses
/// (and hence the ledger) exact while making the retained measure a random estimate.
pub fn filtered_pipeline(
    sys: &System,
    nu: &AdmissibleMeasure,
    k: &Constants,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    if cfg.p0 == 0 || cfg.budget == 0 {
        return Err(Error::InvalidInput("p0 and budget must be positive".into()));
    }
    let mut params = k.clone();
    params.p0 = cfg.p0;
    params.eta = cfg.eta;
    let mut warnings = Vec::new();
    let bad = params.check_pipeline();
    if !bad.is_empty() {
        let detail = bad.iter().map(|v| v.detail.clone()).collect::<Vec<_>>().join("; ");
        if !cfg.override_constants {
            return Err(Error::Constants(detail));
        }
        warnings.push(format!("constants overridden: {detail}"));
    }
    let total_mass = nu.mass();
    let mut exact = true;
    let mut discarded = 0.0;
    let mut ledger = Vec::new();
    let nc = ConservativeTest::new(cfg.nc_grid, k.c0, k.eps0);

    // Unfiltered warm-up by μ^{*d}.
    let (warm, ex) = convolve(sys, &nu.atoms, cfg.d, cfg.budget, cfg.words, cfg.seed)?;
    exact &= ex;
    let atoms = warm;

    let cut_lengths: Vec<f64> = (1..=cfg.m).map(|s| params.cut_length(s)).collect();
    let h_floor = nu.atoms.first().map_or(0.0, |a| a.curve.h_max());
    for (s, l) in cut_lengths.iter().enumerate() {
        if *l < h_floor {
            warnings.push(format!("cut length l_{} = {l:e} is below the curve resolution {h_floor:e}", s + 1));
        }
    }

    let mut branches = vec![Branch { suffix: Vec::new(), atoms }];
    for stage in 1..=cfg.m {
        let (ws, ex) = choose_words(sys, cfg.p0, cfg.words, derive_seed(cfg.seed, stage as u64))?;
        exact &= ex;
        let conservative: Vec<bool> = ws.par_iter().map(|(w, _)| nc.check(&sys.table, &w.indices)).collect();
        let mut next = Vec::new();
        for (bi, br) in branches.into_iter().enumerate() {
            let stream = derive_seed(cfg.seed, 1000 + (stage * 4096 + bi) as u64);
            let mut rng = stream_rng(cfg.seed, stream);
            let mut pieces = Vec::new();
            for a in &br.atoms {
                pieces.extend(a.pieces(cut_lengths[stage - 1])?);
            }
            let (pieces, resampled) = resample(pieces, cfg.budget, &mut rng);
            exact &= !resampled;
            let pairs: Vec<(usize, usize)> =
                (0..pieces.len()).flat_map(|i| (0..ws.len()).map(move |j| (i, j))).collect();
            let flags: Vec<bool> = pairs
                .par_iter()
                .map(|&(i, j)| {
                    conservative[j] && {
                        let (e, t) =
                            geometric_flags(&sys.table, &ws[j].0.indices, &pieces[i].curve, cfg.eta, k.lambda_bar());
                        e && t
                    }
                })
                .collect();
            for class in [Class::Good, Class::Bad] {
                let mut suffix = vec![class];
                suffix.extend_from_slice(&br.suffix);
                let chosen: Vec<(usize, usize)> =
                    pairs.iter().zip(&flags).filter(|(_, &g)| g == (class == Class::Good)).map(|(p, _)| *p).collect();
                let mass: f64 = chosen.iter().map(|&(i, j)| pieces[i].mass() * ws[j].1).sum();
                if !suffix_feasible(&suffix, cfg.m, cfg.eta) {
                    discarded += mass;
                    ledger.push(LedgerRow {
                        stage,
                        sigma_class: class_string(&suffix),
                        retained_mass: 0.0,
                        discarded_mass: mass,
                        k: f64::NAN,
                        l: f64::NAN,
                        atom_count: 0,
                    });
                    continue;
                }
                if chosen.is_empty() {
                    continue;
                }
                let (sel, resampled) = resample_pairs(&pieces, &ws, &chosen, cfg.budget, &mut rng);
                exact &= !resampled;
                let pushed: Vec<CurveMeasureAtom> =
                    sel.par_iter().map(|(a, j)| a.push_word(&sys.table, &ws[*j].0.indices)).collect();
                let (pushed, dropped) = drop_light(pushed);
                discarded += dropped;
                let summary = make_admissible(pushed);
                ledger.push(LedgerRow {
                    stage,
                    sigma_class: class_string(&suffix),
                    retained_mass: summary.mass(),
                    discarded_mass: dropped,
                    k: summary.k(),
                    l: summary.l(),
                    atom_count: summary.atoms.len(),
                });
                next.push(Branch { suffix, atoms: summary.atoms });
            }
        }
        branches = next;
    }
    let measure = make_admissible(branches.into_iter().flat_map(|b| b.atoms).collect());
    Ok(PipelineResult {
        retained_mass: measure.mass(),
        measure,
        total_mass,
        discarded_mass: discarded,
        ledger,
        cut_lengths,
        exact,
        warnings,
    })
}

/// Resample (atom, pair) items together so each survivor remembers its word.
/// Resample `(piece, word)` pairs, whose mass is the piece mass times the word weight.
/// Returns weighted atoms ready to be pushed, each with its word index.
fn resample_pairs(
    pieces: &[CurveMeasureAtom],
    words: &[(Word, f64)],
    pairs: &[(usize, usize)],
    budget: usize,
    rng: &mut Rng,
) -> (Vec<(CurveMeasureAtom, usize)>, bool) {
    let masses: Vec<f64> = pairs.iter().map(|&(i, j)| pieces[i].mass() * words[j].1).collect();
    match systematic(&masses, budget, rng) {
        None => (pairs.iter().map(|&(i, j)| (pieces[i].scaled(words[j].1), j)).collect(), false),
        Some(sel) => (
            sel.iter()
                .map(|&(k, f)| {
                    let (i, j) = pairs[k];
                    (pieces[i].scaled(words[j].1 * f), j)
                })
                .collect(),
            true,
        ),
    }
}

/// Measured log-Lipschitz constant of `ν_j` against `K₂(p₀; c)(L+1)(K+1)e^{11(n−j)ηC₀′}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityGrowth {
    /// `(j, measured L_j, bound)`.
    pub steps: Vec<(usize, f64, f64)>,
    pub violations: usize,
}

/// Push an atom through `word` and track its log-Lipschitz constant.
///
/// Declined unless the density-growth parameter inequalities, NCT and ET hold.
pub fn density_growth_check(
    table: &[Arc<Diffeo>],
    word: &Word,
    atom: &CurveMeasureAtom,
    k: &Constants,
    p0: usize,
    c: f64,
    eta: f64,
) -> Result<DensityGrowth> {
    let mut params = k.clone();
    params.p0 = p0;
    params.c = c;
    params.eta = eta;
    let bad = params.check_density_growth();
    if !bad.is_empty() {
        return Err(Error::Declined(format!("parameters: {}", bad[0].detail)));
    }
    if !crate::curves::nct(table, word, &atom.curve, p0, eta, k.c0, k.eps0)?.pass {
        return Err(Error::Declined("word lacks nearly conservative tails".into()));
    }
    if !crate::curves::et(table, word, &atom.curve, p0, c, eta)?.pass {
        return Err(Error::Declined("word lacks expanding tails".into()));
    }
    let n = word.len();
    let l0 = atom.log_lipschitz();
    let k0 = atom.curve.max_abs_curvature();
    let ln_k2 = crate::dynamics::ln_k2(p0, c, k.c0_prime);
    let mut cur = atom.clone();
    let mut steps = Vec::with_capacity(n);
    for (j, &i) in word.indices.iter().enumerate() {
        cur = cur.push(&table[i]);
        let bound = (ln_k2 + (l0 + 1.0).ln() + (k0 + 1.0).ln() + 11.0 * (n - j - 1) as f64 * eta * k.c0_prime).exp();
        steps.push((j + 1, cur.log_lipschitz(), bound));
    }
    let violations = steps.iter().filter(|(_, v, b)| v > b).count();
    Ok(DensityGrowth { steps, violations })
}
