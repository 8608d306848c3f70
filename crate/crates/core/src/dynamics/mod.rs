//! Torus diffeomorphisms `x ↦ Mx + Σ a·sin(2π⟨k,x⟩ + φ) mod 1`, words over a diffeo
//! table, and finitely supported driving measures.

mod constants;
mod system;

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Hessians, Mat2, Sym2, Vec2};
use crate::rng::Rng;
use crate::torus::{wrap_signed, TorusPoint};

pub use constants::{c2_markov, c4_comparison, ln_k1, ln_k2, Constants, CutSchedule, RhoSchedule, Violation};
pub use system::{AtomSpec, DiffeoSpec, ModeSpec, System, SystemSpec, SYSTEM_SCHEMA};

const TAU: f64 = 2.0 * PI;

/// Newton iteration cap for [`Diffeo::inverse_eval`].
pub const NEWTON_MAX_ITER: usize = 64;
/// Residual tolerance for [`Diffeo::inverse_eval`].
pub const NEWTON_TOL: f64 = 1e-13;
/// Default cap on exhaustive word enumeration.
pub const DEFAULT_WORD_CAP: usize = 1_000_000;

/// Value and first two derivatives of a plane map at a lifted point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    /// Image in lifted coordinates (not reduced modulo 1).
    pub image: Vec2,
    pub d: Mat2,
    pub d2: Hessians,
}

/// A C² map of the plane descending to the torus, evaluated on lifts.
pub trait SmoothMap: Send + Sync + std::fmt::Debug {
    fn lift_jet(&self, p: Vec2) -> Jet;

    fn lift_eval(&self, p: Vec2) -> Vec2 {
        self.lift_jet(p).image
    }
}

/// One Fourier mode `a·sin(2π⟨k,x⟩ + φ)` of a perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub k: [i64; 2],
    pub amp: [f64; 2],
    #[serde(default)]
    pub phase: f64,
}

impl Mode {
    fn freq(&self) -> Vec2 {
        Vec2::new(self.k[0] as f64, self.k[1] as f64)
    }

    fn amp(&self) -> Vec2 {
        Vec2::new(self.amp[0], self.amp[1])
    }

    /// `(2π|k|)^order · |a|`, the sup of the `order`-th derivative of this mode.
    fn size(&self, order: i32) -> f64 {
        (TAU * self.freq().norm()).powi(order) * self.amp().norm()
    }
}

/// A diffeomorphism of the torus: integer linear part with |det| = 1 plus a
/// trigonometric perturbation whose C¹ size is below 1.
#[derive(Clone, Debug)]
pub struct Diffeo {
    name: String,
    matrix: [[i64; 2]; 2],
    linear: Mat2,
    linear_inv: Mat2,
    modes: Vec<Mode>,
    c2: f64,
}

impl Diffeo {
    /// Build and validate a diffeomorphism.
    ///
    /// Rejects `|det M| ≠ 1` and perturbations of C¹ size `Σ 2π|k||a| ≥ 1`. When that size
    /// also exceeds the smallest singular value of `M`, nonvanishing of `det Df` is
    /// certified on a grid with a Lipschitz margin (local diffeomorphism of degree ±1).
    pub fn new(name: impl Into<String>, matrix: [[i64; 2]; 2], modes: Vec<Mode>) -> Result<Self> {
        let name = name.into();
        let det = matrix[0][0] * matrix[1][1] - matrix[0][1] * matrix[1][0];
        if det.abs() != 1 {
            return Err(Error::InvalidDiffeo(format!("{name}: det M = {det}, expected ±1")));
        }
        for m in &modes {
            if !(m.amp[0].is_finite() && m.amp[1].is_finite() && m.phase.is_finite()) {
                return Err(Error::InvalidDiffeo(format!("{name}: non-finite mode {m:?}")));
            }
        }
        let linear = Mat2::new(matrix[0][0] as f64, matrix[0][1] as f64, matrix[1][0] as f64, matrix[1][1] as f64);
        let linear_inv = linear.inverse().expect("unimodular");
        let mut f = Diffeo { name, matrix, linear, linear_inv, modes, c2: 0.0 };
        let c1 = f.c1_size();
        if c1 >= 1.0 {
            return Err(Error::InvalidDiffeo(format!("{}: perturbation C1 size {c1} must be < 1", f.name)));
        }
        if c1 >= linear.min_singular() && f.certified_min_jacobian(256) <= 0.0 {
            return Err(Error::InvalidDiffeo(format!("{}: cannot certify det Df != 0 on the torus", f.name)));
        }
        f.c2 = f.c2_bound(64);
        Ok(f)
    }

    /// Unperturbed linear automorphism.
    pub fn linear(name: impl Into<String>, matrix: [[i64; 2]; 2]) -> Result<Self> {
        Diffeo::new(name, matrix, Vec::new())
    }

    pub fn identity() -> Self {
        Diffeo::linear("id", [[1, 0], [0, 1]]).expect("identity is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn matrix(&self) -> [[i64; 2]; 2] {
        self.matrix
    }

    pub fn linear_part(&self) -> Mat2 {
        self.linear
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn is_linear(&self) -> bool {
        self.modes.iter().all(|m| m.amp == [0.0, 0.0])
    }

    /// Cached C² bound (grid 64), an `e^{C₀′}` candidate.
    pub fn c2(&self) -> f64 {
        self.c2
    }

    /// `Σ 2π|k||a|`, a bound on the sup norm of the perturbation's derivative.
    pub fn c1_size(&self) -> f64 {
        self.modes.iter().map(|m| m.size(1)).sum()
    }

    fn mode_sizes(&self) -> (f64, f64, f64) {
        self.modes.iter().fold((0.0, 0.0, 0.0), |(a, b, c), m| (a + m.size(1), b + m.size(2), c + m.size(3)))
    }

    /// Wrapped image.
    pub fn eval(&self, p: &TorusPoint) -> TorusPoint {
        TorusPoint::from_lift(self.lift_eval(p.lift()))
    }

    /// Jet at a torus point; the image is wrapped.
    pub fn jet(&self, p: &TorusPoint) -> (TorusPoint, Mat2, Hessians) {
        let j = self.lift_jet(p.lift());
        (TorusPoint::from_lift(j.image), j.d, j.d2)
    }

    /// Derivative only.
    pub fn derivative(&self, p: Vec2) -> Mat2 {
        let mut d = self.linear;
        for m in &self.modes {
            let k = m.freq();
            let c = (TAU * k.dot(p) + m.phase).cos();
            d = d.add(&Mat2::outer(m.amp(), k.scale(TAU * c)));
        }
        d
    }

    /// `|det Df(p)|`.
    pub fn jacobian(&self, p: &TorusPoint) -> f64 {
        self.derivative(p.lift()).det().abs()
    }

    /// Solve `f(p) = q` by Newton iteration seeded at `M⁻¹q`.
    pub fn inverse_eval(&self, q: &TorusPoint) -> Result<TorusPoint> {
        let target = q.lift();
        let mut p = self.linear_inv * target;
        if self.modes.is_empty() {
            return Ok(TorusPoint::from_lift(p));
        }
        let residual = |p: Vec2| {
            let r = self.lift_eval(p) - target;
            Vec2::new(wrap_signed(r.x), wrap_signed(r.y))
        };
        let mut r = residual(p);
        let mut rn = r.norm();
        for _ in 0..NEWTON_MAX_ITER {
            if rn < NEWTON_TOL {
                return Ok(TorusPoint::from_lift(p));
            }
            let step = self
                .derivative(p)
                .inverse()
                .map(|di| di * r)
                .ok_or(Error::InverseNonConvergence { iterations: 0, residual: rn })?;
            // Backtrack so the wrapped residual decreases.
            let mut t = 1.0;
            loop {
                let cand = p - step.scale(t);
                let rc = residual(cand);
                if rc.norm() < rn || t < 1e-6 {
                    p = cand;
                    r = rc;
                    rn = rc.norm();
                    break;
                }
                t *= 0.5;
            }
        }
        if rn < NEWTON_TOL {
            Ok(TorusPoint::from_lift(p))
        } else {
            Err(Error::InverseNonConvergence { iterations: NEWTON_MAX_ITER, residual: rn })
        }
    }

    /// Lower bound of `|det Df|` over the torus from a `grid_n²` grid with Lipschitz margin.
    pub fn certified_min_jacobian(&self, grid_n: usize) -> f64 {
        let (s1, s2, _) = self.mode_sizes();
        let d1 = self.linear.op_norm() + s1;
        let h = 1.0 / grid_n as f64;
        let mut min_det = f64::INFINITY;
        for i in 0..grid_n {
            for j in 0..grid_n {
                let p = Vec2::new(i as f64 * h, j as f64 * h);
                min_det = min_det.min(self.derivative(p).det().abs());
            }
        }
        min_det - 2.0 * d1 * s2 * h * SQRT_2 / 2.0
    }

    /// Upper bound on `max(‖Df‖, ‖D²f‖, ‖Df⁻¹‖, ‖D²f⁻¹‖)` over the torus.
    ///
    /// Grid sup over `grid_n²` nodes plus `(grid spacing)·√2/2` times analytic Lipschitz
    /// constants of the four quantities derived from the mode coefficients. Returns
    /// infinity if the Jacobian lower bound is not positive at this resolution.
    pub fn c2_bound(&self, grid_n: usize) -> f64 {
        assert!(grid_n >= 1);
        let (s1, s2, s3) = self.mode_sizes();
        let h = 1.0 / grid_n as f64;
        let mut sup: f64 = 0.0;
        let mut min_det = f64::INFINITY;
        for i in 0..grid_n {
            for j in 0..grid_n {
                let jet = self.lift_jet(Vec2::new(i as f64 * h, j as f64 * h));
                let det = jet.d.det().abs();
                min_det = min_det.min(det);
                let dn = jet.d.op_norm();
                let hn = jet.d2.norm_bound();
                let inv = dn / det;
                sup = sup.max(dn).max(hn).max(inv).max(inv.powi(3) * hn);
            }
        }
        if s1 == 0.0 {
            return sup;
        }
        let reach = h * SQRT_2 / 2.0;
        let d1 = self.linear.op_norm() + s1;
        let jmin = min_det - 2.0 * d1 * s2 * reach;
        if jmin <= 0.0 {
            return f64::INFINITY;
        }
        let i1 = d1 / jmin;
        let h2 = SQRT_2 * s2;
        let lip = [s2, SQRT_2 * s3, i1 * i1 * s2, 3.0 * i1.powi(4) * s2 * h2 + i1.powi(3) * SQRT_2 * s3];
        sup + reach * lip.iter().cloned().fold(0.0, f64::max)
    }
}

impl SmoothMap for Diffeo {
    fn lift_jet(&self, p: Vec2) -> Jet {
        let mut image = self.linear * p;
        let mut d = self.linear;
        let mut d2 = Hessians::ZERO;
        for m in &self.modes {
            let k = m.freq();
            let a = m.amp();
            let (s, c) = (TAU * k.dot(p) + m.phase).sin_cos();
            image += a.scale(s);
            d = d.add(&Mat2::outer(a, k.scale(TAU * c)));
            let w = -TAU * TAU * s;
            let kk = Sym2 { xx: k.x * k.x * w, xy: k.x * k.y * w, yy: k.y * k.y * w };
            d2.x.xx += a.x * kk.xx;
            d2.x.xy += a.x * kk.xy;
            d2.x.yy += a.x * kk.yy;
            d2.y.xx += a.y * kk.xx;
            d2.y.xy += a.y * kk.xy;
            d2.y.yy += a.y * kk.yy;
        }
        Jet { image, d, d2 }
    }

    fn lift_eval(&self, p: Vec2) -> Vec2 {
        let mut image = self.linear * p;
        for m in &self.modes {
            image += m.amp().scale((TAU * m.freq().dot(p) + m.phase).sin());
        }
        image
    }
}

/// A real linear map of the plane, for curvature experiments outside SL(2,ℤ).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearMap(pub Mat2);

impl SmoothMap for LinearMap {
    fn lift_jet(&self, p: Vec2) -> Jet {
        Jet { image: self.0 * p, d: self.0, d2: Hessians::ZERO }
    }
}

/// A finite word: indices into a diffeo table, applied first index first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Word {
    pub indices: Vec<usize>,
}

impl Word {
    pub fn new(indices: Vec<usize>) -> Self {
        Word { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Block `j` (0-based) of length `p0`.
    pub fn block(&self, j: usize, p0: usize) -> &[usize] {
        &self.indices[j * p0..(j + 1) * p0]
    }
}

/// Finitely supported probability measure on a diffeo table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrivingMeasure {
    atoms: Vec<(usize, f64)>,
}

impl DrivingMeasure {
    /// Validates positive probabilities summing to 1 within 1e−12.
    pub fn new(atoms: Vec<(usize, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidInput("driving measure has empty support".into()));
        }
        if let Some(&(i, p)) = atoms.iter().find(|(_, p)| !(*p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidInput(format!("atom {i} has probability {p}")));
        }
        let total = neumaier_sum(atoms.iter().map(|a| a.1));
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("probabilities sum to {total}")));
        }
        Ok(DrivingMeasure { atoms })
    }

    /// Point mass on one diffeo.
    pub fn dirac(index: usize) -> Self {
        DrivingMeasure { atoms: vec![(index, 1.0)] }
    }

    pub fn atoms(&self) -> &[(usize, f64)] {
        &self.atoms
    }

    pub fn support_size(&self) -> usize {
        self.atoms.len()
    }

    /// Word sampler for this measure.
    pub fn sampler(&self) -> WordSampler {
        WordSampler {
            letters: self.atoms.iter().map(|a| a.0).collect(),
            dist: WeightedIndex::new(self.atoms.iter().map(|a| a.1)).expect("validated weights"),
        }
    }

    /// i.i.d. word of length `n`.
    pub fn sample_word(&self, n: usize, rng: &mut Rng) -> Word {
        self.sampler().sample(n, rng)
    }

    /// All words of length `n` with product weights, in lexicographic atom order.
    pub fn enumerate_words(&self, n: usize, cap: usize) -> Result<Vec<(Word, f64)>> {
        let count = (self.atoms.len() as f64).powi(n as i32);
        if count > cap as f64 {
            return Err(Error::EnumerationCap { count, cap });
        }
        let mut out: Vec<(Word, f64)> = vec![(Word::default(), 1.0)];
        for _ in 0..n {
            out = out
                .iter()
                .flat_map(|(w, p)| {
                    self.atoms.iter().map(move |&(i, q)| {
                        let mut idx = w.indices.clone();
                        idx.push(i);
                        (Word::new(idx), p * q)
                    })
                })
                .collect();
        }
        Ok(out)
    }
}

/// Fast repeated sampling of letters.
#[derive(Clone, Debug)]
pub struct WordSampler {
    letters: Vec<usize>,
    dist: WeightedIndex<f64>,
}

impl WordSampler {
    pub fn letter(&self, rng: &mut Rng) -> usize {
        if self.letters.len() == 1 {
            // Keep the stream position independent of the support size.
            let _: u32 = rng.gen();
            return self.letters[0];
        }
        self.letters[self.dist.sample(rng)]
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Word {
        Word::new((0..n).map(|_| self.letter(rng)).collect())
    }
}

/// Compensated (Neumaier) summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Trajectory, derivative products and log-Jacobians of a word at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct CocycleData {
    /// `trajectory[k] = f^k(p)`, `k = 0..=n`.
    pub trajectory: Vec<TorusPoint>,
    /// `products[k] = Df^k(p)`, with `products[0] = I`.
    pub products: Vec<Mat2>,
    /// `log_jacobians[k] = ln |det Df^k(p)|` accumulated stepwise.
    pub log_jacobians: Vec<f64>,
}

/// Run a word from `p`, accumulating products by left multiplication.
pub fn cocycle(table: &[Arc<Diffeo>], word: &Word, p: &TorusPoint) -> CocycleData {
    let n = word.len();
    let mut trajectory = Vec::with_capacity(n + 1);
    let mut products = Vec::with_capacity(n + 1);
    let mut log_jacobians = Vec::with_capacity(n + 1);
    let mut x = *p;
    let mut prod = Mat2::IDENTITY;
    let mut lj = 0.0;
    trajectory.push(x);
    products.push(prod);
    log_jacobians.push(lj);
    for &i in &word.indices {
        let f = &table[i];
        let d = f.derivative(x.lift());
        prod = d * prod;
        lj += d.det().abs().ln();
        x = f.eval(&x);
        trajectory.push(x);
        products.push(prod);
        log_jacobians.push(lj);
    }
    CocycleData { trajectory, products, log_jacobians }
}

/// Derivative product and log-Jacobian of a word at `p` (no trajectory storage).
pub fn word_derivative(table: &[Arc<Diffeo>], word: &[usize], p: &TorusPoint) -> (Mat2, f64, TorusPoint) {
    let mut x = *p;
    let mut prod = Mat2::IDENTITY;
    let mut lj = 0.0;
    for &i in word {
        let f = &table[i];
        let d = f.derivative(x.lift());
        prod = d * prod;
        lj += d.det().abs().ln();
        x = f.eval(&x);
    }
    (prod, lj, x)
}

/// `f^{-n}(x)` for a word: inverses applied last letter first.
pub fn word_preimage(table: &[Arc<Diffeo>], word: &[usize], x: &TorusPoint) -> Result<TorusPoint> {
    word.iter().rev().try_fold(*x, |y, &i| table[i].inverse_eval(&y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn shear_perturbed(eps: f64) -> Diffeo {
        Diffeo::new("A+", [[1, 1], [0, 1]], vec![Mode { k: [0, 1], amp: [eps, 0.0], phase: 0.0 }]).unwrap()
    }

    fn pt(x: f64, y: f64) -> TorusPoint {
        TorusPoint::new(x, y).unwrap()
    }

    fn random_diffeo(rng: &mut Rng) -> Diffeo {
        let mats = [[[1, 1], [0, 1]], [[1, 0], [1, 1]], [[2, 1], [1, 1]], [[0, -1], [1, 0]], [[1, 0], [0, 1]]];
        // Draws that cannot be certified invertible are redrawn.
        loop {
            let m = mats[rng.gen_range(0..mats.len())];
            let nmodes = rng.gen_range(0..3);
            let modes = (0..nmodes)
                .map(|_| Mode {
                    k: [rng.gen_range(-2..=2), rng.gen_range(-2..=2)],
                    amp: [rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02)],
                    phase: rng.gen_range(0.0..TAU),
                })
                .collect();
            if let Ok(f) = Diffeo::new("r", m, modes) {
                return f;
            }
        }
    }

    #[test]
    fn eval_examples() {
        let a = Diffeo::linear("A", [[1, 1], [0, 1]]).unwrap();
        assert_eq!(a.eval(&pt(0.25, 0.5)), pt(0.75, 0.5));
        let id = Diffeo::identity();
        assert_eq!(id.eval(&pt(0.3, 0.9)), pt(0.3, 0.9));
        let ap = shear_perturbed(0.1);
        let q = ap.eval(&pt(0.0, 0.25));
        assert!((q.x() - 0.35).abs() < 1e-15 && (q.y() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn jet_examples() {
        let m = Diffeo::linear("M", [[2, 1], [1, 1]]).unwrap();
        let (_, d, d2) = m.jet(&pt(0.3, 0.7));
        assert_eq!(d, Mat2::new(2.0, 1.0, 1.0, 1.0));
        assert_eq!(d2, Hessians::ZERO);
        let eps = 0.05;
        let (_, d, _) = shear_perturbed(eps).jet(&pt(0.4, 0.0));
        assert!((d.b - (1.0 + TAU * eps)).abs() < 1e-15);
        assert_eq!((d.a, d.c, d.d), (1.0, 0.0, 1.0));
    }

    #[test]
    fn jet_matches_central_differences() {
        let mut rng = stream_rng(11, 0);
        let h = 1e-6;
        for _ in 0..100 {
            let f = random_diffeo(&mut rng);
            let p = Vec2::new(rng.gen(), rng.gen());
            let j = f.lift_jet(p);
            for (axis, e) in [(0, Vec2::new(h, 0.0)), (1, Vec2::new(0.0, h))] {
                let fd = (f.lift_eval(p + e) - f.lift_eval(p - e)).scale(0.5 / h);
                let col = if axis == 0 { Vec2::new(j.d.a, j.d.c) } else { Vec2::new(j.d.b, j.d.d) };
                assert!((fd - col).norm() < 1e-6, "first derivative mismatch");
                let jp = f.lift_jet(p + e).d;
                let jm = f.lift_jet(p - e).d;
                let dd = jp.add(&jm.scale(-1.0)).scale(0.5 / h);
                let basis = if axis == 0 { Vec2::new(1.0, 0.0) } else { Vec2::new(0.0, 1.0) };
                for (col_idx, w) in [(0, Vec2::new(1.0, 0.0)), (1, Vec2::new(0.0, 1.0))] {
                    let fd_col = if col_idx == 0 { Vec2::new(dd.a, dd.c) } else { Vec2::new(dd.b, dd.d) };
                    let exact = j.d2.apply(basis, w);
                    assert!((fd_col - exact).norm() < 1e-6, "second derivative mismatch");
                }
            }
        }
    }

    #[test]
    fn inverse_examples_and_round_trip() {
        let m = Diffeo::linear("M", [[2, 1], [1, 1]]).unwrap();
        let q = pt(0.3, 0.8);
        let p = m.inverse_eval(&q).unwrap();
        let expect = TorusPoint::from_lift(Mat2::new(1.0, -1.0, -1.0, 2.0) * q.lift());
        assert!(crate::torus::dist(&p, &expect) < 1e-15);
        assert_eq!(Diffeo::identity().inverse_eval(&q).unwrap(), q);
        let mut rng = stream_rng(12, 0);
        for _ in 0..1000 {
            let f = random_diffeo(&mut rng);
            let q = pt(rng.gen(), rng.gen());
            let p = f.inverse_eval(&q).unwrap();
            assert!(crate::torus::dist(&f.eval(&p), &q) < 1e-12);
        }
    }

    #[test]
    fn jacobian_examples() {
        let m = Diffeo::linear("M", [[2, 1], [1, 1]]).unwrap();
        assert_eq!(m.jacobian(&pt(0.1, 0.2)), 1.0);
        let ap = shear_perturbed(0.1);
        for y in [0.0, 0.1, 0.37, 0.9] {
            assert!((ap.jacobian(&pt(0.2, y)) - 1.0).abs() < 1e-15);
        }
        let dis = Diffeo::new("dis", [[1, 0], [0, 1]], vec![Mode { k: [0, 1], amp: [0.0, 0.05], phase: 0.0 }]).unwrap();
        for y in [0.0, 0.13, 0.5, 0.77] {
            let expect = 1.0 + 0.1 * PI * (TAU * y).cos();
            let (_, d, _) = dis.jet(&pt(0.4, y));
            assert!((dis.jacobian(&pt(0.4, y)) - expect).abs() < 1e-14);
            assert!((d.det() - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_invalid_linear_part_and_large_perturbation() {
        assert!(Diffeo::linear("bad", [[2, 0], [0, 1]]).is_err());
        let big = Diffeo::new("big", [[1, 0], [0, 1]], vec![Mode { k: [1, 0], amp: [0.2, 0.0], phase: 0.0 }]);
        assert!(big.is_err());
    }

    #[test]
    fn c2_bound_examples() {
        let id = Diffeo::identity();
        assert_eq!(id.c2_bound(16), 1.0);
        let m = Diffeo::linear("M", [[2, 1], [1, 1]]).unwrap();
        assert!(m.c2_bound(16) >= (3.0 + 5f64.sqrt()) / 2.0 - 1e-12);
        let f = Diffeo::new("p", [[2, 1], [1, 1]], vec![Mode { k: [1, 1], amp: [0.01, -0.02], phase: 0.3 }]).unwrap();
        let sweep: Vec<f64> = [32, 64, 128, 256, 512].iter().map(|&n| f.c2_bound(n)).collect();
        for w in sweep.windows(2) {
            assert!(w[1] <= w[0], "refinement sweep not monotone: {sweep:?}");
        }
        // The bound dominates a dense sample of the four quantities.
        let mut rng = stream_rng(3, 0);
        for _ in 0..2000 {
            let p = Vec2::new(rng.gen(), rng.gen());
            let j = f.lift_jet(p);
            let inv = j.d.op_norm() / j.d.det().abs();
            assert!(j.d.op_norm().max(inv).max(inv.powi(3) * j.d2.norm_bound()) <= sweep[0]);
        }
    }

    #[test]
    fn cocycle_examples() {
        let table = vec![
            Arc::new(Diffeo::linear("A", [[1, 1], [0, 1]]).unwrap()),
            Arc::new(Diffeo::linear("B", [[1, 0], [1, 1]]).unwrap()),
        ];
        let c = cocycle(&table, &Word::new(vec![0, 1]), &TorusPoint::ORIGIN);
        assert!(c.trajectory.iter().all(|p| *p == TorusPoint::ORIGIN));
        assert_eq!(c.products[2], Mat2::new(1.0, 1.0, 1.0, 2.0));
        let e = cocycle(&table, &Word::default(), &pt(0.2, 0.3));
        assert_eq!(e.products, vec![Mat2::IDENTITY]);
    }

    #[test]
    fn cocycle_chain_rule_and_log_jacobians() {
        let mut rng = stream_rng(4, 0);
        let table: Vec<Arc<Diffeo>> = (0..3).map(|_| Arc::new(random_diffeo(&mut rng))).collect();
        for _ in 0..50 {
            let w = Word::new((0..20).map(|_| rng.gen_range(0..3)).collect());
            let p = pt(rng.gen(), rng.gen());
            let c = cocycle(&table, &w, &p);
            let mut prod = Mat2::IDENTITY;
            let mut x = p;
            for (k, &i) in w.indices.iter().enumerate() {
                let (img, d, _) = table[i].jet(&x);
                prod = d * prod;
                x = img;
                let scale = prod.max_abs_entry();
                assert!((c.products[k + 1].add(&prod.scale(-1.0))).max_abs_entry() <= 1e-10 * scale);
                let lj = c.log_jacobians[k + 1];
                assert!((lj - prod.det().abs().ln()).abs() < 1e-10 * scale * scale);
            }
        }
    }

    #[test]
    fn sampling_and_enumeration() {
        let mu = DrivingMeasure::new(vec![(0, 0.3), (1, 0.7)]).unwrap();
        let a = mu.sample_word(50, &mut stream_rng(1, 0));
        let b = mu.sample_word(50, &mut stream_rng(1, 0));
        assert_eq!(a, b);
        assert_eq!(DrivingMeasure::dirac(3).sample_word(5, &mut stream_rng(1, 0)).indices, vec![3; 5]);
        let words = mu.enumerate_words(3, DEFAULT_WORD_CAP).unwrap();
        assert_eq!(words.len(), 8);
        for (w, p) in &words {
            let k = w.indices.iter().filter(|&&i| i == 0).count() as i32;
            assert!((p - 0.3f64.powi(k) * 0.7f64.powi(3 - k)).abs() < 1e-15);
        }
        let e0 = mu.enumerate_words(0, 10).unwrap();
        assert_eq!(e0, vec![(Word::default(), 1.0)]);
        assert!(mu.enumerate_words(21, DEFAULT_WORD_CAP).is_err());
    }

    #[test]
    fn enumerated_weights_sum_to_one() {
        let half = DrivingMeasure::new(vec![(0, 0.5), (1, 0.5)]).unwrap();
        let w = half.enumerate_words(10, DEFAULT_WORD_CAP).unwrap();
        // Dyadic weights are exact, so compensated summation must give exactly 1.
        assert_eq!(neumaier_sum(w.iter().map(|x| x.1)), 1.0);
        let mu = DrivingMeasure::new(vec![(0, 0.3), (1, 0.7)]).unwrap();
        let w = mu.enumerate_words(10, DEFAULT_WORD_CAP).unwrap();
        assert!((neumaier_sum(w.iter().map(|x| x.1)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn letter_frequencies_within_three_sigma() {
        let p = 0.3;
        let mu = DrivingMeasure::new(vec![(0, p), (1, 1.0 - p)]).unwrap();
        let n = 100_000;
        let w = mu.sample_word(n, &mut stream_rng(9, 0));
        let k = w.indices.iter().filter(|&&i| i == 0).count() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((k - n as f64 * p).abs() < 3.0 * sigma);
    }

    #[test]
    fn measure_validation() {
        assert!(DrivingMeasure::new(vec![]).is_err());
        assert!(DrivingMeasure::new(vec![(0, 0.5), (1, 0.4)]).is_err());
        assert!(DrivingMeasure::new(vec![(0, 1.0), (1, 0.0)]).is_err());
    }
}
