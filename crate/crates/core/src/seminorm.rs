//! The ρ-inner product and ρ-semi-norm of finite measures on the torus.
//!
//! `⟨ν, ν′⟩_ρ = ρ⁻⁴ ∫ ν(B(z,ρ)) ν′(B(z,ρ)) dz`, integrated with the midpoint rule on an
//! `n × n` grid whose cell must not exceed `ρ/4`. Balls are closed. Ball masses of a
//! point cloud come from a toroidal spatial hash with cell side at least the query
//! radius, scanned over the 3 × 3 neighbourhood.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{c4_comparison, SmoothMap};
use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::rng::Rng;
use crate::stats::fit_line;
use crate::torus::{dist, dist_sq, TorusPoint};

/// A finite measure carried by weighted points.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointCloudMeasure {
    points: Vec<TorusPoint>,
    weights: Vec<f64>,
    mass: f64,
    /// Typical distance between neighbouring samples; `0` for exactly atomic measures.
    spacing: f64,
}

impl PointCloudMeasure {
    /// Weights must be positive and finite; zero weights are dropped.
    pub fn new(points: Vec<TorusPoint>, weights: Vec<f64>, spacing: f64) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::InvalidInput(format!("{} points but {} weights", points.len(), weights.len())));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidInput(format!("weight {w} is not a finite nonnegative number")));
        }
        let (points, weights): (Vec<_>, Vec<_>) = points.into_iter().zip(weights).filter(|(_, w)| *w > 0.0).unzip();
        let mass = weights.iter().sum();
        Ok(PointCloudMeasure { points, weights, mass, spacing })
    }

    pub fn empty() -> Self {
        PointCloudMeasure { points: Vec::new(), weights: Vec::new(), mass: 0.0, spacing: 0.0 }
    }

    /// Unit point mass.
    pub fn dirac(p: TorusPoint) -> Self {
        PointCloudMeasure { points: vec![p], weights: vec![1.0], mass: 1.0, spacing: 0.0 }
    }

    /// `count` i.i.d. uniform points of total mass 1.
    pub fn uniform(count: usize, rng: &mut Rng) -> Self {
        let points = (0..count).map(|_| TorusPoint::from_lift(Vec2::new(rng.gen(), rng.gen()))).collect();
        let w = 1.0 / count as f64;
        PointCloudMeasure { points, weights: vec![w; count], mass: 1.0, spacing: (count as f64).sqrt().recip() }
    }

    /// One uniform point in each cell of a `side × side` grid, total mass 1.
    ///
    /// Ball masses fluctuate only through boundary cells, far less than i.i.d. sampling.
    pub fn uniform_jittered(side: usize, rng: &mut Rng) -> Self {
        let h = 1.0 / side as f64;
        let mut points = Vec::with_capacity(side * side);
        for iy in 0..side {
            for ix in 0..side {
                points.push(TorusPoint::from_lift(Vec2::new(
                    (ix as f64 + rng.gen::<f64>()) * h,
                    (iy as f64 + rng.gen::<f64>()) * h,
                )));
            }
        }
        let n = side * side;
        PointCloudMeasure { points, weights: vec![1.0 / n as f64; n], mass: 1.0, spacing: h }
    }

    /// Arclength on the horizontal circle `y = y₀`, sampled at `count` midpoints.
    pub fn horizontal_circle(y0: f64, count: usize) -> Self {
        let h = 1.0 / count as f64;
        let points = (0..count).map(|i| TorusPoint::from_lift(Vec2::new((i as f64 + 0.5) * h, y0))).collect();
        PointCloudMeasure { points, weights: vec![h; count], mass: 1.0, spacing: h }
    }

    pub fn points(&self) -> &[TorusPoint] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        self.spacing = spacing;
        self
    }

    /// `c·ν` for `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        let weights: Vec<f64> = self.weights.iter().map(|w| w * c).collect();
        PointCloudMeasure { points: self.points.clone(), mass: weights.iter().sum(), weights, spacing: self.spacing }
    }

    /// Disjoint union of atoms.
    pub fn concat(parts: &[PointCloudMeasure]) -> Self {
        let points = parts.iter().flat_map(|p| p.points.iter().copied()).collect();
        let weights: Vec<f64> = parts.iter().flat_map(|p| p.weights.iter().copied()).collect();
        let spacing = parts.iter().map(|p| p.spacing).fold(0.0, f64::max);
        PointCloudMeasure { points, mass: weights.iter().sum(), weights, spacing }
    }

    /// Pushforward `f_*ν`; mass is unchanged.
    pub fn push(&self, f: &dyn SmoothMap) -> Self {
        let points = self.points.iter().map(|p| TorusPoint::from_lift(f.lift_eval(p.lift()))).collect();
        PointCloudMeasure { points, weights: self.weights.clone(), mass: self.mass, spacing: self.spacing }
    }

    /// `ν(B(z, ρ))` with a closed ball, by a direct scan.
    pub fn ball_mass(&self, z: &TorusPoint, rho: f64) -> f64 {
        let r2 = rho * rho;
        self.points.iter().zip(&self.weights).filter(|(p, _)| dist_sq(p, z) <= r2).map(|(_, w)| w).sum()
    }
}

/// Toroidal spatial hash over a point cloud.
#[derive(Clone, Debug)]
pub struct BallIndex<'a> {
    cloud: &'a PointCloudMeasure,
    side: usize,
    /// `starts[c]..starts[c+1]` indexes `order` for cell `c`.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> BallIndex<'a> {
    /// Index answering ball queries of radius up to `max_radius`.
    pub fn new(cloud: &'a PointCloudMeasure, max_radius: f64) -> Self {
        let side = if max_radius > 0.0 { ((1.0 / max_radius).floor() as usize).clamp(1, 4096) } else { 1 };
        let cell_of = |p: &TorusPoint| {
            let ix = ((p.x() * side as f64) as usize).min(side - 1);
            let iy = ((p.y() * side as f64) as usize).min(side - 1);
            iy * side + ix
        };
        let mut counts = vec![0usize; side * side + 1];
        for p in &cloud.points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut order = vec![0; cloud.points.len()];
        for (i, p) in cloud.points.iter().enumerate() {
            let c = cell_of(p);
            order[fill[c]] = i;
            fill[c] += 1;
        }
        BallIndex { cloud, side, starts, order }
    }

    /// `ν(B(z, r))`, closed ball, for `r` no larger than the index radius.
    pub fn ball_mass(&self, z: &TorusPoint, r: f64) -> f64 {
        let r2 = r * r;
        let mut total = 0.0;
        let mut visit = |cell: usize| {
            for &i in &self.order[self.starts[cell]..self.starts[cell + 1]] {
                if dist_sq(&self.cloud.points[i], z) <= r2 {
                    total += self.cloud.weights[i];
                }
            }
        };
        if self.side < 3 {
            (0..self.side * self.side).for_each(&mut visit);
        } else {
            let n = self.side as isize;
            let cx = ((z.x() * self.side as f64) as isize).min(n - 1);
            let cy = ((z.y() * self.side as f64) as isize).min(n - 1);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let c = (cy + dy).rem_euclid(n) * n + (cx + dx).rem_euclid(n);
                    visit(c as usize);
                }
            }
        }
        total
    }
}

/// `ν(B(z, ρ))` through a spatial hash, `ρ ∈ (0, 1/2)`.
pub fn ball_mass(cloud: &PointCloudMeasure, z: &TorusPoint, rho: f64) -> Result<f64> {
    check_radius(rho)?;
    Ok(BallIndex::new(cloud, rho).ball_mass(z, rho))
}

fn check_radius(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("rho = {rho} outside (0, 1/2)")))
    }
}

/// Midpoint grid of `n × n` integration nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZGrid {
    pub n: usize,
}

impl ZGrid {
    pub fn new(n: usize) -> Self {
        ZGrid { n: n.max(1) }
    }

    /// Coarsest grid whose cell is at most `ρ/refine`, with `refine ≥ 4`.
    pub fn for_radius(rho: f64, refine: f64) -> Self {
        ZGrid::new((refine.max(4.0) / rho * (1.0 - 1e-12)).ceil() as usize)
    }

    pub fn cell(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn node(&self, ix: usize, iy: usize) -> TorusPoint {
        let h = self.cell();
        TorusPoint::from_lift(Vec2::new((ix as f64 + 0.5) * h, (iy as f64 + 0.5) * h))
    }

    /// Error unless the cell resolves balls of radius `ρ`.
    pub fn check(&self, rho: f64) -> Result<()> {
        check_radius(rho)?;
        let limit = rho / 4.0;
        if self.cell() > limit * (1.0 + 1e-12) {
            return Err(Error::GridTooCoarse { cell: self.cell(), limit });
        }
        Ok(())
    }

    /// Row-by-row midpoint sum of `f`, rows evaluated in parallel and added in order.
    fn integrate(&self, f: impl Fn(TorusPoint) -> f64 + Sync) -> f64 {
        let area = self.cell() * self.cell();
        let rows: Vec<f64> =
            (0..self.n).into_par_iter().map(|iy| (0..self.n).map(|ix| f(self.node(ix, iy)) * area).sum()).collect();
        rows.iter().sum()
    }
}

/// `⟨ν, ν′⟩_ρ`. Symmetric bit for bit.
pub fn rho_inner(a: &PointCloudMeasure, b: &PointCloudMeasure, rho: f64, grid: ZGrid) -> Result<f64> {
    grid.check(rho)?;
    let (ia, ib) = (BallIndex::new(a, rho), BallIndex::new(b, rho));
    let r4 = rho.powi(4);
    Ok(grid.integrate(|z| ia.ball_mass(&z, rho) * ib.ball_mass(&z, rho) / r4))
}

/// `‖ν‖²_ρ`.
pub fn rho_norm_sq(nu: &PointCloudMeasure, rho: f64, grid: ZGrid) -> Result<f64> {
    grid.check(rho)?;
    let idx = BallIndex::new(nu, rho);
    let r4 = rho.powi(4);
    Ok(grid.integrate(|z| {
        let m = idx.ball_mass(&z, rho);
        m * m / r4
    }))
}

/// `‖ν‖_ρ`; never exceeds `ν(𝕋²)/ρ²`.
pub fn rho_norm(nu: &PointCloudMeasure, rho: f64, grid: ZGrid) -> Result<f64> {
    rho_norm_sq(nu, rho, grid).map(f64::sqrt)
}

/// Exact `⟨ν, ν′⟩_ρ` for small clouds and `ρ < 1/4`, from pairwise lens areas.
pub fn rho_inner_exact(a: &PointCloudMeasure, b: &PointCloudMeasure, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 0.25) {
        return Err(Error::InvalidInput(format!("rho = {rho} outside (0, 1/4)")));
    }
    let mut total = 0.0;
    for (p, wp) in a.points.iter().zip(&a.weights) {
        for (q, wq) in b.points.iter().zip(&b.weights) {
            total += wp * wq * lens_area(dist(p, q), rho);
        }
    }
    Ok(total / rho.powi(4))
}

/// Area of the intersection of two disks of radius `r` whose centres are `d` apart.
pub fn lens_area(d: f64, r: f64) -> f64 {
    if d >= 2.0 * r {
        return 0.0;
    }
    2.0 * r * r * (d / (2.0 * r)).acos() - 0.5 * d * (4.0 * r * r - d * d).sqrt()
}

/// A positive radius field `x ↦ δ(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadiusField {
    Constant {
        value: f64,
    },
    /// `lo + (hi − lo)(1 + sin 2πf x · sin 2πf y)/2`.
    Waves {
        lo: f64,
        hi: f64,
        freq: u32,
    },
    /// Piecewise constant on an `n × n` partition with values drawn in `[lo, hi]`.
    Cells {
        lo: f64,
        hi: f64,
        values: Vec<f64>,
        n: usize,
    },
}

impl RadiusField {
    /// Random piecewise-constant field.
    pub fn random_cells(lo: f64, hi: f64, n: usize, rng: &mut Rng) -> Self {
        let values = (0..n * n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
        RadiusField::Cells { lo, hi, values, n }
    }

    pub fn at(&self, p: &TorusPoint) -> f64 {
        match self {
            RadiusField::Constant { value } => *value,
            RadiusField::Waves { lo, hi, freq } => {
                let w = 2.0 * PI * *freq as f64;
                lo + (hi - lo) * 0.5 * (1.0 + (w * p.x()).sin() * (w * p.y()).sin())
            }
            RadiusField::Cells { values, n, .. } => {
                let ix = ((p.x() * *n as f64) as usize).min(n - 1);
                let iy = ((p.y() * *n as f64) as usize).min(n - 1);
                values[iy * n + ix]
            }
        }
    }
}

/// Variable-radius norm and its comparison with the fixed-radius norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VarNormReport {
    /// `∫ ν(B(x,δ(x)))²/δ(x)⁴ dx`.
    pub value: f64,
    /// `‖ν‖²_ρ`.
    pub rho_norm_sq: f64,
    /// `C₄(1 + ln(δ₊/δ₋))‖ν‖²_ρ`.
    pub rhs: f64,
    pub pass: bool,
}

/// Compare the variable-radius norm with `C₄(1 + ln(δ₊/δ₋))‖ν‖²_ρ`.
///
/// Requires `0 < ρ ≤ δ₋ ≤ δ(x) ≤ δ₊ ≤ 1` at every grid node.
pub fn var_norm(
    nu: &PointCloudMeasure,
    field: &RadiusField,
    delta_lo: f64,
    delta_hi: f64,
    rho: f64,
    grid: ZGrid,
) -> Result<VarNormReport> {
    if !(0.0 < rho && rho <= delta_lo && delta_lo <= delta_hi && delta_hi <= 1.0) {
        return Err(Error::Declined(format!("need 0 < rho <= d- <= d+ <= 1, got {rho}, {delta_lo}, {delta_hi}")));
    }
    grid.check(rho)?;
    for iy in 0..grid.n {
        for ix in 0..grid.n {
            let d = field.at(&grid.node(ix, iy));
            if !(delta_lo <= d && d <= delta_hi) {
                return Err(Error::Declined(format!("radius field {d} leaves [{delta_lo}, {delta_hi}]")));
            }
        }
    }
    let wide = BallIndex::new(nu, delta_hi);
    let value = grid.integrate(|z| {
        let d = field.at(&z);
        let m = wide.ball_mass(&z, d);
        m * m / d.powi(4)
    });
    let fixed = rho_norm_sq(nu, rho, grid)?;
    let rhs = c4_comparison() * (1.0 + (delta_hi / delta_lo).ln()) * fixed;
    Ok(VarNormReport { value, rho_norm_sq: fixed, rhs, pass: value <= rhs })
}

/// One row of a norm trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NormSample {
    pub rho: f64,
    pub norm: f64,
    pub measure_id: usize,
}

/// Outcome of the absolute-continuity diagnostic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum AcVerdict {
    /// The trace at the smallest resolvable radius is within a factor 2 of the largest.
    Bounded { ratio: f64, exponent: f64 },
    /// Norm growth `‖ν‖_ρ ∝ ρ^exponent`.
    Blowup { ratio: f64, exponent: f64 },
}

impl AcVerdict {
    pub fn exponent(&self) -> f64 {
        match *self {
            AcVerdict::Bounded { exponent, .. } | AcVerdict::Blowup { exponent, .. } => exponent,
        }
    }

    pub fn is_bounded(&self) -> bool {
        matches!(self, AcVerdict::Bounded { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AcReport {
    pub trace: Vec<NormSample>,
    /// Radii actually evaluated, largest first.
    pub levels: Vec<f64>,
    /// `sup_k ‖ν_k‖_ρ` per evaluated level.
    pub sup_norms: Vec<f64>,
    pub verdict: AcVerdict,
    pub warnings: Vec<String>,
}

impl AcReport {
    /// CSV `rho,norm,measure_id`.
    pub fn trace_csv(&self) -> String {
        norm_trace_csv(&self.trace)
    }
}

pub fn norm_trace_csv(trace: &[NormSample]) -> String {
    let mut out = String::from("rho,norm,measure_id\n");
    for s in trace {
        writeln!(out, "{},{},{}", s.rho, s.norm, s.measure_id).expect("string write");
    }
    out
}

/// Evaluate `‖ν_k‖_ρ` on the dyadic schedule `ρ₀2^{−j}`, `j < levels`.
///
/// A level is skipped when `ρ` is below ten times the sample spacing of any measure.
/// The verdict compares `sup_k ‖ν_k‖` at the smallest and largest surviving levels;
/// the exponent is the least-squares slope of `ln sup_k ‖ν_k‖_ρ` against `ln ρ`.
pub fn ac_diagnostic(measures: &[PointCloudMeasure], rho0: f64, levels: usize, refine: f64) -> Result<AcReport> {
    if levels < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 dyadic levels, got {levels}")));
    }
    if measures.is_empty() {
        return Err(Error::InvalidInput("no measures".into()));
    }
    let spacing = measures.iter().map(|m| m.spacing).fold(0.0, f64::max);
    let mut warnings = Vec::new();
    let mut trace = Vec::new();
    let mut used = Vec::new();
    let mut sups = Vec::new();
    for j in 0..levels {
        let rho = rho0 * 0.5f64.powi(j as i32);
        if rho < 10.0 * spacing {
            warnings.push(format!("rho = {rho} below 10x sample spacing {spacing}; level skipped"));
            continue;
        }
        let grid = ZGrid::for_radius(rho, refine);
        let mut sup: f64 = 0.0;
        for (k, m) in measures.iter().enumerate() {
            let norm = rho_norm(m, rho, grid)?;
            sup = sup.max(norm);
            trace.push(NormSample { rho, norm, measure_id: k });
        }
        used.push(rho);
        sups.push(sup);
    }
    if used.len() < 2 {
        return Err(Error::Declined(format!("only {} resolvable levels", used.len())));
    }
    let xs: Vec<f64> = used.iter().map(|r| r.ln()).collect();
    let ys: Vec<f64> = sups.iter().map(|n| n.ln()).collect();
    let exponent = fit_line(&xs, &ys).map_or(f64::NAN, |f| f.slope);
    let ratio = sups[sups.len() - 1] / sups[0];
    let verdict =
        if ratio <= 2.0 { AcVerdict::Bounded { ratio, exponent } } else { AcVerdict::Blowup { ratio, exponent } };
    Ok(AcReport { trace, levels: used, sup_norms: sups, verdict, warnings })
}

/// Cell masses of a measure on an `nx × ny` partition, row-major with `x` fastest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridDensity {
    nx: usize,
    ny: usize,
    masses: Vec<f64>,
}

const RDSGRID_MAGIC: &str = "rdsgrid v1";

impl GridDensity {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        GridDensity { nx, ny, masses: vec![0.0; nx * ny] }
    }

    pub fn from_masses(nx: usize, ny: usize, masses: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || masses.len() != nx * ny {
            return Err(Error::InvalidInput(format!("{} masses for a {nx}x{ny} grid", masses.len())));
        }
        if let Some(m) = masses.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
            return Err(Error::InvalidInput(format!("cell mass {m} is not finite and nonnegative")));
        }
        Ok(GridDensity { nx, ny, masses })
    }

    /// Lebesgue measure.
    pub fn uniform(nx: usize, ny: usize) -> Self {
        GridDensity { nx, ny, masses: vec![1.0 / (nx * ny) as f64; nx * ny] }
    }

    /// Bin a point cloud.
    pub fn from_cloud(cloud: &PointCloudMeasure, nx: usize, ny: usize) -> Self {
        let mut g = GridDensity::zeros(nx, ny);
        for (p, w) in cloud.points.iter().zip(&cloud.weights) {
            let c = g.cell_of(p);
            g.masses[c] += w;
        }
        g
    }

    pub fn cell_of(&self, p: &TorusPoint) -> usize {
        let ix = ((p.x() * self.nx as f64) as usize).min(self.nx - 1);
        let iy = ((p.y() * self.ny as f64) as usize).min(self.ny - 1);
        iy * self.nx + ix
    }

    /// The same shape with masses rescaled to total `mass`; an all-zero grid stays zero.
    pub fn scaled_to(&self, mass: f64) -> GridDensity {
        let total = self.total();
        let f = if total > 0.0 { mass / total } else { 0.0 };
        GridDensity { nx: self.nx, ny: self.ny, masses: self.masses.iter().map(|m| m * f).collect() }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn cell_area(&self) -> f64 {
        1.0 / (self.nx * self.ny) as f64
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Density value (mass over area) of each cell.
    pub fn densities(&self) -> Vec<f64> {
        let a = self.cell_area();
        self.masses.iter().map(|m| m / a).collect()
    }

    /// Cell centres weighted by cell mass; empty cells are dropped.
    pub fn to_cloud(&self) -> PointCloudMeasure {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let m = self.masses[iy * self.nx + ix];
                if m > 0.0 {
                    points.push(TorusPoint::from_lift(Vec2::new(
                        (ix as f64 + 0.5) / self.nx as f64,
                        (iy as f64 + 0.5) / self.ny as f64,
                    )));
                    weights.push(m);
                }
            }
        }
        let spacing = 1.0 / self.nx.min(self.ny) as f64;
        PointCloudMeasure { mass: weights.iter().sum(), points, weights, spacing }
    }

    /// `½ Σ |m_i − m′_i|`; grids must have the same shape.
    pub fn tv_distance(&self, other: &GridDensity) -> Result<f64> {
        if (self.nx, self.ny) != (other.nx, other.ny) {
            return Err(Error::InvalidInput("grid shapes differ".into()));
        }
        Ok(0.5 * self.masses.iter().zip(&other.masses).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }

    /// `"rdsgrid v1 <nx> <ny>\n"` followed by the cell masses as little-endian binary64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{RDSGRID_MAGIC} {} {}\n", self.nx, self.ny).into_bytes();
        out.reserve(8 * self.masses.len());
        for m in &self.masses {
            out.extend_from_slice(&m.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::InvalidInput(format!("rdsgrid: {why}"));
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8"))?;
        let rest = header.strip_prefix(RDSGRID_MAGIC).ok_or_else(|| bad("wrong magic"))?;
        let dims: Vec<usize> =
            rest.split_whitespace().map(|t| t.parse().map_err(|_| bad("bad dimension"))).collect::<Result<_>>()?;
        let [nx, ny] = dims[..] else { return Err(bad("expected two dimensions")) };
        let body = &bytes[nl + 1..];
        if body.len() != 8 * nx * ny {
            return Err(bad(&format!("expected {} payload bytes, found {}", 8 * nx * ny, body.len())));
        }
        let masses = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        GridDensity::from_masses(nx, ny, masses)
    }
}
