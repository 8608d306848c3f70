//! End-to-end experiments: Cesàro averages, stationarity residuals, equidistribution
//! traces, orbit classification and the filtered norm trace.
//!
//! Random trajectories are advanced in fixed chunks of [`CHUNK`] particles; chunk `c`
//! of step `k` draws from stream `c` of `derive_seed(seed, k)`, so every result depends
//! on `(seed, partition)` only.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::admissible::{
    convolve, filtered_pipeline, make_admissible, AdmissibleMeasure, CurveMeasureAtom, PipelineConfig,
};
use crate::curves::{make_curve, CurveSpec};
use crate::dynamics::{Constants, Diffeo, System};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng};
use crate::seminorm::{rho_norm, GridDensity, PointCloudMeasure, ZGrid};
use crate::stats::fit_line;
use crate::torus::{dist, wrap_coord, TorusPoint};

/// Particles per random-stream chunk.
pub const CHUNK: usize = 4096;

/// Largest BFS depth accepted by [`orbit_classify`].
pub const ORBIT_DEPTH_CAP: usize = 64;

/// Points closer than this are the same orbit point.
pub const ORBIT_TOLERANCE: f64 = 1e-9;

/// Advance every particle by one independently drawn letter.
fn step_particles(sys: &System, points: &mut [TorusPoint], seed: u64, step: u64) {
    let sampler = sys.measure.sampler();
    let step_seed = derive_seed(seed, step);
    points.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let mut rng = stream_rng(step_seed, c as u64);
        for p in chunk {
            *p = sys.table[sampler.letter(&mut rng)].eval(p);
        }
    });
}

fn bin_into(acc: &mut [f64], grid: &GridDensity, points: &[TorusPoint], weights: &[f64]) {
    for (p, w) in points.iter().zip(weights) {
        acc[grid.cell_of(p)] += w;
    }
}

/// `replicas` copies of `x`, each of mass `1/replicas`: the Dirac input of a Monte Carlo run.
pub fn replicated(x: TorusPoint, replicas: usize) -> Result<PointCloudMeasure> {
    if replicas == 0 {
        return Err(Error::InvalidInput("replicas must be positive".into()));
    }
    PointCloudMeasure::new(vec![x; replicas], vec![1.0 / replicas as f64; replicas], 0.0)
}

/// Running Cesàro averages `ν̄_k = (1/k) Σ_{j<k} μ^{*j} * ν` for `k = 1..=n`, binned on
/// a `grid_n × grid_n` partition.
///
/// Each sample point follows its own random word, so `ν̄_k` is an unbiased estimate and
/// its mass equals the mass of `ν` for every `k`.
pub fn cesaro(sys: &System, nu: &PointCloudMeasure, n: usize, grid_n: usize, seed: u64) -> Result<Vec<GridDensity>> {
    if n == 0 || grid_n == 0 {
        return Err(Error::InvalidInput("n and grid size must be positive".into()));
    }
    let shape = GridDensity::zeros(grid_n, grid_n);
    let mut points = nu.points().to_vec();
    let mut avg = vec![0.0; grid_n * grid_n];
    let mut step = vec![0.0; grid_n * grid_n];
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            step_particles(sys, &mut points, seed, k as u64);
        }
        step.iter_mut().for_each(|m| *m = 0.0);
        bin_into(&mut step, &shape, &points, nu.weights());
        // Running mean: a step equal to the average leaves it unchanged bit for bit.
        let w = 1.0 / (k + 1) as f64;
        avg.iter_mut().zip(&step).for_each(|(a, s)| *a += (s - *a) * w);
        out.push(GridDensity::from_masses(grid_n, grid_n, avg.clone())?);
    }
    Ok(out)
}

/// `½ Σ |ν − Σ_i p_i (f_i)_*ν|` over cells for a piecewise-constant grid measure.
///
/// The pushforward is evaluated by pullback: each target cell is sampled at `sub × sub`
/// midpoints `y`, and `(f_*ν)` has density `ν(f⁻¹y)/|det Df(f⁻¹y)|` there. The result
/// is rescaled to the mass of `ν` before comparison.
pub fn stationary_residual_grid(sys: &System, nu: &GridDensity, sub: usize) -> Result<f64> {
    if sub == 0 {
        return Err(Error::InvalidInput("sub-sampling must be positive".into()));
    }
    let (nx, ny) = (nu.nx(), nu.ny());
    let dens = nu.densities();
    let sub_area = nu.cell_area() / (sub * sub) as f64;
    let rows: Vec<Result<Vec<f64>>> = (0..ny)
        .into_par_iter()
        .map(|iy| {
            let mut row = vec![0.0; nx];
            for (ix, cell) in row.iter_mut().enumerate() {
                for sx in 0..sub {
                    for sy in 0..sub {
                        let y = TorusPoint::new(
                            (ix as f64 + (sx as f64 + 0.5) / sub as f64) / nx as f64,
                            (iy as f64 + (sy as f64 + 0.5) / sub as f64) / ny as f64,
                        )?;
                        for &(i, p) in sys.measure.atoms() {
                            let f = &sys.table[i];
                            let x = f.inverse_eval(&y)?;
                            *cell += p * dens[nu.cell_of(&x)] / f.jacobian(&x) * sub_area;
                        }
                    }
                }
            }
            Ok(row)
        })
        .collect();
    let mut pushed = Vec::with_capacity(nx * ny);
    for r in rows {
        pushed.extend(r?);
    }
    let total: f64 = pushed.iter().sum();
    if total > 0.0 {
        let scale = nu.total() / total;
        pushed.iter_mut().for_each(|m| *m *= scale);
    }
    nu.tv_distance(&GridDensity::from_masses(nx, ny, pushed)?)
}

/// Residual of a point cloud: every point is pushed by every atom with its weight and
/// both clouds are binned on a `grid_n × grid_n` partition.
pub fn stationary_residual_cloud(sys: &System, nu: &PointCloudMeasure, grid_n: usize) -> Result<f64> {
    if grid_n == 0 {
        return Err(Error::InvalidInput("grid size must be positive".into()));
    }
    let before = GridDensity::from_cloud(nu, grid_n, grid_n);
    let parts: Vec<PointCloudMeasure> =
        sys.measure.atoms().iter().map(|&(i, p)| nu.push(sys.table[i].as_ref()).scaled(p)).collect();
    let after = GridDensity::from_cloud(&PointCloudMeasure::concat(&parts), grid_n, grid_n);
    before.tv_distance(&after)
}

/// One checkpoint of an equidistribution trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EquidistributionRow {
    pub n: usize,
    /// Grid total variation between the Cesàro average and the reference.
    pub tv: f64,
    /// Statistical floor: half the distance between the two half-sample averages.
    pub floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquidistributionTrace {
    pub rows: Vec<EquidistributionRow>,
    pub replicas: usize,
    pub grid: usize,
}

impl EquidistributionTrace {
    /// CSV `n,tv,floor`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,tv,floor\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.n, r.tv, r.floor).expect("string write");
        }
        out
    }
}

/// Distance of `(1/n) Σ_{j<n} μ^{*j} * δ_x` to `reference` at each checkpoint `n`.
///
/// `replicas` independent trajectories start at `x`; the first and second halves are
/// also averaged separately and their distance gives the statistical floor.
pub fn equidistribution(
    sys: &System,
    x: TorusPoint,
    checkpoints: &[usize],
    reference: &GridDensity,
    replicas: usize,
    seed: u64,
) -> Result<EquidistributionTrace> {
    if replicas < 2 {
        return Err(Error::InvalidInput("need at least 2 replicas for the split-half floor".into()));
    }
    if checkpoints.is_empty() || checkpoints.windows(2).any(|w| w[0] >= w[1]) || checkpoints[0] == 0 {
        return Err(Error::InvalidInput("checkpoints must be positive and strictly increasing".into()));
    }
    let (nx, ny) = (reference.nx(), reference.ny());
    if nx != ny {
        return Err(Error::InvalidInput("reference grid must be square".into()));
    }
    let half = replicas / 2;
    let mut points = vec![x; replicas];
    let weights = vec![1.0; replicas];
    let mut acc = [vec![0.0; nx * ny], vec![0.0; nx * ny]];
    let mut rows = Vec::new();
    let mut next = 0;
    let last = *checkpoints.last().expect("non-empty");
    for k in 0..last {
        if k > 0 {
            step_particles(sys, &mut points, seed, k as u64);
        }
        bin_into(&mut acc[0], reference, &points[..half], &weights[..half]);
        bin_into(&mut acc[1], reference, &points[half..], &weights[half..]);
        if k + 1 == checkpoints[next] {
            let n = k + 1;
            let scale = |a: &[f64], count: usize| -> Result<GridDensity> {
                let m = a.iter().map(|v| v / (n * count) as f64).collect();
                GridDensity::from_masses(nx, ny, m)
            };
            let full_masses: Vec<f64> =
                acc[0].iter().zip(&acc[1]).map(|(a, b)| (a + b) / (n * replicas) as f64).collect();
            let full = GridDensity::from_masses(nx, ny, full_masses)?;
            let first = scale(&acc[0], half)?;
            let second = scale(&acc[1], replicas - half)?;
            rows.push(EquidistributionRow {
                n,
                tv: full.tv_distance(reference)?,
                floor: 0.5 * first.tv_distance(&second)?,
            });
            next += 1;
        }
    }
    Ok(EquidistributionTrace { rows, replicas, grid: nx })
}

/// Outcome of the orbit BFS.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum OrbitClass {
    /// The explored set is closed under every generator.
    Finite {
        size: usize,
        points: Vec<TorusPoint>,
        /// Sorted cycle lengths of each generator acting on the orbit.
        cycles: Vec<Vec<usize>>,
    },
    /// Every `ε`-ball meets the explored set.
    Dense {
        depth: usize,
        epsilon: f64,
    },
    Inconclusive {
        coverage: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrbitReport {
    pub class: OrbitClass,
    /// Images not expanded because their `ε/4` cell was already occupied.
    pub collisions: usize,
    pub explored: usize,
    pub depth: usize,
}

struct ExactSet {
    points: Vec<TorusPoint>,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl ExactSet {
    const SCALE: f64 = 1.0 / ORBIT_TOLERANCE;

    fn key(p: &TorusPoint) -> (i64, i64) {
        ((p.x() * Self::SCALE).floor() as i64, (p.y() * Self::SCALE).floor() as i64)
    }

    fn find(&self, p: &TorusPoint) -> Option<usize> {
        let (kx, ky) = Self::key(p);
        let wrap = Self::SCALE.round() as i64;
        for dx in -1..=1 {
            for dy in -1..=1 {
                let k = ((kx + dx).rem_euclid(wrap), (ky + dy).rem_euclid(wrap));
                if let Some(ids) = self.buckets.get(&k) {
                    if let Some(&i) = ids.iter().find(|&&i| dist(&self.points[i], p) <= ORBIT_TOLERANCE) {
                        return Some(i);
                    }
                }
            }
        }
        None
    }

    fn insert(&mut self, p: TorusPoint) -> usize {
        let id = self.points.len();
        self.buckets.entry(Self::key(&p)).or_default().push(id);
        self.points.push(p);
        id
    }
}

fn cell_index(p: &TorusPoint, n: usize) -> (usize, usize) {
    (((p.x() * n as f64) as usize).min(n - 1), ((p.y() * n as f64) as usize).min(n - 1))
}

fn coverage(points: &[TorusPoint], epsilon: f64) -> f64 {
    // A point in a cell of side ε/2 is within ε/√2 of everything in that cell.
    let n = (2.0 / epsilon).ceil() as usize;
    let hit: HashSet<(usize, usize)> = points.iter().map(|p| cell_index(p, n)).collect();
    hit.len() as f64 / (n * n) as f64
}

/// Classify the forward orbit of `x` under the semigroup generated by `generators`.
pub fn orbit_classify(generators: &[Arc<Diffeo>], x: TorusPoint, depth: usize, epsilon: f64) -> Result<OrbitReport> {
    if generators.is_empty() {
        return Err(Error::InvalidInput("no generators".into()));
    }
    if depth > ORBIT_DEPTH_CAP {
        return Err(Error::InvalidInput(format!("depth {depth} exceeds cap {ORBIT_DEPTH_CAP}")));
    }
    if !(epsilon > 4.0 * ORBIT_TOLERANCE && epsilon <= 0.5) {
        return Err(Error::InvalidInput(format!("epsilon {epsilon} is not resolvable")));
    }
    let fine = (4.0 / epsilon).ceil() as usize;
    let mut set = ExactSet { points: Vec::new(), buckets: HashMap::new() };
    let mut occupied = HashSet::new();
    occupied.insert(cell_index(&x, fine));
    set.insert(x);
    let mut frontier: VecDeque<usize> = VecDeque::from([0]);
    let mut collisions = 0;
    let mut reached = 0;
    while reached < depth && !frontier.is_empty() {
        reached += 1;
        let mut next = VecDeque::new();
        for id in frontier.drain(..) {
            let p = set.points[id];
            for g in generators {
                let q = g.eval(&p);
                if set.find(&q).is_some() {
                    continue;
                }
                if !occupied.insert(cell_index(&q, fine)) {
                    collisions += 1;
                    continue;
                }
                next.push_back(set.insert(q));
            }
        }
        frontier = next;
        if coverage(&set.points, epsilon) >= 1.0 {
            let class = OrbitClass::Dense { depth: reached, epsilon };
            return Ok(OrbitReport { class, collisions, explored: set.points.len(), depth: reached });
        }
    }
    let explored = set.points.len();
    if frontier.is_empty() && collisions == 0 {
        let mut cycles = Vec::with_capacity(generators.len());
        for g in generators {
            let image: Option<Vec<usize>> = set.points.iter().map(|p| set.find(&g.eval(p))).collect();
            match image {
                Some(perm) => cycles.push(cycle_lengths(&perm)),
                None => {
                    let class = OrbitClass::Inconclusive { coverage: coverage(&set.points, epsilon) };
                    return Ok(OrbitReport { class, collisions, explored, depth: reached });
                }
            }
        }
        let class = OrbitClass::Finite { size: explored, points: set.points, cycles };
        return Ok(OrbitReport { class, collisions, explored, depth: reached });
    }
    let class = OrbitClass::Inconclusive { coverage: coverage(&set.points, epsilon) };
    Ok(OrbitReport { class, collisions, explored, depth: reached })
}

/// Cycle lengths of a map on `0..n`, sorted; `None`-free input must be a permutation.
fn cycle_lengths(perm: &[usize]) -> Vec<usize> {
    let mut seen = vec![false; perm.len()];
    let mut out = Vec::new();
    for start in 0..perm.len() {
        if seen[start] {
            continue;
        }
        let mut len = 0;
        let mut i = start;
        while !seen[i] {
            seen[i] = true;
            i = perm[i];
            len += 1;
        }
        out.push(len);
    }
    out.sort_unstable();
    out
}

/// Exact orbit of the rational point `numerators / denominator` under integer matrices,
/// by BFS on `(ℤ/denominator)²` to `depth` levels. Points are returned as numerators.
pub fn rational_orbit(
    matrices: &[[[i64; 2]; 2]],
    numerators: [i64; 2],
    denominator: i64,
    depth: usize,
) -> Vec<[i64; 2]> {
    let d = denominator;
    let start = [numerators[0].rem_euclid(d), numerators[1].rem_euclid(d)];
    let mut seen = vec![start];
    let mut known: HashSet<[i64; 2]> = HashSet::from([start]);
    let mut frontier = vec![start];
    for _ in 0..depth {
        let mut next = Vec::new();
        for v in &frontier {
            for m in matrices {
                let w =
                    [(m[0][0] * v[0] + m[0][1] * v[1]).rem_euclid(d), (m[1][0] * v[0] + m[1][1] * v[1]).rem_euclid(d)];
                if known.insert(w) {
                    seen.push(w);
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    seen
}

/// `side²` parallel segments of equal mass, one starting at the lower-left corner of each
/// cell of a `side × side` grid. A curve-supported stand-in for Lebesgue measure.
pub fn segment_lattice(side: usize, length: f64, angle: f64, h_max: f64) -> Result<AdmissibleMeasure> {
    if side == 0 {
        return Err(Error::InvalidInput("side must be positive".into()));
    }
    let mass = 1.0 / (side * side) as f64;
    let mut atoms = Vec::with_capacity(side * side);
    for iy in 0..side {
        for ix in 0..side {
            let start = TorusPoint::new(wrap_coord(ix as f64 / side as f64), wrap_coord(iy as f64 / side as f64))?;
            let curve = make_curve(CurveSpec::Segment { angle }, length, start, h_max)?;
            atoms.push(CurveMeasureAtom::uniform(curve, mass)?);
        }
    }
    Ok(make_admissible(atoms))
}

/// Initial measure of a norm trace.
#[derive(Clone, Debug)]
pub enum TraceSeed {
    /// Curve-supported measure: both the filtered and the unfiltered trace are computed.
    Admissible(AdmissibleMeasure),
    /// Point mass, followed by `replicas` random trajectories; unfiltered trace only.
    Dirac { point: TorusPoint, replicas: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub m: usize,
    pub rho: f64,
    pub filtered_norm: Option<f64>,
    pub unfiltered_norm: f64,
    pub retained_mass: Option<f64>,
    /// Retained mass at least `(1 − c)` times the initial mass.
    pub retention_pass: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceReport {
    pub rows: Vec<TraceRow>,
    /// `max_m ‖ν_{d,m,c}‖ / ‖ν_{d,0,c}‖`; `None` without a filtered column.
    pub filtered_ratio: Option<f64>,
    pub bounded: Option<bool>,
    /// Least-squares slope of `ln ‖·‖_ρ` against `ln ρ`.
    pub filtered_exponent: Option<f64>,
    pub unfiltered_exponent: Option<f64>,
    pub warnings: Vec<String>,
}

impl TraceReport {
    /// CSV `m,rho,filtered_norm,unfiltered_norm,retained_mass`; absent values are empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = String::from("m,rho,filtered_norm,unfiltered_norm,retained_mass\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.m, r.rho, opt(r.filtered_norm), r.unfiltered_norm, opt(r.retained_mass))
                .expect("string write");
        }
        out
    }
}

/// Smallest radius a trace stage will evaluate.
pub const MIN_TRACE_RHO: f64 = 1e-3;

fn exponent(rows: &[TraceRow], column: impl Fn(&TraceRow) -> Option<f64>) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows.iter().filter_map(|r| column(r).map(|v| (r.rho.ln(), v.ln()))).unzip();
    fit_line(&xs, &ys).map(|f| f.slope)
}

/// Norm trace over stages `m = 0..=cfg.m`, at radius `k.rho_at(m)`.
///
/// Stage `m` runs [`filtered_pipeline`] with `m` stages (same seed, so its retained mass
/// equals that run's ledger) and, for contrast, the unfiltered `μ^{*(d + m·p₀)} * ν`
/// with the same cuts and budget. Measures are projected at ten samples per radius.
/// Stages whose radius is below [`MIN_TRACE_RHO`] are truncated with a warning.
pub fn ly_trace(
    sys: &System,
    seed: &TraceSeed,
    k: &Constants,
    cfg: &PipelineConfig,
    refine: f64,
) -> Result<TraceReport> {
    let mut params = k.clone();
    params.p0 = cfg.p0;
    params.eta = cfg.eta;
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    let mut unfiltered: Option<AdmissibleMeasure> = None;
    let mut cloud: Option<Vec<TorusPoint>> = None;
    for m in 0..=cfg.m {
        let rho = params.rho_at(m);
        if rho < MIN_TRACE_RHO {
            warnings.push(format!("stage {m}: rho = {rho:e} is not resolvable; trace truncated"));
            break;
        }
        let grid = ZGrid::for_radius(rho, refine);
        let samples = 10.0 / rho;
        let row = match seed {
            TraceSeed::Admissible(nu) => {
                let mut stage_cfg = cfg.clone();
                stage_cfg.m = m;
                let filtered = filtered_pipeline(sys, nu, k, &stage_cfg)?;
                for w in &filtered.warnings {
                    if !warnings.contains(w) {
                        warnings.push(w.clone());
                    }
                }
                let next = match unfiltered.take() {
                    None => {
                        let (atoms, _) = convolve(sys, nu.atoms(), cfg.d, cfg.budget, cfg.words, cfg.seed)?;
                        make_admissible(atoms)
                    }
                    Some(prev) => {
                        let cut = prev.cut(params.cut_length(m))?;
                        let stream = derive_seed(cfg.seed, 500 + m as u64);
                        let (atoms, _) = convolve(sys, cut.atoms(), cfg.p0, cfg.budget, cfg.words, stream)?;
                        make_admissible(atoms)
                    }
                };
                let unfiltered_norm = rho_norm(&next.project(samples)?, rho, grid)?;
                let filtered_norm = rho_norm(&filtered.measure.project(samples)?, rho, grid)?;
                unfiltered = Some(next);
                let retained = filtered.retained_mass;
                TraceRow {
                    m,
                    rho,
                    filtered_norm: Some(filtered_norm),
                    unfiltered_norm,
                    retained_mass: Some(retained),
                    retention_pass: Some(retained >= (1.0 - params.c) * nu.mass()),
                }
            }
            TraceSeed::Dirac { point, replicas } => {
                let steps = if m == 0 { cfg.d } else { cfg.p0 };
                let mut pts = match cloud.take() {
                    Some(p) => p,
                    None => replicated(*point, *replicas)?.points().to_vec(),
                };
                let base = if m == 0 { 0 } else { cfg.d + (m - 1) * cfg.p0 };
                for s in 0..steps {
                    step_particles(sys, &mut pts, cfg.seed, (base + s + 1) as u64);
                }
                let w = vec![1.0 / pts.len() as f64; pts.len()];
                let measure = PointCloudMeasure::new(pts.clone(), w, 0.0)?;
                cloud = Some(pts);
                TraceRow {
                    m,
                    rho,
                    filtered_norm: None,
                    unfiltered_norm: rho_norm(&measure, rho, grid)?,
                    retained_mass: None,
                    retention_pass: None,
                }
            }
        };
        if !(row.unfiltered_norm.is_finite() && row.filtered_norm.is_none_or(f64::is_finite)) {
            return Err(Error::NonFinite);
        }
        rows.push(row);
    }
    if rows.windows(2).any(|w| matches!((w[0].retained_mass, w[1].retained_mass), (Some(a), Some(b)) if b > a + 1e-12))
    {
        warnings.push("retained mass increased between stages (resampling noise)".into());
    }
    let filtered_ratio = match rows.first().and_then(|r| r.filtered_norm) {
        Some(first) => rows.iter().filter_map(|r| r.filtered_norm).reduce(f64::max).map(|mx| mx / first),
        None => None,
    };
    Ok(TraceReport {
        filtered_exponent: exponent(&rows, |r| r.filtered_norm),
        unfiltered_exponent: exponent(&rows, |r| Some(r.unfiltered_norm)),
        bounded: filtered_ratio.map(|r| r <= 2.0),
        filtered_ratio,
        rows,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admissible::WordSet;
    use crate::dynamics::RhoSchedule;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn pt(x: f64, y: f64) -> TorusPoint {
        TorusPoint::new(x, y).unwrap()
    }

    fn identity_system() -> System {
        System::single(Diffeo::identity())
    }

    #[test]
    fn cesaro_of_identity_is_the_input() {
        let mut rng: Rng = stream_rng(1, 0);
        let nu = PointCloudMeasure::uniform(2000, &mut rng);
        let direct = GridDensity::from_cloud(&nu, 16, 16);
        for avg in cesaro(&identity_system(), &nu, 5, 16, 3).unwrap() {
            for (a, b) in avg.masses().iter().zip(direct.masses()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cesaro_conserves_mass_and_is_affine() {
        let sys = System::ab();
        let mut rng: Rng = stream_rng(2, 0);
        let a = PointCloudMeasure::uniform(500, &mut rng).scaled(0.7);
        let out = cesaro(&sys, &a, 6, 8, 9).unwrap();
        for g in &out {
            assert!((g.total() - 0.7).abs() < 1e-12);
        }
        // Scaling the input scales every average.
        let doubled = cesaro(&sys, &a.scaled(2.0), 6, 8, 9).unwrap();
        for (g, h) in out.iter().zip(&doubled) {
            for (x, y) in g.masses().iter().zip(h.masses()) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cesaro_keeps_lebesgue_for_area_preserving_letters() {
        let sys = System::ab();
        let mut rng: Rng = stream_rng(3, 0);
        let side = 400;
        let nu = PointCloudMeasure::uniform_jittered(side, &mut rng);
        let grid = 32;
        let p = 1.0 / (grid * grid) as f64;
        let count = (side * side) as f64;
        let sigma = (p * (1.0 - p) / count).sqrt();
        for avg in cesaro(&sys, &nu, 8, grid, 4).unwrap() {
            let dev = avg.masses().iter().map(|m| (m - p).abs()).fold(0.0, f64::max);
            assert!(dev < 3.0 * sigma, "sup deviation {dev} vs sigma {sigma}");
        }
    }

    #[test]
    fn lebesgue_grid_is_stationary() {
        let sys = System::ab();
        let leb = GridDensity::uniform(128, 128);
        let r = stationary_residual_grid(&sys, &leb, 2).unwrap();
        assert!(r < 1e-3, "residual {r}");
    }

    #[test]
    fn lebesgue_grid_is_stationary_for_perturbed_letters() {
        let sys = System::ab_perturbed(0.02).unwrap();
        let leb = GridDensity::uniform(64, 64);
        let r = stationary_residual_grid(&sys, &leb, 2).unwrap();
        assert!(r < 1e-3, "residual {r}");
    }

    #[test]
    fn fixed_point_mass_is_stationary() {
        let sys = System::ab();
        let r = stationary_residual_cloud(&sys, &PointCloudMeasure::dirac(pt(0.0, 0.0)), 128).unwrap();
        assert_eq!(r, 0.0);
        let moved = stationary_residual_cloud(&sys, &PointCloudMeasure::dirac(pt(0.3, 0.1)), 128).unwrap();
        assert!((moved - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_band_is_not_stationary() {
        let sys = System::ab();
        let n = 64;
        let masses: Vec<f64> = (0..n * n).map(|c| if c / n < n / 2 { 2.0 / (n * n) as f64 } else { 0.0 }).collect();
        let band = GridDensity::from_masses(n, n, masses).unwrap();
        let r = stationary_residual_grid(&sys, &band, 2).unwrap();
        assert!(r > 0.1, "residual {r}");
    }

    #[test]
    fn fixed_point_never_equidistributes() {
        let sys = System::ab();
        let leb = GridDensity::uniform(64, 64);
        let trace = equidistribution(&sys, pt(0.0, 0.0), &[1, 10, 100], &leb, 64, 5).unwrap();
        for r in &trace.rows {
            assert!((r.tv - (1.0 - 1.0 / 4096.0)).abs() < 1e-12);
            assert_eq!(r.floor, 0.0);
        }
    }

    #[test]
    fn generic_point_equidistributes() {
        let sys = System::ab();
        let leb = GridDensity::uniform(32, 32);
        // Few replicas over many steps keep the early-step bias below the sampling floor.
        let trace = equidistribution(&sys, pt(0.1234567, 0.7654321), &[1, 8, 64, 512, 4096], &leb, 64, 6).unwrap();
        let tv: Vec<f64> = trace.rows.iter().map(|r| r.tv).collect();
        assert!(tv.windows(2).all(|w| w[1] < w[0]), "{tv:?}");
        let last = trace.rows.last().unwrap();
        assert!(last.tv < 2.0 * last.floor, "{last:?}");
    }

    #[test]
    fn cat_map_orbit_equidistributes() {
        let sys = System::builtin("cat").unwrap();
        let leb = GridDensity::uniform(16, 16);
        let trace = equidistribution(&sys, pt(0.1234567, 0.7654321), &[10, 100, 1000, 10000], &leb, 2, 7).unwrap();
        let tv: Vec<f64> = trace.rows.iter().map(|r| r.tv).collect();
        assert!(tv.windows(2).all(|w| w[1] < w[0]), "{tv:?}");
        assert!(tv[3] < 0.1, "{tv:?}");
    }

    #[test]
    fn origin_orbit_is_a_single_point() {
        let sys = System::ab();
        let r = orbit_classify(&sys.table, pt(0.0, 0.0), 10, 0.05).unwrap();
        match r.class {
            OrbitClass::Finite { size, cycles, .. } => {
                assert_eq!(size, 1);
                assert_eq!(cycles, vec![vec![1], vec![1]]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn third_lattice_orbit_matches_rational_bfs() {
        let sys = System::ab();
        let r = orbit_classify(&sys.table, pt(1.0 / 3.0, 1.0 / 3.0), 12, 0.05).unwrap();
        let oracle = rational_orbit(&[[[1, 1], [0, 1]], [[1, 0], [1, 1]]], [1, 1], 3, 12);
        let OrbitClass::Finite { size, points, .. } = r.class else { panic!("{:?}", r.class) };
        assert_eq!(size, oracle.len());
        assert!(size <= 9);
        let mut got: Vec<[i64; 2]> =
            points.iter().map(|p| [(p.x() * 3.0).round() as i64 % 3, (p.y() * 3.0).round() as i64 % 3]).collect();
        let mut want = oracle.clone();
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn generic_orbit_is_dense() {
        let sys = System::ab();
        let r = orbit_classify(&sys.table, pt(0.1234567, 0.7654321), 20, 0.05).unwrap();
        assert!(matches!(r.class, OrbitClass::Dense { .. }), "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn rational_orbits_agree_with_exact_arithmetic(den in 2i64..8, a in 0i64..8, b in 0i64..8, depth in 1usize..=12) {
            let sys = System::ab();
            let (a, b) = (a % den, b % den);
            let x = pt(a as f64 / den as f64, b as f64 / den as f64);
            let oracle = rational_orbit(&[[[1, 1], [0, 1]], [[1, 0], [1, 1]]], [a, b], den, depth);
            // The float BFS closes exactly when the rational BFS finds nothing new by `depth`.
            let closed = rational_orbit(&[[[1, 1], [0, 1]], [[1, 0], [1, 1]]], [a, b], den, depth - 1).len() == oracle.len();
            let r = orbit_classify(&sys.table, x, depth, 0.05).unwrap();
            if closed {
                prop_assert!(matches!(r.class, OrbitClass::Finite { size, .. } if size == oracle.len()), "{:?}", r.class);
            } else {
                prop_assert!(!matches!(r.class, OrbitClass::Finite { .. }), "{:?}", r.class);
            }
        }
    }

    #[test]
    fn cycle_lengths_of_permutation() {
        assert_eq!(cycle_lengths(&[1, 2, 0, 4, 3, 5]), vec![1, 2, 3]);
    }

    fn trace_constants() -> Constants {
        let mut k = Constants::desk_default();
        k.rho = RhoSchedule::Dyadic { rho0: 0.04 };
        k
    }

    fn trace_config(m: usize) -> PipelineConfig {
        let mut cfg = PipelineConfig::new(4, m, 0.34);
        cfg.budget = 8;
        cfg.override_constants = true;
        cfg.words = WordSet::Exact;
        cfg
    }

    #[test]
    fn empty_pipeline_trace_has_equal_columns() {
        let sys = System::ab_perturbed(0.02).unwrap();
        let nu = segment_lattice(4, 0.05, std::f64::consts::FRAC_PI_4, 5e-3).unwrap();
        let r = ly_trace(&sys, &TraceSeed::Admissible(nu), &trace_constants(), &trace_config(0), 4.0).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].filtered_norm, Some(r.rows[0].unfiltered_norm));
    }

    #[test]
    fn trace_mass_matches_pipeline_ledger() {
        let sys = System::ab_perturbed(0.02).unwrap();
        let nu = segment_lattice(2, 0.05, std::f64::consts::FRAC_PI_4, 5e-3).unwrap();
        let k = trace_constants();
        let cfg = trace_config(2);
        let r = ly_trace(&sys, &TraceSeed::Admissible(nu.clone()), &k, &cfg, 4.0).unwrap();
        for row in &r.rows {
            let mut c = cfg.clone();
            c.m = row.m;
            let p = filtered_pipeline(&sys, &nu, &k, &c).unwrap();
            assert_eq!(row.retained_mass, Some(p.retained_mass));
            assert!(row.retention_pass.unwrap());
        }
    }

    #[test]
    fn short_atom_filtered_trace_grows_slower_than_point_mass_bound() {
        let sys = System::ab_perturbed(0.02).unwrap();
        let curve = make_curve(CurveSpec::Segment { angle: 0.7 }, 1e-3, pt(0.3, 0.6), 1e-4).unwrap();
        let nu = make_admissible(vec![CurveMeasureAtom::uniform(curve, 1.0).unwrap()]);
        let r = ly_trace(&sys, &TraceSeed::Admissible(nu), &trace_constants(), &trace_config(2), 4.0).unwrap();
        for row in &r.rows {
            // ‖ν‖_ρ ≤ √π·mass/ρ for any measure; the grid quadrature at cell ρ/4 adds a few percent.
            let bound = std::f64::consts::PI.sqrt() / row.rho;
            assert!(row.unfiltered_norm <= bound * 1.03, "{row:?} bound {bound}");
        }
        assert!(r.filtered_exponent.unwrap() > -1.0, "{r:?}");
    }

    #[test]
    fn fixed_point_trace_blows_up_like_inverse_radius() {
        let sys = System::ab_perturbed(0.02).unwrap();
        let seed = TraceSeed::Dirac { point: pt(0.0, 0.0), replicas: 16 };
        let r = ly_trace(&sys, &seed, &trace_constants(), &trace_config(3), 8.0).unwrap();
        assert!((r.unfiltered_exponent.unwrap() + 1.0).abs() < 0.1, "{r:?}");
        assert!(r.filtered_exponent.is_none());
    }

    #[test]
    fn unresolvable_radius_truncates() {
        let sys = System::ab();
        let mut k = trace_constants();
        k.rho = RhoSchedule::Dyadic { rho0: 0.003 };
        let seed = TraceSeed::Dirac { point: pt(0.0, 0.0), replicas: 2 };
        let r = ly_trace(&sys, &seed, &k, &trace_config(4), 4.0).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.warnings.iter().any(|w| w.contains("truncated")));
    }

    #[test]
    fn replicated_rejects_zero() {
        assert!(replicated(pt(0.0, 0.0), 0).is_err());
    }
}
