//! C² curves on the torus as node chains carrying exact jets.
//!
//! A curve remembers the analytic seed it came from and the maps pushed through it.
//! Every node stores its seed parameter `u`, the lifted position and the first two
//! `u`-derivatives, which are propagated exactly (`c_u ← Df c_u`,
//! `c_uu ← Df c_uu + D²f(c_u, c_u)`). Curvature and speed are read off the jets;
//! refinement bisects in `u` and re-evaluates new nodes from the seed, so no
//! differentiation noise accumulates over long words.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ln_k1, Constants, Diffeo, SmoothMap, Word};
use crate::error::{Error, Result};
use crate::linalg::{Mat2, Vec2};
use crate::torus::{dist, TorusPoint};

/// Default largest arclength gap between adjacent nodes.
pub const DEFAULT_H_MAX: f64 = 1e-3;

/// Largest `|ln(‖c_u‖ ratio)|` across one gap; keeps the Hermite arclength accurate where
/// the parametrization speed changes quickly.
pub const MAX_SPEED_STEP: f64 = 0.02;

/// Shape of a seed curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurveSpec {
    /// Straight segment leaving `start` at `angle`.
    Segment { angle: f64 },
    /// Counter-clockwise circular arc starting at `start`, where the radius vector from
    /// the center has angle `start_angle`.
    Arc { radius: f64, start_angle: f64 },
    /// Graph `y = y₀ + amp·(sin(2π·freq·(x − x₀) + phase) − sin phase)` through `start`.
    TrigGraph { amp: f64, freq: f64, phase: f64 },
}

#[derive(Clone, Debug)]
enum Seed {
    Segment { start: Vec2, dir: Vec2 },
    Arc { center: Vec2, radius: f64, theta0: f64 },
    Graph { start: Vec2, amp: f64, freq: f64, phase: f64 },
}

impl Seed {
    /// Position and first two parameter derivatives.
    fn jet(&self, u: f64) -> (Vec2, Vec2, Vec2) {
        match *self {
            Seed::Segment { start, dir } => (start + dir.scale(u), dir, Vec2::ZERO),
            Seed::Arc { center, radius, theta0 } => {
                let th = theta0 + u / radius;
                let (s, c) = th.sin_cos();
                (center + Vec2::new(c, s).scale(radius), Vec2::new(-s, c), Vec2::new(-c, -s).scale(1.0 / radius))
            }
            Seed::Graph { start, amp, freq, phase } => {
                let w = TAU * freq;
                let (s, c) = (w * u + phase).sin_cos();
                (
                    start + Vec2::new(u, amp * (s - phase.sin())),
                    Vec2::new(1.0, amp * w * c),
                    Vec2::new(0.0, -amp * w * w * s),
                )
            }
        }
    }

    fn speed(&self, u: f64) -> f64 {
        self.jet(u).1.norm()
    }
}

/// One map applied to a curve, followed by an integer recentering of the lift.
#[derive(Debug)]
struct Step {
    prev: Option<Arc<Step>>,
    map: Arc<dyn SmoothMap>,
    shift: Vec2,
}

fn history_vec(h: &Option<Arc<Step>>) -> Vec<Arc<Step>> {
    let mut out = Vec::new();
    let mut cur = h.clone();
    while let Some(s) = cur {
        cur = s.prev.clone();
        out.push(s);
    }
    out.reverse();
    out
}

/// A node: seed parameter, lifted position, `u`-derivatives and arclength from the start.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Node {
    pub u: f64,
    pub pos: Vec2,
    pub du: Vec2,
    pub duu: Vec2,
    pub s: f64,
}

impl Node {
    pub fn point(&self) -> TorusPoint {
        TorusPoint::from_lift(self.pos)
    }

    /// `‖c_u‖`.
    pub fn speed(&self) -> f64 {
        self.du.norm()
    }

    /// `d‖c_u‖/du`.
    pub fn speed_u(&self) -> f64 {
        self.du.dot(self.duu) / self.du.norm()
    }

    pub fn tangent(&self) -> Vec2 {
        self.du.scale(1.0 / self.du.norm())
    }

    /// Signed curvature `det(c_u, c_uu)/‖c_u‖³`.
    pub fn curvature(&self) -> f64 {
        self.du.cross(self.duu) / self.du.norm().powi(3)
    }

    fn push(&self, map: &dyn SmoothMap) -> Node {
        let jet = map.lift_jet(self.pos);
        Node {
            u: self.u,
            pos: jet.image,
            du: jet.d * self.du,
            duu: jet.d * self.duu + jet.d2.apply(self.du, self.du),
            s: self.s,
        }
    }
}

/// Arclength between two nodes from the cubic Hermite model of the speed.
fn hermite_gap(a: &Node, b: &Node) -> f64 {
    let du = b.u - a.u;
    0.5 * du * (a.speed() + b.speed()) + du * du / 12.0 * (a.speed_u() - b.speed_u())
}

/// An arclength-parametrized C² curve on the torus.
#[derive(Clone, Debug)]
pub struct Curve {
    seed: Arc<Seed>,
    history: Option<Arc<Step>>,
    nodes: Vec<Node>,
    h_max: f64,
    closed: bool,
    warnings: Vec<String>,
}

/// A curve with a marked arclength parameter.
#[derive(Clone, Debug)]
pub struct PointedCurve {
    pub curve: Curve,
    pub t: f64,
}

impl PointedCurve {
    pub fn new(curve: Curve, t: f64) -> Result<Self> {
        if !(0.0..=curve.length()).contains(&t) {
            return Err(Error::InvalidInput(format!("t = {t} outside [0, {}]", curve.length())));
        }
        Ok(PointedCurve { curve, t })
    }

    /// The marked point.
    pub fn point(&self) -> TorusPoint {
        self.curve.node_at(self.t).point()
    }
}

/// Build a seed curve of the given length starting at `start`.
pub fn make_curve(spec: CurveSpec, length: f64, start: TorusPoint, h_max: f64) -> Result<Curve> {
    if !(length > 0.0 && length.is_finite()) {
        return Err(Error::InvalidInput(format!("curve length {length} must be positive")));
    }
    if !(h_max > 0.0) {
        return Err(Error::InvalidInput(format!("h_max {h_max} must be positive")));
    }
    let p = start.lift();
    let mut warnings = Vec::new();
    let (seed, u_end) = match spec {
        CurveSpec::Segment { angle } => (Seed::Segment { start: p, dir: Vec2::from_angle(angle) }, length),
        CurveSpec::Arc { radius, start_angle } => {
            if !(radius > 0.0) {
                return Err(Error::InvalidInput(format!("radius {radius} must be positive")));
            }
            if length > TAU * radius * (1.0 + 1e-12) {
                warnings.push(format!("arc length {length} exceeds the full circle"));
            }
            let center = p - Vec2::from_angle(start_angle).scale(radius);
            (Seed::Arc { center, radius, theta0: start_angle }, length)
        }
        CurveSpec::TrigGraph { amp, freq, phase } => {
            let seed = Seed::Graph { start: p, amp, freq, phase };
            let width = graph_width(&seed, length);
            (seed, width)
        }
    };
    if length > 0.5 {
        warnings.push(format!("length {length} exceeds half the torus; the curve may self-intersect"));
    }
    Curve::from_seed(seed, 0.0, u_end, h_max, warnings)
}

/// Composite 5-point Gauss–Legendre arclength of a seed over `[0, width]`.
fn seed_length(seed: &Seed, width: f64) -> f64 {
    const X: [f64; 5] =
        [0.0, 0.538_469_310_105_683_1, -0.538_469_310_105_683_1, 0.906_179_845_938_664, -0.906_179_845_938_664];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let pieces = 4096;
    let h = width / pieces as f64;
    (0..pieces)
        .map(|i| {
            let mid = (i as f64 + 0.5) * h;
            X.iter().zip(&W).map(|(x, w)| w * seed.speed(mid + 0.5 * h * x)).sum::<f64>() * 0.5 * h
        })
        .sum()
}

fn graph_width(seed: &Seed, length: f64) -> f64 {
    let mut w = length;
    for _ in 0..60 {
        let err = seed_length(seed, w) - length;
        if err.abs() < 1e-14 * length {
            break;
        }
        w -= err / seed.speed(w);
    }
    w
}

impl Curve {
    fn from_seed(seed: Seed, u0: f64, u1: f64, h_max: f64, warnings: Vec<String>) -> Result<Curve> {
        let seed = Arc::new(seed);
        let span = u1 - u0;
        let count = ((span / h_max).ceil() as usize).max(1);
        let nodes = (0..=count)
            .map(|i| {
                let u = if i == count { u1 } else { u0 + span * i as f64 / count as f64 };
                let (pos, du, duu) = seed.jet(u);
                Node { u, pos, du, duu, s: 0.0 }
            })
            .collect();
        let mut c = Curve { seed, history: None, nodes, h_max, closed: false, warnings };
        c.refine();
        let (a, b) = (c.nodes[0], *c.nodes.last().expect("nonempty"));
        c.closed = dist(&a.point(), &b.point()) < 1e-12 && (a.tangent() - b.tangent()).norm() < 1e-9;
        Ok(c)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn length(&self) -> f64 {
        self.nodes.last().map_or(0.0, |n| n.s)
    }

    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Seed parameter range `[u_start, u_end]`.
    pub fn domain(&self) -> (f64, f64) {
        (self.nodes[0].u, self.nodes.last().expect("nonempty").u)
    }

    /// Number of maps pushed through this curve.
    pub fn depth(&self) -> usize {
        history_vec(&self.history).len()
    }

    /// Evaluate a node at seed parameter `u` through the full history.
    pub fn eval_u(&self, u: f64) -> Node {
        self.eval_with(&history_vec(&self.history), u)
    }

    fn eval_with(&self, steps: &[Arc<Step>], u: f64) -> Node {
        let (pos, du, duu) = self.seed.jet(u);
        let mut n = Node { u, pos, du, duu, s: 0.0 };
        for st in steps {
            n = n.push(st.map.as_ref());
            n.pos = n.pos - st.shift;
        }
        n
    }

    /// Recompute arclengths and bisect every gap longer than `h_max` or across which the
    /// speed changes by more than [`MAX_SPEED_STEP`].
    fn refine(&mut self) {
        let steps = history_vec(&self.history);
        let old = std::mem::take(&mut self.nodes);
        let mut out = Vec::with_capacity(old.len());
        let mut first = old[0];
        first.s = 0.0;
        out.push(first);
        for next in old.into_iter().skip(1) {
            // Stack of pending right endpoints, processed left to right.
            let mut stack = vec![next];
            while let Some(right) = stack.pop() {
                let left = *out.last().expect("nonempty");
                let gap = hermite_gap(&left, &right);
                let too_long = gap > self.h_max || (right.speed() / left.speed()).ln().abs() > MAX_SPEED_STEP;
                if too_long && right.u - left.u > 1e-14 * (1.0 + left.u.abs()) {
                    let mid = self.eval_with(&steps, 0.5 * (left.u + right.u));
                    stack.push(right);
                    stack.push(mid);
                } else {
                    let mut r = right;
                    r.s = left.s + gap;
                    out.push(r);
                }
            }
        }
        self.nodes = out;
    }

    /// Image curve under `map`, re-refined to `h_max`.
    pub fn push(&self, map: Arc<dyn SmoothMap>) -> Curve {
        let mut nodes: Vec<Node> = self.nodes.iter().map(|n| n.push(map.as_ref())).collect();
        let base = nodes[0].pos;
        let shift = Vec2::new(base.x.floor(), base.y.floor());
        for n in &mut nodes {
            n.pos = n.pos - shift;
        }
        let mut c = Curve {
            seed: self.seed.clone(),
            history: Some(Arc::new(Step { prev: self.history.clone(), map, shift })),
            nodes,
            h_max: self.h_max,
            closed: self.closed,
            warnings: self.warnings.clone(),
        };
        c.refine();
        c
    }

    /// Push through a diffeomorphism of a table.
    pub fn push_diffeo(&self, f: &Arc<Diffeo>) -> Curve {
        self.push(f.clone())
    }

    /// Push through a word, letter by letter.
    pub fn push_word(&self, table: &[Arc<Diffeo>], word: &[usize]) -> Curve {
        word.iter().fold(self.clone(), |c, &i| c.push_diffeo(&table[i]))
    }

    /// Seed parameter at arclength `s` (clamped), by Newton on the cubic Hermite model.
    pub fn u_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.length());
        let k = self.nodes.partition_point(|n| n.s <= s);
        if k == 0 {
            return self.nodes[0].u;
        }
        if k >= self.nodes.len() {
            return self.nodes.last().expect("nonempty").u;
        }
        let (a, b) = (&self.nodes[k - 1], &self.nodes[k]);
        let du = b.u - a.u;
        let (sa, sb, ga, gb) = (a.s, b.s, a.speed() * du, b.speed() * du);
        let model = |t: f64| {
            let (t2, t3) = (t * t, t * t * t);
            (2.0 * t3 - 3.0 * t2 + 1.0) * sa + (t3 - 2.0 * t2 + t) * ga + (-2.0 * t3 + 3.0 * t2) * sb + (t3 - t2) * gb
        };
        let slope = |t: f64| {
            let t2 = t * t;
            (6.0 * t2 - 6.0 * t) * (sa - sb) + (3.0 * t2 - 4.0 * t + 1.0) * ga + (3.0 * t2 - 2.0 * t) * gb
        };
        let mut t = if sb > sa { (s - sa) / (sb - sa) } else { 0.0 };
        for _ in 0..20 {
            let d = slope(t);
            if d <= 0.0 {
                break;
            }
            let step = (model(t) - s) / d;
            t = (t - step).clamp(0.0, 1.0);
            if step.abs() < 1e-15 {
                break;
            }
        }
        a.u + t * du
    }

    /// Exact node at arclength `s`.
    pub fn node_at(&self, s: f64) -> Node {
        let mut n = self.eval_u(self.u_at(s));
        n.s = s.clamp(0.0, self.length());
        n
    }

    pub fn point_at(&self, s: f64) -> TorusPoint {
        self.node_at(s).point()
    }

    /// Signed curvature at arclength `s`.
    pub fn curvature(&self, s: f64) -> f64 {
        self.node_at(s).curvature()
    }

    /// Largest `|curvature|` over the nodes.
    pub fn max_abs_curvature(&self) -> f64 {
        self.nodes.iter().map(|n| n.curvature().abs()).fold(0.0, f64::max)
    }

    /// Nodes plus exact midpoints of every gap: the cover on which existential
    /// conditions along the curve are evaluated.
    pub fn cover(&self) -> Vec<Node> {
        let steps = history_vec(&self.history);
        let mut out = Vec::with_capacity(2 * self.nodes.len());
        for w in self.nodes.windows(2) {
            out.push(w[0]);
            let mut mid = self.eval_with(&steps, 0.5 * (w[0].u + w[1].u));
            mid.s = 0.5 * (w[0].s + w[1].s);
            out.push(mid);
        }
        out.push(*self.nodes.last().expect("nonempty"));
        out
    }

    /// Restriction to the arclength window `[s0, s1]`, re-based to start at 0.
    pub fn sub_curve(&self, s0: f64, s1: f64) -> Result<Curve> {
        if !(s0 >= 0.0 && s1 <= self.length() && s1 > s0) {
            return Err(Error::InvalidInput(format!("window [{s0}, {s1}] not inside [0, {}]", self.length())));
        }
        let steps = history_vec(&self.history);
        let (u0, u1) = (self.u_at(s0), self.u_at(s1));
        let mut nodes = Vec::new();
        let mut a = self.eval_with(&steps, u0);
        a.s = 0.0;
        nodes.push(a);
        for n in self.nodes.iter().filter(|n| n.u > u0 && n.u < u1 && n.s > s0 && n.s < s1) {
            let mut m = *n;
            m.s -= s0;
            nodes.push(m);
        }
        let mut b = self.eval_with(&steps, u1);
        b.s = s1 - s0;
        nodes.push(b);
        Ok(Curve {
            seed: self.seed.clone(),
            history: self.history.clone(),
            nodes,
            h_max: self.h_max,
            closed: false,
            warnings: Vec::new(),
        })
    }

    /// `Δ_a` on the whole curve: unchanged when `length ≤ 2a`, otherwise `⌊length/a⌋`
    /// equal pieces.
    pub fn pieces(&self, a: f64) -> Result<Vec<Curve>> {
        let l = self.length();
        if l <= 2.0 * a {
            return Ok(vec![self.clone()]);
        }
        let count = (l / a).floor() as usize;
        let piece = l / count as f64;
        (0..count)
            .map(|j| {
                let hi = if j + 1 == count { l } else { (j + 1) as f64 * piece };
                self.sub_curve(j as f64 * piece, hi)
            })
            .collect()
    }

    /// CSV rows `s,x,y,tx,ty,kappa`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,x,y,tx,ty,kappa\n");
        for n in &self.nodes {
            let (p, t) = (n.point(), n.tangent());
            writeln!(out, "{},{},{},{},{},{}", n.s, p.x(), p.y(), t.x, t.y, n.curvature()).expect("string write");
        }
        out
    }
}

/// `Δ_a` on a pointed curve: the piece containing `t`, with `t` re-based.
pub fn cut_short(p: &PointedCurve, a: f64) -> Result<PointedCurve> {
    if !(a > 0.0) {
        return Err(Error::InvalidInput(format!("cut length {a} must be positive")));
    }
    let l = p.curve.length();
    if l <= 2.0 * a {
        return Ok(p.clone());
    }
    let count = (l / a).floor() as usize;
    let piece = l / count as f64;
    let idx = ((p.t * count as f64 / l).floor() as usize).min(count - 1);
    let lo = idx as f64 * piece;
    let hi = if idx + 1 == count { l } else { (idx + 1) as f64 * piece };
    let curve = p.curve.sub_curve(lo, hi)?;
    let t = (p.t - lo).clamp(0.0, curve.length());
    Ok(PointedCurve { curve, t })
}

/// Exact and bounded curvature of `F ∘ γ` at one point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvatureCheck {
    /// `|curv(F∘γ)|`.
    pub lhs: f64,
    /// `A/‖DFγ̇‖² + Jac F·|κ|/‖DFγ̇‖³`.
    pub rhs: f64,
    /// `Jac F·κ/‖DFγ̇‖³`, the part coming from the curvature of `γ`.
    pub curvature_term: f64,
    /// `det(DFγ̇, D²F(γ̇,γ̇))/‖DFγ̇‖³`, the part coming from `D²F`.
    pub second_derivative_term: f64,
}

/// Compare the image curvature with its one-step bound, `a_bound ≥ ‖F‖_{C²}`.
pub fn curvature_transform_check(f: &dyn SmoothMap, curve: &Curve, s: f64, a_bound: f64) -> CurvatureCheck {
    let n = curve.node_at(s);
    let t = n.tangent();
    let kappa = n.curvature();
    let jet = f.lift_jet(n.pos);
    let img = jet.d * t;
    let r = img.norm();
    let jac = jet.d.det().abs();
    let curvature_term = jet.d.det() * kappa / r.powi(3);
    let second_derivative_term = img.cross(jet.d2.apply(t, t)) / r.powi(3);
    CurvatureCheck {
        lhs: (curvature_term + second_derivative_term).abs(),
        rhs: a_bound / (r * r) + jac * kappa.abs() / r.powi(3),
        curvature_term,
        second_derivative_term,
    }
}

/// Pieces of `curve ∩ B(x, ρ)` as arclength windows.
pub fn ball_components(curve: &Curve, x: &TorusPoint, rho: f64) -> Vec<(f64, f64)> {
    let f = |n: &Node| dist(&n.point(), x) - rho;
    let nodes = curve.nodes();
    let mut out = Vec::new();
    let mut start: Option<f64> = (f(&nodes[0]) <= 0.0).then_some(0.0);
    for w in nodes.windows(2) {
        let (fa, fb) = (f(&w[0]), f(&w[1]));
        if (fa <= 0.0) != (fb <= 0.0) {
            let cross = w[0].s + (w[1].s - w[0].s) * fa / (fa - fb);
            match start.take() {
                Some(s0) => out.push((s0, cross)),
                None => start = Some(cross),
            }
        }
    }
    if let Some(s0) = start {
        out.push((s0, curve.length()));
    }
    out
}

/// Component geometry of a curve inside small balls.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub lengths: Vec<f64>,
    pub bound: f64,
    pub lengths_pass: bool,
    /// Every component of `γ ∩ B(z, 2ρ)` meets each tested `B(x, ρ′)` in at most one piece.
    pub connected: bool,
}

/// Check the component-length and connectivity properties for `|κ| ≤ k_curv`.
pub fn component_length_bound_check(
    curve: &Curve,
    k_curv: f64,
    z: &TorusPoint,
    rho: f64,
    x: &TorusPoint,
) -> Result<ComponentCheck> {
    if curve.max_abs_curvature() > k_curv {
        return Err(Error::Declined(format!("curvature {} exceeds K = {k_curv}", curve.max_abs_curvature())));
    }
    if !(rho > 0.0 && rho < (0.25 / k_curv).min(0.25)) {
        return Err(Error::Declined(format!("rho = {rho} not in (0, min(1/4K, 1/4))")));
    }
    if dist(x, z) >= rho {
        return Err(Error::Declined("x must lie in B(z, rho)".into()));
    }
    let lengths: Vec<f64> = ball_components(curve, x, rho).iter().map(|(a, b)| b - a).collect();
    let bound = 4.0 * rho;
    let mut connected = true;
    for (a, b) in ball_components(curve, z, 2.0 * rho) {
        let part = curve.sub_curve(a.max(0.0), b.min(curve.length()));
        let Ok(part) = part else { continue };
        for frac in [0.25, 0.5, 0.75, 0.99] {
            if ball_components(&part, x, frac * rho).len() > 1 {
                connected = false;
            }
        }
    }
    Ok(ComponentCheck { lengths_pass: lengths.iter().all(|&l| l <= bound), lengths, bound, connected })
}

/// Per-slot violations and the tail counts derived from them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailCheck {
    /// `violations[j−1]` for block `j = 1..=m`.
    pub violations: Vec<bool>,
    /// `counts[k−1] = #{j ∈ k+1..=m : violation}` for `k = 1..=m`.
    pub counts: Vec<usize>,
    pub pass: bool,
}

impl TailCheck {
    /// Block `k` passes when no later block violates or fewer than `(m−k)η` do.
    fn from_violations(violations: Vec<bool>, eta: f64) -> Self {
        let m = violations.len();
        let counts: Vec<usize> = (1..=m).map(|k| violations[k..].iter().filter(|&&v| v).count()).collect();
        let pass = counts.iter().enumerate().all(|(i, &c)| c == 0 || (c as f64) < (m - i - 1) as f64 * eta);
        TailCheck { violations, counts, pass }
    }
}

/// Per cover point and block: log Jacobian of the block and log stretch of the tangent.
fn block_profiles(table: &[Arc<Diffeo>], word: &Word, curve: &Curve, p0: usize) -> Result<Vec<Vec<(f64, f64)>>> {
    if p0 == 0 || !word.len().is_multiple_of(p0) || word.is_empty() {
        return Err(Error::InvalidInput(format!("word length {} is not a positive multiple of p0 = {p0}", word.len())));
    }
    let m = word.len() / p0;
    Ok(curve
        .cover()
        .iter()
        .map(|n| {
            let mut x = n.point();
            let mut v = n.tangent();
            (0..m)
                .map(|j| {
                    let (mut lj, mut ls) = (0.0, 0.0);
                    for &i in word.block(j, p0) {
                        let d: Mat2 = table[i].derivative(x.lift());
                        lj += d.det().abs().ln();
                        let w = d * v;
                        let r = w.norm();
                        ls += r.ln();
                        v = w.scale(1.0 / r);
                        x = table[i].eval(&x);
                    }
                    (lj, ls)
                })
                .collect()
        })
        .collect())
}

/// Nearly conservative tails along the curve.
pub fn nct(
    table: &[Arc<Diffeo>],
    word: &Word,
    curve: &Curve,
    p0: usize,
    eta: f64,
    c0: f64,
    eps0: f64,
) -> Result<TailCheck> {
    let prof = block_profiles(table, word, curve, p0)?;
    let m = word.len() / p0;
    let limit = c0 + 2.0 * eps0 * p0 as f64;
    let violations = (0..m).map(|j| prof.iter().any(|p| p[j].0.abs() > limit)).collect();
    Ok(TailCheck::from_violations(violations, eta))
}

/// Expanding tails along the curve.
pub fn et(table: &[Arc<Diffeo>], word: &Word, curve: &Curve, p0: usize, c: f64, eta: f64) -> Result<TailCheck> {
    let prof = block_profiles(table, word, curve, p0)?;
    let m = word.len() / p0;
    let limit = c * p0 as f64;
    let violations = (0..m).map(|j| prof.iter().any(|p| p[j].1 < limit)).collect();
    Ok(TailCheck::from_violations(violations, eta))
}

/// Measured curvature of `γ_j` against `K₁(p₀; c)(K+1)e^{8(n−j)ηC₀′}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrowthCheck {
    /// `(j, max |κ(γ_j)|, bound)` for `j = 1..=n`.
    pub steps: Vec<(usize, f64, f64)>,
    pub violations: usize,
}

/// Push `curve` through `word` and compare curvature with the growth bound.
///
/// Declined when the parameter inequalities fail or the word lacks NCT or ET.
pub fn curvature_growth_check(
    table: &[Arc<Diffeo>],
    word: &Word,
    curve: &Curve,
    k: &Constants,
    p0: usize,
    c: f64,
    eta: f64,
) -> Result<GrowthCheck> {
    let mut params = k.clone();
    params.p0 = p0;
    params.c = c;
    params.eta = eta;
    let bad = params.check_curvature_growth();
    if !bad.is_empty() {
        return Err(Error::Declined(format!("parameters: {}", bad[0].detail)));
    }
    if !nct(table, word, curve, p0, eta, k.c0, k.eps0)?.pass {
        return Err(Error::Declined("word lacks nearly conservative tails".into()));
    }
    if !et(table, word, curve, p0, c, eta)?.pass {
        return Err(Error::Declined("word lacks expanding tails".into()));
    }
    let n = word.len();
    let kk = curve.max_abs_curvature();
    let ln_k1 = ln_k1(p0, c, k.c0_prime);
    let mut cur = curve.clone();
    let mut steps = Vec::with_capacity(n);
    for (j, &i) in word.indices.iter().enumerate() {
        cur = cur.push_diffeo(&table[i]);
        let bound = (ln_k1 + (kk + 1.0).ln() + 8.0 * (n - j - 1) as f64 * eta * k.c0_prime).exp();
        steps.push((j + 1, cur.max_abs_curvature(), bound));
    }
    let violations = steps.iter().filter(|(_, v, b)| v > b).count();
    Ok(GrowthCheck { steps, violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{LinearMap, Mode, System};
    use crate::rng::stream_rng;
    use rand::Rng as _;
    use std::f64::consts::PI;

    fn pt(x: f64, y: f64) -> TorusPoint {
        TorusPoint::new(x, y).unwrap()
    }

    fn segment(len: f64, angle: f64) -> Curve {
        make_curve(CurveSpec::Segment { angle }, len, pt(0.2, 0.3), DEFAULT_H_MAX).unwrap()
    }

    fn circle(r: f64, len: f64) -> Curve {
        make_curve(CurveSpec::Arc { radius: r, start_angle: 0.0 }, len, pt(0.5, 0.5), DEFAULT_H_MAX).unwrap()
    }

    /// Chord length of an arc of length `h` with curvature `k`.
    fn chord(k: f64, h: f64) -> f64 {
        if k.abs() < 1e-9 {
            h
        } else {
            2.0 * (k * h / 2.0).sin() / k
        }
    }

    fn check_invariants(c: &Curve) {
        for w in c.nodes().windows(2) {
            let h = w[1].s - w[0].s;
            assert!(h <= c.h_max() * (1.0 + 1e-9), "gap {h}");
            let k = 0.5 * (w[0].curvature() + w[1].curvature());
            let ch = (w[1].pos - w[0].pos).norm();
            assert!((ch / chord(k, h) - 1.0).abs() < 1e-6, "chord {ch} vs {h}");
            assert!((w[0].tangent().norm() - 1.0).abs() < 1e-12);
            assert!(w[0].curvature().is_finite());
        }
    }

    #[test]
    fn seed_shapes() {
        let s = segment(0.3, 0.4);
        assert!(s.nodes().iter().all(|n| n.curvature() == 0.0));
        assert!((s.length() - 0.3).abs() < 1e-14);
        let c = circle(0.2, 1.0);
        assert!(c.nodes().iter().all(|n| (n.curvature() - 5.0).abs() < 1e-12));
        assert!((circle(0.25, 0.5).curvature(0.3) - 4.0).abs() < 1e-12);
        let g = make_curve(CurveSpec::TrigGraph { amp: 0.1, freq: 1.0, phase: 0.0 }, 0.4, pt(0.0, 0.5), DEFAULT_H_MAX)
            .unwrap();
        assert!(g.curvature(0.0).abs() < 1e-12);
        assert!((g.length() - 0.4).abs() < 1e-10);
        check_invariants(&s);
        check_invariants(&c);
        check_invariants(&g);
        assert!(!c.warnings().is_empty());
        let full = make_curve(CurveSpec::Segment { angle: 0.0 }, 1.0, pt(0.1, 0.4), DEFAULT_H_MAX).unwrap();
        assert!(full.is_closed() && !s.is_closed());
        assert!(make_curve(CurveSpec::Segment { angle: 0.0 }, 0.0, pt(0.1, 0.4), 1e-3).is_err());
    }

    #[test]
    fn linear_push_of_segment() {
        let sys = System::builtin("cat").unwrap();
        let v = Vec2::from_angle(0.4);
        let s = segment(0.1, 0.4);
        let img = s.push_diffeo(&sys.table[0]);
        let stretch = (sys.table[0].linear_part() * v).norm();
        assert!((img.length() - 0.1 * stretch).abs() < 1e-12);
        assert!(img.max_abs_curvature() < 1e-9);
        check_invariants(&img);
    }

    #[test]
    fn diagonal_map_on_circle() {
        let c = circle(0.2, 0.3);
        let img = c.push(Arc::new(LinearMap(Mat2::diag(2.0, 1.0))));
        assert!((img.nodes()[0].curvature() - 10.0).abs() < 1e-10);
        let chk = curvature_transform_check(&LinearMap(Mat2::diag(2.0, 1.0)), &c, 0.0, 0.0);
        assert!((chk.lhs - 10.0).abs() < 1e-10 && chk.second_derivative_term == 0.0);
        assert_eq!(chk.lhs, chk.rhs);
    }

    fn random_map(rng: &mut crate::rng::Rng) -> Arc<Diffeo> {
        let mats = [[[1, 1], [0, 1]], [[1, 0], [1, 1]], [[2, 1], [1, 1]]];
        loop {
            let m = mats[rng.gen_range(0..3)];
            let modes = (0..2)
                .map(|_| Mode {
                    k: [rng.gen_range(-1..=1), rng.gen_range(-1..=1)],
                    amp: [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)],
                    phase: rng.gen_range(0.0..TAU),
                })
                .collect();
            if let Ok(f) = Diffeo::new("r", m, modes) {
                return Arc::new(f);
            }
        }
    }

    fn random_curve(rng: &mut crate::rng::Rng) -> Curve {
        let start = pt(rng.gen(), rng.gen());
        let len = rng.gen_range(0.05..0.2);
        match rng.gen_range(0..3) {
            0 => make_curve(CurveSpec::Segment { angle: rng.gen_range(0.0..PI) }, len, start, DEFAULT_H_MAX),
            1 => make_curve(
                CurveSpec::Arc { radius: rng.gen_range(0.1..0.5), start_angle: rng.gen_range(0.0..TAU) },
                len,
                start,
                DEFAULT_H_MAX,
            ),
            _ => make_curve(
                CurveSpec::TrigGraph { amp: rng.gen_range(-0.05..0.05), freq: 1.0, phase: rng.gen_range(0.0..TAU) },
                len,
                start,
                DEFAULT_H_MAX,
            ),
        }
        .unwrap()
    }

    /// Five-point central differences in the seed parameter of `f ∘ seed`, using only
    /// point evaluations of `f`.
    fn fd_curvature(c: &Curve, f: &Diffeo, u: f64, h: f64) -> f64 {
        let p = |d: f64| f.lift_eval(c.seed.jet(u + d).0);
        let (m2, m1, z, p1, p2) = (p(-2.0 * h), p(-h), p(0.0), p(h), p(2.0 * h));
        let d1 = (m2 - p2 + (p1 - m1).scale(8.0)).scale(1.0 / (12.0 * h));
        let d2 = ((m2 + p2).scale(-1.0) + (p1 + m1).scale(16.0) - z.scale(30.0)).scale(1.0 / (12.0 * h * h));
        d1.cross(d2) / d1.norm().powi(3)
    }

    #[test]
    fn pushed_curvature_matches_finite_differences() {
        let mut rng = stream_rng(21, 0);
        for _ in 0..100 {
            let f = random_map(&mut rng);
            let c = random_curve(&mut rng);
            let img = c.push_diffeo(&f);
            let (u0, u1) = img.domain();
            let u = u0 + rng.gen_range(0.1..0.9) * (u1 - u0);
            let exact = img.eval_u(u).curvature();
            let fd = fd_curvature(&c, &f, u, 2e-3);
            assert!((exact - fd).abs() < 1e-5, "{exact} vs {fd}");
            check_invariants(&img);
        }
    }

    #[test]
    fn node_curvature_from_node_positions() {
        let sys = System::ab_perturbed(0.02).unwrap();
        let c = circle(0.3, 0.2).push_word(&sys.table, &[0, 1]);
        let nodes = c.nodes();
        for i in (2..nodes.len() - 2).step_by(17) {
            let win = &nodes[i - 2..=i + 2];
            // Second and first derivatives of the Lagrange interpolant at the centre.
            let s: Vec<f64> = win.iter().map(|n| n.s - win[2].s).collect();
            let mut d1 = Vec2::ZERO;
            let mut d2 = Vec2::ZERO;
            for a in 0..5 {
                let others: Vec<usize> = (0..5).filter(|&b| b != a).collect();
                let denom: f64 = others.iter().map(|&b| s[a] - s[b]).product();
                // L_a'(0) and L_a''(0) from the elementary symmetric functions of −s_b.
                let r: Vec<f64> = others.iter().map(|&b| -s[b]).collect();
                let e2: f64 = (0..4).flat_map(|x| (x + 1..4).map(move |y| (x, y))).map(|(x, y)| r[x] * r[y]).sum();
                let e3: f64 = (0..4)
                    .flat_map(|x| (x + 1..4).flat_map(move |y| (y + 1..4).map(move |z| (x, y, z))))
                    .map(|(x, y, z)| r[x] * r[y] * r[z])
                    .sum();
                let pos = win[a].pos;
                d1 += pos.scale(e3 / denom);
                d2 += pos.scale(2.0 * e2 / denom);
            }
            let fd = d1.cross(d2) / d1.norm().powi(3);
            assert!((fd - nodes[i].curvature()).abs() < 1e-4, "{fd} vs {}", nodes[i].curvature());
        }
    }

    #[test]
    fn image_length_is_integral_of_stretch() {
        let sys = System::ab_perturbed(0.03).unwrap();
        let c = circle(0.2, 0.3);
        let img = c.push_diffeo(&sys.table[0]);
        // Gauss–Legendre integral of ‖Df γ̇‖ over the seed arc.
        let f = &sys.table[0];
        let pieces = 2000;
        let h = c.length() / pieces as f64;
        let g = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];
        let total: f64 = (0..pieces)
            .flat_map(|i| g.iter().map(move |x| (i as f64 + 0.5 + 0.5 * x) * h))
            .map(|s| {
                let n = c.node_at(s);
                (f.derivative(n.pos) * n.tangent()).norm() * 0.5 * h
            })
            .sum();
        assert!((img.length() / total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cut_short_examples() {
        let a = 0.02;
        let c = segment(1.5 * a, 0.3);
        let p = PointedCurve::new(c.clone(), 0.01).unwrap();
        let q = cut_short(&p, a).unwrap();
        assert_eq!(q.t, 0.01);
        assert_eq!(q.curve.length(), c.length());
        let c5 = segment(5.0 * a, 0.3);
        let p = PointedCurve::new(c5.clone(), 2.5 * a).unwrap();
        let q = cut_short(&p, a).unwrap();
        assert!((q.t - 0.5 * a).abs() < 1e-15);
        assert!((q.curve.length() - a).abs() < 1e-15);
        let pieces = c5.pieces(a).unwrap();
        assert_eq!(pieces.len(), 5);
        let total: f64 = pieces.iter().map(|p| p.length()).sum();
        assert!((total - c5.length()).abs() < 1e-15);
    }

    #[test]
    fn cut_short_keeps_the_point() {
        let mut rng = stream_rng(4, 0);
        let sys = System::ab_perturbed(0.02).unwrap();
        for _ in 0..1000 {
            let c = random_curve(&mut rng);
            let c = if rng.gen_bool(0.3) { c.push_diffeo(&sys.table[rng.gen_range(0..2)]) } else { c };
            let t = rng.gen_range(0.0..c.length());
            let p = PointedCurve::new(c, t).unwrap();
            let a = rng.gen_range(0.005..0.1);
            let q = cut_short(&p, a).unwrap();
            assert!(dist(&p.point(), &q.point()) < 1e-12);
        }
    }

    #[test]
    fn lemma_bound_never_violated() {
        let mut rng = stream_rng(8, 0);
        for _ in 0..1000 {
            let f = random_map(&mut rng);
            let c = random_curve(&mut rng);
            let s = rng.gen_range(0.0..c.length());
            let chk = curvature_transform_check(f.as_ref(), &c, s, f.c2());
            assert!(chk.lhs <= chk.rhs * (1.0 + 1e-12), "{chk:?}");
        }
        let id = Diffeo::identity();
        let chk = curvature_transform_check(&id, &circle(0.2, 0.3), 0.1, 1.0);
        assert!((chk.lhs - 5.0).abs() < 1e-12 && chk.rhs >= chk.lhs);
    }

    #[test]
    fn component_lengths() {
        let s = make_curve(CurveSpec::Segment { angle: 0.0 }, 0.4, pt(0.3, 0.5), DEFAULT_H_MAX).unwrap();
        let z = pt(0.5, 0.5);
        let chk = component_length_bound_check(&s, 1.0, &z, 0.05, &z).unwrap();
        assert_eq!(chk.lengths.len(), 1);
        assert!((chk.lengths[0] - 0.1).abs() < 1e-12 && chk.lengths_pass && chk.connected);
        let big =
            make_curve(CurveSpec::Arc { radius: 10.0, start_angle: -PI / 2.0 }, 0.3, pt(0.35, 0.5), DEFAULT_H_MAX)
                .unwrap();
        let chk = component_length_bound_check(&big, 0.11, &z, 0.02, &z).unwrap();
        assert!(chk.lengths[0] > 0.0399 && chk.lengths_pass);
        let mut rng = stream_rng(2, 0);
        let c = make_curve(CurveSpec::Arc { radius: 0.2, start_angle: 0.0 }, 1.2, pt(0.5, 0.5), DEFAULT_H_MAX).unwrap();
        for _ in 0..1000 {
            let n = c.node_at(rng.gen_range(0.0..c.length()));
            let z = n.point().translate(Vec2::new(rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)));
            let x = z.translate(Vec2::from_angle(rng.gen_range(0.0..TAU)).scale(rng.gen_range(0.0..0.039)));
            let chk = component_length_bound_check(&c, 5.01, &z, 0.04, &x).unwrap();
            assert!(chk.lengths_pass && chk.connected, "{chk:?}");
        }
        assert!(component_length_bound_check(&c, 5.0, &z, 0.06, &z).is_err());
    }

    #[test]
    fn tails_conventions() {
        let sys = System::ab();
        let c = segment(0.05, 0.5);
        let w = Word::new(vec![0, 1, 0, 1, 1, 0]);
        let r = nct(&sys.table, &w, &c, 2, 0.1, 0.01, 0.001).unwrap();
        assert!(r.pass && r.violations.iter().all(|v| !v));
        assert!(nct(&sys.table, &w, &c, 4, 0.1, 0.01, 0.001).is_err());
        let dis = Diffeo::new("d", [[1, 0], [0, 1]], vec![Mode { k: [0, 1], amp: [0.0, 0.1], phase: 0.0 }]).unwrap();
        let dsys = System::single(dis);
        let c = make_curve(CurveSpec::Segment { angle: PI / 2.0 }, 0.9, pt(0.1, 0.0), DEFAULT_H_MAX).unwrap();
        let r = nct(&dsys.table, &Word::new(vec![0; 6]), &c, 2, 0.1, 0.01, 0.001).unwrap();
        assert!(!r.pass && r.violations.iter().all(|&v| v));
        let id = System::single(Diffeo::identity());
        let r = et(&id.table, &Word::new(vec![0; 6]), &c, 2, 0.1, 0.1).unwrap();
        assert!(!r.pass);
        let cat = System::builtin("cat").unwrap();
        let uc = make_curve(
            CurveSpec::Segment { angle: (1.0f64 / 1.618_033_988_749_895).atan() },
            0.05,
            pt(0.1, 0.1),
            DEFAULT_H_MAX,
        )
        .unwrap();
        let r = et(&cat.table, &Word::new(vec![0; 6]), &uc, 2, 0.9, 0.1).unwrap();
        assert!(r.pass);
    }

    #[test]
    fn tails_monotone_in_eta() {
        let sys = System::ab_perturbed(0.02).unwrap();
        let mut rng = stream_rng(6, 0);
        let c = segment(0.02, 0.7);
        for _ in 0..30 {
            let w = sys.measure.sample_word(12, &mut rng);
            let mut prev = false;
            for eta in [0.05, 0.1, 0.2, 0.4, 0.8] {
                let r = et(&sys.table, &w, &c, 3, 0.2, eta).unwrap();
                assert!(!prev || r.pass);
                prev = r.pass;
            }
        }
    }

    #[test]
    fn growth_check_linear_and_gates() {
        let sys = System::ab();
        let mut k = Constants::desk_default();
        k.c0_prime = 2.0;
        k.c0 = 0.05;
        let c = segment(1e-4, 0.6);
        // Blocks (AB)(AB)… expand every tangent in the positive cone.
        let w = Word::new([0, 1].repeat(10));
        let r = curvature_growth_check(&sys.table, &w, &c, &k, 4, 0.4, 0.02);
        let r = r.unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(r.violations, 0);
        assert!(r.steps.iter().all(|s| s.1 < 1e-6));
        let id = System::single(Diffeo::identity());
        assert!(curvature_growth_check(&id.table, &Word::new(vec![0; 20]), &c, &k, 4, 0.4, 0.02).is_err());
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let s = segment(0.01, 0.0);
        let csv = s.to_csv();
        assert!(csv.starts_with("s,x,y,tx,ty,kappa\n"));
        assert_eq!(csv.lines().count(), s.nodes().len() + 1);
    }
}
