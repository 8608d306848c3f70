//! Geometry on the flat torus ℝ²/ℤ².

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::linalg::Vec2;

/// Tangent vectors live in the standard flat chart.
pub type TangentVector = Vec2;

/// Reduce a real number into `[0, 1)`.
///
/// `rem_euclid` can round tiny negative inputs up to exactly 1.0; that case maps to 0.
pub fn wrap_coord(t: f64) -> f64 {
    let r = t.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed representative of `t` modulo 1 in `[-1/2, 1/2)`.
pub fn wrap_signed(t: f64) -> f64 {
    wrap_coord(t + 0.5) - 0.5
}

/// A point of the torus with both coordinates in `[0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    x: f64,
    y: f64,
}

impl TorusPoint {
    pub const ORIGIN: TorusPoint = TorusPoint { x: 0.0, y: 0.0 };

    /// Wrap a finite planar point onto the torus.
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(TorusPoint { x: wrap_coord(x), y: wrap_coord(y) })
    }

    /// Wrap a lifted point; the caller guarantees finiteness.
    pub fn from_lift(p: Vec2) -> Self {
        debug_assert!(p.is_finite(), "non-finite lift {p:?}");
        TorusPoint { x: wrap_coord(p.x), y: wrap_coord(p.y) }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    /// The canonical lift in `[0,1)²`.
    pub fn lift(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Shortest displacement from `self` to `other`, each axis in `[-1/2, 1/2)`.
    pub fn delta_to(&self, other: &TorusPoint) -> Vec2 {
        Vec2::new(wrap_signed(other.x - self.x), wrap_signed(other.y - self.y))
    }

    pub fn translate(&self, v: Vec2) -> TorusPoint {
        TorusPoint::from_lift(self.lift() + v)
    }
}

impl fmt::Display for TorusPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Reduce a raw planar point modulo 1.
pub fn wrap(x: f64, y: f64) -> Result<TorusPoint> {
    TorusPoint::new(x, y)
}

/// Per-axis wrapped separation `min(|Δ|, 1 − |Δ|)`.
fn axis_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    d.min(1.0 - d)
}

/// Flat distance on the torus; symmetric and at most √2/2.
pub fn dist(p: &TorusPoint, q: &TorusPoint) -> f64 {
    axis_gap(p.x, q.x).hypot(axis_gap(p.y, q.y))
}

/// Squared flat distance.
pub fn dist_sq(p: &TorusPoint, q: &TorusPoint) -> f64 {
    let dx = axis_gap(p.x, q.x);
    let dy = axis_gap(p.y, q.y);
    dx * dx + dy * dy
}

/// A line through the origin of the tangent plane, stored as a unit vector whose
/// first nonzero component is positive.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProjectiveDirection {
    unit: Vec2,
}

impl ProjectiveDirection {
    pub fn new(v: Vec2) -> Result<Self> {
        if !v.is_finite() {
            return Err(Error::NonFinite);
        }
        let u = v.normalized().ok_or(Error::ZeroVector)?;
        let flip = u.x < 0.0 || (u.x == 0.0 && u.y < 0.0);
        Ok(ProjectiveDirection { unit: if flip { -u } else { u } })
    }

    /// Direction of angle `theta` (any real; reduced modulo π).
    pub fn from_angle(theta: f64) -> Self {
        ProjectiveDirection::new(Vec2::from_angle(theta)).expect("unit vector")
    }

    pub fn unit(&self) -> Vec2 {
        self.unit
    }

    /// Angle representative in `[0, π)`.
    pub fn angle(&self) -> f64 {
        let t = self.unit.y.atan2(self.unit.x);
        if t < 0.0 {
            t + std::f64::consts::PI
        } else {
            t
        }
    }
}

impl PartialEq for ProjectiveDirection {
    /// Lines compare equal when their unit representatives agree to a few ulps.
    fn eq(&self, other: &Self) -> bool {
        self.unit.cross(other.unit).abs() <= 8.0 * f64::EPSILON
    }
}

/// Angle between two lines, in `[0, π/2]`.
pub fn proj_angle(a: &ProjectiveDirection, b: &ProjectiveDirection) -> f64 {
    line_angle(a.unit, b.unit)
}

/// Angle between the lines spanned by two nonzero vectors, in `[0, π/2]`.
pub fn line_angle(a: Vec2, b: Vec2) -> f64 {
    a.cross(b).abs().atan2(a.dot(b).abs()).min(FRAC_PI_2)
}
