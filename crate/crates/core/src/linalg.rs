//! Small fixed-size linear algebra: plane vectors, 2×2 matrices, closed-form SVD.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// A vector in the plane (also used for lifted torus coordinates).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    /// Unit vector at angle `theta` from the positive x-axis.
    pub fn from_angle(theta: f64) -> Self {
        Vec2::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3d cross product, i.e. det(self, o).
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn scale(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }

    /// Normalised copy, or `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self.scale(1.0 / n))
    }

    /// Counter-clockwise rotation by a right angle.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    fn mul(self, v: Vec2) -> Vec2 {
        v.scale(self)
    }
}

/// Row-major 2×2 matrix `[[a, b], [c, d]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2 { a: 1.0, b: 0.0, c: 0.0, d: 1.0 };
    pub const ZERO: Mat2 = Mat2 { a: 0.0, b: 0.0, c: 0.0, d: 0.0 };

    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2 { a, b, c, d }
    }

    pub fn diag(x: f64, y: f64) -> Self {
        Mat2::new(x, 0.0, 0.0, y)
    }

    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Mat2::new(c, -s, s, c)
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: Vec2, v: Vec2) -> Self {
        Mat2::new(u.x * v.x, u.x * v.y, u.y * v.x, u.y * v.y)
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn transpose(&self) -> Mat2 {
        Mat2::new(self.a, self.c, self.b, self.d)
    }

    pub fn apply(&self, v: Vec2) -> Vec2 {
        Vec2::new(self.a * v.x + self.b * v.y, self.c * v.x + self.d * v.y)
    }

    pub fn inverse(&self) -> Option<Mat2> {
        let det = self.det();
        (det != 0.0 && det.is_finite()).then(|| Mat2::new(self.d / det, -self.b / det, -self.c / det, self.a / det))
    }

    pub fn add(&self, o: &Mat2) -> Mat2 {
        Mat2::new(self.a + o.a, self.b + o.b, self.c + o.c, self.d + o.d)
    }

    pub fn scale(&self, s: f64) -> Mat2 {
        Mat2::new(self.a * s, self.b * s, self.c * s, self.d * s)
    }

    pub fn frobenius(&self) -> f64 {
        (self.a * self.a + self.b * self.b + self.c * self.c + self.d * self.d).sqrt()
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.a.abs().max(self.b.abs()).max(self.c.abs()).max(self.d.abs())
    }

    /// Largest singular value.
    pub fn op_norm(&self) -> f64 {
        let (q, r) = self.qr_radii();
        q + r
    }

    /// Smallest singular value, computed from the determinant for accuracy.
    pub fn min_singular(&self) -> f64 {
        let s1 = self.op_norm();
        if s1 == 0.0 {
            0.0
        } else {
            self.det().abs() / s1
        }
    }

    /// Radii `Q, R` with singular values `Q + R` and `|Q − R|`.
    fn qr_radii(&self) -> (f64, f64) {
        let e = 0.5 * (self.a + self.d);
        let f = 0.5 * (self.a - self.d);
        let g = 0.5 * (self.c + self.b);
        let h = 0.5 * (self.c - self.b);
        (e.hypot(h), f.hypot(g))
    }

    /// Closed-form singular value decomposition.
    ///
    /// `abs_det` may carry an independently accumulated |det| (for long products the
    /// entrywise determinant cancels catastrophically); the small singular value is then
    /// `abs_det / σ₁`, so `σ₁·σ₂ = abs_det` holds to rounding.
    pub fn svd(&self, abs_det: Option<f64>) -> Svd {
        let s1 = self.op_norm();
        let det = abs_det.unwrap_or_else(|| self.det().abs());
        let s2 = if s1 > 0.0 { det / s1 } else { 0.0 };
        // Jacobi angle of MᵀM gives the most expanded input direction,
        // of MMᵀ the most expanded output direction.
        let (p, q, r) =
            (self.a * self.a + self.c * self.c, self.a * self.b + self.c * self.d, self.b * self.b + self.d * self.d);
        let right = Vec2::from_angle(0.5 * (2.0 * q).atan2(p - r));
        let (p, q, r) =
            (self.a * self.a + self.b * self.b, self.a * self.c + self.b * self.d, self.c * self.c + self.d * self.d);
        let left = Vec2::from_angle(0.5 * (2.0 * q).atan2(p - r));
        Svd { s1, s2, right_u: right, right_s: right.perp(), left_u: left, left_s: left.perp() }
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, o: Mat2) -> Mat2 {
        Mat2::new(
            self.a * o.a + self.b * o.c,
            self.a * o.b + self.b * o.d,
            self.c * o.a + self.d * o.c,
            self.c * o.b + self.d * o.d,
        )
    }
}

impl Mul<Vec2> for Mat2 {
    type Output = Vec2;
    fn mul(self, v: Vec2) -> Vec2 {
        self.apply(v)
    }
}

/// Singular data of a 2×2 matrix: `M right_u = s1 left_u`, `M right_s = ±s2 left_s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Svd {
    pub s1: f64,
    pub s2: f64,
    pub right_u: Vec2,
    pub right_s: Vec2,
    pub left_u: Vec2,
    pub left_s: Vec2,
}

/// Symmetric 2×2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub const ZERO: Sym2 = Sym2 { xx: 0.0, xy: 0.0, yy: 0.0 };

    pub fn bilinear(&self, u: Vec2, v: Vec2) -> f64 {
        u.x * (self.xx * v.x + self.xy * v.y) + u.y * (self.xy * v.x + self.yy * v.y)
    }

    /// Spectral norm (largest |eigenvalue|).
    pub fn op_norm(&self) -> f64 {
        let m = 0.5 * (self.xx + self.yy);
        let r = (0.5 * (self.xx - self.yy)).hypot(self.xy);
        m.abs() + r
    }
}

/// Second derivative of a plane map: one Hessian per output component.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Hessians {
    pub x: Sym2,
    pub y: Sym2,
}

impl Hessians {
    pub const ZERO: Hessians = Hessians { x: Sym2::ZERO, y: Sym2::ZERO };

    pub fn apply(&self, u: Vec2, v: Vec2) -> Vec2 {
        Vec2::new(self.x.bilinear(u, v), self.y.bilinear(u, v))
    }

    /// Upper bound on the norm of the bilinear map: sqrt(‖Hx‖² + ‖Hy‖²).
    pub fn norm_bound(&self) -> f64 {
        self.x.op_norm().hypot(self.y.op_norm())
    }

    /// Hessians of `A ∘ self`, for a linear post-composition `A`.
    pub fn left_mul(&self, m: &Mat2) -> Hessians {
        let comb = |p: f64, q: f64| Sym2 {
            xx: p * self.x.xx + q * self.y.xx,
            xy: p * self.x.xy + q * self.y.xy,
            yy: p * self.x.yy + q * self.y.yy,
        };
        Hessians { x: comb(m.a, m.b), y: comb(m.c, m.d) }
    }

    /// Hessians of `self ∘ A` for a linear pre-composition `A` (congruence `Aᵀ H A`).
    pub fn right_mul(&self, m: &Mat2) -> Hessians {
        let cong = |h: &Sym2| {
            let c1 = Vec2::new(m.a, m.c);
            let c2 = Vec2::new(m.b, m.d);
            Sym2 { xx: h.bilinear(c1, c1), xy: h.bilinear(c1, c2), yy: h.bilinear(c2, c2) }
        };
        Hessians { x: cong(&self.x), y: cong(&self.y) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_of_symmetric_hyperbolic() {
        let m = Mat2::new(2.0, 1.0, 1.0, 1.0);
        let s = m.svd(None);
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((s.s1 - (3.0 + 5f64.sqrt()) / 2.0).abs() < 1e-14);
        assert!((s.s2 - (3.0 - 5f64.sqrt()) / 2.0).abs() < 1e-14);
        let e = Vec2::new(phi, 1.0).normalized().unwrap();
        assert!(s.right_u.cross(e).abs() < 1e-14);
    }

    #[test]
    fn svd_reconstructs_stretch() {
        let m = Mat2::new(0.3, -2.0, 1.7, 0.4);
        let s = m.svd(None);
        assert!(((m * s.right_u).norm() - s.s1).abs() < 1e-13);
        assert!(((m * s.right_s).norm() - s.s2).abs() < 1e-13);
        assert!((m * s.right_u).normalized().unwrap().cross(s.left_u).abs() < 1e-13);
        assert!((s.s1 * s.s2 - m.det().abs()).abs() < 1e-13);
    }

    #[test]
    fn hessian_composition_rules() {
        let h = Hessians { x: Sym2 { xx: 1.0, xy: 2.0, yy: -1.0 }, y: Sym2 { xx: 0.5, xy: 0.0, yy: 3.0 } };
        let m = Mat2::new(1.0, 2.0, -1.0, 0.5);
        let (u, v) = (Vec2::new(0.3, -0.7), Vec2::new(1.1, 0.2));
        let lhs = h.left_mul(&m).apply(u, v);
        let rhs = m * h.apply(u, v);
        assert!((lhs - rhs).norm() < 1e-14);
        let lhs = h.right_mul(&m).apply(u, v);
        let rhs = h.apply(m * u, m * v);
        assert!((lhs - rhs).norm() < 1e-14);
    }
}
