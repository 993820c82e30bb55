//! Quaternion and pose machinery: hemisphere canonicalization, the
//! logarithmic map and its exponential inverse, and the error metrics backing
//! trajectory evaluation.

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-6;
const SMALL_ANGLE: f64 = 1e-8;

/// Unit quaternion `(w, v)` with real part `w` and imaginary 3-vector `v`.
///
/// Constructors renormalize, so the unit invariant holds to within a few ulps.
/// Canonical form (non-negative real part) is produced by [`UnitQuaternion::canonicalize`];
/// other constructors preserve the input hemisphere so the log/exp round trip
/// covers the full open ball of radius pi.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    v: [f64; 3],
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        Self {
            w: 1.0,
            v: [0.0; 3],
        }
    }

    /// Builds from `(w, x, y, z)`, requiring the norm to be within 1e-6 of
    /// one, then renormalizes exactly.
    pub fn try_from_wxyz(q: [f64; 4]) -> Result<Self> {
        let norm = (q.iter().map(|c| c * c).sum::<f64>()).sqrt();
        if !norm.is_finite() || norm <= 0.0 {
            return Err(Error::DegenerateQuaternion);
        }
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotUnitQuaternion(norm));
        }
        Ok(Self {
            w: q[0] / norm,
            v: [q[1] / norm, q[2] / norm, q[3] / norm],
        })
    }

    /// Normalizes an arbitrary non-zero 4-vector and flips it onto the
    /// canonical hemisphere: `w >= 0`, and if `w == 0` the first non-zero
    /// imaginary component is made non-negative.
    pub fn canonicalize(q: [f64; 4]) -> Result<Self> {
        let norm = (q.iter().map(|c| c * c).sum::<f64>()).sqrt();
        if !norm.is_finite() || norm <= 0.0 {
            return Err(Error::DegenerateQuaternion);
        }
        let mut q = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
        let flip = if q[0] != 0.0 {
            q[0] < 0.0
        } else {
            match q[1..].iter().find(|c| **c != 0.0) {
                Some(c) => *c < 0.0,
                None => false, // unreachable for unit norm
            }
        };
        if flip {
            for c in &mut q {
                *c = -*c;
            }
        }
        Ok(Self {
            w: q[0],
            v: [q[1], q[2], q[3]],
        })
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn v(&self) -> [f64; 3] {
        self.v
    }

    pub fn as_wxyz(&self) -> [f64; 4] {
        [self.w, self.v[0], self.v[1], self.v[2]]
    }

    pub fn is_canonical(&self) -> bool {
        if self.w != 0.0 {
            self.w > 0.0
        } else {
            match self.v.iter().find(|c| **c != 0.0) {
                Some(c) => *c > 0.0,
                None => true,
            }
        }
    }

    /// Logarithmic map `(v / |v|) * acos(w)`, with a first-order series
    /// `v / w` when `|v|` is tiny to avoid the 0/0 at the identity.
    pub fn log(&self) -> [f64; 3] {
        let vn = (self.v.iter().map(|c| c * c).sum::<f64>()).sqrt();
        if vn < SMALL_ANGLE {
            let inv_w = 1.0 / self.w;
            return [self.v[0] * inv_w, self.v[1] * inv_w, self.v[2] * inv_w];
        }
        let angle = self.w.clamp(-1.0, 1.0).acos();
        let s = angle / vn;
        [self.v[0] * s, self.v[1] * s, self.v[2] * s]
    }

    /// Exponential inverse of [`UnitQuaternion::log`] on the ball `|w| <= pi`.
    pub fn exp(w: [f64; 3]) -> Self {
        let angle = (w.iter().map(|c| c * c).sum::<f64>()).sqrt();
        if angle < SMALL_ANGLE {
            // sin(a)/a to first order; cos(a) ~ 1.
            let s = 1.0 - angle * angle / 6.0;
            return Self {
                w: (1.0 - angle * angle / 2.0),
                v: [w[0] * s, w[1] * s, w[2] * s],
            };
        }
        let s = angle.sin() / angle;
        Self {
            w: angle.cos(),
            v: [w[0] * s, w[1] * s, w[2] * s],
        }
    }

    pub fn conjugate(&self) -> Self {
        Self {
            w: self.w,
            v: [-self.v[0], -self.v[1], -self.v[2]],
        }
    }

    /// Rotates a 3-vector: `p' = p + 2w (v x p) + 2 v x (v x p)`.
    pub fn rotate(&self, p: [f64; 3]) -> [f64; 3] {
        let cross = |a: [f64; 3], b: [f64; 3]| {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        };
        let t = cross(self.v, p);
        let u = cross(self.v, t);
        [
            p[0] + 2.0 * (self.w * t[0] + u[0]),
            p[1] + 2.0 * (self.w * t[1] + u[1]),
            p[2] + 2.0 * (self.w * t[2] + u[2]),
        ]
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w
            + self.v[0] * other.v[0]
            + self.v[1] * other.v[1]
            + self.v[2] * other.v[2]
    }
}

/// Rotation distance `2 * acos(min(1, |<q1, q2>|))` in degrees, in `[0, 180]`.
pub fn angular_error_deg(q1: &UnitQuaternion, q2: &UnitQuaternion) -> f64 {
    let d = q1.dot(q2).abs().min(1.0);
    2.0 * d.acos().to_degrees()
}

/// Euclidean distance between two positions in meters.
pub fn position_error_m(l1: &[f64; 3], l2: &[f64; 3]) -> f64 {
    l1.iter()
        .zip(l2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// A 6-DoF pose: position in meters plus orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: [f64; 3],
    pub orientation: UnitQuaternion,
}

impl Pose {
    pub fn new(position: [f64; 3], orientation: UnitQuaternion) -> Result<Self> {
        if !position.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidParameter("pose position must be finite".into()));
        }
        Ok(Self {
            position,
            orientation,
        })
    }
}
