//! Pose and quaternion algebra.
//!
//! Quaternions are stored in (w, x, y, z) order everywhere inside the crate;
//! loaders reorder on ingestion. A quaternion and its negation denote the
//! same rotation, so every metric here is invariant to the sign.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the unit-norm precondition on quaternion inputs.
pub const UNIT_TOL: f64 = 1e-6;
/// Norm below which a quaternion cannot be normalized.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Rotation quaternion, scalar part first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// 6-DoF pose: translation in meters plus a unit rotation quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: [f64; 3],
    pub q: Quat,
}

/// Inter-frame 6-DoF motion: translation delta in the world frame and the
/// rotation taking the previous orientation to the current one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeMotion {
    pub x: [f64; 3],
    pub q: Quat,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, other: &Quat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Scale to unit norm. Errors on a near-zero quaternion.
    pub fn normalized(&self) -> Result<Quat> {
        let n = self.norm();
        if n < DEGENERATE_NORM {
            return Err(Error::Geometry(format!(
                "degenerate quaternion: norm {n:e} below {DEGENERATE_NORM:e}"
            )));
        }
        Ok(Quat::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    fn check_unit(&self, what: &str) -> Result<()> {
        let n = self.norm();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Geometry(format!(
                "{what}: expected unit quaternion, norm is {n}"
            )));
        }
        Ok(())
    }

    /// Pick one representative of the double cover: w >= 0, with the first
    /// nonzero component positive when w is exactly zero.
    pub fn canonicalized(&self) -> Quat {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            Quat::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            *self
        }
    }

    pub fn conjugate(&self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product followed by renormalization. Both operands must be
    /// unit within [`UNIT_TOL`].
    pub fn mul(&self, other: &Quat) -> Result<Quat> {
        self.check_unit("quat_mul lhs")?;
        other.check_unit("quat_mul rhs")?;
        hamilton(self, other).normalized()
    }

    /// Inverse of a unit quaternion (its conjugate).
    pub fn inverse(&self) -> Result<Quat> {
        self.check_unit("quat_inverse")?;
        Ok(self.conjugate())
    }

    /// Geodesic angle between two unit rotations, in degrees, in [0, 180].
    /// Invariant to the quaternion sign.
    pub fn angular_distance_deg(&self, other: &Quat) -> f64 {
        let d = self.dot(other).abs().min(1.0);
        (2.0 * d.acos()).to_degrees()
    }

    /// Apply the rotation to a vector.
    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let r = self.to_matrix3();
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn to_matrix3(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Rotation about the z axis by `deg` degrees.
    pub fn from_yaw_deg(deg: f64) -> Quat {
        let half = deg.to_radians() / 2.0;
        Quat::new(half.cos(), 0.0, 0.0, half.sin())
    }

    /// Matrix of left-multiplication by `self`: `hamilton(self, q) == L(self) * q`
    /// with q as a column vector in (w, x, y, z) order. Used to express the
    /// Hamilton product with a constant left factor as a differentiable matmul.
    pub fn left_mul_matrix(&self) -> [[f64; 4]; 4] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]]
    }
}

/// Raw Hamilton product, no unit checks, no renormalization.
pub(crate) fn hamilton(a: &Quat, b: &Quat) -> Quat {
    Quat::new(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        x: [0.0; 3],
        q: Quat::IDENTITY,
    };

    pub fn new(x: [f64; 3], q: Quat) -> Self {
        Pose { x, q }
    }
}

impl RelativeMotion {
    pub const IDENTITY: RelativeMotion = RelativeMotion {
        x: [0.0; 3],
        q: Quat::IDENTITY,
    };
}

/// Motion from `p_prev` to `p_t`: world-frame translation difference and the
/// rotation `q_prev^-1 * q_t`.
pub fn relative_motion(p_t: &Pose, p_prev: &Pose) -> Result<RelativeMotion> {
    let q = p_prev.q.inverse()?.mul(&p_t.q)?;
    Ok(RelativeMotion {
        x: [
            p_t.x[0] - p_prev.x[0],
            p_t.x[1] - p_prev.x[1],
            p_t.x[2] - p_prev.x[2],
        ],
        q,
    })
}

/// Inverse of [`relative_motion`]: apply a motion to a pose.
pub fn compose(p_prev: &Pose, rel: &RelativeMotion) -> Result<Pose> {
    Ok(Pose {
        x: [
            p_prev.x[0] + rel.x[0],
            p_prev.x[1] + rel.x[1],
            p_prev.x[2] + rel.x[2],
        ],
        q: p_prev.q.mul(&rel.q)?,
    })
}

/// Euclidean distance between two translations, meters.
pub fn translation_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Convert a 4x4 row-major homogeneous camera-to-world transform to a pose.
///
/// The rotation block must be orthonormal within 1e-4 with determinant +1 and
/// the bottom row must be (0, 0, 0, 1).
pub fn matrix_to_pose(m: &[[f64; 4]; 4]) -> Result<Pose> {
    let bottom_dev = (m[3][0].abs())
        .max(m[3][1].abs())
        .max(m[3][2].abs())
        .max((m[3][3] - 1.0).abs());
    if bottom_dev > 1e-9 {
        return Err(Error::Geometry(format!(
            "homogeneous matrix bottom row deviates from (0,0,0,1) by {bottom_dev:e}"
        )));
    }
    let r = [
        [m[0][0], m[0][1], m[0][2]],
        [m[1][0], m[1][1], m[1][2]],
        [m[2][0], m[2][1], m[2][2]],
    ];
    // Orthonormality: max |R^T R - I|.
    let mut dev = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot = (0..3).map(|k| r[k][i] * r[k][j]).sum::<f64>();
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((dot - target).abs());
        }
    }
    if dev > 1e-4 {
        return Err(Error::Geometry(format!(
            "rotation block not orthonormal: max deviation {dev:e}"
        )));
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - 1.0).abs() > 1e-4 {
        return Err(Error::Geometry(format!(
            "rotation block determinant {det} is not +1"
        )));
    }
    let q = matrix3_to_quat(&r).normalized()?;
    Ok(Pose {
        x: [m[0][3], m[1][3], m[2][3]],
        q,
    })
}

/// Shepperd-style conversion: branch on the largest of trace and diagonal
/// terms for numerical stability.
fn matrix3_to_quat(r: &[[f64; 3]; 3]) -> Quat {
    let trace = r[0][0] + r[1][1] + r[2][2];
    if trace > r[0][0] && trace > r[1][1] && trace > r[2][2] {
        let s = (trace + 1.0).sqrt() * 2.0;
        Quat::new(
            0.25 * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        )
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        Quat::new(
            (r[2][1] - r[1][2]) / s,
            0.25 * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        )
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        Quat::new(
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            0.25 * s,
            (r[1][2] + r[2][1]) / s,
        )
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        Quat::new(
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            0.25 * s,
        )
    }
}

pub fn pose_to_matrix(p: &Pose) -> [[f64; 4]; 4] {
    let r = p.q.to_matrix3();
    [
        [r[0][0], r[0][1], r[0][2], p.x[0]],
        [r[1][0], r[1][1], r[1][2], p.x[1]],
        [r[2][0], r[2][1], r[2][2], p.x[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}
