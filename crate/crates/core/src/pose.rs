//! 6-DoF poses: translation plus unit-quaternion orientation, the half-angle
//! quaternion log map, error metrics, two-pose averaging and trajectory I/O.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Tolerance on `|w²+x²+y²+z² − 1|` for a quaternion to count as unit.
pub const UNIT_TOL: f64 = 1e-6;

/// Below this vector norm the log/exp maps use their first-order limits.
const SMALL_ANGLE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = norm3(axis);
        if n < SMALL_ANGLE {
            return Self::IDENTITY;
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Self::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    /// Rotation about +z by `yaw` radians.
    pub fn from_yaw(yaw: f64) -> Self {
        Self::from_axis_angle([0.0, 0.0, 1.0], yaw)
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn neg(&self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn is_unit(&self) -> bool {
        (self.dot(self) - 1.0).abs() <= UNIT_TOL
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !n.is_finite() || n < SMALL_ANGLE {
            return Err(Error::InvalidArgument(format!("cannot normalize quaternion {self:?}")));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Representative with `w >= 0`.
    pub fn hemisphere(&self) -> Self {
        if self.w < 0.0 {
            self.neg()
        } else {
            *self
        }
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quaternion) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Row-major rotation matrix of a unit quaternion.
    pub fn to_rotation_matrix(&self) -> [[f64; 3]; 3] {
        let Quaternion { w, x, y, z } = *self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Unit quaternion (w >= 0) from an orthonormal rotation matrix.
    pub fn from_rotation_matrix(r: &[[f64; 3]; 3]) -> Self {
        // Shepperd: pivot on the largest of the four squared components.
        let trace = r[0][0] + r[1][1] + r[2][2];
        let q = if trace > r[0][0].max(r[1][1]).max(r[2][2]) {
            let s = (1.0 + trace).sqrt() * 2.0;
            Self::new(0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s)
        } else if r[0][0] >= r[1][1] && r[0][0] >= r[2][2] {
            let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
            Self::new((r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s)
        } else if r[1][1] >= r[2][2] {
            let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
            Self::new((r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s)
        } else {
            let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
            Self::new((r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s)
        };
        let n = q.norm();
        Self::new(q.w / n, q.x / n, q.y / n, q.z / n).hemisphere()
    }
}

/// Half-angle scaled rotation axis: `‖v‖ = θ/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogQuat(pub [f64; 3]);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub t: [f64; 3],
    pub q: Quaternion,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { t: [0.0; 3], q: Quaternion::IDENTITY };

    pub fn new(t: [f64; 3], q: Quaternion) -> Self {
        Self { t, q }
    }

    fn validate(&self) -> Result<()> {
        if !self.t.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite translation {:?}", self.t)));
        }
        ensure_unit(&self.q)
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn ensure_finite3(v: [f64; 3]) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("non-finite vector {v:?}")))
    }
}

fn ensure_unit(q: &Quaternion) -> Result<()> {
    if !q.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite quaternion {q:?}")));
    }
    if !q.is_unit() {
        return Err(Error::InvalidArgument(format!("quaternion {q:?} is not unit (norm {})", q.norm())));
    }
    Ok(())
}

/// Log map of a unit quaternion on the `w >= 0` branch, so `‖v‖ <= π/2`.
pub fn quat_log(q: &Quaternion) -> Result<LogQuat> {
    ensure_unit(q)?;
    let q = q.hemisphere();
    let vn = norm3([q.x, q.y, q.z]);
    if vn < SMALL_ANGLE {
        return Ok(LogQuat([0.0; 3]));
    }
    let angle = q.w.clamp(-1.0, 1.0).acos();
    Ok(LogQuat([q.x / vn * angle, q.y / vn * angle, q.z / vn * angle]))
}

pub fn quat_exp(v: &LogQuat) -> Result<Quaternion> {
    ensure_finite3(v.0)?;
    let n = norm3(v.0);
    if n < SMALL_ANGLE {
        return Ok(Quaternion::IDENTITY);
    }
    let (s, c) = n.sin_cos();
    Ok(Quaternion::new(c, s * v.0[0] / n, s * v.0[1] / n, s * v.0[2] / n))
}

pub fn translation_error(a: [f64; 3], b: [f64; 3]) -> Result<f64> {
    ensure_finite3(a)?;
    ensure_finite3(b)?;
    Ok(norm3([a[0] - b[0], a[1] - b[1], a[2] - b[2]]))
}

/// Geodesic angle between two orientations in degrees, in `[0, 180]`.
pub fn rotation_error_deg(p: &Quaternion, q: &Quaternion) -> Result<f64> {
    ensure_unit(p)?;
    ensure_unit(q)?;
    let d = p.dot(q).abs().min(1.0);
    Ok(2.0 * d.acos().to_degrees())
}

/// Averages two poses. Translations are averaged component-wise; orientations
/// are hemisphere-aligned to `a`, summed and renormalized (the slerp midpoint).
pub fn fuse_pair(a: &Pose, b: &Pose) -> Result<Pose> {
    a.validate()?;
    b.validate()?;
    if a == b {
        return Ok(*a);
    }
    let t = [(a.t[0] + b.t[0]) / 2.0, (a.t[1] + b.t[1]) / 2.0, (a.t[2] + b.t[2]) / 2.0];
    let bq = if a.q.dot(&b.q) < 0.0 { b.q.neg() } else { b.q };
    let sum = Quaternion::new(a.q.w + bq.w, a.q.x + bq.x, a.q.y + bq.y, a.q.z + bq.z);
    let n = sum.norm();
    if n < 1e-9 {
        return Err(Error::DegenerateFusion(n));
    }
    Ok(Pose::new(t, Quaternion::new(sum.w / n, sum.x / n, sum.y / n, sum.z / n)))
}

/// Parses a row-major 4×4 homogeneous transform (16 whitespace separated reals).
pub fn parse_homogeneous_matrix(text: &str) -> Result<Pose> {
    let vals = text
        .split_whitespace()
        .map(|tok| tok.parse::<f64>().map_err(|e| Error::Parse { line: 0, msg: format!("{tok:?}: {e}") }))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != 16 {
        return Err(Error::Parse { line: 0, msg: format!("expected 16 values, found {}", vals.len()) });
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite matrix entry".into()));
    }
    let last = &vals[12..16];
    let expected_last = [0.0, 0.0, 0.0, 1.0];
    if last.iter().zip(expected_last).any(|(v, e)| (v - e).abs() > 1e-6) {
        return Err(Error::Validation(format!("last row {last:?} is not (0,0,0,1)")));
    }
    let r = [[vals[0], vals[1], vals[2]], [vals[4], vals[5], vals[6]], [vals[8], vals[9], vals[10]]];
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let ident = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((rtr - ident).abs());
        }
    }
    if worst > 1e-4 {
        return Err(Error::Validation(format!("rotation block not orthonormal (max |RᵀR−I| = {worst:e})")));
    }
    Ok(Pose::new([vals[3], vals[7], vals[11]], Quaternion::from_rotation_matrix(&r)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<(f64, Pose)>,
}

pub const TRAJECTORY_HEADER: &str = "t,x,y,z,qw,qx,qy,qz";

impl Trajectory {
    /// Builds a trajectory, checking that timestamps strictly increase.
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self> {
        for (i, w) in samples.windows(2).enumerate() {
            if w[1].0 <= w[0].0 || !w[1].0.is_finite() {
                return Err(Error::Validation(format!(
                    "timestamps not strictly increasing at sample {}: {} then {}",
                    i + 1,
                    w[0].0,
                    w[1].0
                )));
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|(t, _)| *t)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || (samples.is_empty() && line == TRAJECTORY_HEADER) {
                continue;
            }
            let fields = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
            if fields.len() != 8 {
                return Err(Error::Parse { line: line_no, msg: format!("expected 8 fields, found {}", fields.len()) });
            }
            if fields.iter().any(|f| !f.is_finite()) {
                return Err(Error::Parse { line: line_no, msg: "non-finite value".into() });
            }
            let q = Quaternion::new(fields[4], fields[5], fields[6], fields[7])
                .normalized()
                .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
            samples.push((fields[0], Pose::new([fields[1], fields[2], fields[3]], q)));
        }
        if samples.is_empty() {
            return Err(Error::Validation("trajectory has no samples".into()));
        }
        Self::new(samples)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.samples.len() + 1));
        out.push_str(TRAJECTORY_HEADER);
        out.push('\n');
        for (t, p) in &self.samples {
            // 17 significant digits round-trip any f64 exactly.
            let _ = writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                t, p.t[0], p.t[1], p.t[2], p.q.w, p.q.x, p.q.y, p.q.z
            );
        }
        out
    }
}

pub fn load_trajectory_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
    let text = fs::read_to_string(path.as_ref())?;
    Trajectory::parse_csv(&text)
}

pub fn save_trajectory_csv(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), traj.to_csv())?;
    Ok(())
}
