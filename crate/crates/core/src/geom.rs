//! Pose algebra for planar odometry.
//!
//! Ground-truth poses arrive as 3×4 world-from-camera transforms in the KITTI
//! camera convention (x right, y down, z forward). Motion between frames is
//! reduced to a planar triple `(dx, dz, dtheta)` expressed in the body frame of
//! the earlier camera, and can be chained back into a global path.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Orthogonality / determinant error above which a rotation is repaired.
pub const REPAIR_TOLERANCE: f64 = 1e-6;
/// Orthogonality / determinant error above which a rotation is rejected.
pub const REJECT_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("malformed pose line: {0}")]
    MalformedLine(String),
    #[error("non-rigid transform: orthogonality error {ortho:.3e}, det {det:.6}")]
    NonRigid { ortho: f64, det: f64 },
    #[error("trajectory needs at least 2 poses, got {0}")]
    TooShort(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Rotation about the camera y axis. `R_y(theta)` carries `sin(theta)` at `[0][2]`.
pub fn rot_y(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// A rigid 3×4 world-from-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMatrix {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Default for PoseMatrix {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseMatrix {
    pub fn identity() -> Self {
        Self {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        Self { r, t }
    }

    /// Planar pose at `(x, z)` with heading `theta` (yaw about y), y = 0.
    pub fn planar(x: f64, z: f64, theta: f64) -> Self {
        Self {
            r: rot_y(theta),
            t: Vector3::new(x, 0.0, z),
        }
    }

    /// Builds from 12 row-major values, validating and repairing the rotation.
    pub fn from_row_major(v: &[f64; 12]) -> Result<Self, GeomError> {
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        let (ortho, det) = rigidity_error(&r);
        if !(ortho <= REJECT_TOLERANCE && (det - 1.0).abs() <= REJECT_TOLERANCE) {
            return Err(GeomError::NonRigid { ortho, det });
        }
        let r = if ortho > REPAIR_TOLERANCE || (det - 1.0).abs() > REPAIR_TOLERANCE {
            log::warn!("orthonormalizing rotation (ortho err {ortho:.2e}, det {det:.8})");
            nearest_rotation(&r)
        } else {
            r
        };
        Ok(Self { r, t })
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.r;
        let t = &self.t;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t[0],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t[1],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[2],
        ]
    }

    /// Rigid inverse via the transposed rotation.
    pub fn inverse(&self) -> Self {
        let rt = self.r.transpose();
        Self {
            r: rt,
            t: -(rt * self.t),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &PoseMatrix) -> Self {
        Self {
            r: self.r * other.r,
            t: self.r * other.t + self.t,
        }
    }

    /// Yaw projection `atan2(r[0][2], r[2][2])`.
    pub fn yaw(&self) -> f64 {
        wrap_angle(self.r[(0, 2)].atan2(self.r[(2, 2)]))
    }

    pub fn planar_state(&self) -> PlanarState {
        PlanarState {
            x: self.t[0],
            z: self.t[2],
            theta: self.yaw(),
        }
    }

    /// Serializes in the KITTI ground-truth style (`%e` with 6 decimals).
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        for (i, v) in self.to_row_major().iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write_sci(&mut s, *v);
        }
        s
    }
}

fn write_sci(out: &mut String, v: f64) {
    // Rust's `{:e}` prints `1.5e0`; KITTI files use C's `1.500000e+00`.
    let formatted = format!("{v:.6e}");
    let (mantissa, exp) = formatted.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    let _ = write!(out, "{mantissa}e{sign}{:02}", exp.abs());
}

fn rigidity_error(r: &Matrix3<f64>) -> (f64, f64) {
    let e = r * r.transpose() - Matrix3::identity();
    let ortho = e.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    (ortho, r.determinant())
}

/// Polar projection onto SO(3).
fn nearest_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    u * fix * v_t
}

/// Planar differential motion between consecutive frames, in the body frame of
/// the earlier frame: lateral `dx`, forward `dz` (meters), yaw `dtheta` (radians).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DeltaPose {
    pub dx: f64,
    pub dz: f64,
    pub dtheta: f64,
}

impl DeltaPose {
    pub fn new(dx: f64, dz: f64, dtheta: f64) -> Self {
        Self {
            dx,
            dz,
            dtheta: wrap_angle(dtheta),
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dz, self.dtheta]
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dz.is_finite() && self.dtheta.is_finite()
    }
}

/// Accumulated planar position and heading.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlanarState {
    pub x: f64,
    pub z: f64,
    pub theta: f64,
}

impl PlanarState {
    pub fn new(x: f64, z: f64, theta: f64) -> Self {
        Self {
            x,
            z,
            theta: wrap_angle(theta),
        }
    }

    pub fn origin() -> Self {
        Self::default()
    }

    /// Applies `d` in the current body frame.
    pub fn step(&self, d: &DeltaPose) -> Self {
        let (s, c) = self.theta.sin_cos();
        Self {
            x: self.x + d.dx * c + d.dz * s,
            z: self.z - d.dx * s + d.dz * c,
            theta: wrap_angle(self.theta + d.dtheta),
        }
    }
}

/// Parses one line of 12 whitespace-separated numbers.
pub fn parse_pose_line(line: &str) -> Result<PoseMatrix, GeomError> {
    let mut vals = [0.0; 12];
    let mut n = 0;
    for tok in line.split_whitespace() {
        if n == 12 {
            return Err(GeomError::MalformedLine(format!(
                "expected 12 numbers, got more: {line:?}"
            )));
        }
        vals[n] = tok
            .parse::<f64>()
            .map_err(|_| GeomError::MalformedLine(format!("not a number: {tok:?}")))?;
        if !vals[n].is_finite() {
            return Err(GeomError::MalformedLine(format!(
                "non-finite value: {tok:?}"
            )));
        }
        n += 1;
    }
    if n != 12 {
        return Err(GeomError::MalformedLine(format!(
            "expected 12 numbers, got {n}"
        )));
    }
    PoseMatrix::from_row_major(&vals)
}

/// Reads a ground-truth pose file, skipping blank lines.
pub fn read_pose_file(reader: impl BufRead) -> Result<Vec<PoseMatrix>, GeomError> {
    let mut poses = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        poses.push(parse_pose_line(&line)?);
    }
    Ok(poses)
}

pub fn write_pose_file(mut w: impl Write, poses: &[PoseMatrix]) -> std::io::Result<()> {
    for p in poses {
        writeln!(w, "{}", p.to_line())?;
    }
    Ok(())
}

/// Motion from `a` to `b` expressed in `a`'s body frame.
pub fn relative_delta(a: &PoseMatrix, b: &PoseMatrix) -> DeltaPose {
    let rel = a.inverse().compose(b);
    DeltaPose {
        dx: rel.t[0],
        dz: rel.t[2],
        dtheta: rel.yaw(),
    }
}

pub fn decompose_trajectory(poses: &[PoseMatrix]) -> Result<Vec<DeltaPose>, GeomError> {
    if poses.len() < 2 {
        return Err(GeomError::TooShort(poses.len()));
    }
    Ok(poses
        .windows(2)
        .map(|w| relative_delta(&w[0], &w[1]))
        .collect())
}

/// Dead-reckons `deltas` from `start`; the result has `deltas.len() + 1` states.
pub fn integrate_trajectory(start: PlanarState, deltas: &[DeltaPose]) -> Vec<PlanarState> {
    let mut out = Vec::with_capacity(deltas.len() + 1);
    let mut cur = start;
    out.push(cur);
    for d in deltas {
        cur = cur.step(d);
        out.push(cur);
    }
    out
}

/// Per-timestep planar distance between two trajectories.
pub fn deviation_curve(pred: &[PlanarState], gt: &[PlanarState]) -> Result<Vec<f64>, GeomError> {
    if pred.len() != gt.len() {
        return Err(GeomError::LengthMismatch(pred.len(), gt.len()));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p.x - g.x).hypot(p.z - g.z))
        .collect())
}

/// Total planar path length of a trajectory.
pub fn path_length(states: &[PlanarState]) -> f64 {
    states
        .windows(2)
        .map(|w| (w[1].x - w[0].x).hypot(w[1].z - w[0].z))
        .sum()
}

/// Writes `t,x,z,theta` CSV.
pub fn write_trajectory_csv(mut w: impl Write, states: &[PlanarState]) -> std::io::Result<()> {
    writeln!(w, "t,x,z,theta")?;
    for (t, s) in states.iter().enumerate() {
        writeln!(w, "{t},{},{},{}", s.x, s.z, s.theta)?;
    }
    Ok(())
}
