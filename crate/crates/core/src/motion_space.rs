//! Decoupled implicit 3-D motion representation and the pose/expression
//! transfer algebra over it.
//!
//! Keypoints are rows, so a frame's transformed keypoints are
//! `x = s · (x_c · R + δ) + t`, evaluated row by row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Number of pose channels: yaw, pitch, roll, translation (3), scale.
pub const POSE_DIM: usize = 7;

/// Default keypoint count.
pub const DEFAULT_KEYPOINTS: usize = 21;

/// Head orientation in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn matrix(&self) -> Result<Mat3> {
        euler_to_rotation(self.yaw, self.pitch, self.roll)
    }
}

/// One frame's motion latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionFrame {
    pub canonical_kp: Vec<Vec3>,
    pub expression: Vec<Vec3>,
    pub rotation: EulerAngles,
    pub translation: Vec3,
    pub scale: f64,
}

/// Transformed keypoints of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<Vec3>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl MotionFrame {
    pub fn new(
        canonical_kp: Vec<Vec3>,
        expression: Vec<Vec3>,
        rotation: EulerAngles,
        translation: Vec3,
        scale: f64,
    ) -> Result<Self> {
        let f = Self {
            canonical_kp,
            expression,
            rotation,
            translation,
            scale,
        };
        f.validate()?;
        Ok(f)
    }

    /// Frame at the canonical pose with no expression.
    pub fn neutral(canonical_kp: Vec<Vec3>) -> Self {
        let k = canonical_kp.len();
        Self {
            canonical_kp,
            expression: vec![[0.0; 3]; k],
            rotation: EulerAngles::default(),
            translation: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn keypoints(&self) -> usize {
        self.canonical_kp.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.canonical_kp.len() != self.expression.len() {
            return Err(Error::Dimension(format!(
                "canonical keypoints ({}) and expression ({}) differ in K",
                self.canonical_kp.len(),
                self.expression.len()
            )));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive and finite, got {}",
                self.scale
            )));
        }
        let finite = self
            .canonical_kp
            .iter()
            .chain(&self.expression)
            .flatten()
            .chain(&self.translation)
            .chain(&[self.rotation.yaw, self.rotation.pitch, self.rotation.roll])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("non-finite motion value".into()));
        }
        Ok(())
    }

    /// Pose vector `[yaw, pitch, roll, tx, ty, tz, s]`.
    pub fn pose_vector(&self) -> [f64; POSE_DIM] {
        let r = &self.rotation;
        let t = &self.translation;
        [r.yaw, r.pitch, r.roll, t[0], t[1], t[2], self.scale]
    }

    pub fn set_pose_vector(&mut self, pose: &[f64; POSE_DIM]) {
        self.rotation = EulerAngles::new(pose[0], pose[1], pose[2]);
        self.translation = [pose[3], pose[4], pose[5]];
        self.scale = pose[6];
    }

    /// Expression deltas flattened row-major (`3K` values).
    pub fn expression_flat(&self) -> Vec<f64> {
        self.expression.iter().flatten().copied().collect()
    }

    pub fn canonical_flat(&self) -> Vec<f64> {
        self.canonical_kp.iter().flatten().copied().collect()
    }
}

pub fn unflatten(values: &[f64]) -> Vec<Vec3> {
    values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

/// Rotation matrix `R = R_z(roll) · R_y(yaw) · R_x(pitch)`.
///
/// Each factor is the right-handed rotation acting on column vectors, so
/// `R · e_x = -e_z` for a quarter-turn of yaw. Keypoints, stored as rows,
/// are transformed as `x · R`.
pub fn euler_to_rotation(yaw: f64, pitch: f64, roll: f64) -> Result<Mat3> {
    if !(yaw.is_finite() && pitch.is_finite() && roll.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite Euler angles ({yaw}, {pitch}, {roll})"
        )));
    }
    Ok(mat_mul(&rot_z(roll), &mat_mul(&rot_y(yaw), &rot_x(pitch))))
}

/// Inverse of [`euler_to_rotation`]; unique while `|yaw| < π/2`.
pub fn rotation_to_euler(r: &Mat3) -> EulerAngles {
    let yaw = (-r[2][0]).clamp(-1.0, 1.0).asin();
    let pitch = r[2][1].atan2(r[2][2]);
    let roll = r[1][0].atan2(r[0][0]);
    EulerAngles { yaw, pitch, roll }
}

fn compose(canonical: &[Vec3], rotation: &Mat3, expression: &[Vec3], scale: f64, translation: &Vec3) -> KeypointSet {
    let points = canonical
        .iter()
        .zip(expression)
        .map(|(xc, d)| {
            let mut out = [0.0; 3];
            for (j, o) in out.iter_mut().enumerate() {
                let rotated = xc[0] * rotation[0][j] + xc[1] * rotation[1][j] + xc[2] * rotation[2][j];
                *o = scale * (rotated + d[j]) + translation[j];
            }
            out
        })
        .collect();
    KeypointSet { points }
}

fn rotation_of(frame: &MotionFrame) -> Mat3 {
    let r = &frame.rotation;
    // Finite angles are a frame invariant.
    euler_to_rotation(r.yaw, r.pitch, r.roll).expect("frame angles are finite")
}

/// `x = s · (x_c · R + δ) + t` for every keypoint.
pub fn apply_motion(frame: &MotionFrame) -> KeypointSet {
    compose(
        &frame.canonical_kp,
        &rotation_of(frame),
        &frame.expression,
        frame.scale,
        &frame.translation,
    )
}

fn check_same_k(a: &MotionFrame, b: &MotionFrame) -> Result<()> {
    if a.keypoints() != b.keypoints() {
        return Err(Error::Dimension(format!(
            "frames have different keypoint counts ({} vs {})",
            a.keypoints(),
            b.keypoints()
        )));
    }
    Ok(())
}

/// Target's canonical keypoints and expression under the source's rotation,
/// translation and scale.
pub fn transfer_pose(target: &MotionFrame, pose_source: &MotionFrame) -> Result<KeypointSet> {
    check_same_k(target, pose_source)?;
    Ok(compose(
        &target.canonical_kp,
        &rotation_of(pose_source),
        &target.expression,
        pose_source.scale,
        &pose_source.translation,
    ))
}

/// Everything from the target except the expression deltas.
pub fn transfer_expression(target: &MotionFrame, expr_source: &MotionFrame) -> Result<KeypointSet> {
    check_same_k(target, expr_source)?;
    Ok(compose(
        &target.canonical_kp,
        &rotation_of(target),
        &expr_source.expression,
        target.scale,
        &target.translation,
    ))
}

/// Removes a rigid transform: `(x - t) / s · Rᵀ`.
pub fn depose(points: &KeypointSet, frame: &MotionFrame) -> KeypointSet {
    let r = rotation_of(frame);
    let t = frame.translation;
    let s = frame.scale;
    let points = points
        .points
        .iter()
        .map(|p| {
            let q = [(p[0] - t[0]) / s, (p[1] - t[1]) / s, (p[2] - t[2]) / s];
            // Row vector times Rᵀ: out_j = Σ_k q_k R[j][k].
            let mut out = [0.0; 3];
            for (j, o) in out.iter_mut().enumerate() {
                *o = q[0] * r[j][0] + q[1] * r[j][1] + q[2] * r[j][2];
            }
            out
        })
        .collect();
    KeypointSet { points }
}

/// Keypoint-space stand-in for the image-space transfer consistency loss.
///
/// Builds `frame_i` posed like `frame_j` and `frame_j` wearing `frame_i`'s
/// expression, removes the rigid transform of each (both carry `frame_j`'s
/// pose) and returns the mean squared distance between the two point sets.
/// The expression terms cancel exactly, so the value reduces to the mean
/// squared distance between the two frames' canonical keypoints.
pub fn latent_transfer_consistency(frame_i: &MotionFrame, frame_j: &MotionFrame) -> Result<f64> {
    let a = depose(&transfer_pose(frame_i, frame_j)?, frame_j);
    let b = depose(&transfer_expression(frame_j, frame_i)?, frame_j);
    let k = a.len().max(1) as f64;
    let total: f64 = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| (0..3).map(|d| (p[d] - q[d]).powi(2)).sum::<f64>())
        .sum();
    Ok((total / k).max(0.0))
}
