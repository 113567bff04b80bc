//! Motion-decoupled adaptive normalization.
//!
//! Expression deltas are z-scored with statistics pooled over every frame of
//! the training set; head pose is z-scored with statistics private to each
//! clip, so identity-specific pose habits are removed before training.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_space::{unflatten, MotionFrame, Vec3, POSE_DIM};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const STATS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseStats {
    pub mean: [f64; POSE_DIM],
    pub std: [f64; POSE_DIM],
}

/// Where the pose statistics for a sequence come from.
#[derive(Clone, Debug)]
pub enum PoseReference<'a> {
    /// Statistics computed for a training clip.
    Clip(&'a str),
    /// Explicit statistics, e.g. the single-image inference prior.
    Stats(PoseStats),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub version: u32,
    pub keypoints: usize,
    pub epsilon: f64,
    pub expr_mean: Vec<f64>,
    pub expr_std: Vec<f64>,
    pub pose: BTreeMap<String, PoseStats>,
}

/// Streaming mean/variance accumulator (Welford). Order of updates is fixed by
/// the caller, which keeps results bit-stable.
#[derive(Clone)]
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    /// Population standard deviation, floored.
    fn finish(self, epsilon: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.n as f64;
        let std = self.m2.iter().map(|s| (s / n).sqrt().max(epsilon)).collect();
        (self.mean, std)
    }
}

/// Frame-weighted global mean and population std of the expression deltas.
pub fn compute_expression_stats(clips: &[&[MotionFrame]], epsilon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let total: usize = clips.iter().map(|c| c.len()).sum();
    if total == 0 {
        return Err(Error::EmptyInput("expression statistics need frames".into()));
    }
    if total < 2 {
        return Err(Error::EmptyInput(
            "expression statistics need at least two frames".into(),
        ));
    }
    let k = clips.iter().flat_map(|c| c.iter()).next().map_or(0, |f| f.keypoints());
    let mut acc = Moments::new(3 * k);
    for frame in clips.iter().flat_map(|c| c.iter()) {
        if frame.keypoints() != k {
            return Err(Error::Dimension(format!(
                "frame with K={} in a dataset with K={k}",
                frame.keypoints()
            )));
        }
        acc.push(&frame.expression_flat());
    }
    Ok(acc.finish(epsilon))
}

/// Temporal mean and population std of one clip's pose vectors.
pub fn compute_pose_stats(clip: &[MotionFrame], epsilon: f64) -> Result<PoseStats> {
    if clip.is_empty() {
        return Err(Error::EmptyInput("pose statistics need a non-empty clip".into()));
    }
    let mut acc = Moments::new(POSE_DIM);
    for frame in clip {
        acc.push(&frame.pose_vector());
    }
    let (mean, std) = acc.finish(epsilon);
    Ok(PoseStats {
        mean: mean.try_into().expect("pose dim"),
        std: std.try_into().expect("pose dim"),
    })
}

impl NormStats {
    /// Statistics for a dataset of `(clip_id, frames)` pairs.
    pub fn from_clips<'a, I>(clips: I, epsilon: f64) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [MotionFrame])>,
    {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        let clips: Vec<(&str, &[MotionFrame])> = clips.into_iter().collect();
        let frames: Vec<&[MotionFrame]> = clips.iter().map(|(_, f)| *f).collect();
        let (expr_mean, expr_std) = compute_expression_stats(&frames, epsilon)?;
        let mut pose = BTreeMap::new();
        for (id, f) in &clips {
            if pose.insert(id.to_string(), compute_pose_stats(f, epsilon)?).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate clip id `{id}`")));
            }
        }
        Ok(Self {
            version: STATS_VERSION,
            keypoints: expr_mean.len() / 3,
            epsilon,
            expr_mean,
            expr_std,
            pose,
        })
    }

    pub fn motion_dim(&self) -> usize {
        3 * self.keypoints + POSE_DIM
    }

    fn resolve<'s>(&'s self, reference: &'s PoseReference) -> Result<&'s PoseStats> {
        match reference {
            PoseReference::Clip(id) => self
                .pose
                .get(*id)
                .ok_or_else(|| Error::MissingStats(id.to_string())),
            PoseReference::Stats(s) => Ok(s),
        }
    }

    /// Inference-time pose statistics for an unseen identity: centered on
    /// the reference frame's pose, spread by the per-channel median of the
    /// training clips' standard deviations.
    pub fn inference_prior(&self, reference: &MotionFrame) -> PoseStats {
        let mut std = [self.epsilon; POSE_DIM];
        for (c, s) in std.iter_mut().enumerate() {
            let mut v: Vec<f64> = self.pose.values().map(|p| p.std[c]).collect();
            if v.is_empty() {
                continue;
            }
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let median = if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            };
            *s = median.max(self.epsilon);
        }
        PoseStats {
            mean: reference.pose_vector(),
            std,
        }
    }

    /// `[ (δ - μ^δ)/σ^δ | (ρ - μ^ρ)/σ^ρ ]`, length `3K + 7`.
    pub fn normalize(&self, frame: &MotionFrame, reference: &PoseReference) -> Result<Vec<f64>> {
        if frame.keypoints() != self.keypoints {
            return Err(Error::Dimension(format!(
                "frame has K={}, statistics have K={}",
                frame.keypoints(),
                self.keypoints
            )));
        }
        let pose = self.resolve(reference)?;
        let mut out = Vec::with_capacity(self.motion_dim());
        for ((v, m), s) in frame.expression_flat().iter().zip(&self.expr_mean).zip(&self.expr_std) {
            out.push((v - m) / s);
        }
        for ((v, m), s) in frame.pose_vector().iter().zip(&pose.mean).zip(&pose.std) {
            out.push((v - m) / s);
        }
        Ok(out)
    }

    /// Inverse of [`normalize`](Self::normalize); canonical keypoints are
    /// identity data and are supplied by the caller.
    pub fn denormalize(
        &self,
        vector: &[f64],
        reference: &PoseReference,
        canonical_kp: &[Vec3],
    ) -> Result<MotionFrame> {
        if vector.len() != self.motion_dim() {
            return Err(Error::Dimension(format!(
                "motion vector has length {}, expected {}",
                vector.len(),
                self.motion_dim()
            )));
        }
        if canonical_kp.len() != self.keypoints {
            return Err(Error::Dimension(format!(
                "canonical keypoints have K={}, statistics have K={}",
                canonical_kp.len(),
                self.keypoints
            )));
        }
        let pose = self.resolve(reference)?;
        let n_expr = 3 * self.keypoints;
        let expr: Vec<f64> = vector[..n_expr]
            .iter()
            .zip(&self.expr_mean)
            .zip(&self.expr_std)
            .map(|((z, m), s)| z * s + m)
            .collect();
        let mut p = [0.0; POSE_DIM];
        for (i, v) in p.iter_mut().enumerate() {
            *v = vector[n_expr + i] * pose.std[i] + pose.mean[i];
        }
        let mut frame = MotionFrame::neutral(canonical_kp.to_vec());
        frame.expression = unflatten(&expr);
        frame.set_pose_vector(&p);
        frame.validate()?;
        Ok(frame)
    }

    pub fn normalize_clip(&self, frames: &[MotionFrame], reference: &PoseReference) -> Result<Vec<Vec<f64>>> {
        frames.iter().map(|f| self.normalize(f, reference)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("stats serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: NormStats = serde_json::from_str(&text).map_err(|e| {
            Error::format(
                e.column() as u64,
                format!("stats file line {}: {e}", e.line()),
            )
        })?;
        stats.check()?;
        Ok(stats)
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::format(0, m));
        if self.version != STATS_VERSION {
            return bad(format!("unsupported stats version {}", self.version));
        }
        if self.expr_mean.len() != 3 * self.keypoints || self.expr_std.len() != 3 * self.keypoints {
            return bad("expression statistics do not match K".into());
        }
        let floor_ok = |v: &[f64]| v.iter().all(|s| *s >= self.epsilon);
        if !floor_ok(&self.expr_std) || !self.pose.values().all(|p| floor_ok(&p.std)) {
            return bad("standard deviation below epsilon".into());
        }
        Ok(())
    }
}
