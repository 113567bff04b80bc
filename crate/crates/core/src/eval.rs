//! Evaluation metrics, reports, CSV/SVG emission and the pose/expression
//! disentanglement demo.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::motion_space::{apply_motion, EulerAngles, KeypointSet, MotionFrame};

/// Upper bound reported by [`metric_emotion_separation`] when the groups
/// have no spread of their own.
pub const EMOTION_SEPARATION_CAP: f64 = 1e6;

fn angles_deg(r: &EulerAngles) -> [f64; 3] {
    [r.yaw.to_degrees(), r.pitch.to_degrees(), r.roll.to_degrees()]
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: sequence lengths differ ({a} vs {b})")));
    }
    if a == 0 {
        return Err(Error::EmptyInput(format!("{what}: empty sequences")));
    }
    Ok(())
}

/// Mean absolute per-frame difference of yaw, pitch and roll, in degrees.
pub fn metric_apd(generated: &[EulerAngles], reference: &[EulerAngles]) -> Result<[f64; 3]> {
    check_lengths(generated.len(), reference.len(), "apd")?;
    let mut sum = [0.0; 3];
    for (g, r) in generated.iter().zip(reference) {
        let (g, r) = (angles_deg(g), angles_deg(r));
        for c in 0..3 {
            sum[c] += (g[c] - r[c]).abs();
        }
    }
    let n = generated.len() as f64;
    Ok(sum.map(|s| s / n))
}

/// Mean Euclidean distance between corresponding keypoints over all frames.
pub fn metric_akd(generated: &[KeypointSet], reference: &[KeypointSet]) -> Result<f64> {
    check_lengths(generated.len(), reference.len(), "akd")?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (g, r) in generated.iter().zip(reference) {
        if g.len() != r.len() {
            return Err(Error::Dimension(format!("akd: keypoint counts differ ({} vs {})", g.len(), r.len())));
        }
        for (p, q) in g.points.iter().zip(&r.points) {
            total += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("akd: frames have no keypoints".into()));
    }
    Ok(total / count as f64)
}

/// Mean norm of the second temporal difference of the angle channels, in
/// degrees per frame².
pub fn metric_jitter(poses: &[EulerAngles]) -> Result<f64> {
    if poses.len() < 3 {
        return Err(Error::EmptyInput(format!("jitter needs at least 3 frames, got {}", poses.len())));
    }
    let a: Vec<[f64; 3]> = poses.iter().map(angles_deg).collect();
    let total: f64 = a
        .windows(3)
        .map(|w| (0..3).map(|c| (w[2][c] - 2.0 * w[1][c] + w[0][c]).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(total / (a.len() - 2) as f64)
}

/// Between-label over within-label variance of per-clip feature vectors
/// (typically time-averaged expression). Each group holds the vectors of one
/// label. Zero spread inside the groups gives [`EMOTION_SEPARATION_CAP`]
/// unless the groups coincide, which gives 0.
pub fn metric_emotion_separation(groups: &[Vec<Vec<f64>>]) -> Result<f64> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("emotion separation needs at least 2 labels".into()));
    }
    if groups.iter().any(|g| g.len() < 2) {
        return Err(Error::InvalidArgument("emotion separation needs at least 2 clips per label".into()));
    }
    let dim = groups[0][0].len();
    if dim == 0 || groups.iter().flatten().any(|v| v.len() != dim) {
        return Err(Error::Dimension("emotion separation: feature vectors differ in length".into()));
    }
    let means: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| (0..dim).map(|c| g.iter().map(|v| v[c]).sum::<f64>() / g.len() as f64).collect())
        .collect();
    let grand: Vec<f64> = (0..dim)
        .map(|c| means.iter().map(|m| m[c]).sum::<f64>() / means.len() as f64)
        .collect();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let between = means.iter().map(|m| sq(m, &grand)).sum::<f64>() / means.len() as f64;
    let n: usize = groups.iter().map(Vec::len).sum();
    let within = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| sq(v, m)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    if !(between.is_finite() && within.is_finite()) {
        return Err(Error::InvalidArgument("emotion separation: non-finite features".into()));
    }
    if between == 0.0 {
        return Ok(0.0);
    }
    if within == 0.0 {
        return Ok(EMOTION_SEPARATION_CAP);
    }
    Ok((between / within).min(EMOTION_SEPARATION_CAP))
}

/// Mean squared difference between two equally shaped trajectories, each a
/// list of per-frame vectors.
pub fn metric_traj_mse(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    check_lengths(generated.len(), reference.len(), "trajectory mse")?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (g, r) in generated.iter().zip(reference) {
        if g.len() != r.len() {
            return Err(Error::Dimension("trajectory mse: frame vectors differ in length".into()));
        }
        total += g.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += g.len();
    }
    if count == 0 {
        return Err(Error::EmptyInput("trajectory mse: empty frame vectors".into()));
    }
    Ok(total / count as f64)
}

pub fn poses(frames: &[MotionFrame]) -> Vec<EulerAngles> {
    frames.iter().map(|f| f.rotation).collect()
}

pub fn keypoint_track(frames: &[MotionFrame]) -> Vec<KeypointSet> {
    frames.iter().map(apply_motion).collect()
}

pub fn expression_track(frames: &[MotionFrame]) -> Vec<Vec<f64>> {
    frames.iter().map(MotionFrame::expression_flat).collect()
}

/// Per-channel mean of the expression deltas over a sequence.
pub fn time_averaged_expression(frames: &[MotionFrame]) -> Vec<f64> {
    let n = frames.len().max(1) as f64;
    let mut avg = vec![0.0; frames.first().map_or(0, |f| 3 * f.keypoints())];
    for f in frames {
        for (a, v) in avg.iter_mut().zip(f.expression_flat()) {
            *a += v / n;
        }
    }
    avg
}

/// Metric values keyed by stable names, plus provenance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub checkpoint_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn insert(&mut self, key: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!("metric `{key}` is not finite ({value})")));
        }
        self.metrics.insert(key.to_string(), value);
        Ok(())
    }

    /// Pose and keypoint distances of `generated` against `reference`, plus
    /// the jitter of `generated`.
    pub fn compare(generated: &[MotionFrame], reference: &[MotionFrame]) -> Result<Self> {
        let mut r = Self::default();
        let apd = metric_apd(&poses(generated), &poses(reference))?;
        r.insert("apd_yaw_deg", apd[0])?;
        r.insert("apd_pitch_deg", apd[1])?;
        r.insert("apd_roll_deg", apd[2])?;
        r.insert("akd", metric_akd(&keypoint_track(generated), &keypoint_track(reference))?)?;
        if generated.len() >= 3 {
            r.insert("jitter", metric_jitter(&poses(generated))?)?;
        }
        r.insert(
            "traj_mse",
            metric_traj_mse(&expression_track(generated), &expression_track(reference))?,
        )?;
        Ok(r)
    }

    /// `key = value` lines, sorted by key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "checkpoint_hash = {}", self.checkpoint_hash).unwrap();
        writeln!(out, "dataset_hash = {}", self.dataset_hash).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        for (k, v) in &self.metrics {
            writeln!(out, "{k} = {v:.9}").unwrap();
        }
        out
    }
}

/// SHA-256 of a file's bytes, hex encoded; empty for no file.
pub fn file_hash(path: Option<&Path>) -> Result<String> {
    match path {
        None => Ok(String::new()),
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(crate::nn::hex(&Sha256::digest(&bytes)))
        }
    }
}

pub const CSV_HEADER: &str = "frame,yaw_deg,pitch_deg,roll_deg,tx,ty,tz,scale,expr_norm";

/// One row per frame: angles in degrees, translation, scale and the L2 norm
/// of the expression deltas.
pub fn motion_csv(frames: &[MotionFrame]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (i, f) in frames.iter().enumerate() {
        let a = angles_deg(&f.rotation);
        let t = f.translation;
        let norm = f.expression_flat().iter().map(|v| v * v).sum::<f64>().sqrt();
        writeln!(
            out,
            "{i},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            a[0], a[1], a[2], t[0], t[1], t[2], f.scale, norm
        )
        .unwrap();
    }
    out
}

fn polyline(values: &[f64], x0: f64, y0: f64, w: f64, h: f64, color: &str) -> String {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = values.len().max(2) - 1;
    let pts: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = x0 + w * i as f64 / n as f64;
            let y = if hi > lo { y0 + h - h * (v - lo) / span } else { y0 + h / 2.0 };
            format!("{x:.2},{y:.2}")
        })
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

/// Two stacked panels: head angles on top, expression norm below. Each
/// series is scaled to its own range; a constant series is drawn flat at
/// mid-height.
pub fn motion_svg(frames: &[MotionFrame], title: &str) -> String {
    let (w, h, pad) = (800.0, 220.0, 40.0);
    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"12\">",
        w + 2.0 * pad,
        2.0 * h + 3.0 * pad
    )
    .unwrap();
    writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").unwrap();
    writeln!(s, "<text x=\"{pad}\" y=\"20\">{}</text>", escape(title)).unwrap();
    let panels = [
        (pad, "angles (deg): yaw red, pitch green, roll blue"),
        (2.0 * pad + h, "expression norm"),
    ];
    for (y, label) in panels {
        writeln!(
            s,
            "<rect x=\"{pad}\" y=\"{y}\" width=\"{w}\" height=\"{h}\" fill=\"none\" stroke=\"#999\"/>"
        )
        .unwrap();
        writeln!(s, "<text x=\"{pad}\" y=\"{}\">{label}</text>", y + h + 14.0).unwrap();
    }
    if !frames.is_empty() {
        let a: Vec<[f64; 3]> = frames.iter().map(|f| angles_deg(&f.rotation)).collect();
        for (c, color) in ["#c0392b", "#27ae60", "#2c6fbb"].iter().enumerate() {
            let v: Vec<f64> = a.iter().map(|x| x[c]).collect();
            s.push_str(&polyline(&v, pad, pad, w, h, color));
        }
        let norms: Vec<f64> = frames
            .iter()
            .map(|f| f.expression_flat().iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        s.push_str(&polyline(&norms, pad, 2.0 * pad + h, w, h, "#333"));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<stem>.csv` and `<stem>.svg`.
pub fn emit_plots(frames: &[MotionFrame], stem: &Path, title: &str) -> Result<()> {
    let csv = stem.with_extension("csv");
    let svg = stem.with_extension("svg");
    std::fs::write(&csv, motion_csv(frames)).map_err(|e| Error::io(&csv, e))?;
    std::fs::write(&svg, motion_svg(frames, title)).map_err(|e| Error::io(&svg, e))?;
    Ok(())
}

/// Report as `metric,value` CSV.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in &report.metrics {
        writeln!(out, "{k},{v:.9}").unwrap();
    }
    out
}

/// Re-emissions of a generated sequence that swap one factor for a fixed
/// one, in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct Disentanglement {
    /// Generated poses with the first frame's expression held.
    pub pose_only: Vec<MotionFrame>,
    /// Generated expression under a head spinning about the yaw axis.
    pub expression_only: Vec<MotionFrame>,
}

/// Yaw rate used by [`disentanglement_demo`] for the spinning head.
pub const SPIN_DEG_PER_FRAME: f64 = 3.0;

pub fn disentanglement_demo(generated: &[MotionFrame], spin_deg_per_frame: f64) -> Result<Disentanglement> {
    let first = generated
        .first()
        .ok_or_else(|| Error::EmptyInput("no frames to re-emit".into()))?;
    let pose_only = generated
        .iter()
        .map(|f| MotionFrame {
            expression: first.expression.clone(),
            ..f.clone()
        })
        .collect();
    let expression_only = generated
        .iter()
        .enumerate()
        .map(|(i, f)| MotionFrame {
            rotation: EulerAngles::new(
                first.rotation.yaw + (spin_deg_per_frame * i as f64).to_radians(),
                first.rotation.pitch,
                first.rotation.roll,
            ),
            translation: first.translation,
            scale: first.scale,
            ..f.clone()
        })
        .collect();
    Ok(Disentanglement {
        pose_only,
        expression_only,
    })
}
