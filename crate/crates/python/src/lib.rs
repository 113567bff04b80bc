//! Python bindings for the facemotion engine.
//!
//! Arrays cross the boundary as nested lists of floats so the module has no
//! dependency on numpy; `numpy.asarray` works on every returned matrix.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use engine::diffusion::Guidance;
use engine::eval::{self, EvalReport};
use engine::features::{
    generate_synthetic_dataset, load_clip, load_feature_matrix, save_clip, EmotionLabel, MotionClip, SyntheticConfig,
};
use engine::generate::{generate_motion, to_clip, GenerationRequest};
use engine::nn::{Denoiser, Tensor};
use engine::normalization::{NormStats, DEFAULT_EPSILON};
use engine::train::{load_model, Checkpoint, CheckpointHeader, TrainConfig, Trainer};
use engine::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn label(name: Option<&str>) -> PyResult<Option<EmotionLabel>> {
    name.map(EmotionLabel::from_str).transpose().map_err(to_py)
}

fn matrix(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix has no rows"));
    }
    let width = rows[0].len();
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("matrix rows must be non-empty and equally long"));
    }
    Ok(Tensor::from_rows(&rows))
}

/// A motion clip: per-frame latents plus frame-aligned audio features.
#[pyclass(name = "Clip", module = "facemotion")]
pub struct PyClip {
    inner: MotionClip,
}

#[pymethods]
impl PyClip {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_clip(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_clip(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn clip_id(&self) -> String {
        self.inner.clip_id.clone()
    }

    #[getter]
    fn fps(&self) -> f64 {
        self.inner.fps
    }

    #[getter]
    fn emotion(&self) -> Option<&'static str> {
        self.inner.emotion.map(EmotionLabel::name)
    }

    #[getter]
    fn keypoints(&self) -> usize {
        self.inner.keypoints()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `[T × D_a]` audio features.
    fn audio(&self) -> Vec<Vec<f64>> {
        matrix(&self.inner.audio)
    }

    /// `[T × 3]` yaw, pitch, roll in degrees.
    fn poses(&self) -> Vec<[f64; 3]> {
        eval::poses(&self.inner.frames)
            .iter()
            .map(|p| [p.yaw.to_degrees(), p.pitch.to_degrees(), p.roll.to_degrees()])
            .collect()
    }

    /// `[T × 3K]` expression deformations.
    fn expressions(&self) -> Vec<Vec<f64>> {
        eval::expression_track(&self.inner.frames)
    }

    /// `[T × K × 3]` transformed keypoints.
    fn keypoints_track(&self) -> Vec<Vec<[f64; 3]>> {
        eval::keypoint_track(&self.inner.frames)
            .into_iter()
            .map(|k| k.points)
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Clip(id={:?}, frames={}, keypoints={}, emotion={:?})",
            self.inner.clip_id,
            self.inner.len(),
            self.inner.keypoints(),
            self.inner.emotion.map(EmotionLabel::name)
        )
    }
}

/// Normalization statistics for a dataset.
#[pyclass(name = "Stats", module = "facemotion")]
pub struct PyStats {
    inner: NormStats,
}

#[pymethods]
impl PyStats {
    #[staticmethod]
    #[pyo3(signature = (clips, epsilon = DEFAULT_EPSILON))]
    fn compute(clips: Vec<PyRef<'_, PyClip>>, epsilon: f64) -> PyResult<Self> {
        let inner = NormStats::from_clips(
            clips.iter().map(|c| (c.inner.clip_id.as_str(), c.inner.frames.as_slice())),
            epsilon,
        )
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: NormStats::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn keypoints(&self) -> usize {
        self.inner.keypoints
    }

    #[getter]
    fn clip_ids(&self) -> Vec<String> {
        self.inner.pose.keys().cloned().collect()
    }

    fn __repr__(&self) -> String {
        format!("Stats(keypoints={}, clips={})", self.inner.keypoints, self.inner.pose.len())
    }
}

/// A trained denoiser, ready for generation.
#[pyclass(name = "Model", module = "facemotion")]
pub struct PyModel {
    model: Denoiser,
    stage: u8,
    checkpoint: Option<Checkpoint>,
}

#[pymethods]
impl PyModel {
    /// Loads a checkpoint; stage-2 checkpoints need their stage-1 backbone.
    #[staticmethod]
    #[pyo3(signature = (path, backbone = None))]
    fn load(path: PathBuf, backbone: Option<PathBuf>) -> PyResult<Self> {
        let (model, header): (Denoiser, CheckpointHeader) =
            load_model(&path, backbone.as_deref()).map_err(to_py)?;
        Ok(Self {
            model,
            stage: header.stage,
            checkpoint: None,
        })
    }

    /// Writes the checkpoint of a model trained in this session.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("only models trained in this session can be saved"))?;
        ck.save(&path).map_err(to_py)
    }

    #[getter]
    fn stage(&self) -> u8 {
        self.stage
    }

    #[getter]
    fn keypoints(&self) -> usize {
        self.model.arch().keypoints
    }

    #[getter]
    fn audio_dim(&self) -> usize {
        self.model.arch().audio_dim
    }

    #[getter]
    fn backbone_hash(&self) -> String {
        self.model.backbone_hash()
    }

    fn __repr__(&self) -> String {
        let a = self.model.arch();
        format!(
            "Model(stage={}, keypoints={}, audio_dim={}, width={})",
            self.stage, a.keypoints, a.audio_dim, a.width
        )
    }
}

fn config_from(stage: u8, overrides: Option<BTreeMap<String, String>>) -> PyResult<TrainConfig> {
    let mut pairs: Vec<(String, String)> = overrides.unwrap_or_default().into_iter().collect();
    pairs.push(("stage".into(), stage.to_string()));
    // The backbone is passed as an object; the path only has to be non-empty.
    if stage == 2 && !pairs.iter().any(|(k, _)| k == "backbone") {
        pairs.push(("backbone".into(), "<in-memory>".into()));
    }
    TrainConfig::resolve(None, &BTreeMap::new(), &pairs).map_err(to_py)
}

fn finish(py: Python<'_>, mut trainer: Trainer, stage: u8) -> PyResult<(PyModel, Vec<f64>)> {
    let losses = py.detach(|| trainer.run(|_, _| {})).map_err(to_py)?;
    let checkpoint = Some(trainer.checkpoint());
    Ok((
        PyModel {
            model: trainer.into_model(),
            stage,
            checkpoint,
        },
        losses,
    ))
}

/// Synthetic clips with a known audio-to-expression map.
#[pyfunction]
#[pyo3(signature = (clips = 8, frames = 200, keypoints = 21, audio_dim = 64, seed = 0, emotions = None, offset_scale = 0.1))]
fn synth_dataset(
    clips: usize,
    frames: usize,
    keypoints: usize,
    audio_dim: usize,
    seed: u64,
    emotions: Option<Vec<String>>,
    offset_scale: f64,
) -> PyResult<Vec<PyClip>> {
    let emotions = match emotions {
        Some(names) => names
            .iter()
            .map(|n| EmotionLabel::from_str(n))
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py)?,
        None => vec![EmotionLabel::Neutral],
    };
    let config = SyntheticConfig {
        num_clips: clips,
        frames_per_clip: frames,
        keypoints,
        audio_dim,
        seed,
        emotions,
        emotion_offset_scale: offset_scale,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic_dataset(&config).map_err(to_py)?;
    Ok(data.into_iter().map(|inner| PyClip { inner }).collect())
}

/// Trains stage 1. `overrides` uses the same keys as the config file.
/// Returns the model and the per-step losses.
#[pyfunction]
#[pyo3(signature = (clips, stats, overrides = None))]
fn train_stage1(
    py: Python<'_>,
    clips: Vec<PyRef<'_, PyClip>>,
    stats: PyRef<'_, PyStats>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<(PyModel, Vec<f64>)> {
    let config = config_from(1, overrides)?;
    let clips: Vec<MotionClip> = clips.iter().map(|c| c.inner.clone()).collect();
    let trainer = Trainer::stage1(config, &clips, &stats.inner).map_err(to_py)?;
    finish(py, trainer, 1)
}

/// Trains the emotion branch on a frozen stage-1 model.
#[pyfunction]
#[pyo3(signature = (backbone, clips, stats, overrides = None))]
fn train_stage2(
    py: Python<'_>,
    backbone: PyRef<'_, PyModel>,
    clips: Vec<PyRef<'_, PyClip>>,
    stats: PyRef<'_, PyStats>,
    overrides: Option<BTreeMap<String, String>>,
) -> PyResult<(PyModel, Vec<f64>)> {
    if backbone.stage != 1 {
        return Err(PyValueError::new_err("backbone must be a stage-1 model"));
    }
    let config = config_from(2, overrides)?;
    let clips: Vec<MotionClip> = clips.iter().map(|c| c.inner.clone()).collect();
    let trainer = Trainer::stage2(config, backbone.model.clone(), &clips, &stats.inner).map_err(to_py)?;
    finish(py, trainer, 2)
}

/// Generates one frame per audio row, with identity taken from the first
/// frame of `identity`.
#[pyfunction]
#[pyo3(signature = (model, stats, audio, identity, emotion = None, wa = 1.5, we = 1.5, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn generate(
    py: Python<'_>,
    model: PyRef<'_, PyModel>,
    stats: PyRef<'_, PyStats>,
    audio: Vec<Vec<f64>>,
    identity: PyRef<'_, PyClip>,
    emotion: Option<&str>,
    wa: f64,
    we: f64,
    seed: u64,
) -> PyResult<PyClip> {
    let audio = tensor(audio)?;
    let emotion = label(emotion)?;
    let reference = identity
        .inner
        .frames
        .first()
        .ok_or_else(|| PyValueError::new_err("identity clip has no frames"))?
        .clone();
    let fps = identity.inner.fps;
    let req = GenerationRequest {
        audio: &audio,
        reference: &reference,
        emotion,
        guidance: Guidance { audio: wa, emotion: we },
        seed,
        pose_stats: None,
    };
    let (model, stats) = (&model.model, &stats.inner);
    let out = py.detach(|| generate_motion(model, stats, &req)).map_err(to_py)?;
    Ok(PyClip {
        inner: to_clip("generated", fps, out.frames, &audio, emotion),
    })
}

/// Reads a feature matrix file (`.feat`).
#[pyfunction]
fn load_features(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    Ok(matrix(&load_feature_matrix(Path::new(&path)).map_err(to_py)?))
}

/// Pose, keypoint and expression distances of `generated` against
/// `reference`.
#[pyfunction]
fn compare(generated: PyRef<'_, PyClip>, reference: PyRef<'_, PyClip>) -> PyResult<BTreeMap<String, f64>> {
    let report: EvalReport = EvalReport::compare(&generated.inner.frames, &reference.inner.frames).map_err(to_py)?;
    Ok(report.metrics)
}

/// Mean second-difference norm of head angles, in degrees.
#[pyfunction]
fn jitter(clip: PyRef<'_, PyClip>) -> PyResult<f64> {
    eval::metric_jitter(&eval::poses(&clip.inner.frames)).map_err(to_py)
}

/// Between-group over within-group spread of time-averaged expressions;
/// each inner list holds the clips generated for one label.
#[pyfunction]
fn emotion_separation(groups: Vec<Vec<PyRef<'_, PyClip>>>) -> PyResult<f64> {
    let vectors: Vec<Vec<Vec<f64>>> = groups
        .iter()
        .map(|g| g.iter().map(|c| eval::time_averaged_expression(&c.inner.frames)).collect())
        .collect();
    eval::metric_emotion_separation(&vectors).map_err(to_py)
}

/// Names of the supported emotion labels.
#[pyfunction]
fn emotions() -> Vec<&'static str> {
    EmotionLabel::ALL.iter().map(|l| l.name()).collect()
}

#[pymodule]
fn facemotion(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyClip>()?;
    m.add_class::<PyStats>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage1, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage2, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(load_features, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(jitter, m)?)?;
    m.add_function(wrap_pyfunction!(emotion_separation, m)?)?;
    m.add_function(wrap_pyfunction!(emotions, m)?)?;
    Ok(())
}
