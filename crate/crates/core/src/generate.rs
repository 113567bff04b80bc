//! End-to-end generation: audio features in, denormalized motion frames out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{generate_sequence, GenerationSettings, Guidance, NoiseSchedule, BETA_END, BETA_START};
use crate::error::{Error, Result};
use crate::features::{EmotionLabel, MotionClip};
use crate::motion_space::MotionFrame;
use crate::nn::{Denoiser, Tensor};
use crate::normalization::{NormStats, PoseReference, PoseStats};

#[derive(Clone, Debug)]
pub struct GenerationRequest<'a> {
    /// `[N × D_a]`, one row per output frame.
    pub audio: &'a Tensor,
    /// Source of the identity (canonical keypoints).
    pub reference: &'a MotionFrame,
    pub emotion: Option<EmotionLabel>,
    pub guidance: Guidance,
    pub seed: u64,
    /// Pose statistics used to denormalize; `None` uses the single-image
    /// prior built from `reference`.
    pub pose_stats: Option<PoseStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedMotion {
    /// `[N × D_m]` in normalized units.
    pub normalized: Tensor,
    pub frames: Vec<MotionFrame>,
}

pub fn schedule_for(model: &Denoiser) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(model.arch().diffusion_steps, BETA_START, BETA_END)
}

pub fn generate_motion(model: &Denoiser, stats: &NormStats, req: &GenerationRequest) -> Result<GeneratedMotion> {
    let arch = model.arch();
    if req.reference.keypoints() != arch.keypoints || stats.keypoints != arch.keypoints {
        return Err(Error::Dimension("reference, statistics and model disagree on K".into()));
    }
    if req.audio.cols() != arch.audio_dim {
        return Err(Error::Dimension(format!(
            "audio has {} bands, model expects {}",
            req.audio.cols(),
            arch.audio_dim
        )));
    }
    let schedule = schedule_for(model)?;
    let identity = Tensor::row_vector(req.reference.canonical_flat());
    let settings = GenerationSettings {
        window: arch.window,
        prev_frames: arch.prev_frames,
        guidance: req.guidance,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let normalized = generate_sequence(
        model,
        req.audio,
        Some(&identity),
        req.emotion,
        settings,
        arch.motion_dim(),
        &schedule,
        &mut rng,
    )?;
    let pose = req.pose_stats.clone().unwrap_or_else(|| stats.inference_prior(req.reference));
    let reference = PoseReference::Stats(pose);
    // A badly trained model can land outside the valid latent space (e.g. a
    // negative scale); that is a property of the output, not of the request.
    let frames = (0..normalized.rows())
        .map(|r| {
            stats
                .denormalize(normalized.row(r), &reference, &req.reference.canonical_kp)
                .map_err(|e| match e {
                    Error::InvalidArgument(m) => Error::Numerical {
                        step: r,
                        message: format!("generated frame {r} is not a valid motion: {m}"),
                    },
                    other => other,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratedMotion { normalized, frames })
}

/// Wraps generated frames as a clip carrying the audio they came from.
pub fn to_clip(id: &str, fps: f64, frames: Vec<MotionFrame>, audio: &Tensor, emotion: Option<EmotionLabel>) -> MotionClip {
    MotionClip {
        clip_id: id.to_string(),
        fps,
        frames,
        emotion,
        audio: audio.clone(),
    }
}
