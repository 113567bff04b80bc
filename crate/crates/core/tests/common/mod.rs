#![allow(dead_code)]

use facemotion::features::{generate_synthetic_dataset, EmotionLabel, MotionClip, SyntheticConfig};
use facemotion::normalization::{NormStats, DEFAULT_EPSILON};
use facemotion::train::TrainConfig;

pub fn synth(emotions: &[EmotionLabel], scale: f64) -> SyntheticConfig {
    SyntheticConfig {
        num_clips: 4,
        frames_per_clip: 60,
        keypoints: 4,
        audio_dim: 8,
        seed: 3,
        emotions: emotions.to_vec(),
        emotion_offset_scale: scale,
        ..SyntheticConfig::default()
    }
}

pub fn dataset(cfg: &SyntheticConfig) -> (Vec<MotionClip>, NormStats) {
    let clips = generate_synthetic_dataset(cfg).unwrap();
    let stats = stats_of(&clips);
    (clips, stats)
}

pub fn stats_of(clips: &[MotionClip]) -> NormStats {
    NormStats::from_clips(clips.iter().map(|c| (c.clip_id.as_str(), c.frames.as_slice())), DEFAULT_EPSILON).unwrap()
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        steps: 6,
        batch_size: 4,
        learning_rate: 1e-3,
        width: 16,
        blocks: 1,
        heads: 2,
        conv_kernel: 3,
        ffn_mult: 2,
        window: 10,
        prev_frames: 3,
        dit_blocks: 1,
        dit_mlp_mult: 2,
        diffusion_steps: 50,
        seed: 11,
        ..TrainConfig::default()
    }
}

pub fn stage2_config() -> TrainConfig {
    TrainConfig {
        stage: 2,
        backbone: "backbone.ckpt".into(),
        ..tiny_config()
    }
}
