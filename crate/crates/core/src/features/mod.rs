//! Conditioning features, synthetic datasets and the on-disk formats for
//! clips and precomputed feature matrices.

mod audio;
mod io;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use audio::{
    align_audio_to_frames, band_edges, band_of_frequency, extract_toy_audio_features, AudioFeatureConfig,
    AudioFeatureSequence, FEATURE_SAMPLE_RATE,
};
pub use io::{load_clip, load_feature_matrix, read_wav, save_clip, save_feature_matrix, CLIP_MAGIC, CLIP_VERSION};
pub use synth::{generate_synthetic_dataset, SyntheticConfig, SyntheticGenerator};

use crate::error::{Error, Result};
use crate::motion_space::MotionFrame;
use crate::nn::Tensor;

/// Emotion categories used for conditioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Neutral,
    Happy,
    Sad,
    Angry,
    Surprised,
    Fear,
    Disgust,
    Contempt,
}

impl EmotionLabel {
    pub const COUNT: usize = 8;
    pub const ALL: [EmotionLabel; 8] = [
        EmotionLabel::Neutral,
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Angry,
        EmotionLabel::Surprised,
        EmotionLabel::Fear,
        EmotionLabel::Disgust,
        EmotionLabel::Contempt,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("emotion index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Happy => "happy",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Angry => "angry",
            EmotionLabel::Surprised => "surprised",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Contempt => "contempt",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown emotion label `{s}`")))
    }
}

/// A motion sequence with its frame-aligned audio features.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub clip_id: String,
    pub fps: f64,
    pub frames: Vec<MotionFrame>,
    pub emotion: Option<EmotionLabel>,
    /// `[T × D_a]`, one row per frame.
    pub audio: Tensor,
}

impl MotionClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn keypoints(&self) -> usize {
        self.frames.first().map_or(0, MotionFrame::keypoints)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::EmptyInput(format!("clip `{}` has no frames", self.clip_id)));
        }
        if !(self.fps > 0.0) {
            return Err(Error::InvalidArgument(format!("clip `{}` has fps {}", self.clip_id, self.fps)));
        }
        if self.audio.rows() != self.frames.len() {
            return Err(Error::Dimension(format!(
                "clip `{}` has {} frames but {} audio rows",
                self.clip_id,
                self.frames.len(),
                self.audio.rows()
            )));
        }
        let k = self.keypoints();
        for f in &self.frames {
            if f.keypoints() != k {
                return Err(Error::Dimension(format!("clip `{}` mixes keypoint counts", self.clip_id)));
            }
            f.validate()?;
        }
        Ok(())
    }

    /// Identity feature: the flattened canonical keypoints of the first frame.
    pub fn identity_feature(&self) -> Vec<f64> {
        self.frames.first().map(MotionFrame::canonical_flat).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip_through_names_and_indices() {
        for l in EmotionLabel::ALL {
            assert_eq!(l.name().parse::<EmotionLabel>().unwrap(), l);
            assert_eq!(EmotionLabel::from_index(l.index()).unwrap(), l);
        }
        assert!("bored".parse::<EmotionLabel>().is_err());
        assert!(EmotionLabel::from_index(8).is_err());
    }
}
