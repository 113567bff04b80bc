//! Binary clip files, precomputed feature matrices and WAV input.
//!
//! Clip layout, all little-endian:
//!
//! ```text
//! magic "FMCL" | version u32 | K u32 | fps f64 | T u32 | D_a u32
//! has_emotion u8 | emotion u8 | id_len u32 | id bytes (utf-8)
//! T × [canonical 3K f64 | expression 3K f64 | yaw pitch roll tx ty tz s f64]
//! T × D_a f64 audio features
//! ```
//!
//! Feature matrix layout: `T u32 | D u32 | T × D f32`, row-major.

use std::fs;
use std::path::Path;

use super::{EmotionLabel, MotionClip};
use crate::error::{Error, Result};
use crate::motion_space::{unflatten, EulerAngles, MotionFrame};
use crate::nn::Tensor;

pub const CLIP_MAGIC: [u8; 4] = *b"FMCL";
pub const CLIP_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated file: expected {n} bytes of {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }
}

fn encode_clip(clip: &MotionClip) -> Result<Vec<u8>> {
    clip.validate()?;
    let k = clip.keypoints();
    let t = clip.len();
    let d = clip.audio.cols();
    let mut out = Vec::with_capacity(64 + t * (6 * k + 7 + d) * 8);
    out.extend_from_slice(&CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&clip.fps.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(clip.emotion.is_some() as u8);
    out.push(clip.emotion.map_or(0, |e| e.index() as u8));
    out.extend_from_slice(&(clip.clip_id.len() as u32).to_le_bytes());
    out.extend_from_slice(clip.clip_id.as_bytes());
    for f in &clip.frames {
        for v in f.canonical_flat().into_iter().chain(f.expression_flat()).chain(f.pose_vector()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in clip.audio.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_clip(bytes: &[u8]) -> Result<MotionClip> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CLIP_MAGIC {
        return Err(Error::format(0, "bad magic, not a clip file"));
    }
    let version_at = r.offset();
    let version = r.u32("version")?;
    if version != CLIP_VERSION {
        return Err(Error::format(version_at, format!("unsupported clip version {version}")));
    }
    let k_at = r.offset();
    let k = r.u32("keypoint count")? as usize;
    if k == 0 {
        return Err(Error::format(k_at, "keypoint count is zero"));
    }
    let fps_at = r.offset();
    let fps = r.f64("fps")?;
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::format(fps_at, format!("invalid fps {fps}")));
    }
    let t_at = r.offset();
    let t = r.u32("frame count")? as usize;
    if t == 0 {
        return Err(Error::format(t_at, "clip has no frames"));
    }
    let d = r.u32("feature dim")? as usize;
    let flag_at = r.offset();
    let has_emotion = r.u8("emotion flag")?;
    let label = r.u8("emotion label")?;
    let emotion = match has_emotion {
        0 => None,
        1 => Some(
            EmotionLabel::from_index(label as usize)
                .map_err(|_| Error::format(flag_at + 1, format!("emotion index {label} out of range")))?,
        ),
        x => return Err(Error::format(flag_at, format!("emotion flag must be 0 or 1, got {x}"))),
    };
    let id_len = r.u32("id length")? as usize;
    let id_at = r.offset();
    let clip_id = String::from_utf8(r.take(id_len, "clip id")?.to_vec())
        .map_err(|_| Error::format(id_at, "clip id is not utf-8"))?;

    let mut frames = Vec::with_capacity(t);
    for i in 0..t {
        let at = r.offset();
        let canonical = r.f64s(3 * k, "canonical keypoints")?;
        let expression = r.f64s(3 * k, "expression")?;
        let p = r.f64s(7, "pose")?;
        let frame = MotionFrame::new(
            unflatten(&canonical),
            unflatten(&expression),
            EulerAngles::new(p[0], p[1], p[2]),
            [p[3], p[4], p[5]],
            p[6],
        )
        .map_err(|e| Error::format(at, format!("frame {i}: {e}")))?;
        frames.push(frame);
    }
    let audio_at = r.offset();
    let audio = Tensor::from_vec(t, d, r.f64s(t * d, "audio features")?);
    if !audio.all_finite() {
        return Err(Error::format(audio_at, "audio features contain non-finite values"));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.offset(), "trailing bytes after clip"));
    }
    Ok(MotionClip {
        clip_id,
        fps,
        frames,
        emotion,
        audio,
    })
}

pub fn save_clip(clip: &MotionClip, path: &Path) -> Result<()> {
    let bytes = encode_clip(clip)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_clip(path: &Path) -> Result<MotionClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_clip(&bytes)
}

pub fn save_feature_matrix(features: &Tensor, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(8 + features.len() * 4);
    out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_feature_matrix(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes);
    let t = r.u32("row count")? as usize;
    let d = r.u32("column count")? as usize;
    if t == 0 || d == 0 {
        return Err(Error::format(0, format!("empty feature matrix {t}×{d}")));
    }
    let at = r.offset();
    let raw = r.take(t * d * 4, "feature values")?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(at, "feature matrix contains non-finite values"));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.offset(), "trailing bytes after feature matrix"));
    }
    Ok(Tensor::from_vec(t, d, data))
}

/// 16-bit PCM WAV as mono samples in [-1, 1) plus the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(0, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(0, "only 16-bit integer PCM is supported"));
    }
    let channels = spec.channels as usize;
    if channels != 1 && channels != 2 {
        return Err(Error::format(0, format!("{channels} channels; expected mono or stereo")));
    }
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(0, e.to_string()))?;
    let samples = raw
        .chunks_exact(channels)
        .map(|c| c.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    Ok((samples, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{generate_synthetic_dataset, SyntheticConfig};

    fn sample_clip() -> MotionClip {
        let cfg = SyntheticConfig {
            num_clips: 1,
            frames_per_clip: 12,
            keypoints: 4,
            audio_dim: 5,
            seed: 3,
            emotions: vec![EmotionLabel::Sad],
            ..SyntheticConfig::default()
        };
        generate_synthetic_dataset(&cfg).unwrap().remove(0)
    }

    #[test]
    fn clip_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.clip");
        let clip = sample_clip();
        save_clip(&clip, &path).unwrap();
        assert_eq!(load_clip(&path).unwrap(), clip);
    }

    #[test]
    fn truncated_and_corrupt_files_are_format_errors() {
        let bytes = encode_clip(&sample_clip()).unwrap();
        for cut in [0, 3, 10, 40, bytes.len() - 1] {
            match decode_clip(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_clip(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_clip(&bad), Err(Error::Format { offset: 4, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_clip(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_clip_rejected_at_save() {
        let mut clip = sample_clip();
        clip.frames.clear();
        clip.audio = Tensor::zeros(0, 5);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            save_clip(&clip, &dir.path().join("e.clip")),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn feature_matrix_round_trips_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let m = Tensor::from_vec(2, 3, vec![0.5, -1.25, 3.0, 1e-3, 7.0, -0.0]);
        save_feature_matrix(&m, &path).unwrap();
        let back = load_feature_matrix(&path).unwrap();
        assert_eq!(back.shape(), (2, 3));
        assert!(back.max_abs_diff(&m) < 1e-7);
        fs::write(&path, [1u8, 0, 0, 0, 1, 0, 0, 0, 0]).unwrap();
        assert!(matches!(load_feature_matrix(&path), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn stereo_wav_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for (l, r) in [(16384i16, 0i16), (-16384, -16384)] {
            w.write_sample(l).unwrap();
            w.write_sample(r).unwrap();
        }
        w.finalize().unwrap();
        let (samples, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 16_000);
        assert_eq!(samples, vec![0.25, -0.5]);
    }
}
