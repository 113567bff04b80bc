//! DDPM noising and sampling, multi-condition classifier-free guidance,
//! previous-window corruption and windowed sequence generation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Denoiser, Tensor};

pub use crate::nn::ConditionBundle;

pub const DEFAULT_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
/// Largest timestep used when corrupting the previous window.
pub const PREV_NOISE_MAX_STEP: usize = 50;

/// Linear β schedule with cumulative products. Timesteps are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, BETA_START, BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check(t)?])
    }
}

/// Standard-normal `[rows × cols]` tensor.
pub fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// `√ᾱ · m0 + √(1 − ᾱ) · ε` for an explicit ᾱ.
pub fn q_sample_at(m0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if m0.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "noise {:?} does not match motion {:?}",
            eps.shape(),
            m0.shape()
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(m0.zip_map(eps, |x, e| a * x + b * e))
}

pub fn q_sample(schedule: &NoiseSchedule, m0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check(t)?;
    q_sample_at(m0, schedule.alpha_bar(t)?, eps)
}

/// Independent probabilities of dropping each droppable condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutProbs {
    pub audio: f64,
    pub emotion: f64,
}

impl Default for DropoutProbs {
    fn default() -> Self {
        Self {
            audio: 0.1,
            emotion: 0.1,
        }
    }
}

impl DropoutProbs {
    pub const NONE: DropoutProbs = DropoutProbs {
        audio: 0.0,
        emotion: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("audio", self.audio), ("emotion", self.emotion)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} dropout {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Nulls audio and emotion independently. Identity and previous motion are
/// always kept. Two uniforms are drawn per call whatever the outcome.
pub fn condition_dropout(bundle: &ConditionBundle, probs: DropoutProbs, rng: &mut impl Rng) -> ConditionBundle {
    let ua: f64 = rng.random();
    let ue: f64 = rng.random();
    let mut out = bundle.clone();
    if ua < probs.audio {
        out.audio = None;
    }
    if ue < probs.emotion {
        out.emotion = None;
    }
    out
}

/// Anything that predicts the noise in a noisy window.
pub trait NoisePredictor {
    fn predict(&self, m_t: &Tensor, bundle: &ConditionBundle, t: usize) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn predict(&self, m_t: &Tensor, bundle: &ConditionBundle, t: usize) -> Result<Tensor> {
        Denoiser::predict(self, m_t, bundle, t)
    }
}

/// Guidance scales for the audio and emotion conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub audio: f64,
    pub emotion: f64,
}

impl Default for Guidance {
    fn default() -> Self {
        Self {
            audio: 1.5,
            emotion: 1.5,
        }
    }
}

/// Guided prediction
/// `u + w_a·(a − u) + w_e·(ae − a)` where `u` drops audio and emotion, `a`
/// drops emotion only and `ae` keeps both. Identity and previous motion are
/// passed to every evaluation. Without an emotion only `u` and `a` are
/// evaluated.
///
/// The sum is evaluated as `(1 − w_a)·u + w_a·a`, or
/// `(1 − w_a)·u + (w_a − w_e)·a + w_e·ae` where `ae` differs from `a`, which
/// keeps the collapses at `w ∈ {0, 1}` exact and leaves channels the emotion
/// does not touch bit-identical to the emotion-free result.
pub fn cfg_predict<P: NoisePredictor + ?Sized>(
    model: &P,
    m_t: &Tensor,
    bundle: &ConditionBundle,
    t: usize,
    guidance: Guidance,
) -> Result<Tensor> {
    let mut uncond = bundle.clone();
    uncond.audio = None;
    uncond.emotion = None;
    let mut audio_only = bundle.clone();
    audio_only.emotion = None;
    let u = model.predict(m_t, &uncond, t)?;
    let a = model.predict(m_t, &audio_only, t)?;
    let (wa, we) = (guidance.audio, guidance.emotion);
    let two = |u: f64, a: f64| (1.0 - wa) * u + wa * a;
    if bundle.emotion.is_none() {
        return Ok(u.zip_map(&a, two));
    }
    let ae = model.predict(m_t, bundle, t)?;
    let data = u
        .data()
        .iter()
        .zip(a.data())
        .zip(ae.data())
        .map(|((&u, &a), &ae)| {
            if ae == a {
                two(u, a)
            } else {
                (1.0 - wa) * u + (wa - we) * a + we * ae
            }
        })
        .collect();
    Ok(Tensor::from_vec(u.rows(), u.cols(), data))
}

/// Ancestral DDPM sampling of a `[len × dim]` window from pure noise.
pub fn sample_window<P: NoisePredictor + ?Sized>(
    model: &P,
    bundle: &ConditionBundle,
    guidance: Guidance,
    schedule: &NoiseSchedule,
    shape: (usize, usize),
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut x = randn(shape.0, shape.1, rng);
    for t in (1..=schedule.steps()).rev() {
        let eps = cfg_predict(model, &x, bundle, t, guidance)?;
        let (beta, alpha, ab) = (schedule.beta(t)?, schedule.alpha(t)?, schedule.alpha_bar(t)?);
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let mut next = x.zip_map(&eps, |x, e| inv * (x - coef * e));
        if t > 1 {
            let var = beta * (1.0 - schedule.alpha_bar(t - 1)?) / (1.0 - ab);
            let sd = var.sqrt();
            let z = randn(shape.0, shape.1, rng);
            next = next.zip_map(&z, |m, z| m + sd * z);
        }
        if !next.all_finite() {
            return Err(Error::Numerical {
                step: t,
                message: "non-finite value in the reverse chain".into(),
            });
        }
        x = next;
    }
    Ok(x)
}

/// Noise coefficient of the previous-window corruption at ᾱ.
pub fn prev_noise_coefficient(alpha_bar: f64, sqrt_variant: bool) -> f64 {
    if sqrt_variant {
        (1.0 - alpha_bar).sqrt()
    } else {
        1.0 - alpha_bar
    }
}

/// `√ᾱ_t · m + c(ᾱ_t) · ε` at a given step, with `c = 1 − ᾱ` by default or
/// `√(1 − ᾱ)` when `sqrt_variant` is set.
pub fn augment_prev_at(
    prev: &Tensor,
    schedule: &NoiseSchedule,
    t: usize,
    eps: &Tensor,
    sqrt_variant: bool,
) -> Result<Tensor> {
    if prev.shape() != eps.shape() {
        return Err(Error::Dimension("noise does not match previous window".into()));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, c) = (ab.sqrt(), prev_noise_coefficient(ab, sqrt_variant));
    Ok(prev.zip_map(eps, |m, e| a * m + c * e))
}

/// Corrupts a clean previous window at a step drawn uniformly from 1..=50.
pub fn augment_prev(
    prev: &Tensor,
    schedule: &NoiseSchedule,
    sqrt_variant: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let t = rng.random_range(1..=PREV_NOISE_MAX_STEP.min(schedule.steps()));
    let eps = randn(prev.rows(), prev.cols(), rng);
    augment_prev_at(prev, schedule, t, &eps, sqrt_variant)
}

/// A clean window and its conditions, as used for training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub m0: Tensor,
    pub bundle: ConditionBundle,
}

/// A training example after drawing t, ε and the condition dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedExample {
    pub m_t: Tensor,
    pub eps: Tensor,
    pub t: usize,
    pub bundle: ConditionBundle,
}

/// Draws `t ~ U{1..T}`, `ε ~ N(0, I)` and the dropout mask, in that order.
pub fn noise_example(
    example: &TrainingExample,
    schedule: &NoiseSchedule,
    probs: DropoutProbs,
    rng: &mut impl Rng,
) -> Result<NoisedExample> {
    let t = rng.random_range(1..=schedule.steps());
    let (r, c) = example.m0.shape();
    let eps = randn(r, c, rng);
    let m_t = q_sample(schedule, &example.m0, t, &eps)?;
    let bundle = condition_dropout(&example.bundle, probs, rng);
    Ok(NoisedExample { m_t, eps, t, bundle })
}

/// Mean over the batch and all elements of `(ε − ε̂)²`.
pub fn diffusion_loss<P: NoisePredictor + ?Sized>(
    model: &P,
    batch: &[TrainingExample],
    schedule: &NoiseSchedule,
    probs: DropoutProbs,
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty training batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        let n = noise_example(ex, schedule, probs, rng)?;
        let pred = model.predict(&n.m_t, &n.bundle, n.t)?;
        if pred.shape() != n.eps.shape() {
            return Err(Error::Dimension("prediction shape differs from noise".into()));
        }
        let se: f64 = pred.data().iter().zip(n.eps.data()).map(|(p, e)| (p - e) * (p - e)).sum();
        total += se / pred.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Window boundaries `(start, len)` covering `total` frames in steps of
/// `window`; the last window may be shorter.
pub fn window_spans(total: usize, window: usize) -> Vec<(usize, usize)> {
    (0..total)
        .step_by(window.max(1))
        .map(|s| (s, window.min(total - s)))
        .collect()
}

/// Settings for autoregressive generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationSettings {
    pub window: usize,
    pub prev_frames: usize,
    pub guidance: Guidance,
}

/// Generates normalized motion for every row of `audio` (`[N × D_a]`),
/// window by window. Each window after the first is conditioned on the last
/// `prev_frames` generated rows; the first uses the learned start tokens.
pub fn generate_sequence<P: NoisePredictor + ?Sized>(
    model: &P,
    audio: &Tensor,
    identity: Option<&Tensor>,
    emotion: Option<crate::features::EmotionLabel>,
    settings: GenerationSettings,
    motion_dim: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let total = audio.rows();
    if total == 0 {
        return Err(Error::EmptyInput("no audio frames to generate from".into()));
    }
    if settings.window == 0 || settings.prev_frames > settings.window {
        return Err(Error::Config("window must be positive and at least prev_frames".into()));
    }
    let mut out = Tensor::zeros(total, motion_dim);
    for (start, len) in window_spans(total, settings.window) {
        let prev_motion = (start > 0).then(|| out.slice_rows(start - settings.prev_frames, settings.prev_frames));
        let bundle = ConditionBundle {
            audio: Some(audio.slice_rows(start, len)),
            identity: identity.cloned(),
            emotion,
            prev_motion,
        };
        let win = sample_window(model, &bundle, settings.guidance, schedule, (len, motion_dim), rng)?;
        for r in 0..len {
            out.row_mut(start + r).copy_from_slice(win.row(r));
        }
    }
    Ok(out)
}
