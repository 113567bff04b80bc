//! Two-stage training: the audio-conditioned backbone first, then the
//! emotion branch with the backbone frozen.

mod adam;
mod checkpoint;
mod config;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_model, Checkpoint, CheckpointHeader, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{TrainConfig, ENV_PREFIX};

use crate::diffusion::{
    augment_prev, diffusion_loss, noise_example, DropoutProbs, NoiseSchedule, NoisedExample, TrainingExample,
    BETA_END, BETA_START,
};
use crate::error::{Error, Result};
use crate::features::{load_clip, EmotionLabel, MotionClip};
use crate::nn::{ConditionBundle, Ctx, Denoiser, ParamId, Stage, Tensor, Trainable};
use crate::normalization::{NormStats, PoseReference};

/// A clip in model space: normalized motion, audio and identity.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedClip {
    pub clip_id: String,
    /// `[N × D_m]`
    pub motion: Tensor,
    /// `[N × D_a]`
    pub audio: Tensor,
    /// `[1 × 3K]`
    pub identity: Tensor,
    pub emotion: Option<EmotionLabel>,
}

pub fn prepare_clips(clips: &[MotionClip], stats: &NormStats) -> Result<Vec<PreparedClip>> {
    if clips.is_empty() {
        return Err(Error::EmptyInput("no training clips".into()));
    }
    let d_a = clips[0].audio.cols();
    clips
        .iter()
        .map(|clip| {
            clip.validate()?;
            if clip.keypoints() != stats.keypoints || clip.audio.cols() != d_a {
                return Err(Error::Dimension(format!(
                    "clip `{}` has K={} and D_a={}, expected K={} and D_a={d_a}",
                    clip.clip_id,
                    clip.keypoints(),
                    clip.audio.cols(),
                    stats.keypoints
                )));
            }
            let rows = stats.normalize_clip(&clip.frames, &PoseReference::Clip(&clip.clip_id))?;
            Ok(PreparedClip {
                clip_id: clip.clip_id.clone(),
                motion: Tensor::from_rows(&rows),
                audio: clip.audio.clone(),
                identity: Tensor::row_vector(clip.identity_feature()),
                emotion: clip.emotion,
            })
        })
        .collect()
}

/// Reads every `.clip` file in `dir`, in file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<MotionClip>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "clip"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyInput(format!("no .clip files in {}", dir.display())));
    }
    paths.iter().map(|p| load_clip(p)).collect()
}

/// Window placement within a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowPick {
    pub start: usize,
    pub len: usize,
    pub with_prev: bool,
}

/// With probability `start_prob` (or when there is no room for a previous
/// window) the window opens the clip and uses the start tokens; otherwise it
/// starts uniformly in `[P, N − W]` and carries the `P` frames before it.
pub fn pick_window(n: usize, window: usize, prev: usize, start_prob: f64, rng: &mut impl Rng) -> WindowPick {
    let len = window.min(n);
    let max_start = n - len;
    let u: f64 = rng.random();
    if u < start_prob || max_start < prev {
        return WindowPick {
            start: 0,
            len,
            with_prev: false,
        };
    }
    WindowPick {
        start: rng.random_range(prev..=max_start),
        len,
        with_prev: true,
    }
}

/// Builds one clean training example.
pub fn make_example(
    clip: &PreparedClip,
    pick: WindowPick,
    prev_frames: usize,
    with_emotion: bool,
    prev_noise: Option<(&NoiseSchedule, bool)>,
    rng: &mut impl Rng,
) -> Result<TrainingExample> {
    let prev_motion = if pick.with_prev {
        let clean = clip.motion.slice_rows(pick.start - prev_frames, prev_frames);
        Some(match prev_noise {
            Some((schedule, sqrt_variant)) => augment_prev(&clean, schedule, sqrt_variant, rng)?,
            None => clean,
        })
    } else {
        None
    };
    Ok(TrainingExample {
        m0: clip.motion.slice_rows(pick.start, pick.len),
        bundle: ConditionBundle {
            audio: Some(clip.audio.slice_rows(pick.start, pick.len)),
            identity: Some(clip.identity.clone()),
            emotion: if with_emotion { clip.emotion } else { None },
            prev_motion,
        },
    })
}

/// Loss of one noised example and the gradients of the trainable parameters.
pub fn loss_and_grads(
    model: &Denoiser,
    example: &NoisedExample,
    trainable: Trainable,
) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let mut cx = Ctx::new(&model.params, trainable);
    let out = model.forward(&mut cx, &example.m_t, &example.bundle, example.t)?;
    let target = cx.g.constant(example.eps.clone());
    let diff = cx.g.sub(out, target);
    let loss = cx.g.mean_square(diff);
    let value = cx.g.value(loss).item();
    let grads = cx.g.backward(loss)?.into_params();
    Ok((value, grads))
}

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter element with the largest error, as `name[index]`.
    pub worst: String,
    pub checked: usize,
}

/// Relative errors use `max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)` as the
/// denominator so that vanishing gradients are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

fn loss_value(model: &Denoiser, example: &NoisedExample) -> Result<f64> {
    let mut cx = Ctx::new(&model.params, Trainable::Nothing);
    let out = model.forward(&mut cx, &example.m_t, &example.bundle, example.t)?;
    let target = cx.g.constant(example.eps.clone());
    let diff = cx.g.sub(out, target);
    let loss = cx.g.mean_square(diff);
    Ok(cx.g.value(loss).item())
}

/// Checks every `stride`-th element of every parameter against the
/// fourth-order central difference with step `h`. Parameters are restored
/// afterwards.
pub fn gradient_check(model: &mut Denoiser, example: &NoisedExample, h: f64, stride: usize) -> Result<GradCheck> {
    if !(h > 0.0) || stride == 0 {
        return Err(Error::InvalidArgument("gradient check needs h > 0 and stride ≥ 1".into()));
    }
    let (_, grads) = loss_and_grads(model, example, Trainable::Everything)?;
    let mut analytic: Vec<Option<Tensor>> = vec![None; model.params.len()];
    for (id, g) in grads {
        analytic[id.index()] = Some(g);
    }
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        let len = model.params.get(id).len();
        for j in (0..len).step_by(stride) {
            let orig = model.params.get(id).data()[j];
            let mut at = |x: f64| -> Result<f64> {
                model.params.get_mut(id).data_mut()[j] = x;
                loss_value(model, example)
            };
            let (p1, m1, p2, m2) = (at(orig + h)?, at(orig - h)?, at(orig + 2.0 * h)?, at(orig - 2.0 * h)?);
            model.params.get_mut(id).data_mut()[j] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = format!("{}[{j}]", model.params.entry(id).name);
            }
        }
    }
    Ok(report)
}

/// A training run held in memory.
pub struct Trainer {
    config: TrainConfig,
    model: Denoiser,
    adam: AdamState,
    rng: ChaCha8Rng,
    step: usize,
    data: Vec<PreparedClip>,
    schedule: NoiseSchedule,
    stage: Stage,
    /// Stage-1 partition hash pinned at the start of stage 2.
    frozen_hash: Option<String>,
    epoch_order: (usize, Vec<usize>),
}

impl Trainer {
    /// Fresh stage-1 run with a newly initialized model.
    pub fn stage1(config: TrainConfig, clips: &[MotionClip], stats: &NormStats) -> Result<Self> {
        config.validate()?;
        let data = prepare_clips(clips, stats)?;
        let arch = config.arch(stats.keypoints, data[0].audio.cols());
        let model = Denoiser::init(arch, config.seed)?;
        Self::build(config, model, data, Stage::One)
    }

    /// Fresh stage-2 run on top of a trained backbone.
    pub fn stage2(config: TrainConfig, backbone: Denoiser, clips: &[MotionClip], stats: &NormStats) -> Result<Self> {
        config.validate()?;
        let data = prepare_clips(clips, stats)?;
        if backbone.arch().keypoints != stats.keypoints || backbone.arch().audio_dim != data[0].audio.cols() {
            return Err(Error::Dimension("dataset does not match the backbone architecture".into()));
        }
        Self::build(config, backbone, data, Stage::Two)
    }

    fn build(config: TrainConfig, model: Denoiser, data: Vec<PreparedClip>, stage: Stage) -> Result<Self> {
        let schedule = NoiseSchedule::linear(config.diffusion_steps, BETA_START, BETA_END)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let frozen_hash = (stage == Stage::Two).then(|| model.backbone_hash());
        Ok(Self {
            adam: AdamState::new(&model.params),
            config,
            model,
            rng,
            step: 0,
            data,
            schedule,
            stage,
            frozen_hash,
            epoch_order: (usize::MAX, Vec::new()),
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::save`]. The
    /// trainer must have been built with the same config and data.
    pub fn resume_from(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        let h = &checkpoint.header;
        let stage_num = if self.stage == Stage::One { 1 } else { 2 };
        if h.stage != stage_num {
            return Err(Error::format(0, format!("checkpoint is stage {}, run is stage {stage_num}", h.stage)));
        }
        if h.config_hash != self.config.hash() {
            return Err(Error::format(0, "checkpoint was written with a different training config"));
        }
        if let Some(frozen) = &self.frozen_hash {
            if &h.backbone_hash != frozen {
                return Err(Error::format(0, "checkpoint was trained on a different backbone"));
            }
        }
        checkpoint.restore_into(&mut self.model, Some(&mut self.adam))?;
        self.rng = h.rng.restore()?;
        self.step = h.step;
        Ok(())
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn into_model(self) -> Denoiser {
        self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn data(&self) -> &[PreparedClip] {
        &self.data
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let stage = if self.stage == Stage::One { 1 } else { 2 };
        Checkpoint::capture(&self.model, &self.adam, stage, self.step, &self.config.hash(), &self.rng)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.check_frozen()?;
        self.checkpoint().save(path)
    }

    fn check_frozen(&self) -> Result<()> {
        match &self.frozen_hash {
            Some(h) if *h != self.model.backbone_hash() => Err(Error::Numerical {
                step: self.step,
                message: "frozen backbone parameters changed".into(),
            }),
            _ => Ok(()),
        }
    }

    /// Clip used for the `counter`-th example overall: each epoch visits every
    /// clip once in an order shuffled from the seed and the epoch number.
    fn clip_for(&mut self, counter: usize) -> usize {
        let n = self.data.len();
        let epoch = counter / n;
        if self.epoch_order.0 != epoch {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(1_000 + epoch as u64);
            order.shuffle(&mut rng);
            self.epoch_order = (epoch, order);
        }
        self.epoch_order.1[counter % n]
    }

    /// Draws a batch of clean examples from the training data.
    pub fn sample_batch(&mut self) -> Result<Vec<TrainingExample>> {
        let b = self.config.batch_size;
        let (w, p) = (self.config.window, self.config.prev_frames);
        let with_emotion = self.stage == Stage::Two;
        let mut out = Vec::with_capacity(b);
        for slot in 0..b {
            let ci = self.clip_for(self.step * b + slot);
            let pick = pick_window(self.data[ci].motion.rows(), w, p, self.config.start_prob, &mut self.rng);
            let ex = make_example(
                &self.data[ci],
                pick,
                p,
                with_emotion,
                Some((&self.schedule, self.config.prev_noise_sqrt)),
                &mut self.rng,
            )?;
            out.push(ex);
        }
        Ok(out)
    }

    /// One optimizer step; returns the mean batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.sample_batch()?;
        let trainable = Trainable::Stage(self.stage);
        let n = self.model.params.len();
        let mut acc: Vec<Option<Tensor>> = vec![None; n];
        let mut total = 0.0;
        for ex in &batch {
            let noised = noise_example(ex, &self.schedule, self.config.dropout(), &mut self.rng)?;
            let (loss, grads) = loss_and_grads(&self.model, &noised, trainable)?;
            total += loss;
            for (id, g) in grads {
                match &mut acc[id.index()] {
                    Some(a) => a.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        let loss = total / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical {
                step: self.step,
                message: format!("training loss is {loss}"),
            });
        }
        let scale = 1.0 / batch.len() as f64;
        let grads: Vec<(ParamId, Tensor)> = self
            .model
            .params
            .ids()
            .filter(|&id| self.model.params.stage(id) == self.stage)
            .map(|id| {
                let g = match acc[id.index()].take() {
                    Some(g) => g.map(|v| v * scale),
                    None => {
                        let (r, c) = self.model.params.get(id).shape();
                        Tensor::zeros(r, c)
                    }
                };
                (id, g)
            })
            .collect();
        adam_step(
            &mut self.model.params,
            &grads,
            &mut self.adam,
            self.config.learning_rate,
            self.config.adam(),
            Some(self.stage),
        )?;
        self.step += 1;
        Ok(loss)
    }

    /// Trains until `config.steps`, calling `on_step(step, loss)` after each
    /// step. Writes periodic checkpoints when `checkpoint_every` is set.
    pub fn run(&mut self, mut on_step: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        while self.step < self.config.steps {
            let loss = self.train_step()?;
            losses.push(loss);
            on_step(self.step, loss);
            if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                self.save(Path::new(&self.config.out))?;
            }
        }
        self.check_frozen()?;
        Ok(losses)
    }
}

/// Fixed evaluation batch: windows drawn once from `seed`.
pub fn evaluation_batch(
    data: &[PreparedClip],
    window: usize,
    prev_frames: usize,
    with_emotion: bool,
    count: usize,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let clip = &data[i % data.len()];
            let pick = pick_window(clip.motion.rows(), window, prev_frames, 0.0, &mut rng);
            make_example(clip, pick, prev_frames, with_emotion, None, &mut rng)
        })
        .collect()
}

/// Diffusion loss on a fixed batch with fixed noise draws and no dropout.
pub fn evaluation_loss(model: &Denoiser, batch: &[TrainingExample], schedule: &NoiseSchedule, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    diffusion_loss(model, batch, schedule, DropoutProbs::NONE, &mut rng)
}

fn log_progress(step: usize, loss: f64, every: usize) {
    if every > 0 && (step % every == 0 || step == 1) {
        eprintln!("step {step:>6}  loss {loss:.6}");
    }
}

/// File-driven stage-1 run: reads the dataset and statistics named in the
/// config, trains and writes `config.out`.
pub fn train_stage1(config: &TrainConfig) -> Result<Checkpoint> {
    if config.stage != 1 {
        return Err(Error::Config("train-stage1 needs stage = 1".into()));
    }
    let clips = load_dataset(Path::new(&config.dataset))?;
    let stats = NormStats::load(Path::new(&config.stats))?;
    let mut trainer = Trainer::stage1(config.clone(), &clips, &stats)?;
    if !config.resume.is_empty() {
        trainer.resume_from(&Checkpoint::load(Path::new(&config.resume))?)?;
    }
    let every = config.log_every;
    trainer.run(|s, l| log_progress(s, l, every))?;
    trainer.save(Path::new(&config.out))?;
    Ok(trainer.checkpoint())
}

/// File-driven stage-2 run on the backbone named by `config.backbone`.
pub fn train_stage2(config: &TrainConfig) -> Result<Checkpoint> {
    if config.stage != 2 {
        return Err(Error::Config("train-stage2 needs stage = 2".into()));
    }
    let clips = load_dataset(Path::new(&config.dataset))?;
    let stats = NormStats::load(Path::new(&config.stats))?;
    let (backbone, header) = load_model(Path::new(&config.backbone), None)?;
    if header.stage != 1 {
        return Err(Error::Config("backbone must be a stage-1 checkpoint".into()));
    }
    let mut trainer = Trainer::stage2(config.clone(), backbone, &clips, &stats)?;
    if !config.resume.is_empty() {
        trainer.resume_from(&Checkpoint::load(Path::new(&config.resume))?)?;
    }
    let every = config.log_every;
    trainer.run(|s, l| log_progress(s, l, every))?;
    trainer.save(Path::new(&config.out))?;
    Ok(trainer.checkpoint())
}
