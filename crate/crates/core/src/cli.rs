//! Command-line front end. Exit codes: 0 ok, 2 usage or configuration,
//! 3 data or I/O, 4 numerical divergence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::diffusion::Guidance;
use crate::error::{Error, Result};
use crate::eval::{
    disentanglement_demo, emit_plots, file_hash, metric_emotion_separation, report_csv, time_averaged_expression,
    EvalReport, SPIN_DEG_PER_FRAME,
};
use crate::features::{
    extract_toy_audio_features, generate_synthetic_dataset, load_clip, load_feature_matrix, read_wav, save_clip,
    AudioFeatureConfig, EmotionLabel, SyntheticConfig,
};
use crate::generate::{generate_motion, to_clip, GenerationRequest};
use crate::normalization::{NormStats, DEFAULT_EPSILON};
use crate::train::{load_dataset, load_model, train_stage1, train_stage2, TrainConfig, ENV_PREFIX};

#[derive(Parser, Debug)]
#[command(name = "facemotion", version, about = "Audio-driven facial motion diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with a known audio-to-expression map.
    SynthData(SynthArgs),
    /// Compute normalization statistics for a dataset directory.
    Stats(StatsArgs),
    /// Train the audio-conditioned backbone.
    TrainStage1(TrainArgs),
    /// Train the emotion branch on a frozen backbone.
    TrainStage2(TrainArgs),
    /// Generate a motion clip from audio.
    Generate(GenerateArgs),
    /// Compare a generated clip with a reference.
    Eval(EvalArgs),
    /// Write CSV and SVG views of a clip.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    clips: usize,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 21)]
    keypoints: usize,
    #[arg(long, default_value_t = 64)]
    audio_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated labels assigned round-robin.
    #[arg(long, default_value = "neutral", value_delimiter = ',')]
    emotions: Vec<EmotionLabel>,
    #[arg(long, default_value_t = 0.1)]
    offset_scale: f64,
    /// Also write the audio features of each clip as `<id>.feat`.
    #[arg(long)]
    features: bool,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    stats: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    resume: Option<String>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stage-1 checkpoint, needed for stage-2 models.
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    stats: PathBuf,
    /// 16-bit PCM `.wav` or a feature matrix written by `synth-data --features`.
    #[arg(long)]
    audio: PathBuf,
    /// Clip whose first frame supplies the identity and initial pose.
    #[arg(long)]
    identity: PathBuf,
    #[arg(long)]
    emotion: Option<EmotionLabel>,
    #[arg(long, default_value_t = 1.5)]
    wa: f64,
    #[arg(long, default_value_t = 1.5)]
    we: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long = "reference")]
    reference: PathBuf,
    /// Generated clips grouped by their emotion label for the separation score.
    #[arg(long, num_args = 1..)]
    separation: Vec<PathBuf>,
    /// Checkpoint whose hash is recorded in the report.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report text file; a `.csv` twin is written beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    clip: PathBuf,
    /// Output path stem; `.csv` and `.svg` are appended.
    #[arg(long)]
    out: PathBuf,
    /// Also plot the pose-only and expression-only re-emissions.
    #[arg(long)]
    demo: bool,
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::Stats(a) => stats(a),
        Command::TrainStage1(a) => {
            let cfg = train_config(a, 1)?;
            train_stage1(&cfg).map(|ck| eprintln!("wrote {} at step {}", cfg.out, ck.header.step))
        }
        Command::TrainStage2(a) => {
            let cfg = train_config(a, 2)?;
            train_stage2(&cfg).map(|ck| eprintln!("wrote {} at step {}", cfg.out, ck.header.step))
        }
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        num_clips: a.clips,
        frames_per_clip: a.frames,
        keypoints: a.keypoints,
        audio_dim: a.audio_dim,
        seed: a.seed,
        emotions: a.emotions,
        emotion_offset_scale: a.offset_scale,
        ..SyntheticConfig::default()
    };
    let clips = generate_synthetic_dataset(&cfg)?;
    create_dir(&a.out)?;
    for clip in &clips {
        save_clip(clip, &a.out.join(format!("{}.clip", clip.clip_id)))?;
        if a.features {
            crate::features::save_feature_matrix(&clip.audio, &a.out.join(format!("{}.feat", clip.clip_id)))?;
        }
    }
    eprintln!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let clips = load_dataset(&a.dataset)?;
    let stats = NormStats::from_clips(clips.iter().map(|c| (c.clip_id.as_str(), c.frames.as_slice())), a.epsilon)?;
    stats.save(&a.out)
}

fn parse_set(raw: &str) -> Result<(String, String)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| Error::Config(format!("`--set {raw}` is not KEY=VALUE")))
}

fn train_config(a: TrainArgs, stage: u8) -> Result<TrainConfig> {
    let text = match &a.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let env: BTreeMap<String, String> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    let mut overrides = vec![("stage".to_string(), stage.to_string())];
    for s in &a.set {
        overrides.push(parse_set(s)?);
    }
    let flags = [
        ("steps", a.steps.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("dataset", a.dataset),
        ("stats", a.stats),
        ("out", a.out),
        ("backbone", a.backbone),
        ("resume", a.resume),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    }
    TrainConfig::resolve(text.as_deref(), &env, &overrides)
}

fn read_audio(path: &Path, bands: usize) -> Result<crate::nn::Tensor> {
    let is_wav = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if is_wav {
        let (samples, rate) = read_wav(path)?;
        let cfg = AudioFeatureConfig {
            bands,
            ..AudioFeatureConfig::default()
        };
        Ok(extract_toy_audio_features(&samples, rate, &cfg)?.frames)
    } else {
        load_feature_matrix(path)
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let (model, _) = load_model(&a.checkpoint, a.backbone.as_deref())?;
    let stats = NormStats::load(&a.stats)?;
    let audio = read_audio(&a.audio, model.arch().audio_dim)?;
    let identity = load_clip(&a.identity)?;
    let reference = identity
        .frames
        .first()
        .ok_or_else(|| Error::EmptyInput("identity clip has no frames".into()))?;
    let req = GenerationRequest {
        audio: &audio,
        reference,
        emotion: a.emotion,
        guidance: Guidance {
            audio: a.wa,
            emotion: a.we,
        },
        seed: a.seed,
        pose_stats: None,
    };
    let out = generate_motion(&model, &stats, &req)?;
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("generated");
    let clip = to_clip(stem, identity.fps, out.frames, &audio, a.emotion);
    save_clip(&clip, &a.out)?;
    eprintln!("wrote {} frames to {}", clip.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let generated = load_clip(&a.generated)?;
    let reference = load_clip(&a.reference)?;
    let mut report = EvalReport::compare(&generated.frames, &reference.frames)?;
    report.checkpoint_hash = file_hash(a.checkpoint.as_deref())?;
    report.dataset_hash = file_hash(Some(&a.reference))?;
    report.seed = a.seed;
    if !a.separation.is_empty() {
        let mut groups: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for p in &a.separation {
            let clip = load_clip(p)?;
            let label = clip
                .emotion
                .ok_or_else(|| Error::InvalidArgument(format!("{} has no emotion label", p.display())))?;
            groups.entry(label.index()).or_default().push(time_averaged_expression(&clip.frames));
        }
        let groups: Vec<_> = groups.into_values().collect();
        report.insert("emotion_separation", metric_emotion_separation(&groups)?)?;
    }
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = a.out {
        fs::write(&out, &text).map_err(|e| Error::io(&out, e))?;
        let csv = out.with_extension("csv");
        fs::write(&csv, report_csv(&report)).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let clip = load_clip(&a.clip)?;
    emit_plots(&clip.frames, &a.out, &clip.clip_id)?;
    if a.demo {
        let demo = disentanglement_demo(&clip.frames, SPIN_DEG_PER_FRAME)?;
        let name = a.out.file_name().and_then(|s| s.to_str()).unwrap_or("plot").to_string();
        emit_plots(
            &demo.pose_only,
            &a.out.with_file_name(format!("{name}_pose_only")),
            &format!("{}: generated pose, frozen expression", clip.clip_id),
        )?;
        emit_plots(
            &demo.expression_only,
            &a.out.with_file_name(format!("{name}_expression_only")),
            &format!("{}: generated expression, spinning head", clip.clip_id),
        )?;
    }
    Ok(())
}
