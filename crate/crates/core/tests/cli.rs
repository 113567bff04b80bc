use std::fs;
use std::path::Path;

use facemotion::cli::run;
use facemotion::eval::CSV_HEADER;
use facemotion::features::{load_clip, load_feature_matrix};

fn ok(args: &[&str]) {
    let mut argv = vec!["facemotion"];
    argv.extend_from_slice(args);
    assert_eq!(run(argv), 0, "{args:?}");
}

fn code(args: &[&str]) -> i32 {
    let mut argv = vec!["facemotion"];
    argv.extend_from_slice(args);
    run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset, statistics and a briefly trained stage-1 checkpoint.
fn pipeline(dir: &Path) {
    let data = dir.join("data");
    ok(&[
        "synth-data", "--out", s(&data), "--clips", "3", "--frames", "40", "--keypoints", "4", "--audio-dim", "8",
        "--emotions", "neutral,happy", "--offset-scale", "0.2", "--features",
    ]);
    ok(&["stats", "--dataset", s(&data), "--out", s(&dir.join("stats.json"))]);
    let cfg = dir.join("tiny.toml");
    fs::write(
        &cfg,
        "steps = 2\nbatch_size = 2\nwidth = 8\nblocks = 1\nheads = 2\nwindow = 8\nprev_frames = 2\n\
         diffusion_steps = 10\ndit_blocks = 1\nlog_every = 0\n",
    )
    .unwrap();
    ok(&[
        "train-stage1", "--config", s(&cfg), "--dataset", s(&data), "--stats", s(&dir.join("stats.json")), "--out",
        s(&dir.join("s1.ckpt")),
    ]);
}

fn generate(dir: &Path, out: &str, extra: &[&str]) -> i32 {
    let mut args = vec![
        "generate".to_string(),
        "--checkpoint".into(),
        s(&dir.join("s1.ckpt")).into(),
        "--stats".into(),
        s(&dir.join("stats.json")).into(),
        "--audio".into(),
        s(&dir.join("data/clip_0000.feat")).into(),
        "--identity".into(),
        s(&dir.join("data/clip_0001.clip")).into(),
        "--out".into(),
        s(&dir.join(out)).into(),
    ];
    args.extend(extra.iter().map(|a| a.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    code(&refs)
}

#[test]
fn generate_writes_one_frame_per_feature_row_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    assert_eq!(generate(dir.path(), "a.clip", &[]), 0);
    assert_eq!(generate(dir.path(), "b.clip", &[]), 0);
    let feats = load_feature_matrix(&dir.path().join("data/clip_0000.feat")).unwrap();
    let a = load_clip(&dir.path().join("a.clip")).unwrap();
    assert_eq!(a.len(), feats.rows());
    let b = load_clip(&dir.path().join("b.clip")).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_eq!(generate(dir.path(), "c.clip", &["--seed", "5", "--wa", "1.0"]), 0);
    assert_ne!(load_clip(&dir.path().join("c.clip")).unwrap().frames, a.frames);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["generate", "--no-such-flag"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["train-stage1", "--set", "bogus_key=1"]), 2);
    assert_eq!(code(&["train-stage1", "--set", "steps"]), 2);
    assert_eq!(code(&["train-stage2"]), 2);
    assert_eq!(code(&["stats", "--dataset", s(dir.path()), "--out", s(&dir.path().join("x.json"))]), 3);
    assert_eq!(code(&["plot", "--clip", s(&dir.path().join("missing.clip")), "--out", "x"]), 3);
    pipeline(dir.path());
    assert_eq!(generate(dir.path(), "e.clip", &["--emotion", "grumpy"]), 2);
    // Audio with the wrong feature width for the model.
    let bad = dir.path().join("bad.feat");
    facemotion::features::save_feature_matrix(&facemotion::nn::Tensor::zeros(5, 3), &bad).unwrap();
    assert_eq!(
        code(&[
            "generate", "--checkpoint", s(&dir.path().join("s1.ckpt")), "--stats", s(&dir.path().join("stats.json")),
            "--audio", s(&bad), "--identity", s(&dir.path().join("data/clip_0001.clip")), "--out",
            s(&dir.path().join("f.clip")),
        ]),
        3
    );
}

#[test]
fn eval_on_identical_clips_reports_zero_distances() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let clip = dir.path().join("data/clip_0000.clip");
    let out = dir.path().join("report.txt");
    ok(&["eval", "--generated", s(&clip), "--reference", s(&clip), "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    for key in ["apd_yaw_deg", "apd_pitch_deg", "apd_roll_deg", "akd", "traj_mse"] {
        let line = text.lines().find(|l| l.starts_with(&format!("{key} = "))).unwrap();
        assert_eq!(line.split(" = ").nth(1).unwrap().parse::<f64>().unwrap(), 0.0, "{line}");
    }
    assert!(fs::read_to_string(out.with_extension("csv")).unwrap().starts_with("metric,value\n"));

    let d = dir.path().join("data");
    ok(&[
        "eval", "--generated", s(&clip), "--reference", s(&clip), "--separation", s(&d.join("clip_0000.clip")),
        s(&d.join("clip_0001.clip")), s(&d.join("clip_0002.clip")), s(&d.join("clip_0001.clip")),
        "--out", s(&out),
    ]);
    assert!(fs::read_to_string(&out).unwrap().contains("emotion_separation = "));
}

#[test]
fn plots_are_byte_stable_and_demo_freezes_expression() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    assert_eq!(generate(dir.path(), "g.clip", &[]), 0);
    let clip = dir.path().join("g.clip");
    let first = dir.path().join("p1");
    let second = dir.path().join("p2");
    ok(&["plot", "--clip", s(&clip), "--out", s(&first), "--demo"]);
    ok(&["plot", "--clip", s(&clip), "--out", s(&second), "--demo"]);
    let csv = fs::read_to_string(first.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), load_clip(&clip).unwrap().len() + 1);
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    for (a, b) in [("p1.csv", "p2.csv"), ("p1.svg", "p2.svg"), ("p1_pose_only.csv", "p2_pose_only.csv")] {
        assert_eq!(fs::read(dir.path().join(a)).unwrap(), fs::read(dir.path().join(b)).unwrap());
    }
    let frozen = fs::read_to_string(dir.path().join("p1_pose_only.csv")).unwrap();
    let norms: Vec<&str> = frozen.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert!(norms.windows(2).all(|w| w[0] == w[1]));
    let yaws: Vec<&str> = frozen.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert!(yaws.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn stage2_round_trip_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let p = dir.path();
    ok(&[
        "train-stage2", "--config", s(&p.join("tiny.toml")), "--dataset", s(&p.join("data")), "--stats",
        s(&p.join("stats.json")), "--backbone", s(&p.join("s1.ckpt")), "--out", s(&p.join("s2.ckpt")),
    ]);
    let path = |name: &str| p.join(name).to_str().unwrap().to_string();
    let mut base: Vec<String> = [
        "generate", "--checkpoint", &path("s2.ckpt"), "--stats", &path("stats.json"), "--audio",
        &path("data/clip_0000.feat"), "--identity", &path("data/clip_0001.clip"), "--emotion", "happy",
        "--out", &path("h.clip"),
    ]
    .iter()
    .map(|a| a.to_string())
    .collect();

    assert_eq!(code(&base.iter().map(String::as_str).collect::<Vec<_>>()), 2);
    base.extend(["--backbone".to_string(), path("s1.ckpt")]);
    ok(&base.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(load_clip(&p.join("h.clip")).unwrap().emotion, Some(facemotion::features::EmotionLabel::Happy));
}
