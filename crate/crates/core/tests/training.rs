mod common;

use common::*;
use facemotion::diffusion::{noise_example, DropoutProbs};
use facemotion::features::EmotionLabel;
use facemotion::nn::{Denoiser, Stage};
use facemotion::train::*;
use facemotion::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trained_backbone() -> (Denoiser, facemotion::normalization::NormStats) {
    let (clips, stats) = dataset(&synth(&[EmotionLabel::Neutral], 0.0));
    let mut tr = Trainer::stage1(tiny_config(), &clips, &stats).unwrap();
    tr.run(|_, _| {}).unwrap();
    (tr.into_model(), stats)
}

#[test]
fn untrained_loss_is_near_one() {
    let (clips, stats) = dataset(&synth(&[EmotionLabel::Neutral], 0.0));
    let tr = Trainer::stage1(tiny_config(), &clips, &stats).unwrap();
    let batch = evaluation_batch(tr.data(), 10, 3, false, 64, 1).unwrap();
    let loss = evaluation_loss(tr.model(), &batch, tr.schedule(), 2).unwrap();
    assert!((loss - 1.0).abs() < 0.05, "loss {loss}");
}

#[test]
fn same_config_and_seed_give_identical_checkpoints() {
    let (clips, stats) = dataset(&synth(&[EmotionLabel::Neutral], 0.0));
    let run = || {
        let mut tr = Trainer::stage1(tiny_config(), &clips, &stats).unwrap();
        let losses = tr.run(|_, _| {}).unwrap();
        (losses, tr.checkpoint().to_bytes())
    };
    let (la, ca) = run();
    let (lb, cb) = run();
    assert_eq!(la, lb);
    assert_eq!(ca, cb);
    let mut other = tiny_config();
    other.seed += 1;
    let mut tr = Trainer::stage1(other, &clips, &stats).unwrap();
    tr.run(|_, _| {}).unwrap();
    assert_ne!(tr.checkpoint().to_bytes(), ca);
}

#[test]
fn resume_matches_straight_through_run() {
    let (clips, stats) = dataset(&synth(&[EmotionLabel::Neutral], 0.0));
    let mut straight = Trainer::stage1(tiny_config(), &clips, &stats).unwrap();
    let all = straight.run(|_, _| {}).unwrap();

    let mut half = tiny_config();
    half.steps = 3;
    let mut first = Trainer::stage1(half, &clips, &stats).unwrap();
    first.run(|_, _| {}).unwrap();
    let bytes = first.checkpoint().to_bytes();

    let mut second = Trainer::stage1(tiny_config(), &clips, &stats).unwrap();
    second.resume_from(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let rest = second.run(|_, _| {}).unwrap();
    assert_eq!(rest, all[3..]);
    assert_eq!(second.checkpoint().to_bytes(), straight.checkpoint().to_bytes());
}

#[test]
fn resume_rejects_a_different_config() {
    let (clips, stats) = dataset(&synth(&[EmotionLabel::Neutral], 0.0));
    let tr = Trainer::stage1(tiny_config(), &clips, &stats).unwrap();
    let ck = tr.checkpoint();
    let mut cfg = tiny_config();
    cfg.learning_rate = 0.5;
    let mut other = Trainer::stage1(cfg, &clips, &stats).unwrap();
    assert!(matches!(other.resume_from(&ck), Err(Error::Format { .. })));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let (clips, stats) = dataset(&synth(&[EmotionLabel::Neutral], 0.0));
    let tr = Trainer::stage1(tiny_config(), &clips, &stats).unwrap();
    let mut bytes = tr.checkpoint().to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Format { .. })));
}

#[test]
fn stage2_freezes_backbone_and_moves_the_branch() {
    let (backbone, _) = trained_backbone();
    let frozen = backbone.backbone_hash();
    let branch = backbone.params.partition_hash(Stage::Two);
    let (clips, stats) = dataset(&synth(&[EmotionLabel::Neutral, EmotionLabel::Happy], 0.3));
    let mut tr = Trainer::stage2(stage2_config(), backbone, &clips, &stats).unwrap();
    tr.train_step().unwrap();
    assert_ne!(tr.model().params.partition_hash(Stage::Two), branch);
    tr.run(|_, _| {}).unwrap();
    assert_eq!(tr.model().backbone_hash(), frozen);
}

#[test]
fn stage2_checkpoint_needs_its_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let (backbone, _) = trained_backbone();
    let bpath = dir.path().join("s1.ckpt");
    let mut a = AdamState::new(&backbone.params);
    a.t = 0;
    Checkpoint::capture(&backbone, &a, 1, 6, "x", &ChaCha8Rng::seed_from_u64(0)).save(&bpath).unwrap();

    let (clips, stats) = dataset(&synth(&[EmotionLabel::Neutral, EmotionLabel::Sad], 0.3));
    let mut tr = Trainer::stage2(stage2_config(), backbone, &clips, &stats).unwrap();
    tr.train_step().unwrap();
    let spath = dir.path().join("s2.ckpt");
    tr.save(&spath).unwrap();

    assert!(matches!(load_model(&spath, None), Err(Error::Usage(_))));
    let (model, header) = load_model(&spath, Some(&bpath)).unwrap();
    assert_eq!(header.stage, 2);
    assert_eq!(model.params, tr.model().params);

    // A different backbone is refused.
    let (clips1, stats1) = dataset(&synth(&[EmotionLabel::Neutral], 0.0));
    let mut cfg = tiny_config();
    cfg.seed = 99;
    let other = Trainer::stage1(cfg, &clips1, &stats1).unwrap();
    let opath = dir.path().join("other.ckpt");
    other.save(&opath).unwrap();
    assert!(matches!(load_model(&spath, Some(&opath)), Err(Error::Format { .. })));
}

#[test]
fn stage2_without_offsets_keeps_stage1_loss() {
    let (backbone, _) = trained_backbone();
    let (clips, stats) = dataset(&synth(&[EmotionLabel::Neutral], 0.0));
    let data = prepare_clips(&clips, &stats).unwrap();
    let schedule = facemotion::generate::schedule_for(&backbone).unwrap();
    let plain = evaluation_batch(&data, 10, 3, false, 32, 5).unwrap();
    let with = evaluation_batch(&data, 10, 3, true, 32, 5).unwrap();
    let base = evaluation_loss(&backbone, &plain, &schedule, 6).unwrap();
    assert_eq!(evaluation_loss(&backbone, &with, &schedule, 6).unwrap(), base);

    let mut tr = Trainer::stage2(stage2_config(), backbone, &clips, &stats).unwrap();
    tr.run(|_, _| {}).unwrap();
    let after = evaluation_loss(tr.model(), &with, &schedule, 6).unwrap();
    assert!((after - base).abs() < 0.1 * base, "{base} -> {after}");
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let (clips, stats) = dataset(&synth(&[EmotionLabel::Neutral], 0.0));
    let mut tr = Trainer::stage1(tiny_config(), &clips, &stats).unwrap();
    tr.train_step().unwrap();
    let mut model = tr.into_model();
    let id = model.params.find("pose_in.weight").unwrap();
    model.params.get_mut(id).data_mut()[0] = f64::NAN;
    let mut tr = Trainer::stage1(tiny_config(), &clips, &stats).unwrap();
    let ck = Checkpoint::capture(&model, &AdamState::new(&model.params), 1, 1, &tiny_config().hash(), &ChaCha8Rng::seed_from_u64(1));
    tr.resume_from(&ck).unwrap();
    match tr.train_step() {
        Err(Error::Numerical { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let (clips, stats) = dataset(&synth(&[EmotionLabel::Neutral, EmotionLabel::Angry], 0.2));
    let mut cfg = tiny_config();
    cfg.width = 8;
    let tr = Trainer::stage1(cfg, &clips, &stats).unwrap();
    let data = tr.data().to_vec();
    let schedule = tr.schedule().clone();
    let mut model = tr.into_model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += 0.2 * rng.random_range(-1.0..1.0);
        }
    }
    let batch = evaluation_batch(&data, 10, 3, true, 2, 4).unwrap();
    let ex = noise_example(&batch[1], &schedule, DropoutProbs::NONE, &mut rng).unwrap();
    let report = gradient_check(&mut model, &ex, 1e-3, 7).unwrap();
    assert!(report.checked > 300);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
