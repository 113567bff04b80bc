"""Smoke test for the facemotion extension module.

Build the module first (see README), then run:

    python python/smoke_test.py
"""

import math
import os
import sys
import tempfile

import facemotion as fm


def main():
    assert "happy" in fm.emotions()

    clips = fm.synth_dataset(clips=4, frames=60, keypoints=4, audio_dim=8, seed=3,
                             emotions=["neutral", "happy"], offset_scale=0.2)
    assert len(clips) == 4 and len(clips[0]) == 60
    assert clips[1].emotion == "happy"
    stats = fm.Stats.compute(clips)
    assert stats.keypoints == 4

    tiny = {"steps": "6", "batch_size": "4", "width": "16", "blocks": "1", "heads": "2",
            "conv_kernel": "3", "ffn_mult": "2", "window": "10", "prev_frames": "3",
            "dit_blocks": "1", "dit_mlp_mult": "2", "diffusion_steps": "50",
            "learning_rate": "0.001", "seed": "11"}
    model, losses = fm.train_stage1(clips, stats, tiny)
    assert len(losses) == 6 and all(math.isfinite(l) for l in losses)
    assert model.stage == 1

    emo, _ = fm.train_stage2(model, clips, stats, tiny)
    assert emo.backbone_hash == model.backbone_hash

    audio = clips[0].audio()[:25]
    a = fm.generate(emo, stats, audio, clips[2], emotion="happy", seed=5)
    b = fm.generate(emo, stats, audio, clips[2], emotion="happy", seed=5)
    assert len(a) == 25
    assert a.poses() == b.poses(), "generation must be reproducible"

    metrics = fm.compare(a, a)
    assert all(v == 0.0 for k, v in metrics.items() if k != "jitter"), metrics
    assert metrics["jitter"] == fm.jitter(a) >= 0.0

    with tempfile.TemporaryDirectory() as d:
        base = os.path.join(d, "s1.ckpt")
        head = os.path.join(d, "s2.ckpt")
        model.save(base)
        emo.save(head)
        back = fm.Model.load(head, backbone=base)
        c = fm.generate(back, stats, audio, clips[2], emotion="happy", seed=5)
        assert c.poses() == a.poses(), "reloaded model must generate the same motion"

        path = os.path.join(d, "clip.bin")
        a.save(path)
        assert fm.Clip.load(path).expressions() == a.expressions()

    try:
        fm.generate(emo, stats, audio, clips[2], emotion="bored")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown emotion accepted")

    print("smoke test ok:", model, emo)
    return 0


if __name__ == "__main__":
    sys.exit(main())
