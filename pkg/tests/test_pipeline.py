import csv
import dataclasses

import numpy as np
import pytest
import torch

from videdit import cli, pipeline, storage
from videdit.ablation import masked_consistency, suite_configs
from videdit.blending import upsample_mask
from videdit.errors import PhaseError
from videdit.metrics import REPORT_COLUMNS


def _rms(a, b):
    return float(torch.sqrt(torch.mean((a - b) ** 2)))


def test_blending_keeps_background_bitwise(small_session):
    res = pipeline.edit_sample(small_session, "a blue square moving right")
    assert res.masks, "blending produced no masks"
    for step, mask in res.masks.items():
        assert mask.shape == (4, 8, 8)
    outside = ~upsample_mask(res.final_mask, (16, 16))[:, None].expand_as(res.edited)
    assert torch.equal(res.edited[outside], res.recon[outside])


def test_self_edit_identity(small_session):
    inj = dataclasses.replace(small_session.config.injection(), dur_cross=1.0, dur_st=1.0, dur_temporal=1.0)
    res = pipeline.edit_sample(small_session, small_session.source_prompt, blending=False, injection=inj)
    assert _rms(res.edited, res.recon) <= 1e-6


def test_framewise_and_temporal_masks_differ_only_after_frame_one(small_session):
    tc = pipeline.edit_sample(small_session, "a blue square moving right", tc_blending=True)
    fw = pipeline.edit_sample(small_session, "a blue square moving right", tc_blending=False)
    first = min(tc.masks)
    assert torch.equal(tc.masks[first][0], fw.masks[first][0])


def test_sdedit_endpoints(small_session):
    S = small_session.schedule.num_sampler_steps
    out0 = pipeline.baseline_sdedit(small_session, "a blue square moving right", t0=0)
    assert torch.equal(out0, small_session.x0)
    full = pipeline.baseline_sdedit(small_session, "a blue square moving right", t0=S)
    gen = pipeline.baseline_generate(small_session, "a blue square moving right")
    assert torch.equal(full, gen)
    with pytest.raises(ValueError):
        pipeline.baseline_sdedit(small_session, "x", t0=S + 1)


def test_baseline_generate_deterministic(small_session):
    a = pipeline.baseline_generate(small_session, "a green circle moving up")
    b = pipeline.baseline_generate(small_session, "a green circle moving up")
    assert torch.equal(a, b)


def test_run_edit_artifacts_and_evaluate(small_config, small_session, tmp_path):
    config = dataclasses.replace(small_config, output_dir=str(tmp_path / "edit"))
    report, res = pipeline.run_edit(config, small_session)
    out = config.output_path()
    for name in ("config.yaml", "source.npz", "tuned.npz", "inversion.npz", "edit_trajectory.npz",
                 "edited.npz", "reconstruction.npz", "masks.npz", "report.csv", "report.png",
                 "nti_loss.csv", "finetune_loss.csv"):
        assert (out / name).exists(), name
    assert len(list((out / "final_mask").glob("*.png"))) == 4
    rows = list(csv.reader((out / "report.csv").open()))
    assert tuple(rows[0]) == REPORT_COLUMNS and len(rows) == 2
    assert rows[1][0] == "edit_tc"
    arrays, meta = storage.load_trajectory(out / "edit_trajectory.npz")
    assert len(meta["sampler_steps"]) == 10
    assert np.array_equal(arrays["z_10"], res.edited.numpy())

    again = pipeline.evaluate_run(out)
    edited = [r for r in again if r.method == "edit_tc"][0]
    assert edited.mask_iou == pytest.approx(report.mask_iou, abs=1e-12)
    assert edited.psnr_db == pytest.approx(report.psnr_db, abs=1e-6)  # frames rounded through [0, 1] clip only
    assert edited.text_alignment == pytest.approx(report.text_alignment, abs=1e-9)


def test_run_edit_deterministic(small_config, tmp_path):
    outs = []
    config = dataclasses.replace(small_config, output_dir=str(tmp_path / "r"))
    for _ in range(2):
        _, res = pipeline.run_edit(config)
        outs.append((res.edited, (config.output_path() / "report.csv").read_bytes()))
    assert torch.equal(outs[0][0], outs[1][0])
    assert outs[0][1] == outs[1][1]


def test_reconstruct_and_baselines_via_cli(small_config, tmp_path):
    base = ["-q", "--seed", "0", "--weights", small_config.weights, "--sampler-steps", "10",
            "--finetune-steps", "5", "--nti-inner-iters", "1", "--num-frames", "4", "--sdedit-t0", "5"]
    for cmd, product in (("reconstruct", "reconstruction.npz"), ("baseline-generate", "output.npz"),
                         ("baseline-sdedit", "output.npz")):
        out = tmp_path / cmd
        argv = [cmd] + base[1:] + ["--output-dir", str(out), "--target-prompt", "a blue square moving right"]
        assert cli.main(["-q"] + argv) == 0, cmd
        assert (out / product).exists() and (out / "report.csv").exists()
    assert cli.main(["-q", "evaluate", str(tmp_path / "reconstruct")]) == 0
    assert (tmp_path / "reconstruct" / "evaluation.csv").exists()


def test_missing_video_is_phase_error(small_config, tmp_path):
    config = dataclasses.replace(small_config, video=str(tmp_path / "absent.npz"), source_prompt="a red square",
                                 output_dir=str(tmp_path / "bad"))
    with pytest.raises(PhaseError) as info:
        pipeline.run_edit(config)
    assert info.value.phase == "load_source"


def test_external_video_needs_prompt(small_config, tmp_path):
    v = storage.save_video(tmp_path / "clip.npz", np.zeros((4, 4, 16, 16)))
    config = dataclasses.replace(small_config, video=str(v), source_prompt=None)
    with pytest.raises(PhaseError):
        pipeline.prepare(config)


def test_suite_configs_are_color_swaps(small_config):
    configs = suite_configs(small_config, count=5, seed=3)
    assert len(configs) == 5 and len({c.scene_seed for c in configs}) == 5
    for c in configs:
        src = f"a {c.scene_color} {c.scene_shape} moving {c.scene_direction}"
        words_src, words_tgt = src.split(), c.target_prompt.split()
        assert [a != b for a, b in zip(words_src, words_tgt)] == [False, True, False, False, False]
    assert [c.target_prompt for c in configs] == [c.target_prompt for c in suite_configs(small_config, 5, 3)]


def test_masked_consistency():
    frames = np.ones((3, 4, 16, 16))
    mask = torch.zeros(3, 8, 8, dtype=torch.bool)
    assert masked_consistency(frames, mask) is None
    mask[:, 2:4, 2:4] = True
    assert masked_consistency(frames, mask) == pytest.approx(1.0)
