"""Training loop: tasks, schedules, checkpoints, determinism, divergence."""

import dataclasses
import json

import numpy as np
import pytest

from hbl import tensor, toytrain
from hbl.errors import ConfigMismatchError, DivergedLossError

TINY = toytrain.TrainConfig(
    layers=1,
    hidden=16,
    glu=32,
    heads=2,
    vocab=16,
    seq_len=16,
    batch=8,
    steps_a8=40,
    steps_a4=4,
    warmup=5,
    seed=0,
)


class TestConfig:
    def test_a4_budget_capped_at_ten_percent(self):
        with pytest.raises(ValueError):
            toytrain.TrainConfig(steps_a8=100, steps_a4=50)

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            toytrain.TrainConfig(task="sorting")


class TestTasks:
    def test_copy_layout_and_targets(self):
        task = toytrain.SyntheticTask("copy", vocab=16, seq_len=16, seed=3)
        tokens, targets, mask = toytrain.make_batch(task, 4, step=0)
        sep = 15
        p = 7  # (16 - 1) // 2
        assert (tokens[:, p] == sep).all()
        assert np.array_equal(tokens[:, :p], tokens[:, p + 1 : 2 * p + 1])
        # targets after the separator are the payload again
        assert np.array_equal(targets[:, p : 2 * p], tokens[:, :p])
        assert mask[:, p : 2 * p].all()
        assert not mask[:, : p].any()

    def test_copy_noise_corrupts_source_only(self):
        task = toytrain.SyntheticTask("copy", vocab=16, seq_len=16, seed=3, noise=0.5)
        tokens, targets, mask = toytrain.make_batch(task, 64, step=1)
        p = 7
        # second span and targets agree; source differs where corrupted
        assert np.array_equal(targets[:, p : 2 * p], tokens[:, p + 1 : 2 * p + 1])
        diff = tokens[:, :p] != tokens[:, p + 1 : 2 * p + 1]
        assert 0.3 < diff.mean() < 0.65  # about half at noise=0.5 (resample may repeat)

    def test_modular_add(self):
        task = toytrain.SyntheticTask("modular-add", vocab=16, seq_len=16, seed=4)
        tokens, targets, mask = toytrain.make_batch(task, 8, step=2)
        x = tokens[:, 0::2]
        y = tokens[:, 1::2]
        assert np.array_equal(targets[:, 1::2], (x + y) % 13)
        assert mask[:, 1::2].all()
        assert not mask[:, 0::2].any()

    def test_determinism(self):
        task = toytrain.SyntheticTask("copy", vocab=16, seq_len=32, seed=9)
        a = toytrain.make_batch(task, 4, step=7)
        b = toytrain.make_batch(task, 4, step=7)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
        c = toytrain.make_batch(task, 4, step=8)
        assert not np.array_equal(a[0], c[0])


class TestSchedules:
    def test_warmup_then_linear_decay(self):
        cfg = TINY
        lrs = [toytrain.lr_at(cfg, "a8", s) for s in range(cfg.steps_a8)]
        assert lrs[0] < lrs[4] == pytest.approx(cfg.lr_peak_a8)
        assert lrs[-1] < lrs[5]
        assert min(lrs) > 0

    def test_stage_two_restarts_lower(self):
        cfg = TINY
        assert toytrain.lr_at(cfg, "a4", 0) == pytest.approx(cfg.lr_peak_a4)
        assert cfg.lr_peak_a4 < cfg.lr_peak_a8

    def test_weight_decay_drops_to_zero(self):
        assert toytrain.wd_at(TINY, "a8") == pytest.approx(0.1)
        assert toytrain.wd_at(TINY, "a4") == 0.0


class TestTrainStage:
    def test_loss_decreases_and_is_finite(self, tmp_path):
        res = toytrain.train_stage(TINY, "a8", out_dir=tmp_path)
        assert len(res.losses) == TINY.steps_a8
        assert all(np.isfinite(res.losses))
        assert np.mean(res.losses[-10:]) < np.mean(res.losses[:5])
        assert (tmp_path / "loss_a8.csv").exists()
        header = (tmp_path / "loss_a8.csv").read_text().splitlines()[0]
        assert header == "step,loss,lr,wd"

    def test_bit_determinism(self):
        r1 = toytrain.train_stage(TINY, "a8")
        r2 = toytrain.train_stage(TINY, "a8")
        assert r1.losses == r2.losses

    def test_a4_requires_resume(self):
        with pytest.raises(ConfigMismatchError):
            toytrain.train_stage(TINY, "a4")

    def test_a4_rejects_a4_checkpoint(self, tmp_path):
        a8 = toytrain.train_stage(TINY, "a8", out_dir=tmp_path / "one")
        a4 = toytrain.train_stage(TINY, "a4", resume=a8.checkpoint, out_dir=tmp_path / "two")
        with pytest.raises(ConfigMismatchError):
            toytrain.train_stage(TINY, "a4", resume=a4.checkpoint)

    def test_resume_architecture_mismatch(self, tmp_path):
        a8 = toytrain.train_stage(TINY, "a8", out_dir=tmp_path)
        wider = dataclasses.replace(TINY, hidden=32, glu=64)
        with pytest.raises(ConfigMismatchError):
            toytrain.train_stage(wider, "a4", resume=a8.checkpoint)

    def test_bad_stage_name(self):
        with pytest.raises(ValueError):
            toytrain.train_stage(TINY, "a2")

    def test_divergence_raises_with_partial_curve(self):
        cfg = dataclasses.replace(TINY, lr_peak_a8=1e9, warmup=1, grad_clip=0.0)
        with pytest.raises(DivergedLossError) as err:
            toytrain.train_stage(cfg, "a8")
        assert err.value.step < TINY.steps_a8
        assert len(err.value.losses) == err.value.step + 1
        assert not np.isfinite(err.value.losses[-1])


class TestCheckpoints:
    def test_round_trip_and_latent_weights(self, tmp_path):
        res = toytrain.train_stage(TINY, "a8", out_dir=tmp_path)
        manifest, params, (m, v), adam_t = toytrain.load_checkpoint(res.checkpoint)
        assert manifest["stage"] == "a8"
        assert manifest["step"] == TINY.steps_a8
        assert adam_t == TINY.steps_a8
        model = toytrain.load_model(res.checkpoint, TINY, act_bits=8)
        for name, arr in model.params().items():
            assert np.array_equal(arr, params[name])
        # stored weights are the full-precision latents: continuous values,
        # not a ternary grid
        w = params["block0.w_qkv.w"]
        assert len(np.unique(w)) > 3

    def test_manifest_lists_optimizer_files(self, tmp_path):
        res = toytrain.train_stage(TINY, "a8", out_dir=tmp_path)
        manifest = json.loads((res.checkpoint / "manifest.json").read_text())
        for name, (m_file, v_file) in manifest["optimizer"].items():
            param = tensor.load(res.checkpoint / manifest["params"][name])
            assert tensor.load(res.checkpoint / m_file).shape == param.shape
            assert tensor.load(res.checkpoint / v_file).shape == param.shape

    def test_a4_reuses_moments(self, tmp_path):
        a8 = toytrain.train_stage(TINY, "a8", out_dir=tmp_path)
        reused = toytrain.train_stage(TINY, "a4", resume=a8.checkpoint)
        reset = toytrain.train_stage(TINY, "a4", resume=a8.checkpoint, reset_optimizer=True)
        assert reused.losses[0] == reset.losses[0]  # same start point
        assert reused.losses[1:] != reset.losses[1:]  # different updates
        # directional claim: reused moments should not hurt; measured and
        # reported, never asserted
        print(
            f"\n[reuse-check] a4 final reused={reused.final_loss:.5f} "
            f"reset={reset.final_loss:.5f} "
            f"({'reuse better' if reused.final_loss <= reset.final_loss else 'reset better'})"
        )


class TestEvaluate:
    def test_eval_deterministic_and_paired(self, tmp_path):
        res = toytrain.train_stage(TINY, "a8", out_dir=tmp_path)
        model = toytrain.load_model(res.checkpoint, TINY, act_bits=8)
        e1 = toytrain.evaluate(model, TINY, n_batches=5)
        e2 = toytrain.evaluate(model, TINY, n_batches=5)
        assert e1 == e2
        assert np.isfinite(e1)


class TestAblation:
    def test_report_structure(self, tmp_path):
        cfg = dataclasses.replace(
            TINY, steps_a8=30, steps_a4=3, outlier_channels=2, outlier_scale=8.0
        )
        report = toytrain.run_ablation(cfg, tmp_path)
        assert set(report["variants"]) == {
            "no_rotation",
            "activation_rotation",
            "weight_activation_rotation",
        }
        for entry in report["variants"].values():
            assert "a4_diverged" in entry
            if not entry["a4_diverged"]:
                assert np.isfinite(entry["a4_final_loss"])
                assert np.isfinite(entry["a4_eval_loss"])
