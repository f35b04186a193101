"""Unit tests for the training regimes, checkpoints, and manifests."""

import csv
import json

import pytest
import torch

from qrestore.distill import make_teacher
from qrestore.model import ModelConfig, build_model
from qrestore.quantsim import activation_quantizers, quantized_layers
from qrestore.reweight import MagnitudeBalancer
from qrestore.trainer import (
    ConfigError,
    RunManifest,
    TrainConfig,
    TrainingAborted,
    _init_magnitude_balancer,
    ablate,
    evaluate_from_manifest,
    evaluate_model,
    load_checkpoint,
    load_teacher_model,
    make_data,
    reconstruction_loss,
    train,
    validate_config,
)

TINY_MODEL = dict(scale_factor=0.125)


def tiny_config(**kwargs) -> TrainConfig:
    base = dict(
        steps=3,
        lr=1e-3,
        batch_size=2,
        patch=16,
        n_images=6,
        image_size=48,
        val_patches=4,
        log_every=1,
        lmr_init_batches=2,
        model=ModelConfig(**TINY_MODEL),
    )
    base.update(kwargs)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def teacher_dir(tmp_path_factory):
    """A short fp32 run whose checkpoint seeds the quantized regimes."""
    out = tmp_path_factory.mktemp("teacher")
    cfg = tiny_config(regime="fp32", steps=5, run_name="teacher")
    manifest = train(cfg, out)
    return out, manifest


class TestValidateConfig:
    def test_valid_fp32(self):
        assert validate_config(tiny_config(regime="fp32")) == []

    def test_unknown_regime(self):
        with pytest.raises(ConfigError, match="unknown regime"):
            validate_config(tiny_config(regime="int8"))

    def test_fp32_with_bits(self):
        with pytest.raises(ConfigError, match="must not set bits"):
            validate_config(tiny_config(regime="fp32", bits=8))

    def test_ptq_requires_bits(self):
        with pytest.raises(ConfigError, match="requires bits"):
            validate_config(tiny_config(regime="ptq"))

    def test_qdr_requires_lmr(self):
        with pytest.raises(ConfigError, match="implies balancer=lmr"):
            validate_config(tiny_config(regime="qdr", bits=8, balancer="fixed"))

    def test_fixed_kd_regime_rejects_lmr(self):
        with pytest.raises(ConfigError, match="fixed or raw"):
            validate_config(tiny_config(regime="qat_kd_fixed", bits=8, balancer="lmr"))

    def test_bad_site_surfaces(self):
        with pytest.raises(ValueError):
            validate_config(tiny_config(regime="qdr", bits=8, distill_site="encoder:1"))

    def test_distill_without_bits_warns(self):
        warnings = validate_config(tiny_config(regime="qdr", bits=None))
        assert len(warnings) == 1 and "diagnostic" in warnings[0]

    def test_patch_divisibility(self):
        with pytest.raises(ConfigError, match="divisible by 8"):
            validate_config(tiny_config(patch=20))

    def test_unknown_task(self):
        with pytest.raises(ConfigError, match="unknown task"):
            validate_config(tiny_config(task="motion_blur"))

    def test_config_dict_round_trip(self):
        cfg = tiny_config(regime="qdr", bits=8, task_params={"sigma": 0.2})
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestReconstructionLoss:
    def test_l1(self):
        a = torch.zeros(1, 3, 16, 16)
        b = torch.full((1, 3, 16, 16), 0.25)
        assert reconstruction_loss(a, b, "l1").item() == pytest.approx(0.25)

    def test_l1_ssim_adds_structure_term(self):
        torch.manual_seed(0)
        a = torch.rand(1, 3, 16, 16)
        b = torch.rand(1, 3, 16, 16)
        plain = reconstruction_loss(a, b, "l1").item()
        combined = reconstruction_loss(a, b, "l1_ssim").item()
        assert combined > plain

    def test_identical_pair_is_zero(self):
        a = torch.rand(1, 3, 16, 16)
        assert reconstruction_loss(a, a.clone(), "l1_ssim").item() == pytest.approx(0.0, abs=1e-6)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            reconstruction_loss(torch.zeros(1, 3, 16, 16), torch.zeros(1, 3, 16, 16), "l2")


class TestMakeData:
    def test_eval_set_depends_only_on_data_seed(self):
        a = make_data(tiny_config(seed=0, data_seed=7))
        b = make_data(tiny_config(seed=99, data_seed=7))
        assert torch.equal(a.eval_batch.clean, b.eval_batch.clean)
        assert torch.equal(a.eval_batch.degraded, b.eval_batch.degraded)

    def test_eval_set_changes_with_data_seed(self):
        a = make_data(tiny_config(data_seed=7))
        b = make_data(tiny_config(data_seed=8))
        assert not torch.equal(a.eval_batch.clean, b.eval_batch.clean)

    def test_train_stream_follows_training_seed(self):
        a = next(make_data(tiny_config(seed=0)).train_stream)
        b = next(make_data(tiny_config(seed=0)).train_stream)
        c = next(make_data(tiny_config(seed=1)).train_stream)
        assert torch.equal(a.clean, b.clean)
        assert not torch.equal(a.clean, c.clean)

    def test_split_counts(self):
        bundle = make_data(tiny_config(n_images=8))
        assert bundle.description["val_images"] == 2
        assert bundle.description["train_images"] == 6

    def test_single_image_still_splits(self):
        bundle = make_data(tiny_config(n_images=1))
        assert bundle.description["val_images"] == 1
        assert bundle.description["train_images"] == 1


class TestRegimes:
    def test_fp32_run_artifacts(self, teacher_dir):
        out, manifest = teacher_dir
        assert manifest.counters["steps"] == 5
        assert manifest.counters["updates"] == 5
        assert manifest.counters["calibration_batches"] == 0
        assert manifest.quant_export is None
        assert (out / "model.pt").exists()
        assert (out / "trace.csv").exists()
        assert (out / "manifest.json").exists()
        with open(out / "trace.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 5
        assert rows[0]["loss_kd"] == ""

    def test_ptq_calibrates_without_updates(self, teacher_dir, tmp_path):
        out, _ = teacher_dir
        cfg = tiny_config(regime="ptq", bits=8, calib_batches=3, run_name="ptq")
        manifest = train(cfg, tmp_path, teacher_checkpoint=out / "model.pt")
        assert manifest.counters["updates"] == 0
        assert manifest.counters["calibration_batches"] == 3
        assert manifest.quant_export is not None
        with open(manifest.quant_export) as f:
            records = json.load(f)
        assert all(r["activation_calibrated"] for r in records)
        # weights must be bitwise the teacher's
        student, _ = load_checkpoint(manifest.checkpoint)
        teacher = load_teacher_model(out / "model.pt")
        s = dict(student.named_parameters())
        for n, p in teacher.named_parameters():
            head, _, leaf = n.rpartition(".")
            key = n if n in s else f"{head}.conv.{leaf}"
            assert torch.equal(s[key], p), n

    def test_qat_trains_quantized(self, teacher_dir, tmp_path):
        out, _ = teacher_dir
        cfg = tiny_config(regime="qat", bits=4, run_name="qat")
        manifest = train(cfg, tmp_path, teacher_checkpoint=out / "model.pt")
        assert manifest.counters["updates"] == 3
        model, payload = load_checkpoint(manifest.checkpoint)
        assert payload["bits"] == 4
        assert len(quantized_layers(model)) > 0
        assert all(bool(q.frozen) for _, q in activation_quantizers(model))

    def test_qdr_runs_balancer(self, teacher_dir, tmp_path):
        out, _ = teacher_dir
        cfg = tiny_config(
            regime="qdr", bits=8, steps=4, lmr_refresh=2, run_name="qdr", eval_every=2
        )
        manifest = train(cfg, tmp_path, teacher_checkpoint=out / "model.pt")
        assert manifest.counters["updates"] == 4
        assert manifest.counters["balancer_refreshes"] == 2
        assert manifest.counters["balancer_fallback"] is False
        assert manifest.counters["evals"] >= 2
        with open(manifest.trace_csv) as f:
            rows = list(csv.DictReader(f))
        assert all(r["loss_kd"] != "" for r in rows)
        assert all(float(r["weight_rec"]) > 0 for r in rows)
        mid = [r for r in rows if r["val_psnr"] != ""]
        assert len(mid) >= 1

    def test_fixed_kd_regime(self, teacher_dir, tmp_path):
        out, _ = teacher_dir
        cfg = tiny_config(
            regime="qat_kd_fixed", bits=8, balancer="fixed", fixed_kd_weight=0.5, run_name="fixed"
        )
        manifest = train(cfg, tmp_path, teacher_checkpoint=out / "model.pt")
        with open(manifest.trace_csv) as f:
            rows = list(csv.DictReader(f))
        assert all(float(r["weight_kd"]) == 0.5 for r in rows)

    def test_distill_requires_teacher(self, tmp_path):
        with pytest.raises(ConfigError, match="requires a teacher"):
            train(tiny_config(regime="qdr", bits=8), tmp_path)

    def test_zero_steps_keeps_teacher_weights(self, teacher_dir, tmp_path):
        out, _ = teacher_dir
        cfg = tiny_config(regime="qat", bits=8, steps=0, run_name="frozen")
        manifest = train(cfg, tmp_path, teacher_checkpoint=out / "model.pt")
        student, _ = load_checkpoint(manifest.checkpoint)
        teacher = load_teacher_model(out / "model.pt")
        s = dict(student.named_parameters())
        for n, p in teacher.named_parameters():
            # wrapped convs gain a ".conv" path segment
            head, _, leaf = n.rpartition(".")
            key = n if n in s else f"{head}.conv.{leaf}"
            assert torch.equal(s[key], p), n

    def test_deterministic_rerun(self, teacher_dir, tmp_path):
        out, _ = teacher_dir
        cfg = tiny_config(regime="qat", bits=8, run_name="det")
        m1 = train(cfg, tmp_path / "a", teacher_checkpoint=out / "model.pt")
        m2 = train(cfg, tmp_path / "b", teacher_checkpoint=out / "model.pt")
        a, _ = load_checkpoint(m1.checkpoint)
        b, _ = load_checkpoint(m2.checkpoint)
        for (n, p), (_, q) in zip(
            sorted(a.state_dict().items()), sorted(b.state_dict().items())
        ):
            assert torch.equal(p, q), n
        assert m1.metrics["final"]["psnr_db"] == m2.metrics["final"]["psnr_db"]

    def test_abort_on_divergence(self, teacher_dir, tmp_path):
        out, _ = teacher_dir
        cfg = tiny_config(regime="qat", bits=8, lr=1e6, steps=50, run_name="diverge")
        with pytest.raises(TrainingAborted) as err:
            train(cfg, tmp_path, teacher_checkpoint=out / "model.pt")
        assert err.value.step > 0
        assert err.value.checkpoint is not None
        model, payload = load_checkpoint(err.value.checkpoint)
        assert payload["step"] == err.value.step


class TestBalancerFallback:
    def test_degenerate_distillation_falls_back(self):
        torch.manual_seed(0)
        cfg = tiny_config(regime="qdr", bits=None, lmr_init_batches=2)
        model = build_model(cfg.model)
        model.eval()  # running stats keep teacher/student traces identical
        teacher = make_teacher(model, student=model)
        data = make_data(cfg)
        balancer = MagnitudeBalancer()
        from qrestore.distill import DistillSite

        fell_back, used = _init_magnitude_balancer(
            balancer, model, teacher, data.train_stream, cfg, DistillSite("output")
        )
        assert fell_back is True
        assert used == 2
        assert not balancer.initialized

    def test_healthy_distillation_initializes(self, teacher_dir):
        out, _ = teacher_dir
        torch.manual_seed(0)
        cfg = tiny_config(regime="qdr", bits=8)
        teacher_model = load_teacher_model(out / "model.pt")
        model = build_model(cfg.model)
        model.load_state_dict(teacher_model.state_dict())
        teacher = make_teacher(teacher_model, student=model)
        from qrestore.quantsim import QuantConfig, attach_quantizers

        attach_quantizers(model, QuantConfig(bits=8))
        model.train()
        data = make_data(cfg)
        balancer = MagnitudeBalancer()
        from qrestore.distill import DistillSite

        fell_back, _ = _init_magnitude_balancer(
            balancer, model, teacher, data.train_stream, cfg, DistillSite("bottleneck")
        )
        assert fell_back is False
        assert balancer.initialized


class TestManifests:
    def test_round_trip(self, teacher_dir):
        out, manifest = teacher_dir
        loaded = RunManifest.load(out / "manifest.json")
        assert loaded.run_name == manifest.run_name
        assert loaded.train_config() == manifest.train_config()
        assert loaded.metrics["final"]["psnr_db"] == manifest.metrics["final"]["psnr_db"]

    def test_environment_recorded(self, teacher_dir):
        _, manifest = teacher_dir
        assert set(manifest.environment) >= {"python", "torch", "numpy", "platform"}

    def test_evaluate_from_manifest_reproduces(self, teacher_dir):
        _, manifest = teacher_dir
        report = evaluate_from_manifest(manifest)
        assert report.psnr_db == pytest.approx(manifest.metrics["final"]["psnr_db"], abs=1e-6)

    def test_teacher_loader_rejects_quantized(self, teacher_dir, tmp_path):
        out, _ = teacher_dir
        cfg = tiny_config(regime="qat", bits=8, steps=1, run_name="q")
        manifest = train(cfg, tmp_path, teacher_checkpoint=out / "model.pt")
        with pytest.raises(ConfigError, match="full-precision teacher"):
            load_teacher_model(manifest.checkpoint)

    def test_checkpoint_reload_bitwise(self, teacher_dir):
        out, manifest = teacher_dir
        model, payload = load_checkpoint(manifest.checkpoint)
        report = evaluate_model(model, make_data(manifest.train_config()).eval_batch)
        assert report.psnr_db == pytest.approx(manifest.metrics["final"]["psnr_db"], abs=1e-6)


class TestAblate:
    def test_skip_axis_sweep(self, teacher_dir, tmp_path):
        out, _ = teacher_dir
        cfg = tiny_config(regime="qat", bits=8, steps=2, run_name="sweep")
        rows = ablate(
            cfg, "skip", tmp_path, teacher_checkpoint=out / "model.pt", values=["plain", "gated"]
        )
        assert [r["value"] for r in rows] == ["plain", "gated"]
        assert (tmp_path / "ablation.csv").exists()
        assert (tmp_path / "ablation.png").exists()
        for r in rows:
            assert RunManifest.load(r["manifest"]).counters["steps"] == 2

    def test_balancer_axis_switches_regime(self, teacher_dir, tmp_path):
        out, _ = teacher_dir
        cfg = tiny_config(regime="qdr", bits=8, steps=1, run_name="bal")
        rows = ablate(
            cfg, "balancer", tmp_path, teacher_checkpoint=out / "model.pt", values=["lmr", "fixed"]
        )
        regimes = [RunManifest.load(r["manifest"]).regime for r in rows]
        assert regimes == ["qdr", "qat_kd_fixed"]

    def test_unknown_axis(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown ablation axis"):
            ablate(tiny_config(), "lr", tmp_path)
