"""Training regimes, checkpointing, and run manifests.

Five regimes share one loop:
  fp32          full-precision training, reconstruction loss only
  ptq           post-training quantization: calibrate activation ranges on
                a pretrained model, zero parameter updates
  qat           quantization-aware training, reconstruction loss only
  qat_kd_fixed  QAT plus feature distillation with a fixed weight
  qdr           QAT plus feature distillation under the gradient-magnitude
                balancer (the full method)

Every run writes a checkpoint, a step-trace CSV, and a JSON manifest
that freezes the config, environment, artifact paths, and final metrics;
a manifest is sufficient to reproduce or re-evaluate its run.
"""

from __future__ import annotations

import json
import math
import platform
import sys
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from . import degrade
from .degrade import PatchBatch, DegradationSpec
from .distill import DistillSite, TeacherHandle, kd_loss, make_teacher
from .metrics import EvalReport, evaluate_pairs, ssim, compare_reports
from .model import ModelConfig, RestorationNet, build_model
from .quantsim import (
    CalibrationError,
    QuantConfig,
    attach_quantizers,
    calibrate_model,
    export_quant_params,
    freeze_activation_quantizers,
)
from .reweight import (
    BalancerError,
    FixedCombiner,
    MagnitudeBalancer,
    ReciprocalCombiner,
    gradient_norm,
)

REGIMES = ("fp32", "ptq", "qat", "qat_kd_fixed", "qdr")
BALANCERS = ("lmr", "fixed", "gor", "none")
RECON_LOSSES = ("l1", "l1_ssim")

# Gradient norms below this are treated as identically zero when deciding
# whether distillation is degenerate (student already matches the teacher).
DEGENERATE_KD_NORM = 1e-20


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class TrainingAborted(RuntimeError):
    """Non-finite training state; carries a checkpoint of the state at abort."""

    def __init__(self, reason: str, step: int, checkpoint: str | None):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.reason = reason
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    regime: str = "fp32"
    steps: int = 1000
    lr: float = 2e-4
    seed: int = 0
    batch_size: int = 8
    patch: int = 64
    eval_every: int = 0
    log_every: int = 10
    recon_loss: str = "l1_ssim"
    # data
    data_source: str = "synthetic"
    data_seed: int = 0
    task: str = "gaussian_noise"
    task_params: dict = field(default_factory=dict)
    n_images: int = 24
    image_size: int = 160
    val_patches: int = 64
    # model
    model: ModelConfig = field(default_factory=ModelConfig)
    # quantization (bits None = full precision)
    bits: int | None = None
    calib_batches: int = 16
    # distillation
    distill_site: str = "bottleneck"
    kd_loss_kind: str = "mse"
    init_from_teacher: bool = True
    # balancing
    balancer: str = "lmr"
    fixed_kd_weight: float = 1.0
    lmr_mu: float = 0.9
    lmr_eps: float = 1e-12
    lmr_refresh: int = 50
    lmr_clip: float = 1.0
    lmr_init_batches: int = 8
    lmr_lr_scale: float = 10.0
    run_name: str = "run"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return TrainConfig(**d)


def uses_distillation(regime: str) -> bool:
    return regime in ("qat_kd_fixed", "qdr")


def uses_quantization(config: TrainConfig) -> bool:
    return config.bits is not None


def validate_config(config: TrainConfig) -> list[str]:
    """Raise ConfigError on contradictions; return non-fatal warnings."""
    warnings: list[str] = []
    if config.regime not in REGIMES:
        raise ConfigError(f"unknown regime {config.regime!r}; valid: {', '.join(REGIMES)}")
    if config.recon_loss not in RECON_LOSSES:
        raise ConfigError(f"unknown recon_loss {config.recon_loss!r}; valid: {RECON_LOSSES}")
    if config.balancer not in BALANCERS:
        raise ConfigError(f"unknown balancer {config.balancer!r}; valid: {BALANCERS}")
    if config.steps < 0 or config.batch_size < 1 or config.patch < 8:
        raise ConfigError("steps must be >= 0, batch_size >= 1, patch >= 8")
    if config.patch % 8:
        raise ConfigError("patch size must be divisible by 8")
    if config.regime == "fp32" and config.bits is not None:
        raise ConfigError("fp32 regime must not set bits")
    if config.regime in ("ptq", "qat") and config.bits is None:
        raise ConfigError(f"{config.regime} regime requires bits (2, 4 or 8)")
    if uses_distillation(config.regime):
        DistillSite.parse(config.distill_site)  # raises on nonsense
        if config.bits is None:
            warnings.append(
                f"{config.regime} without quantization is a diagnostic run; "
                "the student has nothing to recover"
            )
    if config.regime == "qdr" and config.balancer != "lmr":
        raise ConfigError("qdr regime implies balancer=lmr; use qat_kd_fixed for fixed weights")
    if config.regime == "qat_kd_fixed" and config.balancer == "lmr":
        raise ConfigError("qat_kd_fixed uses a fixed or raw balancer, not lmr")
    if config.task not in degrade.DEGRADATION_KINDS:
        raise ConfigError(
            f"unknown task {config.task!r}; valid: {', '.join(degrade.DEGRADATION_KINDS)}"
        )
    return warnings


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "l1":
        return F.l1_loss(pred, target)
    if kind == "l1_ssim":
        return F.l1_loss(pred, target) + (1.0 - ssim(pred, target))
    raise ConfigError(f"unknown recon_loss {kind!r}")


# ---------------------------------------------------------------------------
# data assembly


@dataclass
class DataBundle:
    train_stream: Iterator[PatchBatch]
    eval_batch: PatchBatch
    description: dict


class _SubsetSource:
    """View of an image source restricted to an index subset."""

    def __init__(self, source, indices: list[int]):
        self.source = source
        self.indices = indices
        if hasattr(source, "degraded"):
            self.degraded = [source.degraded[i] for i in indices]

    def __len__(self) -> int:
        return len(self.indices)

    def get(self, index: int):
        return self.source.get(self.indices[index])


def make_data(config: TrainConfig) -> DataBundle:
    """Build the train stream and a fixed held-out eval batch.

    The image corpus and the train/val image split depend only on
    data_seed, so runs that share a data config are scored on the same
    held-out patches regardless of their training seed.
    """
    if config.data_source == "synthetic":
        source = degrade.ProceduralImageSource(
            n_images=config.n_images, size=config.image_size, seed=config.data_seed
        )
    else:
        source = degrade.PairedDirectorySource(config.data_source)

    n = len(source)
    rng = np.random.default_rng(np.random.SeedSequence([0x5917, config.data_seed]))
    order = list(rng.permutation(n))
    n_val = max(1, n // 4) if n > 1 else 1
    val_idx, train_idx = order[:n_val], order[n_val:] or order
    train_source = _SubsetSource(source, train_idx)
    val_source = _SubsetSource(source, val_idx)

    spec = degrade.make_spec(config.task, **config.task_params)
    train_stream = degrade.make_patch_stream(
        train_source, [spec], config.patch, config.batch_size, seed=config.seed
    )
    eval_batch = degrade.make_eval_set(
        val_source, [spec], config.patch, config.val_patches, seed=config.data_seed + 7919
    )
    description = {
        "source": config.data_source,
        "n_images": n,
        "train_images": len(train_idx),
        "val_images": len(val_idx),
        "task": config.task,
        "task_params": dict(degrade.make_spec(config.task, **config.task_params).param_dict()),
    }
    return DataBundle(train_stream=train_stream, eval_batch=eval_batch, description=description)


# ---------------------------------------------------------------------------
# checkpoints and manifests


def save_checkpoint(path: str | Path, model: torch.nn.Module, config: TrainConfig, step: int) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "model_config": config.model.to_dict(),
        "bits": config.bits,
        "calib_batches": config.calib_batches,
        "regime": config.regime,
        "step": step,
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)
    return str(path)


def load_checkpoint(path: str | Path) -> tuple[torch.nn.Module, dict]:
    """Rebuild the saved network (reattaching quantizers when present)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = build_model(ModelConfig.from_dict(payload["model_config"]))
    if payload.get("bits") is not None:
        attach_quantizers(
            model, QuantConfig(bits=payload["bits"], calib_batches=payload.get("calib_batches", 16))
        )
    model.load_state_dict(payload["state_dict"])
    return model, payload


def load_teacher_model(path: str | Path) -> RestorationNet:
    model, payload = load_checkpoint(path)
    if payload.get("bits") is not None:
        raise ConfigError(f"teacher checkpoint {path} was trained quantized; need a full-precision teacher")
    return model


def _transfer_weights(source: torch.nn.Module, target: torch.nn.Module) -> int:
    """Copy source tensors into target by name; returns the skipped-key count.

    Keys present on only one side are allowed (skip wiring variants share
    a trunk but not the gate modules); a shared key whose shapes disagree
    means genuinely different architectures and raises.
    """
    src = source.state_dict()
    dst = target.state_dict()
    shared = [k for k in src if k in dst]
    for k in shared:
        if src[k].shape != dst[k].shape:
            raise ConfigError(
                f"cannot initialize student from teacher: {k} has shape "
                f"{tuple(src[k].shape)} vs {tuple(dst[k].shape)}; "
                "set init_from_teacher=false for heterogeneous architectures"
            )
    target.load_state_dict({k: src[k] for k in shared}, strict=False)
    return len(src) - len(shared)


@dataclass
class RunManifest:
    run_name: str
    regime: str
    config: dict
    environment: dict
    checkpoint: str
    teacher_checkpoint: str | None
    metrics: dict
    counters: dict
    trace_csv: str | None
    quant_export: str | None
    warnings: list[str] = field(default_factory=list)
    created: str = ""

    def save(self, path: str | Path) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
        return str(path)

    @staticmethod
    def load(path: str | Path) -> "RunManifest":
        with open(path) as f:
            return RunManifest(**json.load(f))

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


def environment_info() -> dict:
    return {
        "python": sys.version.split()[0],
        "torch": torch.__version__,
        "numpy": np.__version__,
        "platform": platform.platform(),
        "torch_threads": torch.get_num_threads(),
    }


# ---------------------------------------------------------------------------
# the training loop


class _TraceWriter:
    COLUMNS = (
        "step",
        "loss_total",
        "loss_rec",
        "loss_kd",
        "weight_rec",
        "weight_kd",
        "smoothing_ratio",
        "val_psnr",
        "val_ssim",
    )

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.file = open(path, "w")
        self.file.write(",".join(self.COLUMNS) + "\n")
        self.path = path

    def row(self, **values) -> None:
        cells = []
        for col in self.COLUMNS:
            v = values.get(col)
            cells.append("" if v is None else (str(v) if isinstance(v, int) else f"{v:.8g}"))
        self.file.write(",".join(cells) + "\n")

    def close(self) -> None:
        self.file.close()


def evaluate_model(model: torch.nn.Module, eval_batch: PatchBatch, chunk: int = 16) -> EvalReport:
    """Restore the held-out batch in chunks and score it."""
    was_training = model.training
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, eval_batch.degraded.shape[0], chunk):
            outs.append(model(eval_batch.degraded[i : i + chunk]).output.clamp(0.0, 1.0))
    if was_training:
        model.train()
    return evaluate_pairs(torch.cat(outs), eval_batch.clean)


def _make_balancer(config: TrainConfig):
    if config.balancer == "lmr":
        return MagnitudeBalancer(
            mu=config.lmr_mu,
            eps=config.lmr_eps,
            refresh_interval=config.lmr_refresh,
            clip_norm=config.lmr_clip,
        )
    if config.balancer == "fixed":
        return FixedCombiner(config.fixed_kd_weight)
    if config.balancer == "gor":
        return ReciprocalCombiner()
    return FixedCombiner(0.0)


def _init_magnitude_balancer(
    balancer: MagnitudeBalancer,
    model: torch.nn.Module,
    teacher: TeacherHandle,
    stream: Iterator[PatchBatch],
    config: TrainConfig,
    site: DistillSite,
) -> tuple[bool, int]:
    """Seed the balancer from per-loss gradient norms on warmup batches.

    Returns (fell_back, batches_used). When every distillation gradient
    is numerically zero (student output already equals the teacher's),
    balancing is meaningless: fall back to reconstruction-only weighting
    instead of dividing by zero magnitudes.
    """
    rec_norms, kd_norms = [], []
    params = [p for p in model.parameters() if p.requires_grad]
    for _ in range(config.lmr_init_batches):
        batch = next(stream)
        trace = model(batch.degraded)
        l_rec = reconstruction_loss(trace.output, batch.clean, config.recon_loss)
        l_kd = kd_loss(trace, teacher.trace(batch.degraded), site, kind=config.kd_loss_kind)
        rec_norms.append(gradient_norm(l_rec, params))
        kd_norms.append(gradient_norm(l_kd, params))
        model.zero_grad(set_to_none=True)
    if max(kd_norms) < DEGENERATE_KD_NORM:
        return True, len(kd_norms)
    balancer.initialize(rec_norms, kd_norms)
    return False, len(kd_norms)


def train(
    config: TrainConfig,
    output_dir: str | Path,
    teacher_checkpoint: str | Path | None = None,
    data: DataBundle | None = None,
) -> RunManifest:
    """Run one training regime end to end and write its artifacts.

    Artifacts under ``output_dir``: model.pt, trace.csv, manifest.json,
    and quant_params.json for quantized regimes. Returns the manifest.
    """
    warnings = validate_config(config)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)

    needs_teacher = config.regime == "ptq" or uses_distillation(config.regime)
    if needs_teacher and teacher_checkpoint is None:
        raise ConfigError(f"regime {config.regime!r} requires a teacher checkpoint")

    teacher_model = None
    if teacher_checkpoint is not None:
        teacher_model = load_teacher_model(teacher_checkpoint)

    model = build_model(config.model)
    if teacher_model is not None and (config.init_from_teacher or config.regime == "ptq"):
        skipped = _transfer_weights(teacher_model, model)
        if skipped:
            warnings.append(
                f"student init skipped {skipped} teacher tensors absent from the "
                "student (differing skip wiring); shared trunk weights transferred"
            )

    teacher = None
    if uses_distillation(config.regime):
        teacher = make_teacher(teacher_model, student=model)

    if uses_quantization(config):
        attach_quantizers(model, QuantConfig(bits=config.bits, calib_batches=config.calib_batches))

    if data is None:
        data = make_data(config)

    counters = {
        "steps": 0,
        "updates": 0,
        "calibration_batches": 0,
        "balancer_refreshes": 0,
        "evals": 0,
        "balancer_fallback": False,
        "aborted": False,
    }
    trace_path = out / "trace.csv"
    ckpt_path = out / "model.pt"
    writer = _TraceWriter(trace_path)
    started = time.time()

    try:
        if config.regime == "ptq":
            consumed = calibrate_model(
                model,
                (next(data.train_stream).degraded for _ in range(config.calib_batches)),
            )
            counters["calibration_batches"] = consumed
        else:
            _train_loop(model, teacher, data, config, counters, writer, ckpt_path)
    except TrainingAborted:
        counters["aborted"] = True
        writer.close()
        raise
    finally:
        if not writer.file.closed:
            writer.close()

    if uses_quantization(config):
        freeze_activation_quantizers(model)

    report = evaluate_model(model, data.eval_batch)
    counters["evals"] += 1
    counters["wall_seconds"] = round(time.time() - started, 3)

    save_checkpoint(ckpt_path, model, config, counters["steps"])

    quant_export = None
    if uses_quantization(config):
        quant_export = str(out / "quant_params.json")
        with open(quant_export, "w") as f:
            json.dump(export_quant_params(model), f, indent=2)

    manifest = RunManifest(
        run_name=config.run_name,
        regime=config.regime,
        config=config.to_dict(),
        environment=environment_info(),
        checkpoint=str(ckpt_path),
        teacher_checkpoint=str(teacher_checkpoint) if teacher_checkpoint else None,
        metrics={"final": report.to_dict(), "data": data.description},
        counters=counters,
        trace_csv=str(trace_path),
        quant_export=quant_export,
        warnings=warnings,
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    manifest.save(out / "manifest.json")
    return manifest


def _train_loop(
    model: torch.nn.Module,
    teacher: TeacherHandle | None,
    data: DataBundle,
    config: TrainConfig,
    counters: dict,
    writer: _TraceWriter,
    ckpt_path: Path,
) -> None:
    site = DistillSite.parse(config.distill_site) if teacher is not None else None
    balancer = _make_balancer(config) if teacher is not None else None
    model.train()

    if isinstance(balancer, MagnitudeBalancer):
        try:
            fell_back, used = _init_magnitude_balancer(
                balancer, model, teacher, data.train_stream, config, site
            )
        except BalancerError as e:
            raise TrainingAborted(str(e), 0, None) from None
        counters["calibration_batches"] += used
        if fell_back:
            balancer = FixedCombiner(0.0)
            counters["balancer_fallback"] = True

    params = [{"params": model.parameters(), "lr": config.lr}]
    balancer_is_learned = isinstance(balancer, (MagnitudeBalancer, ReciprocalCombiner))
    if balancer_is_learned:
        params.append({"params": balancer.parameters(), "lr": config.lr * config.lmr_lr_scale})
    optimizer = torch.optim.Adam(params, lr=config.lr)
    model_params = [p for p in model.parameters() if p.requires_grad]

    def abort(reason: str, step: int) -> TrainingAborted:
        ckpt = save_checkpoint(ckpt_path, model, config, step)
        return TrainingAborted(reason, step, ckpt)

    for step in range(1, config.steps + 1):
        batch = next(data.train_stream)
        try:
            trace = model(batch.degraded)
        except CalibrationError as e:
            raise abort(str(e), step) from None
        l_rec = reconstruction_loss(trace.output, batch.clean, config.recon_loss)

        info: dict = {}
        if teacher is not None:
            l_kd = kd_loss(trace, teacher.trace(batch.degraded), site, kind=config.kd_loss_kind)
            if isinstance(balancer, MagnitudeBalancer):
                balancer.begin_step()
                if balancer.needs_refresh():
                    try:
                        balancer.refresh(
                            gradient_norm(l_rec, model_params),
                            gradient_norm(l_kd, model_params),
                        )
                    except BalancerError as e:
                        raise abort(str(e), step) from None
                    counters["balancer_refreshes"] += 1
                total, info = balancer.combine(l_rec, l_kd)
            else:
                total, info = balancer.combine(l_rec, l_kd)
        else:
            l_kd = None
            total = l_rec

        if not torch.isfinite(total):
            raise abort(f"non-finite loss {float(total)}", step)

        optimizer.zero_grad(set_to_none=True)
        total.backward()
        if isinstance(balancer, MagnitudeBalancer):
            balancer.clip_gradients()
        optimizer.step()
        if isinstance(balancer, MagnitudeBalancer):
            balancer.apply_floor()

        counters["steps"] = step
        counters["updates"] += 1

        val_psnr = val_ssim = None
        if config.eval_every and step % config.eval_every == 0 and step < config.steps:
            report = evaluate_model(model, data.eval_batch)
            counters["evals"] += 1
            val_psnr = None if report.psnr_infinite else report.psnr_db
            val_ssim = report.ssim

        if step % config.log_every == 0 or step == config.steps or val_psnr is not None:
            writer.row(
                step=step,
                loss_total=float(total.detach()),
                loss_rec=float(l_rec.detach()),
                loss_kd=None if l_kd is None else float(l_kd.detach()),
                weight_rec=info.get("weight_rec"),
                weight_kd=info.get("weight_kd"),
                smoothing_ratio=info.get("smoothing_ratio"),
                val_psnr=val_psnr,
                val_ssim=val_ssim,
            )


# ---------------------------------------------------------------------------
# evaluation from a manifest, ablations


def evaluate_from_manifest(manifest: RunManifest) -> EvalReport:
    """Rebuild the checkpointed model and rescore it on the manifest's eval set."""
    config = manifest.train_config()
    model, _ = load_checkpoint(manifest.checkpoint)
    data = make_data(config)
    return evaluate_model(model, data.eval_batch)


ABLATION_AXES = {
    "site": ("bottleneck", "decoder:3", "decoder:2", "decoder:1", "output"),
    "balancer": ("lmr", "fixed", "gor"),
    "skip": ("plain", "degmap", "gated"),
    "bits": (8, 4, 2),
}


def _with_axis_value(config: TrainConfig, axis: str, value) -> TrainConfig:
    d = config.to_dict()
    if axis == "site":
        d["distill_site"] = value
    elif axis == "balancer":
        d["balancer"] = value
        if value == "lmr":
            d["regime"] = "qdr"
        elif d.get("regime") == "qdr":
            d["regime"] = "qat_kd_fixed"
    elif axis == "skip":
        d["model"] = dict(d["model"], skip_mode=value)
    elif axis == "bits":
        d["bits"] = int(value)
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; valid: {', '.join(ABLATION_AXES)}")
    d["run_name"] = f"{config.run_name}-{axis}-{str(value).replace(':', '')}"
    return TrainConfig.from_dict(d)


def ablate(
    base_config: TrainConfig,
    axis: str,
    output_dir: str | Path,
    teacher_checkpoint: str | Path | None = None,
    values: list | None = None,
) -> list[dict]:
    """Sweep one axis, train each variant, and tabulate final metrics.

    Writes ablation.csv plus a bar chart under ``output_dir``; each
    variant trains in its own subdirectory with a full manifest.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; valid: {', '.join(ABLATION_AXES)}")
    values = list(values) if values is not None else list(ABLATION_AXES[axis])
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for value in values:
        cfg = _with_axis_value(base_config, axis, value)
        run_dir = out / cfg.run_name
        manifest = train(cfg, run_dir, teacher_checkpoint=teacher_checkpoint)
        final = manifest.metrics["final"]
        rows.append(
            {
                "axis": axis,
                "value": str(value),
                "psnr_db": final["psnr_db"],
                "ssim": final["ssim"],
                "manifest": str(run_dir / "manifest.json"),
            }
        )

    with open(out / "ablation.csv", "w") as f:
        f.write("axis,value,psnr_db,ssim,manifest\n")
        for r in rows:
            psnr = "" if r["psnr_db"] is None else f"{r['psnr_db']:.4f}"
            f.write(f"{axis},{r['value']},{psnr},{r['ssim']:.5f},{r['manifest']}\n")

    _plot_ablation(rows, axis, out / "ablation.png")
    return rows


def _plot_ablation(rows: list[dict], axis: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [r["value"] for r in rows]
    psnrs = [r["psnr_db"] if r["psnr_db"] is not None else 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(1.6 * len(rows) + 2, 3.2))
    ax.bar(labels, psnrs, color="#4878a8")
    ax.set_ylabel("PSNR (dB)")
    ax.set_xlabel(axis)
    lo = min(psnrs)
    hi = max(psnrs)
    pad = max(0.2, 0.1 * (hi - lo))
    ax.set_ylim(max(0.0, lo - pad), hi + pad)
    for i, v in enumerate(psnrs):
        ax.text(i, v, f"{v:.2f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
