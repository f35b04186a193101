"""Command-line interface.

Subcommands:
  train-teacher     full-precision reference training (regime fp32)
  train-student     ptq / qat / qat_kd_fixed / qdr runs against a teacher
  eval              re-score a finished run from its manifest
  ablate            sweep one axis (site, balancer, skip, bits)
  report-alignment  student/teacher feature alignment diagnostics
  export            dump per-layer quantization parameters as JSON

Config files are flat ``key=value`` lines ('#' comments). Keys map to
run settings; ``model.<field>`` reaches the architecture config and
``task.<param>`` sets degradation parameters. Unknown keys are errors.

Exit codes: 0 success, 2 configuration error, 3 training aborted on
non-finite state, 1 unexpected failure. Errors print one JSON record
on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import torch

from .distill import (
    DistillSite,
    decoder_deviation_profile,
    alignment_report,
    make_teacher,
)
from .metrics import recovery_percent
from .model import ModelConfig
from .quantsim import export_quant_params
from .trainer import (
    ABLATION_AXES,
    ConfigError,
    RunManifest,
    TrainConfig,
    TrainingAborted,
    ablate,
    evaluate_model,
    load_checkpoint,
    load_teacher_model,
    make_data,
    train,
    uses_distillation,
)

_BOOL_VALUES = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _cast_bool(text: str) -> bool:
    try:
        return _BOOL_VALUES[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {text!r}") from None


def _cast_optional_bits(text: str):
    if text.strip().lower() in ("none", "null", ""):
        return None
    return int(text)

def _cast_channels(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace("(", "").replace(")", "").split(",") if t.strip())


# key -> caster for run-level settings
_CONFIG_CASTERS = {
    "regime": str,
    "steps": int,
    "lr": float,
    "seed": int,
    "batch_size": int,
    "patch": int,
    "eval_every": int,
    "log_every": int,
    "recon_loss": str,
    "data_source": str,
    "data_seed": int,
    "task": str,
    "n_images": int,
    "image_size": int,
    "val_patches": int,
    "bits": _cast_optional_bits,
    "calib_batches": int,
    "distill_site": str,
    "kd_loss_kind": str,
    "init_from_teacher": _cast_bool,
    "balancer": str,
    "fixed_kd_weight": float,
    "lmr_mu": float,
    "lmr_eps": float,
    "lmr_refresh": int,
    "lmr_clip": float,
    "lmr_init_batches": int,
    "lmr_lr_scale": float,
    "run_name": str,
}

_MODEL_CASTERS = {
    "in_channels": int,
    "stem_channels": int,
    "encoder_channels": _cast_channels,
    "bottleneck_channels": int,
    "se_reduction": int,
    "gate_reduction": int,
    "bn_momentum": float,
    "scale_factor": float,
    "skip_mode": str,
    "gate_variant": str,
}


def parse_config_lines(lines, origin: str = "<config>") -> dict:
    """Flat key=value text into nested {run, model, task} setting dicts."""
    run: dict = {}
    model: dict = {}
    task: dict = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        try:
            if key.startswith("model."):
                field = key[len("model.") :]
                if field not in _MODEL_CASTERS:
                    raise ConfigError(f"unknown config key {key!r}")
                model[field] = _MODEL_CASTERS[field](value)
            elif key.startswith("task."):
                task[key[len("task.") :]] = float(value)
            elif key in _CONFIG_CASTERS:
                run[key] = _CONFIG_CASTERS[key](value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key!r}: {e}") from None
    return {"run": run, "model": model, "task": task}


def load_config(path: str | Path, overrides: list[str] | None = None) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parsed = parse_config_lines(path.read_text().splitlines(), origin=str(path))
    if overrides:
        extra = parse_config_lines(overrides, origin="--set")
        parsed["run"].update(extra["run"])
        parsed["model"].update(extra["model"])
        parsed["task"].update(extra["task"])
    try:
        model_cfg = ModelConfig(**parsed["model"])
        config = TrainConfig(model=model_cfg, task_params=parsed["task"], **parsed["run"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return config


def _emit_error(kind: str, detail: str, exit_code: int, **extra) -> None:
    record = {"error": kind, "detail": detail, "exit_code": exit_code, **extra}
    print(json.dumps(record), file=sys.stderr)


def _print_metrics(label: str, metrics: dict) -> None:
    psnr = metrics.get("psnr_db")
    psnr_text = "inf" if psnr is None and metrics.get("psnr_infinite") else (
        "n/a" if psnr is None else f"{psnr:.3f}"
    )
    print(f"{label}: psnr={psnr_text} dB ssim={metrics.get('ssim', float('nan')):.4f} "
          f"n={metrics.get('n_samples')}")


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_train_teacher(args) -> int:
    config = load_config(args.config, args.set)
    if config.regime != "fp32":
        raise ConfigError(f"train-teacher runs regime fp32, but config says {config.regime!r}")
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    manifest = train(config, args.output)
    _print_metrics("teacher", manifest.metrics["final"])
    print(f"manifest: {Path(args.output) / 'manifest.json'}")
    return 0


def _cmd_train_student(args) -> int:
    config = load_config(args.config, args.set)
    updates = {}
    if args.regime:
        updates["regime"] = args.regime
    if args.seed is not None:
        updates["seed"] = args.seed
    if updates:
        config = dataclasses.replace(config, **updates)
    if config.regime == "fp32":
        raise ConfigError("train-student expects a quantized regime; use train-teacher for fp32")
    if config.regime == "qat_kd_fixed" and config.balancer == "lmr":
        config = dataclasses.replace(config, balancer="fixed")
    needs_teacher = config.regime == "ptq" or uses_distillation(config.regime)
    if needs_teacher and not args.teacher:
        raise ConfigError(f"regime {config.regime!r} requires --teacher <checkpoint>")
    manifest = train(config, args.output, teacher_checkpoint=args.teacher)
    _print_metrics(config.regime, manifest.metrics["final"])
    print(f"manifest: {Path(args.output) / 'manifest.json'}")
    return 0


def _cmd_eval(args) -> int:
    manifest = RunManifest.load(args.manifest)
    model, _ = load_checkpoint(manifest.checkpoint)
    data = make_data(manifest.train_config())
    report = evaluate_model(model, data.eval_batch)
    result = report.to_dict()
    if args.reference:
        ref = RunManifest.load(args.reference)
        ref_psnr = ref.metrics["final"]["psnr_db"]
        if ref_psnr is None:
            raise ConfigError("reference run has infinite PSNR; recovery is undefined")
        result["recovery_pct"] = recovery_percent(report.psnr_db, ref_psnr)
    print(json.dumps(result, indent=2))
    if args.save:
        Path(args.save).parent.mkdir(parents=True, exist_ok=True)
        with open(args.save, "w") as f:
            json.dump(result, f, indent=2)
    return 0


def _cmd_ablate(args) -> int:
    config = load_config(args.config, args.set)
    values = None
    if args.values:
        raw = [v.strip() for v in args.values.split(",") if v.strip()]
        values = [int(v) for v in raw] if args.axis == "bits" else raw
    rows = ablate(config, args.axis, args.output, teacher_checkpoint=args.teacher, values=values)
    for r in rows:
        psnr = "inf" if r["psnr_db"] is None else f"{r['psnr_db']:.3f}"
        print(f"{args.axis}={r['value']}: psnr={psnr} dB ssim={r['ssim']:.4f}")
    print(f"table: {Path(args.output) / 'ablation.csv'}")
    return 0


def _cmd_report_alignment(args) -> int:
    manifest = RunManifest.load(args.manifest)
    student, _ = load_checkpoint(manifest.checkpoint)
    teacher = make_teacher(load_teacher_model(args.teacher))
    data = make_data(manifest.train_config())
    batch = data.eval_batch.degraded[: args.patches]
    report = alignment_report(student, teacher, batch, out_dir=args.output)
    report["decoder_deviation"] = decoder_deviation_profile(student, teacher, batch)
    out = Path(args.output) / "alignment.json"
    with open(out, "w") as f:
        json.dump(report, f, indent=2)
    for name, row in report["sites"].items():
        print(f"{name}: divergence={row['divergence']:.6g} correlation={row['correlation']:.4f}")
    print(f"report: {out}")
    return 0


def _cmd_export(args) -> int:
    manifest = RunManifest.load(args.manifest)
    model, payload = load_checkpoint(manifest.checkpoint)
    if payload.get("bits") is None:
        raise ConfigError("run was not quantized; nothing to export")
    records = export_quant_params(model)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        json.dump(records, f, indent=2)
    print(f"exported {len(records)} quantized layers to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qrestore",
        description="Quantization-aware distillation for image restoration models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="flat key=value config file")
        p.add_argument("--output", required=True, help="run output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config entry (repeatable)")

    p = sub.add_parser("train-teacher", help="train the full-precision reference model")
    add_common(p)
    p.set_defaults(handler=_cmd_train_teacher)

    p = sub.add_parser("train-student", help="train or calibrate a quantized model")
    add_common(p)
    p.add_argument("--teacher", help="teacher checkpoint (.pt)")
    p.add_argument("--regime", choices=["ptq", "qat", "qat_kd_fixed", "qdr"],
                   help="override the config regime")
    p.set_defaults(handler=_cmd_train_student)

    p = sub.add_parser("eval", help="re-evaluate a finished run")
    p.add_argument("--manifest", required=True)
    p.add_argument("--reference", help="reference manifest for recovery percentage")
    p.add_argument("--save", help="also write the metrics JSON here")
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("ablate", help="sweep one configuration axis")
    p.add_argument("--config", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--teacher", help="teacher checkpoint for distillation regimes")
    p.add_argument("--values", help="comma-separated subset of axis values")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(handler=_cmd_ablate)

    p = sub.add_parser("report-alignment", help="student/teacher feature alignment")
    p.add_argument("--manifest", required=True, help="student run manifest")
    p.add_argument("--teacher", required=True, help="full-precision teacher checkpoint")
    p.add_argument("--output", required=True)
    p.add_argument("--patches", type=int, default=16, help="probe patches to use")
    p.set_defaults(handler=_cmd_report_alignment)

    p = sub.add_parser("export", help="dump per-layer quantization parameters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--output", required=True, help="destination JSON file")
    p.set_defaults(handler=_cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as e:
        _emit_error("ConfigError", str(e), 2)
        return 2
    except TrainingAborted as e:
        _emit_error("TrainingAborted", str(e), 3, step=e.step, checkpoint=e.checkpoint)
        return 3
    except (ValueError, OSError, RuntimeError) as e:
        _emit_error(type(e).__name__, str(e), 1)
        return 1


if __name__ == "__main__":
    sys.exit(main())
