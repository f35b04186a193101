"""Quantization-aware distillation for image restoration at desk scale."""

from .degrade import DegradationSpec, apply_degradation, make_spec
from .distill import DistillSite, FeatureAdapter, alignment_report, kd_loss, make_teacher
from .metrics import EvalReport, psnr, recovery_percent, ssim
from .model import ModelConfig, RestorationNet, build_model
from .quantsim import QuantConfig, attach_quantizers, calibrate_max, fake_quantize
from .reweight import FixedCombiner, MagnitudeBalancer, ReciprocalCombiner
from .trainer import RunManifest, TrainConfig, TrainingAborted, ablate, train

__version__ = "0.1.0"

__all__ = [
    "DegradationSpec",
    "DistillSite",
    "EvalReport",
    "FeatureAdapter",
    "FixedCombiner",
    "MagnitudeBalancer",
    "ModelConfig",
    "QuantConfig",
    "ReciprocalCombiner",
    "RestorationNet",
    "RunManifest",
    "TrainConfig",
    "TrainingAborted",
    "ablate",
    "alignment_report",
    "apply_degradation",
    "attach_quantizers",
    "build_model",
    "calibrate_max",
    "fake_quantize",
    "kd_loss",
    "make_spec",
    "make_teacher",
    "psnr",
    "recovery_percent",
    "ssim",
    "train",
]
