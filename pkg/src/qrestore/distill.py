"""Feature distillation from a frozen full-precision twin.

The teacher is a frozen copy of the network (usually the same
architecture and the same pretrained weights the student starts from);
the student matches the teacher's intermediate features at a chosen site
while it trains under simulated quantization. Also provides the
alignment diagnostics: per-site histogram divergence, correlation, and a
decoder deviation profile.
"""

from __future__ import annotations

import copy
import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import ForwardTrace, RestorationNet

HIST_BINS = 64
HIST_SMOOTHING = 1e-8

SITE_KINDS = ("bottleneck", "decoder", "output")


@dataclass(frozen=True)
class DistillSite:
    """Where the feature match happens.

    kind "decoder" needs a level in {1, 2, 3} (1 = shallowest, full
    resolution). "bottleneck" and "output" take no level.
    """

    kind: str = "bottleneck"
    level: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in SITE_KINDS:
            raise ValueError(f"site kind must be one of {SITE_KINDS}, got {self.kind!r}")
        if self.kind == "decoder":
            if self.level not in (1, 2, 3):
                raise ValueError("decoder site needs level 1, 2 or 3")
        elif self.level is not None:
            raise ValueError(f"{self.kind} site takes no level")

    @property
    def name(self) -> str:
        return f"decoder{self.level}" if self.kind == "decoder" else self.kind

    @staticmethod
    def parse(text: str) -> "DistillSite":
        """Parse "bottleneck", "output", or "decoder:<level>"."""
        if ":" in text:
            kind, _, level = text.partition(":")
            return DistillSite(kind=kind.strip(), level=int(level))
        return DistillSite(kind=text.strip())


def site_feature(trace: ForwardTrace, site: DistillSite) -> torch.Tensor:
    if site.kind == "bottleneck":
        return trace.bottleneck
    if site.kind == "output":
        return trace.output
    # decoder_features are ordered deep-to-shallow: [level3, level2, level1]
    return trace.decoder_features[3 - site.level]


def architecture_fingerprint(model: nn.Module) -> str:
    """Hash of the parameter/buffer shape layout; equal nets share it."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(f"{name}:{tuple(p.shape)};".encode())
    for name, b in sorted(model.named_buffers()):
        h.update(f"{name}:{tuple(b.shape)};".encode())
    return h.hexdigest()[:16]


class TeacherHandle:
    """Frozen evaluation-mode wrapper around the teacher network."""

    def __init__(self, model: nn.Module):
        self.model = model
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.fingerprint = architecture_fingerprint(model)

    @torch.no_grad()
    def trace(self, x: torch.Tensor) -> ForwardTrace:
        return self.model(x)


def make_teacher(
    model: nn.Module,
    student: nn.Module | None = None,
    allow_heterogeneous: bool = False,
) -> TeacherHandle:
    """Deep-copy ``model`` into a frozen teacher.

    When ``student`` is given the architectures must match unless
    heterogeneous distillation is explicitly requested; a mismatch
    raises with the differing widths spelled out.
    """
    teacher = TeacherHandle(copy.deepcopy(model))
    if student is not None and not allow_heterogeneous:
        if architecture_fingerprint(student) != teacher.fingerprint:
            detail = _describe_mismatch(teacher.model, student)
            raise ValueError(
                "teacher/student architecture mismatch; pass allow_heterogeneous=True "
                f"and provide a feature adapter to distill across widths ({detail})"
            )
    return teacher


def _describe_mismatch(teacher: nn.Module, student: nn.Module) -> str:
    if isinstance(teacher, RestorationNet) and isinstance(student, RestorationNet):
        return f"teacher widths {teacher.config.widths} vs student widths {student.config.widths}"
    t_shapes = {n: tuple(p.shape) for n, p in teacher.named_parameters()}
    s_shapes = {n: tuple(p.shape) for n, p in student.named_parameters()}
    for name in sorted(set(t_shapes) | set(s_shapes)):
        if t_shapes.get(name) != s_shapes.get(name):
            return f"first differing parameter {name!r}: {t_shapes.get(name)} vs {s_shapes.get(name)}"
    return "buffer layout differs"


class FeatureAdapter(nn.Module):
    """1x1 projection from teacher feature width to student feature width.

    Applied to the (already detached) teacher feature; its parameters
    train together with the student.
    """

    def __init__(self, teacher_channels: int, student_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(teacher_channels, student_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)


def kd_loss(
    student_trace: ForwardTrace,
    teacher_trace: ForwardTrace,
    site: DistillSite,
    adapter: FeatureAdapter | None = None,
    kind: str = "mse",
) -> torch.Tensor:
    """Feature-matching loss between student and teacher at one site."""
    f_s = site_feature(student_trace, site)
    f_t = site_feature(teacher_trace, site).detach()
    if adapter is not None:
        f_t = adapter(f_t)
    if f_s.shape != f_t.shape:
        raise ValueError(
            f"feature shape mismatch at {site.name}: student {tuple(f_s.shape)} vs "
            f"teacher {tuple(f_t.shape)}; a 1x1 adapter is required for width changes"
        )
    if kind == "mse":
        return F.mse_loss(f_s, f_t)
    if kind == "l1":
        return F.l1_loss(f_s, f_t)
    raise ValueError(f"unknown distillation loss kind {kind!r}")


def _histogram_pair(a: np.ndarray, b: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo = float(min(a.min(), b.min()))
    hi = float(max(a.max(), b.max()))
    if hi <= lo:
        hi = lo + 1e-6
    pa, edges = np.histogram(a, bins=bins, range=(lo, hi))
    pb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    return pa.astype(np.float64), pb.astype(np.float64), edges


def symmetric_kl(p_counts: np.ndarray, q_counts: np.ndarray, eps: float = HIST_SMOOTHING) -> float:
    """Symmetrized KL between two count histograms, with additive smoothing."""
    p = p_counts + eps
    q = q_counts + eps
    p = p / p.sum()
    q = q / q.sum()
    return float(0.5 * np.sum(p * np.log(p / q)) + 0.5 * np.sum(q * np.log(q / p)))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(np.corrcoef(a, b)[0, 1])


def default_alignment_sites(n_decoder_levels: int = 3) -> list[DistillSite]:
    sites = [DistillSite("bottleneck")]
    sites += [DistillSite("decoder", level) for level in range(n_decoder_levels, 0, -1)]
    return sites


@torch.no_grad()
def alignment_report(
    student: nn.Module,
    teacher: TeacherHandle,
    batch: torch.Tensor,
    sites: list[DistillSite] | None = None,
    bins: int = HIST_BINS,
    out_dir: str | Path | None = None,
) -> dict:
    """Per-site feature alignment between student and teacher.

    For each site: value-histogram divergence (symmetrized KL over
    ``bins`` bins on the union range) and Pearson correlation of the
    flattened features. Both nets are evaluated in eval mode on the same
    batch. When ``out_dir`` is given, writes alignment.csv and one
    histogram-overlay figure alignment.png.
    """
    sites = sites if sites is not None else default_alignment_sites()
    was_training = student.training
    student.eval()
    s_trace = student(batch)
    t_trace = teacher.trace(batch)
    if was_training:
        student.train()

    report: dict = {"n_samples": int(batch.shape[0]), "sites": {}}
    for site in sites:
        f_s = site_feature(s_trace, site).detach().cpu().numpy().ravel()
        f_t = site_feature(t_trace, site).detach().cpu().numpy().ravel()
        pa, pb, edges = _histogram_pair(f_s, f_t, bins)
        report["sites"][site.name] = {
            "divergence": symmetric_kl(pa, pb),
            "correlation": pearson(f_s, f_t),
            "histogram": {
                "edges": edges.tolist(),
                "student": pa.tolist(),
                "teacher": pb.tolist(),
            },
        }

    if out_dir is not None:
        _write_alignment_files(report, Path(out_dir))
    return report


def _write_alignment_files(report: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "alignment.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["site", "divergence", "correlation"])
        for name, row in report["sites"].items():
            writer.writerow([name, f"{row['divergence']:.8g}", f"{row['correlation']:.8g}"])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(report["sites"])
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3.2), squeeze=False)
    for ax, name in zip(axes[0], names):
        row = report["sites"][name]
        edges = np.asarray(row["histogram"]["edges"])
        centers = 0.5 * (edges[:-1] + edges[1:])
        ax.plot(centers, row["histogram"]["teacher"], label="teacher", lw=1.2)
        ax.plot(centers, row["histogram"]["student"], label="student", lw=1.2, ls="--")
        ax.set_title(f"{name}\nKL={row['divergence']:.3g} r={row['correlation']:.3f}", fontsize=9)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "alignment.png", dpi=110)
    plt.close(fig)


@torch.no_grad()
def decoder_deviation_profile(
    student: nn.Module, teacher: TeacherHandle, batch: torch.Tensor
) -> list[float]:
    """Mean absolute feature deviation per decoder stage, deep to shallow.

    deviation = mean |f_student - f_teacher| per stage, in computation
    order; growth along the list shows error accumulating through the
    decoder. Absolute rather than teacher-normalized, so stages with
    growing feature magnitude cannot mask accumulated error.
    """
    was_training = student.training
    student.eval()
    s_trace = student(batch)
    t_trace = teacher.trace(batch)
    if was_training:
        student.train()
    return [
        float((f_s - f_t).abs().mean())
        for f_s, f_t in zip(s_trace.decoder_features, t_trace.decoder_features)
    ]
