"""Synthetic degradations and deterministic patch streams.

Every degradation maps a clean (3, H, W) float image in [0, 1] to a
degraded image of the same shape, clamped back to [0, 1]. All randomness
is drawn from a numpy Generator seeded by the DegradationSpec, so a
given (clean image, spec) pair always produces the same output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from scipy import ndimage

DEGRADATION_KINDS = ("gaussian_noise", "low_light", "rain_streaks", "haze", "identity")

_DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "gaussian_noise": {"sigma": 0.1},
    "low_light": {"gamma": 2.2, "read_sigma": 0.02},
    "rain_streaks": {"density": 0.002, "length": 9, "angle_deg": 70.0, "intensity": 0.8},
    "haze": {"beta": 1.0, "airlight": 0.9},
    "identity": {},
}


@dataclass(frozen=True)
class DegradationSpec:
    """One degradation instance: kind, parameters, and its noise seed."""

    kind: str
    params: tuple[tuple[str, float], ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in DEGRADATION_KINDS:
            raise ValueError(
                f"unknown degradation kind {self.kind!r}; valid kinds: {', '.join(DEGRADATION_KINDS)}"
            )
        known = _DEFAULT_PARAMS[self.kind]
        for key, _ in self.params:
            if key not in known:
                raise ValueError(
                    f"unknown parameter {key!r} for {self.kind}; valid: {sorted(known) or 'none'}"
                )

    def param_dict(self) -> dict[str, float]:
        merged = dict(_DEFAULT_PARAMS[self.kind])
        merged.update(dict(self.params))
        return merged

    def with_seed(self, seed: int) -> "DegradationSpec":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.param_dict(), "seed": self.seed}


def make_spec(kind: str, seed: int = 0, **params: float) -> DegradationSpec:
    return DegradationSpec(kind=kind, params=tuple(sorted(params.items())), seed=seed)


def _check_clean(clean: torch.Tensor) -> None:
    if clean.ndim != 3 or clean.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(clean.shape)}")
    if float(clean.min()) < 0.0 or float(clean.max()) > 1.0:
        raise ValueError("clean image must lie in [0, 1]")


def _rain_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Oriented unit-sum line kernel drawn into a square grid."""
    length = max(3, int(length) | 1)
    k = np.zeros((length, length), dtype=np.float64)
    c = (length - 1) / 2.0
    theta = math.radians(angle_deg)
    dx, dy = math.cos(theta), math.sin(theta)
    steps = length * 4
    for i in range(steps + 1):
        t = (i / steps - 0.5) * (length - 1)
        y = int(round(c + t * dy))
        x = int(round(c + t * dx))
        if 0 <= y < length and 0 <= x < length:
            k[y, x] = 1.0
    return k / k.sum()


def apply_degradation(clean: torch.Tensor, spec: DegradationSpec) -> torch.Tensor:
    """Apply one degradation; deterministic for a fixed (clean, spec)."""
    _check_clean(clean)
    img = clean.detach().cpu().numpy().astype(np.float64)
    p = spec.param_dict()
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, spec.seed]))

    if spec.kind == "identity":
        out = img
    elif spec.kind == "gaussian_noise":
        out = img + rng.normal(0.0, p["sigma"], size=img.shape)
    elif spec.kind == "low_light":
        # gamma curve darkens, then sensor read noise on the darkened signal
        out = np.power(img, p["gamma"]) + rng.normal(0.0, p["read_sigma"], size=img.shape)
    elif spec.kind == "rain_streaks":
        _, h, w = img.shape
        field = np.zeros((h, w), dtype=np.float64)
        n_drops = max(1, int(round(p["density"] * h * w)))
        ys = rng.integers(0, h, size=n_drops)
        xs = rng.integers(0, w, size=n_drops)
        amps = rng.uniform(0.5, 1.0, size=n_drops)
        np.maximum.at(field, (ys, xs), amps)
        kernel = _rain_kernel(int(p["length"]), p["angle_deg"])
        streaks = ndimage.convolve(field, kernel, mode="constant", cval=0.0)
        peak = streaks.max()
        if peak > 0:
            streaks = streaks / peak
        out = img + p["intensity"] * streaks[None, :, :]
    elif spec.kind == "haze":
        _, h, w = img.shape
        # top of frame is far (depth 1), bottom is near (depth 0)
        depth = np.linspace(1.0, 0.0, h)[None, :, None]
        transmission = np.exp(-p["beta"] * depth)
        out = img * transmission + p["airlight"] * (1.0 - transmission)
    else:  # pragma: no cover - guarded by DegradationSpec
        raise ValueError(f"unknown degradation kind {spec.kind!r}")

    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return torch.from_numpy(out)


class ProceduralImageSource:
    """Deterministic synthetic clean-image corpus.

    Images are smooth low-frequency color fields with a few soft shapes
    layered on top: enough structure for restoration losses to bite, no
    binary assets to ship. The full corpus is generated eagerly from the
    seed, so two sources with the same arguments hold identical pixels.
    """

    def __init__(self, n_images: int = 24, size: int = 160, seed: int = 0):
        if n_images < 1:
            raise ValueError("need at least one image")
        if size < 16:
            raise ValueError("image size must be >= 16")
        self.size = size
        self.seed = seed
        self.images = [self._generate(i) for i in range(n_images)]
        self.names = [f"procedural-{seed}-{i:03d}" for i in range(n_images)]

    def _generate(self, index: int) -> torch.Tensor:
        rng = np.random.default_rng(np.random.SeedSequence([0xC0FFEE, self.seed, index]))
        s = self.size
        img = np.zeros((3, s, s), dtype=np.float64)
        for c in range(3):
            base = rng.normal(0.0, 1.0, size=(s, s))
            img[c] = ndimage.gaussian_filter(base, sigma=rng.uniform(8.0, 16.0))
        # per-channel normalize into a mid-range band
        lo = img.min(axis=(1, 2), keepdims=True)
        hi = img.max(axis=(1, 2), keepdims=True)
        img = 0.15 + 0.7 * (img - lo) / np.maximum(hi - lo, 1e-9)

        yy, xx = np.mgrid[0:s, 0:s]
        for _ in range(int(rng.integers(3, 7))):
            cy, cx = rng.uniform(0, s, size=2)
            radius = rng.uniform(s * 0.08, s * 0.3)
            softness = rng.uniform(1.0, 4.0)
            dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            mask = 1.0 / (1.0 + np.exp((dist - radius) / softness))
            color = rng.uniform(0.05, 0.95, size=3)
            weight = rng.uniform(0.4, 0.9)
            img = img * (1 - weight * mask[None]) + color[:, None, None] * (weight * mask[None])
        return torch.from_numpy(np.clip(img, 0.0, 1.0).astype(np.float32))

    def __len__(self) -> int:
        return len(self.images)

    def get(self, index: int) -> tuple[torch.Tensor, str]:
        return self.images[index], self.names[index]


class PairedDirectorySource:
    """Clean/degraded image pairs from ``root/clean`` and ``root/degraded``.

    Files are matched by stem; every clean image must have a degraded
    counterpart. Intended for real paired data; the patch stream crops
    both sides at the same location and skips synthetic degradation.
    """

    def __init__(self, root: str | Path):
        root = Path(root)
        clean_dir, degraded_dir = root / "clean", root / "degraded"
        if not clean_dir.is_dir() or not degraded_dir.is_dir():
            raise FileNotFoundError(f"expected {clean_dir} and {degraded_dir} directories")
        from PIL import Image

        self.images: list[torch.Tensor] = []
        self.degraded: list[torch.Tensor] = []
        self.names: list[str] = []
        stems = sorted(p.stem for p in clean_dir.iterdir() if p.is_file())
        if not stems:
            raise FileNotFoundError(f"no images under {clean_dir}")
        for stem in stems:
            c_path = next(iter(sorted(clean_dir.glob(stem + ".*"))), None)
            d_path = next(iter(sorted(degraded_dir.glob(stem + ".*"))), None)
            if d_path is None:
                raise FileNotFoundError(f"no degraded pair for {stem!r} under {degraded_dir}")
            for path, store in ((c_path, self.images), (d_path, self.degraded)):
                arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
                store.append(torch.from_numpy(arr).permute(2, 0, 1).contiguous())
            if self.images[-1].shape != self.degraded[-1].shape:
                raise ValueError(f"size mismatch between clean/degraded pair {stem!r}")
            self.names.append(stem)

    def __len__(self) -> int:
        return len(self.images)

    def get(self, index: int) -> tuple[torch.Tensor, str]:
        return self.images[index], self.names[index]


@dataclass
class PatchBatch:
    """One training batch: degraded inputs, clean targets, and per-sample specs."""

    degraded: torch.Tensor
    clean: torch.Tensor
    specs: list[DegradationSpec | None] = field(default_factory=list)


def sample_patch_pair(
    source,
    specs: Sequence[DegradationSpec],
    patch: int,
    stream_seed: int,
    index: int,
) -> tuple[torch.Tensor, torch.Tensor, DegradationSpec | None]:
    """Deterministic sample ``index`` of the stream: (degraded, clean, spec).

    Image choice, crop position, spec choice, and the degradation noise
    seed all derive from (stream_seed, index), so sample i is identical
    across stream instances and interpreter runs.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0x7A7C4, stream_seed, index]))
    img_idx = int(rng.integers(0, len(source)))
    image, name = source.get(img_idx)
    _, h, w = image.shape
    if h < patch or w < patch:
        raise ValueError(f"image {name!r} is {h}x{w}, smaller than patch size {patch}")
    y = int(rng.integers(0, h - patch + 1))
    x = int(rng.integers(0, w - patch + 1))
    clean = image[:, y : y + patch, x : x + patch]

    paired = hasattr(source, "degraded")
    if paired:
        degraded = source.degraded[img_idx][:, y : y + patch, x : x + patch]
        return degraded.clone(), clean.clone(), None

    if not specs:
        raise ValueError("a synthetic source needs at least one DegradationSpec")
    spec = specs[int(rng.integers(0, len(specs)))]
    spec = spec.with_seed(int(rng.integers(0, 2**31 - 1)))
    degraded = apply_degradation(clean, spec)
    return degraded, clean.clone(), spec


def make_patch_stream(
    source,
    specs: Sequence[DegradationSpec],
    patch: int,
    batch_size: int,
    seed: int,
    start_index: int = 0,
) -> Iterator[PatchBatch]:
    """Infinite iterator of PatchBatch, deterministic in (seed, start_index)."""
    if patch < 1 or batch_size < 1:
        raise ValueError("patch and batch_size must be positive")
    index = start_index
    while True:
        deg, cln, sp = [], [], []
        for _ in range(batch_size):
            d, c, s = sample_patch_pair(source, specs, patch, seed, index)
            deg.append(d)
            cln.append(c)
            sp.append(s)
            index += 1
        yield PatchBatch(degraded=torch.stack(deg), clean=torch.stack(cln), specs=sp)


def make_eval_set(
    source,
    specs: Sequence[DegradationSpec],
    patch: int,
    n_patches: int,
    seed: int,
) -> PatchBatch:
    """Fixed held-out set as one stacked batch, disjoint seed stream from training."""
    deg, cln, sp = [], [], []
    for i in range(n_patches):
        d, c, s = sample_patch_pair(source, specs, patch, seed, i)
        deg.append(d)
        cln.append(c)
        sp.append(s)
    return PatchBatch(degraded=torch.stack(deg), clean=torch.stack(cln), specs=sp)
