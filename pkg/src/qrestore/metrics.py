"""Image quality metrics: PSNR, Gaussian-window SSIM, and recovery ratio.

SSIM is implemented on torch tensors and is differentiable, so the same
code serves both evaluation and the structural term of the training loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(pred: torch.Tensor, target: torch.Tensor, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the tensors are identical."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    mse = torch.mean((pred.double() - target.double()) ** 2).item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(window: int, sigma: float, channels: int, device, dtype) -> torch.Tensor:
    coords = torch.arange(window, device=device, dtype=dtype) - (window - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma * sigma))
    g = g / g.sum()
    kernel = torch.outer(g, g)
    return kernel.expand(channels, 1, window, window).contiguous()


def ssim(
    pred: torch.Tensor,
    target: torch.Tensor,
    peak: float = 1.0,
    window: int = SSIM_WINDOW,
    sigma: float = SSIM_SIGMA,
    k1: float = SSIM_K1,
    k2: float = SSIM_K2,
) -> torch.Tensor:
    """Mean SSIM over a batch, as a differentiable scalar tensor.

    Accepts (B, C, H, W) or (C, H, W). The Gaussian window is applied
    without padding, so H and W must be at least ``window``.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    squeeze = pred.ndim == 3
    if squeeze:
        pred = pred.unsqueeze(0)
        target = target.unsqueeze(0)
    if pred.ndim != 4:
        raise ValueError("expected (B, C, H, W) or (C, H, W) input")
    _, c, h, w = pred.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {window}")

    kernel = _gaussian_window(window, sigma, c, pred.device, pred.dtype)
    mu_x = F.conv2d(pred, kernel, groups=c)
    mu_y = F.conv2d(target, kernel, groups=c)
    mu_x2, mu_y2, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    sigma_x2 = F.conv2d(pred * pred, kernel, groups=c) - mu_x2
    sigma_y2 = F.conv2d(target * target, kernel, groups=c) - mu_y2
    sigma_xy = F.conv2d(pred * target, kernel, groups=c) - mu_xy

    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    ssim_map = ((2 * mu_xy + c1) * (2 * sigma_xy + c2)) / (
        (mu_x2 + mu_y2 + c1) * (sigma_x2 + sigma_y2 + c2)
    )
    return ssim_map.mean()


@dataclass
class EvalReport:
    """Aggregate quality over an evaluation set.

    psnr_db is the mean of per-sample PSNRs; psnr_infinite marks that at
    least one sample reproduced its target exactly (the mean is then +inf
    and should be read through the flag, not the number).
    """

    psnr_db: float
    ssim: float
    n_samples: int
    psnr_infinite: bool = False
    recovery_pct: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["psnr_db"]):
            d["psnr_db"] = None
        return d


def evaluate_pairs(pred: torch.Tensor, target: torch.Tensor, peak: float = 1.0) -> EvalReport:
    """Per-sample PSNR/SSIM over a batch (B, C, H, W), averaged."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.ndim != 4:
        raise ValueError("expected (B, C, H, W) input")
    psnrs = [psnr(p, t, peak=peak) for p, t in zip(pred, target)]
    ssims = [float(ssim(p, t, peak=peak)) for p, t in zip(pred, target)]
    has_inf = any(math.isinf(v) for v in psnrs)
    mean_psnr = math.inf if has_inf else sum(psnrs) / len(psnrs)
    return EvalReport(
        psnr_db=mean_psnr,
        ssim=sum(ssims) / len(ssims),
        n_samples=pred.shape[0],
        psnr_infinite=has_inf,
    )


def recovery_percent(quant_psnr_db: float, fp_psnr_db: float) -> float:
    """Quantized PSNR as a percentage of the full-precision PSNR."""
    if not math.isfinite(fp_psnr_db) or fp_psnr_db <= 0:
        raise ValueError(f"full-precision PSNR must be finite and positive, got {fp_psnr_db}")
    if not math.isfinite(quant_psnr_db):
        raise ValueError("quantized PSNR must be finite for a recovery ratio")
    return 100.0 * quant_psnr_db / fp_psnr_db


def compare_reports(quant: EvalReport, full_precision: EvalReport) -> EvalReport:
    """Copy of ``quant`` with recovery_pct filled in against a reference report.

    Both reports must cover the same number of samples so the ratio
    compares like with like.
    """
    if quant.n_samples != full_precision.n_samples:
        raise ValueError(
            f"sample count mismatch: {quant.n_samples} vs {full_precision.n_samples}"
        )
    return EvalReport(
        psnr_db=quant.psnr_db,
        ssim=quant.ssim,
        n_samples=quant.n_samples,
        psnr_infinite=quant.psnr_infinite,
        recovery_pct=recovery_percent(quant.psnr_db, full_precision.psnr_db),
    )
