"""Gradient-magnitude loss balancing for two-term distillation training.

The reconstruction and distillation losses are combined with reciprocal
weights driven by two learnable log-space coefficients, normalized by a
slow EMA of each loss's gradient norm. The log parametrization keeps
both effective weights strictly positive (a raw-ratio variant that can
sign-flip is kept as ReciprocalCombiner for ablations).

Step protocol (the trainer follows this order):
    t = balancer.begin_step()            # steps count from 1
    if balancer.needs_refresh():
        balancer.refresh(g_rec, g_kd)    # per-loss gradient norms
    total, info = balancer.combine(l_rec, l_kd)
    total.backward()
    balancer.clip_gradients()
    optimizer.step()                     # balancer params at a higher lr
    balancer.apply_floor()
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import torch
import torch.nn as nn

LOG_WEIGHT_FLOOR = math.log(1e-4)

DEFAULT_MU = 0.9
DEFAULT_EPS = 1e-12
DEFAULT_REFRESH_INTERVAL = 50
DEFAULT_CLIP_NORM = 1.0
DEFAULT_INIT_BATCHES = 8
DEFAULT_LR_SCALE = 10.0


class BalancerError(RuntimeError):
    """Degenerate or non-finite balancer state."""


def gradient_norm(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> float:
    """L2 norm of d(loss)/d(params); graph is retained for a later backward."""
    params = [p for p in params if p.requires_grad]
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    total = 0.0
    for g in grads:
        if g is not None:
            total += float((g.double() ** 2).sum())
    return math.sqrt(total)


class MagnitudeBalancer(nn.Module):
    """EMA-normalized reciprocal weighting of reconstruction vs distillation loss.

    State (float64 for exact bookkeeping):
      log_gain_rec / log_gain_kd: learnable log coefficients; the combined
        loss uses r = exp(log_gain_rec - log_gain_kd).
      ema_grad_rec / ema_grad_kd: EMAs of the two gradient norms,
        refreshed every ``refresh_interval`` steps.
    The smoothing ratio s = sqrt(ema_kd / (ema_rec + eps)) carries no
    gradient; total = (r / s) * l_rec + (s / r) * l_kd.
    """

    ema_grad_rec: torch.Tensor
    ema_grad_kd: torch.Tensor
    steps: torch.Tensor
    refreshes: torch.Tensor
    ready: torch.Tensor

    def __init__(
        self,
        mu: float = DEFAULT_MU,
        eps: float = DEFAULT_EPS,
        refresh_interval: int = DEFAULT_REFRESH_INTERVAL,
        clip_norm: float = DEFAULT_CLIP_NORM,
    ):
        super().__init__()
        if not 0.0 <= mu < 1.0:
            raise ValueError("mu must be in [0, 1)")
        if refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        if clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        self.mu = mu
        self.eps = eps
        self.refresh_interval = refresh_interval
        self.clip_norm = clip_norm
        self.log_gain_rec = nn.Parameter(torch.zeros((), dtype=torch.float64))
        self.log_gain_kd = nn.Parameter(torch.zeros((), dtype=torch.float64))
        self.register_buffer("ema_grad_rec", torch.zeros((), dtype=torch.float64))
        self.register_buffer("ema_grad_kd", torch.zeros((), dtype=torch.float64))
        self.register_buffer("steps", torch.zeros((), dtype=torch.long))
        self.register_buffer("refreshes", torch.zeros((), dtype=torch.long))
        self.register_buffer("ready", torch.zeros((), dtype=torch.bool))

    @property
    def initialized(self) -> bool:
        return bool(self.ready)

    def initialize(self, rec_norms: Sequence[float], kd_norms: Sequence[float]) -> None:
        """Seed coefficients and EMAs from per-batch gradient norms.

        Each norm must be finite and strictly positive; a violation
        raises naming the offending batch. With equal mean norms both
        coefficients start at log(1/2).
        """
        if len(rec_norms) != len(kd_norms) or not rec_norms:
            raise ValueError("need equal, nonzero counts of rec and kd gradient norms")
        for i, (gr, gk) in enumerate(zip(rec_norms, kd_norms)):
            for label, g in (("reconstruction", gr), ("distillation", gk)):
                if not math.isfinite(g):
                    raise BalancerError(f"non-finite {label} gradient norm at init batch {i}")
                if g <= 0.0:
                    raise BalancerError(f"zero {label} gradient norm at init batch {i}")
        mean_rec = sum(float(g) for g in rec_norms) / len(rec_norms)
        mean_kd = sum(float(g) for g in kd_norms) / len(kd_norms)
        gamma = mean_rec + mean_kd
        with torch.no_grad():
            self.log_gain_rec.fill_(math.log(mean_kd / gamma))
            self.log_gain_kd.fill_(math.log(mean_rec / gamma))
            self.ema_grad_rec.fill_(mean_rec)
            self.ema_grad_kd.fill_(mean_kd)
        self.ready.fill_(True)

    def begin_step(self) -> int:
        self.steps += 1
        return int(self.steps)

    def needs_refresh(self) -> bool:
        return int(self.steps) % self.refresh_interval == 0

    def refresh(self, grad_norm_rec: float, grad_norm_kd: float) -> None:
        """EMA update from current gradient norms."""
        if not (math.isfinite(grad_norm_rec) and math.isfinite(grad_norm_kd)):
            raise BalancerError(
                f"non-finite gradient norm at refresh (step {int(self.steps)}): "
                f"rec={grad_norm_rec}, kd={grad_norm_kd}"
            )
        mu = self.mu
        with torch.no_grad():
            self.ema_grad_rec.mul_(mu).add_((1.0 - mu) * grad_norm_rec)
            self.ema_grad_kd.mul_(mu).add_((1.0 - mu) * grad_norm_kd)
        self.refreshes += 1

    def smoothing_ratio(self) -> float:
        """sqrt(ema_kd / (ema_rec + eps)); a constant w.r.t. the graph."""
        self._require_ready()
        return math.sqrt(float(self.ema_grad_kd) / (float(self.ema_grad_rec) + self.eps))

    def combine(self, l_rec: torch.Tensor, l_kd: torch.Tensor) -> tuple[torch.Tensor, dict]:
        """Weighted total loss plus a log record of the effective weights."""
        self._require_ready()
        s = self.smoothing_ratio()
        if s <= 0.0 or not math.isfinite(s):
            raise BalancerError(f"degenerate smoothing ratio {s}")
        r = torch.exp(self.log_gain_rec - self.log_gain_kd)
        total = (r / s) * l_rec + (s / r) * l_kd
        info = {
            "weight_rec": float(r.detach()) / s,
            "weight_kd": s / float(r.detach()),
            "smoothing_ratio": s,
            "log_gain_rec": float(self.log_gain_rec.detach()),
            "log_gain_kd": float(self.log_gain_kd.detach()),
        }
        return total, info

    def clip_gradients(self) -> float:
        """Clip the joint grad norm of the two coefficients; returns the pre-clip norm."""
        return float(
            torch.nn.utils.clip_grad_norm_(
                [self.log_gain_rec, self.log_gain_kd], self.clip_norm
            )
        )

    def apply_floor(self) -> None:
        """Clamp both log coefficients from below after an optimizer step."""
        with torch.no_grad():
            self.log_gain_rec.clamp_(min=LOG_WEIGHT_FLOOR)
            self.log_gain_kd.clamp_(min=LOG_WEIGHT_FLOOR)

    def _require_ready(self) -> None:
        if not self.initialized:
            raise BalancerError("balancer used before initialize()")

    def state_summary(self) -> dict:
        return {
            "log_gain_rec": float(self.log_gain_rec.detach()),
            "log_gain_kd": float(self.log_gain_kd.detach()),
            "ema_grad_rec": float(self.ema_grad_rec),
            "ema_grad_kd": float(self.ema_grad_kd),
            "steps": int(self.steps),
            "refreshes": int(self.refreshes),
        }


class FixedCombiner(nn.Module):
    """total = l_rec + weight * l_kd with a constant hand-picked weight."""

    def __init__(self, kd_weight: float = 1.0):
        super().__init__()
        if kd_weight < 0:
            raise ValueError("kd_weight must be >= 0")
        self.kd_weight = kd_weight

    def combine(self, l_rec: torch.Tensor, l_kd: torch.Tensor) -> tuple[torch.Tensor, dict]:
        total = l_rec + self.kd_weight * l_kd
        return total, {"weight_rec": 1.0, "weight_kd": self.kd_weight}


class ReciprocalCombiner(nn.Module):
    """Raw reciprocal weighting with unconstrained learnable coefficients.

    total = (c_rec / c_kd) * l_rec + (c_kd / c_rec) * l_kd. Kept as an
    ablation baseline: nothing keeps the coefficients away from zero or
    from changing sign, so the effective weights can explode or go
    negative. The log-space balancer exists to fix exactly that.
    """

    def __init__(self):
        super().__init__()
        self.coef_rec = nn.Parameter(torch.ones((), dtype=torch.float64))
        self.coef_kd = nn.Parameter(torch.ones((), dtype=torch.float64))

    def combine(self, l_rec: torch.Tensor, l_kd: torch.Tensor) -> tuple[torch.Tensor, dict]:
        total = (self.coef_rec / self.coef_kd) * l_rec + (self.coef_kd / self.coef_rec) * l_kd
        info = {
            "weight_rec": float((self.coef_rec / self.coef_kd).detach()),
            "weight_kd": float((self.coef_kd / self.coef_rec).detach()),
        }
        return total, info
