"""U-shaped restoration network with gated skip connections.

Three encoder stages (residual squeeze-excite blocks with stride-2
downsampling), a two-block bottleneck, and a lightweight decoder whose
skip connections run through per-level degradation gates: each encoder
stage predicts a single-channel map of where the input is degraded, and
the skip feature is modulated by that map plus learnable scalars before
being added to the upsampled decoder path. The network ends with a
global residual, so an untrained model (zero-initialized output head) is
exactly the identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn

SKIP_MODES = ("plain", "degmap", "gated")
GATE_VARIANTS = ("main", "nested")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    stem_channels: int = 64
    encoder_channels: tuple[int, int, int] = (64, 96, 128)
    bottleneck_channels: int = 256
    se_reduction: int = 16
    gate_reduction: int = 8
    bn_momentum: float = 0.8
    scale_factor: float = 1.0
    skip_mode: str = "gated"
    gate_variant: str = "main"

    def __post_init__(self) -> None:
        if len(self.encoder_channels) != 3:
            raise ValueError("expected exactly three encoder stages")
        if self.stem_channels != self.encoder_channels[0]:
            raise ValueError("stem output width must match the first encoder stage")
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")
        if self.skip_mode not in SKIP_MODES:
            raise ValueError(f"skip_mode must be one of {SKIP_MODES}, got {self.skip_mode!r}")
        if self.gate_variant not in GATE_VARIANTS:
            raise ValueError(f"gate_variant must be one of {GATE_VARIANTS}")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ValueError("bn_momentum must be in (0, 1]")
        plan = (*self.encoder_channels, self.bottleneck_channels)
        for c in plan:
            if c % self.se_reduction:
                raise ValueError(
                    f"channel plan {plan} not divisible by se_reduction={self.se_reduction}"
                )
        for c in self.encoder_channels:
            if c % self.gate_reduction:
                raise ValueError(
                    f"encoder channels {self.encoder_channels} not divisible by "
                    f"gate_reduction={self.gate_reduction}"
                )

    def scaled(self, channels: int) -> int:
        """Channel count after width scaling, floored at 1."""
        return max(1, int(round(channels * self.scale_factor)))

    @property
    def widths(self) -> tuple[int, int, int, int]:
        """Scaled (enc1, enc2, enc3, bottleneck) channel widths."""
        e1, e2, e3 = (self.scaled(c) for c in self.encoder_channels)
        return e1, e2, e3, self.scaled(self.bottleneck_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        if "encoder_channels" in d:
            d["encoder_channels"] = tuple(d["encoder_channels"])
        return ModelConfig(**d)


@dataclass
class ForwardTrace:
    """Everything one forward pass exposes beyond the restored image.

    skip_features and deg_maps are ordered shallow-to-deep (encoder
    levels 1..3); decoder_features are ordered deep-to-shallow (the
    order the decoder computes them), each taken after that level's
    fusion and block.
    """

    output: torch.Tensor
    bottleneck: torch.Tensor
    skip_features: list[torch.Tensor]
    deg_maps: list[torch.Tensor | None]
    decoder_features: list[torch.Tensor]


class ChannelGate(nn.Module):
    """Squeeze-excite channel reweighting (1x1 convs so the whole net stays conv-only)."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.squeeze = nn.Conv2d(channels, hidden, kernel_size=1)
        self.act = nn.ReLU()
        self.expand = nn.Conv2d(hidden, channels, kernel_size=1)
        self.gate = nn.Sigmoid()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w = self.gate(self.expand(self.act(self.squeeze(self.pool(x)))))
        return x * w


class ResidualSEBlock(nn.Module):
    """conv-bn-relu-conv-bn, squeeze-excite, then the identity shortcut."""

    def __init__(self, channels: int, se_reduction: int, bn_momentum: float):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels, momentum=bn_momentum)
        self.relu = nn.ReLU()
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels, momentum=bn_momentum)
        self.se = ChannelGate(channels, se_reduction)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return x + self.se(h)


class DegradationGate(nn.Module):
    """Per-level degradation map plus learnable fusion scalars.

    The map head is a bottlenecked conv stack ending in a sigmoid, so
    G lives in [0, 1] (one channel, same spatial size as the skip).
    ``bounded_output_quant`` is an attachment point: the quantization
    simulator replaces the Identity with a fixed-scale quantizer because
    the sigmoid output has a hard range.
    """

    def __init__(self, channels: int, reduction: int, bn_momentum: float, variant: str):
        super().__init__()
        if variant not in GATE_VARIANTS:
            raise ValueError(f"unknown gate variant {variant!r}")
        hidden = max(1, channels // reduction)
        self.reduce = nn.Conv2d(channels, hidden, kernel_size=1, bias=False)
        self.bn = nn.BatchNorm2d(hidden, momentum=bn_momentum)
        self.relu = nn.ReLU()
        self.project = nn.Conv2d(hidden, 1, kernel_size=3, padding=1)
        self.gate = nn.Sigmoid()
        self.bounded_output_quant = nn.Identity()
        self.variant = variant
        self.deg_scale = nn.Parameter(torch.ones(()))
        self.skip_scale = nn.Parameter(torch.ones(()))

    def map(self, skip: torch.Tensor) -> torch.Tensor:
        g = self.gate(self.project(self.relu(self.bn(self.reduce(skip)))))
        return self.bounded_output_quant(g)

    def fuse(self, upsampled: torch.Tensor, skip: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        offset = self.skip_scale if self.variant == "nested" else self.deg_scale
        return upsampled + self.skip_scale * (skip * (offset + g))


class PlainSkip(nn.Module):
    """Additive skip with no gating (ablation baseline)."""

    def fuse(self, upsampled: torch.Tensor, skip: torch.Tensor, g) -> torch.Tensor:
        return upsampled + skip


class MapOnlySkip(nn.Module):
    """Skip modulated by the degradation map alone, no learnable scalars."""

    def __init__(self, channels: int, reduction: int, bn_momentum: float):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.reduce = nn.Conv2d(channels, hidden, kernel_size=1, bias=False)
        self.bn = nn.BatchNorm2d(hidden, momentum=bn_momentum)
        self.relu = nn.ReLU()
        self.project = nn.Conv2d(hidden, 1, kernel_size=3, padding=1)
        self.gate = nn.Sigmoid()
        self.bounded_output_quant = nn.Identity()

    def map(self, skip: torch.Tensor) -> torch.Tensor:
        g = self.gate(self.project(self.relu(self.bn(self.reduce(skip)))))
        return self.bounded_output_quant(g)

    def fuse(self, upsampled: torch.Tensor, skip: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        return upsampled + skip * g


class RestorationNet(nn.Module):
    """Encoder-decoder restorer; forward returns a ForwardTrace."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        e1, e2, e3, bc = config.widths
        widths = (e1, e2, e3)
        mom = config.bn_momentum

        self.stem = nn.Conv2d(config.in_channels, e1, 3, padding=1)

        self.enc_blocks = nn.ModuleList(
            ResidualSEBlock(c, config.se_reduction, mom) for c in widths
        )
        down_out = (e2, e3, bc)
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[i], down_out[i], 3, stride=2, padding=1) for i in range(3)
        )

        self.skips = nn.ModuleList(self._make_skip(c) for c in widths)

        self.bottleneck = nn.Sequential(
            ResidualSEBlock(bc, config.se_reduction, mom),
            ResidualSEBlock(bc, config.se_reduction, mom),
        )

        # decoder runs deep to shallow: level 3, then 2, then 1
        up_in = (bc, e3, e2)
        up_out = (e3, e2, e1)
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(up_in[i], up_out[i], kernel_size=2, stride=2) for i in range(3)
        )
        self.dec_blocks = nn.ModuleList(
            [
                ResidualSEBlock(e3, config.se_reduction, mom),
                ResidualSEBlock(e2, config.se_reduction, mom),
                nn.Identity(),
            ]
        )

        self.out_act = nn.ReLU()
        self.out_proj = nn.Conv2d(e1, config.in_channels, kernel_size=1)

        self._init_weights()

    def _make_skip(self, channels: int) -> nn.Module:
        cfg = self.config
        if cfg.skip_mode == "plain":
            return PlainSkip()
        if cfg.skip_mode == "degmap":
            return MapOnlySkip(channels, cfg.gate_reduction, cfg.bn_momentum)
        return DegradationGate(channels, cfg.gate_reduction, cfg.bn_momentum, cfg.gate_variant)

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        # zero head: a fresh network is the identity map through the global residual
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x: torch.Tensor) -> ForwardTrace:
        if x.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"input {h}x{w} must have sides divisible by 8")

        skips: list[torch.Tensor] = []
        maps: list[torch.Tensor | None] = []
        f = self.stem(x)
        for block, skip_mod, down in zip(self.enc_blocks, self.skips, self.downs):
            f = block(f)
            skips.append(f)
            maps.append(skip_mod.map(f) if hasattr(skip_mod, "map") else None)
            f = down(f)

        bott = self.bottleneck(f)

        decs: list[torch.Tensor] = []
        f = bott
        for i, (up, dec_block) in enumerate(zip(self.ups, self.dec_blocks)):
            level = 2 - i  # index into shallow-to-deep skip lists
            f = up(f)
            f = self.skips[level].fuse(f, skips[level], maps[level])
            f = dec_block(f)
            decs.append(f)

        out = x + self.out_proj(self.out_act(f))
        return ForwardTrace(
            output=out,
            bottleneck=bott,
            skip_features=skips,
            deg_maps=maps,
            decoder_features=decs,
        )

    def restore(self, x: torch.Tensor) -> torch.Tensor:
        """Forward pass returning only the restored image."""
        return self.forward(x).output


def build_model(config: ModelConfig) -> RestorationNet:
    return RestorationNet(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def layer_inventory(model: nn.Module) -> set[str]:
    """Class names of every leaf module in the network."""
    leaves = set()
    for m in model.modules():
        if len(list(m.children())) == 0 and type(m) is not nn.Identity:
            leaves.add(type(m).__name__)
    return leaves


def shape_trace(model: RestorationNet, size: int = 256) -> list[tuple[str, tuple[int, ...]]]:
    """Stage-by-stage feature shapes for a (1, in, size, size) input."""
    was_training = model.training
    model.eval()
    x = torch.zeros(1, model.config.in_channels, size, size)
    with torch.no_grad():
        trace = model(x)
    rows: list[tuple[str, tuple[int, ...]]] = [("input", tuple(x.shape))]
    for i, s in enumerate(trace.skip_features, start=1):
        rows.append((f"encoder{i}", tuple(s.shape)))
        if trace.deg_maps[i - 1] is not None:
            rows.append((f"deg_map{i}", tuple(trace.deg_maps[i - 1].shape)))
    rows.append(("bottleneck", tuple(trace.bottleneck.shape)))
    for level, d in zip((3, 2, 1), trace.decoder_features):
        rows.append((f"decoder{level}", tuple(d.shape)))
    rows.append(("output", tuple(trace.output.shape)))
    if was_training:
        model.train()
    return rows
