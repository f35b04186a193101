"""Simulated low-bit quantization with straight-through gradients.

Implements symmetric uniform fake quantization for weights (per output
channel, recalibrated from the live tensor on every forward) and for
activations (per tensor, running-max calibration over a fixed number of
batches, frozen afterwards). Quantized values never use the most negative
code: the integer grid is [-qmax, qmax] with qmax = 2^(bits-1) - 1.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

VALID_BITS = (2, 4, 8)

# Fallback scale when a tensor (or channel slice) is identically zero.
SCALE_EPS = 1e-8

# Activation observers freeze after this many observed batches unless
# frozen earlier by an explicit calibration pass.
DEFAULT_CALIB_BATCHES = 16


class NotQuantizableError(TypeError):
    """Raised when a model contains a parametric layer the simulator cannot wrap."""


class CalibrationError(ValueError):
    """Raised when an observer sees non-finite values (training has diverged)."""


def quant_max(bits: int) -> int:
    """Largest integer code for a symmetric b-bit grid (2^(b-1) - 1)."""
    _check_bits(bits)
    return 2 ** (bits - 1) - 1


def _check_bits(bits: int) -> None:
    if bits not in VALID_BITS:
        raise ValueError(f"unsupported bit width {bits!r}; expected one of {VALID_BITS}")


@dataclass(frozen=True)
class QuantConfig:
    """Static description of a quantization scheme.

    Attributes:
        bits: integer bit width, one of 2/4/8.
        weight_scheme: only "per_channel_symmetric" is supported.
        activation_scheme: only "per_tensor_symmetric" is supported.
        calib_batches: number of batches an activation observer sees
            before it freezes its running max.
    """

    bits: int = 8
    weight_scheme: str = "per_channel_symmetric"
    activation_scheme: str = "per_tensor_symmetric"
    calib_batches: int = DEFAULT_CALIB_BATCHES

    def __post_init__(self) -> None:
        _check_bits(self.bits)
        if self.weight_scheme != "per_channel_symmetric":
            raise ValueError(f"unknown weight scheme {self.weight_scheme!r}")
        if self.activation_scheme != "per_tensor_symmetric":
            raise ValueError(f"unknown activation scheme {self.activation_scheme!r}")
        if self.calib_batches < 1:
            raise ValueError("calib_batches must be >= 1")


@dataclass
class QuantParams:
    """Resolved quantization parameters for one tensor.

    ``scales`` has one entry per channel (per-channel mode) or a single
    entry (per-tensor mode). ``channel_axis`` is None for per-tensor.
    """

    scales: torch.Tensor
    bits: int
    channel_axis: int | None = None

    def __post_init__(self) -> None:
        _check_bits(self.bits)
        if self.scales.ndim != 1:
            raise ValueError("scales must be a 1-d tensor")
        if not torch.all(self.scales > 0):
            raise ValueError("scales must be strictly positive")

    @property
    def qmax(self) -> int:
        return quant_max(self.bits)

    def broadcast_scales(self, like: torch.Tensor) -> torch.Tensor:
        """Reshape scales so they broadcast against ``like`` along channel_axis."""
        if self.channel_axis is None:
            return self.scales.reshape(())
        shape = [1] * like.ndim
        shape[self.channel_axis] = -1
        return self.scales.reshape(shape)


def calibrate_max(
    x: torch.Tensor,
    bits: int,
    per_channel: bool = False,
    channel_axis: int = 0,
    eps: float = SCALE_EPS,
) -> QuantParams:
    """Max-calibration: scale = max|x| / qmax, per channel or per tensor.

    All-zero slices fall back to ``eps`` so downstream division is safe.
    Raises on non-finite input.
    """
    if not torch.isfinite(x).all():
        raise CalibrationError("cannot calibrate on non-finite values")
    qm = quant_max(bits)
    if per_channel:
        if not -x.ndim <= channel_axis < x.ndim:
            raise ValueError(f"channel_axis {channel_axis} out of range for ndim {x.ndim}")
        axis = channel_axis % x.ndim
        reduce_dims = [d for d in range(x.ndim) if d != axis]
        max_abs = x.detach().abs().amax(dim=reduce_dims) if reduce_dims else x.detach().abs()
        scales = (max_abs / qm).clamp_min(eps)
        return QuantParams(scales=scales, bits=bits, channel_axis=axis)
    max_abs = x.detach().abs().amax()
    scale = (max_abs / qm).clamp_min(eps)
    return QuantParams(scales=scale.reshape(1), bits=bits, channel_axis=None)


def fake_quantize(x: torch.Tensor, params: QuantParams) -> torch.Tensor:
    """Quantize-dequantize without gradient tracking through the rounding.

    out = clamp(round(x / scale), -qmax, qmax) * scale, with torch.round's
    half-to-even tie breaking.
    """
    scales = params.broadcast_scales(x)
    q = torch.clamp(torch.round(x / scales), -params.qmax, params.qmax)
    return q * scales


def ste_mask(x: torch.Tensor, params: QuantParams) -> torch.Tensor:
    """Pass-through mask for the straight-through estimator.

    True where |x / scale| <= qmax (inside the representable range),
    False where the clamp saturates.
    """
    scales = params.broadcast_scales(x)
    return (x / scales).abs() <= params.qmax


def ste_gradient(upstream: torch.Tensor, x: torch.Tensor, params: QuantParams) -> torch.Tensor:
    """Gradient of fake_quantize under the straight-through estimator."""
    return upstream * ste_mask(x, params).to(upstream.dtype)


class _FakeQuantSTE(torch.autograd.Function):
    """Fake quantization whose backward is the clipped identity."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, scales: torch.Tensor, qmax: int) -> torch.Tensor:
        q = torch.clamp(torch.round(x / scales), -qmax, qmax)
        ctx.save_for_backward((x / scales).abs() <= qmax)
        return q * scales

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        (mask,) = ctx.saved_tensors
        return grad_out * mask.to(grad_out.dtype), None, None


def fake_quantize_ste(x: torch.Tensor, params: QuantParams) -> torch.Tensor:
    """Differentiable fake quantization (straight-through backward)."""
    return _FakeQuantSTE.apply(x, params.broadcast_scales(x), params.qmax)


class WeightQuantizer(nn.Module):
    """Per-channel symmetric weight fake-quantizer.

    Scales are recomputed from the live weight tensor on every call, so
    the quantization grid tracks the weights as they train. The most
    recent parameters are kept for export.
    """

    def __init__(self, bits: int, channel_axis: int = 0):
        super().__init__()
        _check_bits(bits)
        self.bits = bits
        self.channel_axis = channel_axis
        self.last_params: QuantParams | None = None

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        params = calibrate_max(weight, self.bits, per_channel=True, channel_axis=self.channel_axis)
        self.last_params = params
        return fake_quantize_ste(weight, params)

    def extra_repr(self) -> str:
        return f"bits={self.bits}, channel_axis={self.channel_axis}"


class ActivationQuantizer(nn.Module):
    """Per-tensor symmetric activation fake-quantizer with running-max calibration.

    The observer updates before quantizing, so the very first batch is
    quantized against its own maximum rather than the epsilon fallback.
    After ``calib_batches`` observed batches the running max freezes;
    freeze() forces this earlier (used by calibration-only regimes).
    """

    running_max: torch.Tensor
    observed: torch.Tensor
    frozen: torch.Tensor

    def __init__(self, bits: int, calib_batches: int = DEFAULT_CALIB_BATCHES):
        super().__init__()
        _check_bits(bits)
        if calib_batches < 1:
            raise ValueError("calib_batches must be >= 1")
        self.bits = bits
        self.calib_batches = calib_batches
        self.register_buffer("running_max", torch.zeros(()))
        self.register_buffer("observed", torch.zeros((), dtype=torch.long))
        self.register_buffer("frozen", torch.zeros((), dtype=torch.bool))

    @property
    def calibrated(self) -> bool:
        return bool(self.frozen) or int(self.observed) >= self.calib_batches

    def freeze(self) -> None:
        self.frozen.fill_(True)

    def current_params(self) -> QuantParams:
        scale = (self.running_max / quant_max(self.bits)).clamp_min(SCALE_EPS)
        return QuantParams(scales=scale.reshape(1), bits=self.bits, channel_axis=None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.calibrated:
            batch_max = x.detach().abs().amax()
            if not torch.isfinite(batch_max):
                raise CalibrationError("cannot calibrate activation observer on non-finite values")
            torch.maximum(self.running_max, batch_max, out=self.running_max)
            self.observed += 1
        return fake_quantize_ste(x, self.current_params())

    def extra_repr(self) -> str:
        return f"bits={self.bits}, calib_batches={self.calib_batches}"


class FixedScaleQuantizer(nn.Module):
    """Fake quantizer with a constant scale, for activations with a hard bound.

    A sigmoid output lives in [0, 1], so scale = 1 / qmax covers the full
    range without calibration.
    """

    def __init__(self, bits: int, bound: float = 1.0):
        super().__init__()
        _check_bits(bits)
        self.bits = bits
        self.register_buffer("scale", torch.tensor(float(bound) / quant_max(bits)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        params = QuantParams(scales=self.scale.reshape(1), bits=self.bits, channel_axis=None)
        return fake_quantize_ste(x, params)

    def extra_repr(self) -> str:
        return f"bits={self.bits}, scale={float(self.scale):.6g}"


class QuantWrappedConv(nn.Module):
    """Wraps a conv (or transposed conv), quantizing its input and weight.

    The bias stays in full precision; the convolution itself runs in float
    on the dequantized values (simulated quantization).
    """

    def __init__(self, conv: nn.Module, config: QuantConfig):
        super().__init__()
        if isinstance(conv, nn.Conv2d):
            axis = 0
        elif isinstance(conv, nn.ConvTranspose2d):
            # transposed conv weight layout is (in, out, kH, kW)
            axis = 1
        else:
            raise NotQuantizableError(f"cannot wrap {type(conv).__name__}")
        self.conv = conv
        self.weight_quant = WeightQuantizer(config.bits, channel_axis=axis)
        self.input_quant = ActivationQuantizer(config.bits, calib_batches=config.calib_batches)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xq = self.input_quant(x)
        wq = self.weight_quant(self.conv.weight)
        c = self.conv
        if isinstance(c, nn.Conv2d):
            return F.conv2d(xq, wq, c.bias, c.stride, c.padding, c.dilation, c.groups)
        return F.conv_transpose2d(
            xq, wq, c.bias, c.stride, c.padding, c.output_padding, c.groups, c.dilation
        )


# Layer types that carry no weights to quantize and pass through unchanged.
_PASSTHROUGH_TYPES = (
    nn.BatchNorm2d,
    nn.ReLU,
    nn.Sigmoid,
    nn.AdaptiveAvgPool2d,
    nn.Identity,
)


def _attach_into(module: nn.Module, prefix: str, config: QuantConfig, offenders: list[str]) -> None:
    if isinstance(module, QuantWrappedConv):
        return
    if hasattr(module, "bounded_output_quant") and isinstance(module.bounded_output_quant, nn.Identity):
        module.bounded_output_quant = FixedScaleQuantizer(config.bits)
    for child_name, child in list(module.named_children()):
        full = f"{prefix}.{child_name}" if prefix else child_name
        if isinstance(child, (nn.Conv2d, nn.ConvTranspose2d)):
            setattr(module, child_name, QuantWrappedConv(child, config))
        elif isinstance(child, _PASSTHROUGH_TYPES):
            continue
        elif len(list(child.children())) > 0:
            _attach_into(child, full, config, offenders)
        elif any(True for _ in child.parameters(recurse=False)):
            offenders.append(f"{full} ({type(child).__name__})")


def attach_quantizers(model: nn.Module, config: QuantConfig) -> nn.Module:
    """Replace every conv/convT in ``model`` with a quantizing wrapper, in place.

    BatchNorm, activations and pooling pass through unchanged. Any other
    leaf module that owns parameters raises NotQuantizableError naming the
    offending layer. Modules exposing a ``bounded_output_quant`` slot
    (hard-bounded gate outputs) get a fixed-scale quantizer installed.
    Calling this twice on the same model is an error.
    """
    if any(isinstance(m, QuantWrappedConv) for m in model.modules()):
        raise ValueError("model already has quantizers attached")
    offenders: list[str] = []
    _attach_into(model, "", config, offenders)
    if offenders:
        raise NotQuantizableError(
            "model contains parametric layers without a quantized drop-in: " + ", ".join(offenders)
        )
    return model


def quantized_layers(model: nn.Module) -> list[tuple[str, QuantWrappedConv]]:
    """Named QuantWrappedConv modules, in registration order."""
    return [(n, m) for n, m in model.named_modules() if isinstance(m, QuantWrappedConv)]


def activation_quantizers(model: nn.Module) -> list[tuple[str, ActivationQuantizer]]:
    return [(n, m) for n, m in model.named_modules() if isinstance(m, ActivationQuantizer)]


def freeze_activation_quantizers(model: nn.Module) -> int:
    """Freeze every activation observer; returns how many were frozen."""
    quants = activation_quantizers(model)
    for _, q in quants:
        q.freeze()
    return len(quants)


def calibration_complete(model: nn.Module) -> bool:
    return all(q.calibrated for _, q in activation_quantizers(model))


@torch.no_grad()
def calibrate_model(model: nn.Module, batches, n_batches: int | None = None) -> int:
    """Run forward passes to populate activation observers, then freeze them.

    ``batches`` is an iterable of input tensors. Returns the number of
    batches consumed. Model weights are untouched.
    """
    was_training = model.training
    model.eval()
    consumed = 0
    for x in batches:
        model(x)
        consumed += 1
        if n_batches is not None and consumed >= n_batches:
            break
    freeze_activation_quantizers(model)
    if was_training:
        model.train()
    return consumed


def export_quant_params(model: nn.Module) -> list[dict]:
    """Per-layer quantization parameters as JSON-serializable records.

    One record per wrapped conv: bit width, schemes, per-channel weight
    scales (computed from the current weights) and the frozen activation
    scale. Layer order follows module registration order.
    """
    records = []
    for name, wrapped in quantized_layers(model):
        weight = wrapped.conv.weight
        wp = calibrate_max(
            weight, wrapped.weight_quant.bits, per_channel=True,
            channel_axis=wrapped.weight_quant.channel_axis,
        )
        ap = wrapped.input_quant.current_params()
        records.append(
            {
                "layer": name,
                "kind": type(wrapped.conv).__name__,
                "bits": wrapped.weight_quant.bits,
                "weight_scheme": "per_channel_symmetric",
                "weight_channel_axis": wrapped.weight_quant.channel_axis,
                "weight_scales": [float(s) for s in wp.scales],
                "activation_scheme": "per_tensor_symmetric",
                "activation_scale": float(ap.scales[0]),
                "activation_calibrated": wrapped.input_quant.calibrated,
            }
        )
    return records
