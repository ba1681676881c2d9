"""Layer toolkit operating on the canonical [T, N, C, H, W] activation layout.

Every layer folds the time axis into the batch for its spatial math and
restores it afterwards; spiking layers instead walk the time axis so the
membrane state threads step to step. A ForwardContext carries the
training flag, the optional SpikeRecord, and the audit reference (the
tensor whose binarity decides MAC-vs-AC for the next arithmetic layer;
linear pooling chains are transparent to it).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import NumericError, ShapeError
from .neuron import LIFConfig, LIFState, lif_step
from .record import SpikeRecord
from .tensor import Tensor


@dataclass
class ForwardContext:
    training: bool = False
    record: SpikeRecord | None = None
    strict: bool = False
    audit_ref: np.ndarray | None = None


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
               dtype) -> Tensor:
    bound = float(np.sqrt(6.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


class Module:
    """Composable graph node with stable dotted naming."""

    def __init__(self, name: str):
        self.name = name

    def children(self) -> list["Module"]:
        return []

    def walk(self):
        yield self
        for child in self.children():
            yield from child.walk()

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for child in self.children():
            out.extend(child.named_params())
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for child in self.children():
            out.extend(child.named_buffers())
        return out

    def reset_state(self) -> None:
        for child in self.children():
            child.reset_state()

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError


def _require_5d(x: Tensor, who: str) -> tuple[int, ...]:
    if x.ndim != 5:
        raise ShapeError(f"{who} expects [T, N, C, H, W] input, got {x.shape}")
    return x.shape


def fold_time(x: Tensor) -> tuple[Tensor, int, int]:
    t, n = x.shape[0], x.shape[1]
    return tz.reshape(x, (t * n,) + x.shape[2:]), t, n


def unfold_time(x: Tensor, t: int, n: int) -> Tensor:
    return tz.reshape(x, (t, n) + x.shape[1:])


class ConvLayer(Module):
    """Square-kernel convolution, time folded into batch. No bias (BN follows)."""

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, *, rng: np.random.Generator,
                 dtype=np.float32, is_encoder: bool = False, stat_kind: str = "conv"):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.is_encoder = is_encoder
        self.stat_kind = stat_kind
        self.weight = he_uniform(rng, (out_channels, in_channels, kernel, kernel),
                                 in_channels * kernel * kernel, dtype)

    def named_params(self):
        return [(f"{self.name}.weight", self.weight)]

    def flops_per_step(self, out_h: int, out_w: int) -> int:
        return out_h * out_w * self.kernel * self.kernel * self.in_channels * self.out_channels

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        t, n, c, h, w = _require_5d(x, self.name)
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} channels, got {c}")
        flat, t, n = fold_time(x)
        y = tz.conv2d(flat, self.weight, self.stride, self.padding)
        out = unfold_time(y, t, n)
        if ctx.record is not None:
            ref = ctx.audit_ref if ctx.audit_ref is not None else x.data
            ctx.record.note_input(
                self.name, self.stat_kind, x.data, ref,
                flops=self.flops_per_step(out.shape[3], out.shape[4]) * t * n,
                is_encoder=self.is_encoder)
        ctx.audit_ref = out.data
        return out


class BatchNormLayer(Module):
    """BatchNorm over channels; statistics pool the folded T x batch axis."""

    def __init__(self, name: str, channels: int, *, dtype=np.float32,
                 eps: float = 1e-5, momentum: float = 0.1):
        super().__init__(name)
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def named_params(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def named_buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        _require_5d(x, self.name)
        flat, t, n = fold_time(x)
        y = tz.batchnorm2d(flat, self.gamma, self.beta, self.running_mean,
                           self.running_var, training=ctx.training,
                           eps=self.eps, momentum=self.momentum)
        out = unfold_time(y, t, n)
        ctx.audit_ref = out.data
        return out


class LIFLayer(Module):
    """Spiking nonlinearity walking the time axis with persistent membrane."""

    def __init__(self, name: str, cfg: LIFConfig, smooth: bool = False):
        super().__init__(name)
        self.cfg = cfg
        self.smooth = smooth
        self.state = LIFState()

    def reset_state(self) -> None:
        self.state.reset()

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        t = _require_5d(x, self.name)[0] if x.ndim == 5 else x.shape[0]
        try:
            steps = [lif_step(self.state, tz.index_first(x, i), self.cfg,
                              smooth=self.smooth)
                     for i in range(t)]
        except NumericError as err:
            raise NumericError(f"{self.name}: {err}") from None
        out = tz.stack_first(steps)
        if ctx.record is not None:
            ctx.record.note_spikes(self.name, "lif", out.data)
        ctx.audit_ref = out.data
        return out


class MaxPoolLayer(Module):
    def __init__(self, name: str, window: int, stride: int, padding: int = 0):
        super().__init__(name)
        self.window = window
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        _require_5d(x, self.name)
        flat, t, n = fold_time(x)
        y = tz.max_pool2d(flat, self.window, self.stride, self.padding)
        out = unfold_time(y, t, n)
        ctx.audit_ref = out.data
        return out


class AdaptiveAvgPoolLayer(Module):
    def __init__(self, name: str, out_size: int):
        super().__init__(name)
        self.out_size = out_size

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        _require_5d(x, self.name)
        flat, t, n = fold_time(x)
        y = tz.adaptive_avg_pool2d(flat, self.out_size)
        out = unfold_time(y, t, n)
        ctx.audit_ref = out.data
        return out


class GlobalAvgPoolLayer(Module):
    """[T, N, C, H, W] -> [T, N, C]. Transparent to the audit reference:
    averaging is linear, so the binarity that matters for the following
    classifier is that of the spike map entering this pool."""

    def __init__(self, name: str):
        super().__init__(name)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        _require_5d(x, self.name)
        flat, t, n = fold_time(x)
        y = tz.global_avg_pool(flat)
        return unfold_time(y, t, n)


class DenseLayer(Module):
    """Classifier head on pooled features: [T, N, F] -> [T, N, K]."""

    def __init__(self, name: str, in_features: int, out_features: int, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = he_uniform(rng, (out_features, in_features), in_features, dtype)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, dtype=dtype)

    def named_params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(
                f"{self.name} expects pooled [T, N, F] input, got {x.shape}; "
                "place AP before FC")
        if x.shape[2] != self.in_features:
            raise ShapeError(
                f"{self.name}: expected {self.in_features} features, got {x.shape[2]}")
        flat, t, n = fold_time(x)
        y = tz.dense(flat, self.weight, self.bias)
        out = unfold_time(y, t, n)
        if ctx.record is not None:
            ref = ctx.audit_ref if ctx.audit_ref is not None else x.data
            ctx.record.note_input(
                self.name, "fc", x.data, ref,
                flops=self.in_features * self.out_features * t * n)
        ctx.audit_ref = out.data
        return out
