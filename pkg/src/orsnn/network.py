"""Assemble full networks from architecture tokens.

A network is an ordered list of modules over the [T, N, C, H, W] layout,
ending in a global-average-pool plus classifier head whose per-step
outputs are averaged over time into the logits. The first convolution is
the encoder stage (real-valued input, MAC class by definition); the
spiking neuron after it performs the actual spike encoding.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .arch import ArchToken, parse_arch, render_arch
from .attention import AttentionGate, AttentionPlan, make_attention
from .errors import BuildError, ShapeError
from .layers import (AdaptiveAvgPoolLayer, BatchNormLayer, ConvLayer, DenseLayer,
                     ForwardContext, GlobalAvgPoolLayer, LIFLayer, MaxPoolLayer,
                     Module)
from .neuron import LIFConfig
from .record import SpikeRecord
from .residual import BlockTopology, JoinMode, ResidualBlock, build_block
from .tensor import Tensor


class Network(Module):
    def __init__(self, nodes: list[Module], *, arch_string: str,
                 join_mode: JoinMode, attention: AttentionPlan | None,
                 lif_cfg: LIFConfig, time_steps: int, in_channels: int,
                 class_count: int, seed: int, dtype=np.float32):
        super().__init__("net")
        self.nodes = nodes
        self.arch_string = arch_string
        self.join_mode = join_mode
        self.attention = attention
        self.lif_cfg = lif_cfg
        self.time_steps = time_steps
        self.in_channels = in_channels
        self.class_count = class_count
        self.seed = seed
        self.dtype = dtype

    def children(self) -> list[Module]:
        return list(self.nodes)

    def blocks(self) -> list[ResidualBlock]:
        return [n for n in self.nodes if isinstance(n, ResidualBlock)]

    def pruned_block_names(self) -> list[str]:
        return [b.name for b in self.blocks() if b.pruned]

    def shortcut_lif_names(self) -> list[str]:
        names = []
        for b in self.blocks():
            if not b.pruned and b.shortcut_lif_name:
                names.append(b.shortcut_lif_name)
        return names

    def arithmetic_stat_names(self) -> list[str]:
        """Stat keys of every op-counted layer, in execution order."""
        names = []
        for mod in self.walk():
            if isinstance(mod, (ConvLayer, DenseLayer)):
                names.append(mod.name)
            elif isinstance(mod, AttentionGate):
                names.extend([mod.name, f"{mod.name}.pool"])
        return names

    def count_parameters(self) -> int:
        return sum(t.size for _, t in self.named_params())

    def forward(self, x, *, record: SpikeRecord | None = None,
                training: bool = False, strict: bool = True,
                reset: bool = True) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 5:
            raise ShapeError(f"network input must be [T, N, C, H, W], got {x.shape}")
        if x.shape[0] != self.time_steps:
            raise ShapeError(
                f"network built for T={self.time_steps}, input has T={x.shape[0]}")
        if x.shape[2] != self.in_channels:
            raise ShapeError(
                f"network built for {self.in_channels} input channels, got {x.shape[2]}")
        if reset:
            self.reset_state()
        ctx = ForwardContext(training=training, record=record, strict=strict,
                             audit_ref=x.data)
        if record is not None:
            record.samples += x.shape[1]
            record.time_steps = x.shape[0]
        h = x
        for node in self.nodes:
            h = node.forward(h, ctx)
        logits = tz.reduce_mean(h, (0,))
        tz.assert_finite(logits.data, "logits")
        return logits


def build_network(arch, join: JoinMode = JoinMode.OR,
                  attention: AttentionPlan | None = None,
                  lif: LIFConfig | None = None, *, time_steps: int,
                  in_channels: int, seed: int = 0,
                  dtype=np.float32) -> Network:
    """Construct a parameterized network from an architecture string.

    Blocks take the bitwise-join topology when join is OR and the
    selectable-join topology otherwise; attention requires the OR join.
    Identical seeds produce bit-identical parameters.
    """
    tokens = parse_arch(arch) if isinstance(arch, str) else list(arch)
    if lif is None:
        lif = LIFConfig()
    if time_steps < 1:
        raise BuildError(f"time_steps must be >= 1, got {time_steps}")
    if attention is not None and join is not JoinMode.OR:
        raise BuildError(
            f"SynA attention requires the OR join, got {join.value}")
    topology = BlockTopology.OR_SEW if join is JoinMode.OR else BlockTopology.SEW
    rng = np.random.default_rng(seed)
    nodes: list[Module] = []
    channels = in_channels
    seen_conv = False
    pooled = False
    head_done = False
    counts = {"conv": 0, "bn": 0, "lif": 0, "maxpool": 0, "adaptive_ap": 0,
              "gate": 0, "block": 0}

    def bump(kind: str) -> int:
        counts[kind] += 1
        return counts[kind]

    for tok in tokens:
        off = f" (token at byte offset {tok.offset})"
        if head_done:
            raise BuildError(f"no tokens may follow the FC head{off}")
        if pooled and tok.kind != "fc":
            raise BuildError(f"only FC may follow AP{off}")
        if tok.kind == "conv":
            out, k, s, p = tok.args
            name = "encoder" if not seen_conv else f"conv{bump('conv')}"
            nodes.append(ConvLayer(name, channels, out, k, s, p, rng=rng,
                                   dtype=dtype, is_encoder=not seen_conv))
            channels = out
            seen_conv = True
        elif tok.kind == "bn":
            if not seen_conv:
                raise BuildError(f"BN before any convolution{off}")
            nodes.append(BatchNormLayer(f"bn{bump('bn')}", channels, dtype=dtype))
        elif tok.kind == "lif":
            nodes.append(LIFLayer(f"lif{bump('lif')}", lif))
        elif tok.kind == "maxpool":
            k, s, p = tok.args
            nodes.append(MaxPoolLayer(f"maxpool{bump('maxpool')}", k, s, p))
        elif tok.kind == "adaptive_ap":
            nodes.append(AdaptiveAvgPoolLayer(
                f"adaptive_ap{bump('adaptive_ap')}", tok.args[0]))
        elif tok.kind == "ap":
            if not seen_conv:
                raise BuildError(f"AP before any convolution{off}")
            nodes.append(GlobalAvgPoolLayer("ap"))
            pooled = True
        elif tok.kind == "fc":
            if not pooled:
                raise BuildError(f"FC requires a preceding AP{off}")
            nodes.append(DenseLayer("fc", channels, tok.args[0], rng=rng, dtype=dtype))
            head_done = True
        elif tok.kind in ("ma", "ia"):
            if attention is None:
                raise BuildError(f"standalone {tok.kind.upper()} token requires "
                                 f"an attention plan{off}")
            if not seen_conv:
                raise BuildError(f"{tok.kind.upper()} before any convolution{off}")
            role = tok.kind.upper()
            nodes.append(make_attention(attention, role, f"gate{bump('gate')}",
                                        channels, time_steps, lif, rng=rng,
                                        dtype=dtype))
        elif tok.kind == "block":
            if not seen_conv:
                raise BuildError(f"residual block before any convolution{off}")
            out = tok.args[0]
            nodes.append(build_block(
                topology, channels, out, 2, join, attention, lif, time_steps,
                rng=rng, dtype=dtype, name=f"block{bump('block')}"))
            channels = out
        else:
            raise BuildError(f"unhandled token kind {tok.kind!r}{off}")
    if not head_done:
        raise BuildError("architecture must end in an FC head")
    rendered = render_arch(tokens)
    return Network(nodes, arch_string=rendered, join_mode=join,
                   attention=attention, lif_cfg=lif, time_steps=time_steps,
                   in_channels=in_channels, class_count=tokens[-1].args[0],
                   seed=seed, dtype=dtype)


def encode_static(images, time_steps: int) -> np.ndarray:
    """Replicate a static image batch along a new leading time axis."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ShapeError(f"encode_static expects [N, C, H, W], got {images.shape}")
    if time_steps < 1:
        raise ShapeError(f"time_steps must be >= 1, got {time_steps}")
    return np.repeat(images[None], time_steps, axis=0)


def frames_to_input(frames) -> np.ndarray:
    """[N, T, C, H, W] framed events -> [T, N, C, H, W] network input."""
    frames = np.asarray(frames)
    if frames.ndim != 5:
        raise ShapeError(f"framed events must be [N, T, C, H, W], got {frames.shape}")
    return np.ascontiguousarray(frames.transpose(1, 0, 2, 3, 4))
