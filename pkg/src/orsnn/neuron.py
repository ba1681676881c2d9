"""Leaky integrate-and-fire dynamics with surrogate-gradient spikes.

The iterative update per time step, with membrane trace H carrying state
between steps and U the pre-spike potential:

    U[t] = H[t-1] + (1/tau) * (I[t-1] - (H[t-1] - u_reset))
    S[t] = step(U[t] - u_threshold)        # 1 when U >= threshold
    H[t] = U[t] * (1 - S[t])               # hard reset to zero where fired

The step function fires exactly at threshold (step(0) = 1). Its backward
uses the arc-tangent surrogate; a smooth twin replaces the step with the
surrogate's primitive in the forward pass too, so whole networks become
finite-difference checkable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, accumulate_grad, assert_finite, make_node


@dataclass(frozen=True)
class LIFConfig:
    """Neuron constants. Defaults follow the standard deep-SNN setting."""

    tau: float = 2.0
    u_threshold: float = 1.0
    u_reset: float = 0.0
    surrogate_alpha: float = 2.0
    reset_mode: str = "hard"
    detach_reset: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.u_threshold <= self.u_reset:
            raise ValueError(
                f"u_threshold ({self.u_threshold}) must exceed u_reset ({self.u_reset})")
        if self.reset_mode != "hard":
            raise ValueError(f"only hard reset is supported, got {self.reset_mode!r}")
        if self.surrogate_alpha <= 0:
            raise ValueError(f"surrogate_alpha must be positive, got {self.surrogate_alpha}")


def surrogate_grad(v: np.ndarray, alpha: float) -> np.ndarray:
    """d(step)/dv stand-in: alpha / (2 * (1 + (pi*alpha*v/2)^2))."""
    half = np.pi * alpha * v / 2.0
    return alpha / (2.0 * (1.0 + half * half))


def spike_fn(v: Tensor, alpha: float = 2.0) -> Tensor:
    """Heaviside step with step(0) = 1; arc-tangent surrogate backward."""
    out_data = (v.data >= 0).astype(v.data.dtype)

    def bwd(g):
        accumulate_grad(v, g * surrogate_grad(v.data, alpha).astype(g.dtype, copy=False))

    return make_node(out_data, (v,), bwd)


def smooth_spike_fn(v: Tensor, alpha: float = 2.0) -> Tensor:
    """Surrogate primitive arctan(pi*alpha*v/2)/pi + 1/2 used in both passes."""
    half = np.pi * alpha * v.data / 2.0
    out_data = (np.arctan(half) / np.pi + 0.5).astype(v.data.dtype)

    def bwd(g):
        accumulate_grad(v, g * surrogate_grad(v.data, alpha).astype(g.dtype, copy=False))

    return make_node(out_data, (v,), bwd)


@dataclass
class LIFState:
    """Membrane trace between steps. H is None until the first step binds it."""

    membrane: Tensor | None = None
    steps: int = 0

    def reset(self) -> None:
        self.membrane = None
        self.steps = 0


def lif_step(state: LIFState, current: Tensor, cfg: LIFConfig,
             smooth: bool = False) -> Tensor:
    """Advance one time step; returns the spike tensor and mutates state.

    The reset multiplier (1 - S) is detached from the graph when
    cfg.detach_reset is set, so gradients flow only through the membrane.
    """
    assert_finite(current.data, "neuron input current")
    if state.membrane is not None and state.membrane.shape != current.shape:
        raise ShapeError(
            f"neuron state shape {state.membrane.shape} does not match input {current.shape}")
    if state.membrane is None:
        h_prev = Tensor(np.full(current.shape, cfg.u_reset, dtype=current.dtype))
    else:
        h_prev = state.membrane
    u = h_prev + (current - (h_prev - cfg.u_reset)) * (1.0 / cfg.tau)
    v = u - cfg.u_threshold
    fire = smooth_spike_fn if smooth else spike_fn
    s = fire(v, cfg.surrogate_alpha)
    gate = s.detach() if cfg.detach_reset else s
    state.membrane = u * (1.0 - gate)
    state.steps += 1
    return s


@dataclass
class LIFTrace:
    """Per-step record of one neuron sequence (used by reference tests)."""

    potentials: list[float] = field(default_factory=list)
    spikes: list[float] = field(default_factory=list)
    membranes: list[float] = field(default_factory=list)


def lif_reference_trace(currents, cfg: LIFConfig) -> LIFTrace:
    """Scalar pure-python rollout of the same recurrence, for cross-checks."""
    trace = LIFTrace()
    h = cfg.u_reset
    for i in currents:
        u = h + (i - (h - cfg.u_reset)) / cfg.tau
        s = 1.0 if u >= cfg.u_threshold else 0.0
        h = u * (1.0 - s)
        trace.potentials.append(u)
        trace.spikes.append(s)
        trace.membranes.append(h)
    return trace
