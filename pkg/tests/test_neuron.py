"""Leaky integrate-and-fire dynamics: frozen hand-traced sequences, the
threshold-equality firing rule, surrogate gradient values, reset handling,
and gradient checks through the smooth twin.
"""

import numpy as np
import pytest

import orsnn.tensor as tz
from orsnn.errors import NumericError, ShapeError
from orsnn.neuron import (LIFConfig, LIFState, lif_reference_trace, lif_step,
                          smooth_spike_fn, spike_fn, surrogate_grad)
from orsnn.tensor import Tensor, backward, clear_tape

from conftest import gradcheck, margin_random

# Hand-computed 10-step rollout with tau=2, threshold=1, hard reset to 0:
#   U[t] = (H[t-1] + I[t]) / 2,  S[t] = [U >= 1],  H[t] = U * (1 - S)
HAND_CURRENTS = [0.5, 0.5, 0.5, 2.0, 0.0, 1.5, 0.2, 0.9, 3.0, 0.0]
HAND_POTENTIALS = [0.25, 0.375, 0.4375, 1.21875, 0.0, 0.75, 0.475, 0.6875,
                   1.84375, 0.0]
HAND_SPIKES = [0, 0, 0, 1, 0, 0, 0, 0, 1, 0]
HAND_MEMBRANES = [0.25, 0.375, 0.4375, 0.0, 0.0, 0.75, 0.475, 0.6875, 0.0, 0.0]


def rollout(currents, cfg, smooth=False):
    state = LIFState()
    spikes, membranes = [], []
    for i in currents:
        s = lif_step(state, Tensor(np.array([float(i)], dtype=np.float64)), cfg,
                     smooth=smooth)
        spikes.append(float(s.data[0]))
        membranes.append(float(state.membrane.data[0]))
    return spikes, membranes


def test_hand_traced_sequence_matches_engine():
    cfg = LIFConfig(tau=2.0, u_threshold=1.0, u_reset=0.0)
    spikes, membranes = rollout(HAND_CURRENTS, cfg)
    assert np.max(np.abs(np.array(spikes) - HAND_SPIKES)) <= 1e-12
    assert np.max(np.abs(np.array(membranes) - HAND_MEMBRANES)) <= 1e-12


def test_reference_trace_agrees_with_hand_values():
    cfg = LIFConfig()
    trace = lif_reference_trace(HAND_CURRENTS, cfg)
    assert np.allclose(trace.potentials, HAND_POTENTIALS, atol=1e-12)
    assert np.allclose(trace.spikes, HAND_SPIKES, atol=1e-12)
    assert np.allclose(trace.membranes, HAND_MEMBRANES, atol=1e-12)


def test_fires_exactly_at_threshold():
    # (0 + 2) / 2 reaches the threshold exactly; equality must fire
    cfg = LIFConfig()
    spikes, membranes = rollout([2.0], cfg)
    assert spikes == [1.0]
    assert membranes == [0.0]


def test_subthreshold_accumulation_and_decay():
    cfg = LIFConfig()
    spikes, membranes = rollout([0.5, 0.5, 0.0, 0.0], cfg)
    assert spikes == [0.0, 0.0, 0.0, 0.0]
    assert np.allclose(membranes, [0.25, 0.375, 0.1875, 0.09375])


def test_nonzero_reset_level():
    cfg = LIFConfig(u_reset=0.5, u_threshold=1.0)
    state = LIFState()
    s = lif_step(state, Tensor(np.array([2.0])), cfg)
    # U = 0.5 + (2 - 0) / 2 = 1.5 -> fires, membrane hard-resets to 0
    assert s.data[0] == 1.0
    assert state.membrane.data[0] == 0.0


def test_step_function_signs():
    v = Tensor(np.array([0.2, -0.2, 0.0]))
    out = spike_fn(v)
    assert np.array_equal(out.data, [1.0, 0.0, 1.0])


def test_surrogate_value_at_zero():
    assert surrogate_grad(np.array(0.0), alpha=2.0) == pytest.approx(1.0)
    assert surrogate_grad(np.array(0.0), alpha=4.0) == pytest.approx(2.0)


def test_surrogate_matches_smooth_primitive_slope():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(32)
    gradcheck(lambda a: tz.reduce_mean(smooth_spike_fn(a, 2.0), (0,)), v)


def test_spike_backward_uses_surrogate():
    v = Tensor(np.array([0.3, -0.4]), requires_grad=True)
    out = spike_fn(v, alpha=2.0)
    backward(out, seed=np.ones(2))
    assert np.allclose(v.grad, surrogate_grad(v.data, 2.0))


def test_state_shape_mismatch_raises():
    cfg = LIFConfig()
    state = LIFState()
    lif_step(state, Tensor(np.zeros(3)), cfg)
    with pytest.raises(ShapeError):
        lif_step(state, Tensor(np.zeros(4)), cfg)


def test_nonfinite_current_raises():
    with pytest.raises(NumericError):
        lif_step(LIFState(), Tensor(np.array([np.inf])), LIFConfig())


def test_reset_clears_membrane():
    state = LIFState()
    lif_step(state, Tensor(np.ones(2)), LIFConfig())
    assert state.membrane is not None and state.steps == 1
    state.reset()
    assert state.membrane is None and state.steps == 0


def test_config_validation():
    with pytest.raises(ValueError):
        LIFConfig(tau=0.0)
    with pytest.raises(ValueError):
        LIFConfig(u_threshold=0.0, u_reset=0.0)
    with pytest.raises(ValueError):
        LIFConfig(reset_mode="soft")
    with pytest.raises(ValueError):
        LIFConfig(surrogate_alpha=-1.0)


def test_detach_reset_changes_gradient():
    def run(detach):
        clear_tape()
        cfg = LIFConfig(detach_reset=detach)
        x = Tensor(np.array([0.9, 1.7, 0.4]), requires_grad=True)
        state = LIFState()
        total = None
        for _ in range(3):
            s = lif_step(state, x, cfg)
            total = s if total is None else total + s
        out = tz.reduce_mean(total, (0,))
        backward(out)
        return x.grad.copy()

    g_detached = run(True)
    g_attached = run(False)
    assert not np.allclose(g_detached, g_attached)


@pytest.mark.parametrize("seed", range(4))
def test_smooth_twin_two_layer_net_gradient(seed):
    """Conv -> smooth LIF -> dense -> smooth LIF over 3 steps, checked
    against finite differences end to end. The reset gate stays in the
    graph so autodiff covers every smooth-forward dependency."""
    rng = np.random.default_rng(seed)
    cfg = LIFConfig(detach_reset=False)
    x = margin_random(rng, (3, 1, 1, 4, 4), scale=1.5)
    w1 = rng.standard_normal((2, 1, 3, 3)) * 0.7
    w2 = rng.standard_normal((2, 8)) * 0.7
    b2 = rng.standard_normal(2) * 0.1

    def fn(xt, w1t, w2t, b2t):
        s1, s2 = LIFState(), LIFState()
        outs = []
        for step in range(x.shape[0]):
            frame = tz.index_first(xt, step)
            c = tz.conv2d(frame, w1t, 1, 0)
            sp1 = lif_step(s1, c, cfg, smooth=True)
            flat = tz.reshape(sp1, (1, 8))
            d = tz.dense(flat, w2t, b2t)
            outs.append(lif_step(s2, d, cfg, smooth=True))
        return tz.reduce_mean(tz.stack_first(outs), (0, 1, 2))

    gradcheck(fn, x, w1, w2, b2)
