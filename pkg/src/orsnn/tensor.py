"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional gradient accumulator. Every
differentiable op appends its output to the active ComputationTape in
execution order; backward() replays the tape in reverse, restricted to
nodes that can reach the requested root, accumulating (never overwriting)
gradients. Training runs in float32 by default; tests build float64
tensors for finite-difference comparisons.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32


class ComputationTape:
    """Execution-ordered record of differentiable op outputs."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = ComputationTape()
_GRAD_ENABLED = True


def get_tape() -> ComputationTape:
    return _TAPE


def clear_tape() -> None:
    _TAPE.clear()


class no_grad:
    """Context manager that disables recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense array with optional gradient and autograd book-keeping."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Operator sugar. Scalars become constant tensors of the partner dtype.
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other, self))


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Create an op output, recording it on the tape when grads are live.

    backward_fn receives the output gradient and is responsible for
    accumulating into each parent (use accumulate_grad).
    """
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _TAPE.nodes.append(out)
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(root: Tensor, seed=None) -> None:
    """Accumulate d(root)/d(ancestor) into every reachable tensor's .grad."""
    if seed is None:
        if root.data.size != 1:
            raise GraphError(
                f"backward on non-scalar shape {root.shape} requires an explicit seed")
        seed = np.ones_like(root.data)
    seed = np.asarray(seed, dtype=root.data.dtype)
    if seed.shape != root.data.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match root shape {root.shape}")
    if not root.requires_grad:
        return
    reachable: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in reachable:
            continue
        reachable.add(id(node))
        stack.extend(node.parents)
    accumulate_grad(root, seed)
    for node in reversed(_TAPE.nodes):
        if id(node) not in reachable or node.backward_fn is None:
            continue
        if node.grad is None:
            continue
        node.backward_fn(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        accumulate_grad(a, _unbroadcast(g, a.shape))
        accumulate_grad(b, _unbroadcast(g, b.shape))

    return make_node(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    out_data = a.data - b.data

    def bwd(g):
        accumulate_grad(a, _unbroadcast(g, a.shape))
        accumulate_grad(b, _unbroadcast(-g, b.shape))

    return make_node(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        accumulate_grad(a, _unbroadcast(g * b.data, a.shape))
        accumulate_grad(b, _unbroadcast(g * a.data, b.shape))

    return make_node(out_data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        accumulate_grad(a, -g)

    return make_node(-a.data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        accumulate_grad(a, g * mask)

    return make_node(a.data * mask, (a,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        accumulate_grad(a, g @ b.data.T)
        accumulate_grad(b, a.data.T @ g)

    return make_node(out_data, (a, b), bwd)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully-connected layer: y = x @ w.T + b with w of shape [Fout, Fin]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"dense expects 2-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"dense feature extents differ: input {x.shape} vs weight {w.shape}")
    out_data = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"dense bias shape {b.shape} does not match weight {w.shape}")
        out_data = out_data + b.data

    def bwd(g):
        accumulate_grad(x, g @ w.data)
        accumulate_grad(w, g.T @ x.data)
        if b is not None:
            accumulate_grad(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out_data, parents, bwd)


# ---------------------------------------------------------------------------
# Convolution and pooling


def _conv_cols(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    batch, cin = xp.shape[0], xp.shape[1]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch * out_h * out_w, cin * k * k)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with square kernel and symmetric zero padding.

    Output extent is floor((H + 2p - k) / s) + 1; an extent below 1 raises.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    batch, cin, h, wid = x.shape
    cout, cin_k, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernel must be square, got {w.shape}")
    if cin != cin_k:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if kh < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"conv2d invalid geometry: k={kh} stride={stride} padding={padding}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (wid + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d output extent below 1 for input {x.shape}, k={kh}, "
            f"stride={stride}, padding={padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _conv_cols(xp, kh, stride, out_h, out_w)
    w2 = w.data.reshape(cout, cin * kh * kw)
    out_data = (cols @ w2.T).reshape(batch, out_h, out_w, cout).transpose(0, 3, 1, 2)
    del cols  # recomputed in backward; keeps the tape memory-lean

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if w.requires_grad:
            xp_b = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
            cols_b = _conv_cols(xp_b, kh, stride, out_h, out_w)
            accumulate_grad(w, (g2.T @ cols_b).reshape(w.shape))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(batch, out_h, out_w, cin, kh, kw)
            dxp = np.zeros((batch, cin, h + 2 * padding, wid + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wid]
            accumulate_grad(x, dxp)

    return make_node(np.ascontiguousarray(out_data), (x, w), bwd)


def _pool_geometry(h: int, wid: int, window: int, stride: int, padding: int):
    hp, wp = h + 2 * padding, wid + 2 * padding
    if window > hp or window > wp:
        raise ShapeError(
            f"pool window {window} larger than padded input ({hp}x{wp})")
    if window < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"pool invalid geometry: window={window} stride={stride} padding={padding}")
    return (hp - window) // stride + 1, (wp - window) // stride + 1


def max_pool2d(x: Tensor, window: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling; ties resolve to the first (lowest linear index) element."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-D input, got {x.shape}")
    stride = window if stride is None else stride
    batch, ch, h, wid = x.shape
    out_h, out_w = _pool_geometry(h, wid, window, stride, padding)
    fill = np.array(-np.inf, dtype=x.data.dtype)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=fill)
    win = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(batch, ch, out_h, out_w, window * window)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        dxp = np.zeros_like(xp)
        wi, wj = arg // window, arg % window
        bi, ci, oi, oj = np.indices(arg.shape, sparse=True)
        np.add.at(dxp, (bi, ci, oi * stride + wi, oj * stride + wj), g)
        if padding:
            dxp = dxp[:, :, padding:padding + h, padding:padding + wid]
        accumulate_grad(x, dxp)

    return make_node(np.ascontiguousarray(out_data), (x,), bwd)


def avg_pool2d(x: Tensor, window: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Average pooling; padded zeros count toward the divisor (window^2)."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects 4-D input, got {x.shape}")
    stride = window if stride is None else stride
    batch, ch, h, wid = x.shape
    out_h, out_w = _pool_geometry(h, wid, window, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = win.mean(axis=(-2, -1))

    def bwd(g):
        if not x.requires_grad:
            return
        dxp = np.zeros_like(xp)
        share = g / float(window * window)
        for i in range(window):
            for j in range(window):
                dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += share
        if padding:
            dxp = dxp[:, :, padding:padding + h, padding:padding + wid]
        accumulate_grad(x, dxp)

    return make_node(np.ascontiguousarray(out_data), (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C] spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    batch, ch, h, wid = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def bwd(g):
        accumulate_grad(x, np.broadcast_to(g[:, :, None, None] / (h * wid), x.shape))

    return make_node(out_data, (x,), bwd)


def adaptive_avg_pool2d(x: Tensor, out_size: int) -> Tensor:
    """Average-pool to a fixed [out_size, out_size] spatial extent.

    Bin i covers rows floor(i*H/out) .. ceil((i+1)*H/out), the usual
    adaptive convention, so any input extent is accepted.
    """
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d expects 4-D input, got {x.shape}")
    if out_size < 1:
        raise ShapeError(f"adaptive_avg_pool2d output extent must be >= 1, got {out_size}")
    batch, ch, h, wid = x.shape
    if h % out_size == 0 and wid % out_size == 0:
        bh, bw = h // out_size, wid // out_size
        view = x.data.reshape(batch, ch, out_size, bh, out_size, bw)
        out_data = view.mean(axis=(3, 5))

        def bwd_fast(g):
            if not x.requires_grad:
                return
            dx = np.broadcast_to(g[:, :, :, None, :, None] / (bh * bw),
                                 (batch, ch, out_size, bh, out_size, bw))
            accumulate_grad(x, dx.reshape(x.shape))

        return make_node(np.ascontiguousarray(out_data), (x,), bwd_fast)

    bounds_h = [(i * h // out_size, -(-((i + 1) * h) // out_size)) for i in range(out_size)]
    bounds_w = [(j * wid // out_size, -(-((j + 1) * wid) // out_size)) for j in range(out_size)]
    out_data = np.empty((batch, ch, out_size, out_size), dtype=x.data.dtype)
    for i, (h0, h1) in enumerate(bounds_h):
        for j, (w0, w1) in enumerate(bounds_w):
            out_data[:, :, i, j] = x.data[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def bwd(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(bounds_h):
            for j, (w0, w1) in enumerate(bounds_w):
                dx[:, :, h0:h1, w0:w1] += (g[:, :, i, j] /
                                           ((h1 - h0) * (w1 - w0)))[:, :, None, None]
        accumulate_grad(x, dx)

    return make_node(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# Normalization


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization over [B, C, H, W].

    Training mode normalizes with biased batch statistics and updates the
    running buffers in place (unbiased variance, torch convention).
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-D input, got {x.shape}")
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError(
            f"batchnorm2d parameter shapes {gamma.shape}/{beta.shape} do not match C={ch}")
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        accumulate_grad(gamma, (g * xhat).sum(axis=axes))
        accumulate_grad(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        gx = g * gamma.data[None, :, None, None]
        if training:
            mean_gx = gx.mean(axis=axes, keepdims=True)
            mean_gx_xhat = (gx * xhat).mean(axis=axes, keepdims=True)
            dx = (gx - mean_gx - xhat * mean_gx_xhat) * inv_std[None, :, None, None]
        else:
            dx = gx * inv_std[None, :, None, None]
        accumulate_grad(x, dx)

    return make_node(out_data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# Shape and reduction ops


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out_data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None

    def bwd(g):
        accumulate_grad(x, g.reshape(x.shape))

    return make_node(out_data, (x,), bwd)


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for shape {x.shape}")
    inverse = np.argsort(axes)

    def bwd(g):
        accumulate_grad(x, np.ascontiguousarray(g.transpose(inverse)))

    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd)


def index_first(x: Tensor, i: int) -> Tensor:
    """Select step i along axis 0 (used to walk the time axis)."""
    if not 0 <= i < x.shape[0]:
        raise ShapeError(f"index {i} out of range for axis 0 of {x.shape}")

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[i] += g

    return make_node(x.data[i], (x,), bwd)


def stack_first(parts: list[Tensor]) -> Tensor:
    """Stack tensors along a new leading axis (inverse of index_first)."""
    if not parts:
        raise ShapeError("stack_first needs at least one tensor")
    base = parts[0].shape
    for p in parts[1:]:
        if p.shape != base:
            raise ShapeError(f"stack_first shape mismatch: {base} vs {p.shape}")
    out_data = np.stack([p.data for p in parts])

    def bwd(g):
        for t, p in enumerate(parts):
            accumulate_grad(p, g[t])

    return make_node(out_data, tuple(parts), bwd)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base):
            raise ShapeError(f"concat rank mismatch: {parts[0].shape} vs {p.shape}")
        if other[:axis] + other[axis + 1:] != base[:axis] + base[axis + 1:]:
            raise ShapeError(f"concat extents differ off-axis: {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out_data = np.concatenate([p.data for p in parts], axis=axis)

    def bwd(g):
        for idx, p in enumerate(parts):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[idx], offsets[idx + 1])
            accumulate_grad(p, g[tuple(sl)])

    return make_node(out_data, tuple(parts), bwd)


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % ndim for a in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return tuple(sorted(axes))


def reduce_mean(x: Tensor, axes, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out_data = x.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not x.requires_grad:
            return
        gk = g if keepdims else np.expand_dims(g, axes)
        accumulate_grad(x, np.broadcast_to(gk / count, x.shape))

    return make_node(out_data, (x,), bwd)


def reduce_max(x: Tensor, axes, keepdims: bool = False) -> Tensor:
    """Max over axes; gradient routes to the first maximum in row-major order."""
    axes = _norm_axes(axes, x.ndim)
    kept = tuple(a for a in range(x.ndim) if a not in axes)
    perm = kept + axes
    kept_shape = tuple(x.shape[a] for a in kept)
    red = int(np.prod([x.shape[a] for a in axes]))
    flat = x.data.transpose(perm).reshape(-1, red)
    arg = flat.argmax(axis=1)
    rows = np.arange(flat.shape[0])
    out_flat = flat[rows, arg]
    out_data = out_flat.reshape(kept_shape)
    if keepdims:
        out_data = np.expand_dims(out_data, axes)

    def bwd(g):
        if not x.requires_grad:
            return
        gv = g if not keepdims else g.reshape(kept_shape + (1,) * len(axes))
        dflat = np.zeros_like(flat)
        dflat[rows, arg] = gv.reshape(-1)
        full = dflat.reshape(kept_shape + tuple(x.shape[a] for a in axes))
        accumulate_grad(x, np.ascontiguousarray(full.transpose(np.argsort(perm))))

    return make_node(np.ascontiguousarray(out_data), (x,), bwd)


# ---------------------------------------------------------------------------
# Loss


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Fused for numerical stability; backward is (softmax - onehot) / N.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N, K] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ShapeError(f"labels out of range for {k} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    if not np.isfinite(loss):
        raise NumericError("cross-entropy loss is not finite")
    probs = np.exp(logp)

    def bwd(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        accumulate_grad(logits, (float(g) / n) * d)

    return make_node(np.asarray(loss, dtype=logits.data.dtype), (logits,), bwd)


def assert_finite(arr: np.ndarray, context: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in {context}")
