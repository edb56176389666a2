"""Reverse-mode automatic differentiation over a dynamically recorded graph.

Each operation returns a Node holding its value, a zero-initialized
gradient buffer, and backward edges to its parents as (node, closure)
pairs; the closure maps the output gradient to that parent's gradient
contribution. ``backward`` replays the recorded graph in reverse
topological order and accumulates gradients additively across fan-out.

All values are numpy arrays. Ops are dtype-generic: float32 in normal
use, float64 for gradient checking. There is no implicit broadcasting
between nodes; channel-bias broadcasting is its own op.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    GroupDivisibility,
    InvalidAxis,
    NonScalarLoss,
    OddSpatialDim,
    ShapeMismatch,
)

_grad_enabled = True
_flop_counters: list["FlopCounter"] = []


@contextmanager
def no_grad():
    """Disable graph recording within the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class FlopCounter:
    """Accumulates the floating-point cost of ops executed in its scope."""

    def __init__(self):
        self.total = 0


@contextmanager
def flop_scope():
    counter = FlopCounter()
    _flop_counters.append(counter)
    try:
        yield counter
    finally:
        _flop_counters.remove(counter)


def _add_flops(n: int) -> None:
    for c in _flop_counters:
        c.total += int(n)


class Node:
    """A tensor value plus its gradient buffer and backward-edge records."""

    __slots__ = ("value", "_grad", "parents", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self._grad: Optional[np.ndarray] = None  # allocated on first touch
        self.parents: list[tuple["Node", Callable[[np.ndarray], np.ndarray]]] = []
        self.requires_grad = requires_grad

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray):
        self._grad = value

    def accum_grad(self, contrib: np.ndarray) -> None:
        # first contribution may alias another node's grad; never mutate in place
        self._grad = contrib if self._grad is None else self._grad + contrib

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are python floats, arrays must match shapes
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _result(value: np.ndarray, parents) -> Node:
    """Wrap an op result, recording only edges that can receive gradient."""
    live = [(p, fn) for p, fn in parents if p.requires_grad] if _grad_enabled else []
    out = Node(value, requires_grad=bool(live))
    out.parents = live
    return out


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeMismatch(f"operand shapes differ: {a.shape} vs {b.shape}")


def add(a, b) -> Node:
    if not isinstance(b, Node):  # node + scalar
        out_v = a.value + float(b)
        _add_flops(out_v.size)
        return _result(out_v, [(a, lambda g: g)])
    if not isinstance(a, Node):
        return add(b, a)
    _check_same_shape(a.value, b.value)
    _add_flops(a.value.size)
    return _result(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])


def sub(a, b) -> Node:
    if isinstance(a, Node) and not isinstance(b, Node):
        out_v = a.value - float(b)
        _add_flops(out_v.size)
        return _result(out_v, [(a, lambda g: g)])
    if not isinstance(a, Node):  # scalar - node
        out_v = float(a) - b.value
        _add_flops(out_v.size)
        return _result(out_v, [(b, lambda g: -g)])
    _check_same_shape(a.value, b.value)
    _add_flops(a.value.size)
    return _result(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a, b) -> Node:
    if not isinstance(b, Node):
        s = float(b)
        out_v = a.value * s
        _add_flops(out_v.size)
        return _result(out_v, [(a, lambda g: g * s)])
    if not isinstance(a, Node):
        return mul(b, a)
    _check_same_shape(a.value, b.value)
    av, bv = a.value, b.value
    _add_flops(av.size)
    return _result(av * bv, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def div(a, b) -> Node:
    if isinstance(a, Node) and not isinstance(b, Node):
        return mul(a, 1.0 / float(b))
    if not isinstance(a, Node):  # scalar / node
        bv = b.value
        out_v = float(a) / bv
        _add_flops(out_v.size)
        return _result(out_v, [(b, lambda g: -g * float(a) / (bv * bv))])
    _check_same_shape(a.value, b.value)
    av, bv = a.value, b.value
    _add_flops(av.size)
    return _result(
        av / bv,
        [(a, lambda g: g / bv), (b, lambda g: -g * av / (bv * bv))],
    )


def relu(x: Node) -> Node:
    mask = x.value > 0
    _add_flops(x.value.size)
    return _result(x.value * mask, [(x, lambda g: g * mask)])


def sigmoid(x: Node) -> Node:
    v = x.value
    s = np.empty_like(v)
    pos = v >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    s[~pos] = ev / (1.0 + ev)
    _add_flops(4 * v.size)
    return _result(s, [(x, lambda g: g * s * (1.0 - s))])


def reshape(x: Node, new_shape: Sequence[int]) -> Node:
    new_shape = tuple(int(d) for d in new_shape)
    if int(np.prod(new_shape)) != x.value.size:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {new_shape}")
    old_shape = x.value.shape
    return _result(
        np.ascontiguousarray(x.value).reshape(new_shape),
        [(x, lambda g: g.reshape(old_shape))],
    )


def concat_channels(xs: Sequence[Node]) -> Node:
    """Concatenate 4D feature maps along the channel axis."""
    base = xs[0].value.shape
    for x in xs:
        v = x.value
        if v.ndim != 4 or v.shape[0] != base[0] or v.shape[2:] != base[2:]:
            raise ShapeMismatch(f"concat needs matching (B, ., H, W): {[x.shape for x in xs]}")
    out_v = np.concatenate([x.value for x in xs], axis=1)
    parents = []
    offset = 0
    for x in xs:
        c = x.value.shape[1]
        lo, hi = offset, offset + c

        def slice_grad(g, lo=lo, hi=hi):
            return g[:, lo:hi]

        parents.append((x, slice_grad))
        offset = hi
    return _result(out_v, parents)


def sum_all(x: Node) -> Node:
    shape = x.value.shape
    dtype = x.value.dtype
    _add_flops(x.value.size)
    return _result(
        x.value.sum(dtype=dtype).reshape(1),
        [(x, lambda g: np.full(shape, g.reshape(-1)[0], dtype=dtype))],
    )


def mean_all(x: Node) -> Node:
    n = x.value.size
    return mul(sum_all(x), 1.0 / n)


def mean_axes(x: Node, axes: Sequence[int], keepdims: bool = True) -> Node:
    """Mean over axes with keepdims; reduced axes become size 1."""
    axes = tuple(sorted(set(int(a) for a in axes)))
    for a in axes:
        if a < 0 or a >= x.value.ndim:
            raise InvalidAxis(f"axis {a} invalid for shape {x.shape}")
    if not axes:
        return _result(x.value.copy(), [(x, lambda g: g)])
    if not keepdims:
        raise NotImplementedError("only keepdims=True is used")
    count = int(np.prod([x.value.shape[a] for a in axes]))
    out_v = x.value.mean(axis=axes, keepdims=True)
    shape = x.value.shape
    _add_flops(x.value.size)
    return _result(
        out_v,
        [(x, lambda g: np.broadcast_to(g / count, shape).astype(g.dtype, copy=True))],
    )


def add_bias(x: Node, b: Node) -> Node:
    """Explicit channel-bias broadcast: (B,C,H,W) + (C,)."""
    if x.value.ndim != 4 or b.value.ndim != 1 or b.value.shape[0] != x.value.shape[1]:
        raise ShapeMismatch(f"bias {b.shape} does not match channels of {x.shape}")
    _add_flops(x.value.size)
    return _result(
        x.value + b.value.reshape(1, -1, 1, 1),
        [(x, lambda g: g), (b, lambda g: g.sum(axis=(0, 2, 3)))],
    )


# -- convolution -------------------------------------------------------------


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:-p, p:-p] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride)
    )
    return np.ascontiguousarray(view)


def _col2im(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    b, c, kh, kw, ho, wo = cols.shape
    xp = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return xp


def _conv_out_size(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    num_h = h + 2 * padding - kh
    num_w = w + 2 * padding - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ShapeMismatch(
            f"conv geometry invalid: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    return num_h // stride + 1, num_w // stride + 1


def _conv_geometry(xv: np.ndarray, wv: np.ndarray, stride: int, padding: int, groups: int):
    b, c_in, h, w = xv.shape
    c_out, c_in_g, kh, kw = wv.shape
    if c_in % groups or c_out % groups:
        raise GroupDivisibility(f"channels ({c_in}->{c_out}) not divisible by groups={groups}")
    if c_in_g != c_in // groups:
        raise ShapeMismatch(f"weight {wv.shape} inconsistent with C_in={c_in}, groups={groups}")
    ho, wo = _conv_out_size(h, w, kh, kw, stride, padding)
    return b, c_in, c_out, c_in_g, kh, kw, ho, wo


def conv2d_raw(
    xv: np.ndarray,
    wv: np.ndarray,
    bv: Optional[np.ndarray],
    stride: int,
    padding: int,
    groups: int,
) -> np.ndarray:
    """Grouped 2D cross-correlation on raw arrays (im2col + matmul)."""
    out, _ = _conv_forward(xv, wv, bv, stride, padding, groups)
    return out


def _conv_forward(xv, wv, bv, stride, padding, groups):
    """Returns (output, grouped column matrix used by the backward pass)."""
    b, c_in, c_out, c_in_g, kh, kw, ho, wo = _conv_geometry(xv, wv, stride, padding, groups)
    if kh == 1 and kw == 1 and padding == 0:
        xs = xv[:, :, ::stride, ::stride] if stride > 1 else xv
        cols_g = np.ascontiguousarray(xs).reshape(b, groups, c_in_g, ho * wo)
    else:
        cols = _im2col(_pad2d(xv, padding), kh, kw, stride, ho, wo)
        cols_g = cols.reshape(b, groups, c_in_g * kh * kw, ho * wo)
    w_g = wv.reshape(groups, c_out // groups, c_in_g * kh * kw)
    out = np.matmul(w_g, cols_g).reshape(b, c_out, ho, wo)
    if bv is not None:
        out += bv.reshape(1, c_out, 1, 1)
    _add_flops(2 * b * ho * wo * c_out * c_in_g * kh * kw + (b * ho * wo * c_out if bv is not None else 0))
    return out, cols_g


def conv2d(
    x: Node,
    w: Node,
    b: Optional[Node] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Node:
    xv, wv = x.value, w.value
    bv = b.value if b is not None else None
    record = _grad_enabled and (
        x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    )
    out_v, cols_g = _conv_forward(xv, wv, bv, stride, padding, groups)
    if not record:
        return Node(out_v)
    batch, c_in, c_out, c_in_g, kh, kw, ho, wo = _conv_geometry(xv, wv, stride, padding, groups)
    hp, wp = xv.shape[2] + 2 * padding, xv.shape[3] + 2 * padding
    point = kh == 1 and kw == 1 and padding == 0

    def grad_x(g):
        g_g = g.reshape(batch, groups, c_out // groups, ho * wo)
        w_g = wv.reshape(groups, c_out // groups, c_in_g * kh * kw)
        dcols = np.matmul(w_g.transpose(0, 2, 1), g_g)
        if point:
            if stride == 1:
                return dcols.reshape(xv.shape)
            dx = np.zeros(xv.shape, dtype=g.dtype)
            dx[:, :, ::stride, ::stride] = dcols.reshape(batch, c_in, ho, wo)
            return dx
        dxp = _col2im(dcols.reshape(batch, c_in, kh, kw, ho, wo), hp, wp, stride)
        if padding:
            return dxp[:, :, padding:-padding, padding:-padding]
        return dxp

    def grad_w(g):
        g_g = g.reshape(batch, groups, c_out // groups, ho * wo)
        dw = np.matmul(g_g, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
        return dw.reshape(wv.shape)

    parents = [(x, grad_x), (w, grad_w)]
    if b is not None:
        parents.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return _result(out_v, parents)


def maxpool2x2(x: Node) -> Node:
    b, c, h, w = x.value.shape
    if h % 2 or w % 2:
        raise OddSpatialDim(f"max-pool needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.value.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)
    out_v = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    _add_flops(3 * b * c * h2 * w2)

    def grad_x(g):
        dwin = np.zeros((b, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        return dwin.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)

    return _result(out_v, [(x, grad_x)])


_interp_cache: dict[tuple[int, int, str], np.ndarray] = {}


def linear_interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Dense 1D bilinear interpolation matrix, half-pixel-centers convention."""
    key = (n_out, n_in, np.dtype(dtype).name)
    cached = _interp_cache.get(key)
    if cached is not None:
        return cached
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        i0c = min(max(i0, 0), n_in - 1)
        i1c = min(max(i0 + 1, 0), n_in - 1)
        m[o, i0c] += 1.0 - frac
        m[o, i1c] += frac
    _interp_cache[key] = m
    return m


def upsample_bilinear_2x(x: Node) -> Node:
    b, c, h, w = x.value.shape
    rm = linear_interp_matrix(2 * h, h, x.value.dtype)
    cm = linear_interp_matrix(2 * w, w, x.value.dtype)
    flat = x.value.reshape(b * c, h, w)
    out_v = np.matmul(np.matmul(rm[None], flat), cm.T[None]).reshape(b, c, 2 * h, 2 * w)
    _add_flops(8 * out_v.size)

    def grad_x(g):
        gflat = g.reshape(b * c, 2 * h, 2 * w)
        return np.matmul(np.matmul(rm.T[None], gflat), cm[None]).reshape(b, c, h, w)

    return _result(out_v, [(x, grad_x)])


def batchnorm2d(
    x: Node,
    gamma: Node,
    beta: Node,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float,
    eps: float,
    training: bool,
) -> Node:
    v = x.value
    b, c, h, w = v.shape
    n = b * h * w
    if training:
        mu = v.mean(axis=(0, 2, 3))
        var = v.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mu = running_mean.astype(v.dtype)
        var = running_var.astype(v.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out_v = gamma.value.reshape(1, c, 1, 1) * xhat + beta.value.reshape(1, c, 1, 1)
    _add_flops(2 * v.size)

    def grad_x(g):
        dxhat = g * gamma.value.reshape(1, c, 1, 1)
        if not training:
            return dxhat * inv_std.reshape(1, c, 1, 1)
        mean_dxhat = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return inv_std.reshape(1, c, 1, 1) * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)

    del n
    return _result(
        out_v,
        [
            (x, grad_x),
            (gamma, lambda g: (g * xhat).sum(axis=(0, 2, 3))),
            (beta, lambda g: g.sum(axis=(0, 2, 3))),
        ],
    )


def bce_with_logits_mean(logits: Node, target: np.ndarray) -> Node:
    """Mean binary cross entropy computed from logits in fused, stable form."""
    z = logits.value
    if z.shape != target.shape:
        raise ShapeMismatch(f"logits {z.shape} vs target {target.shape}")
    loss_elts = np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out_v = np.asarray([loss_elts.sum() / n], dtype=z.dtype)
    _add_flops(6 * n)

    def grad_z(g):
        s = np.empty_like(z)
        pos = z >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        s[~pos] = ez / (1.0 + ez)
        return g.reshape(-1)[0] * (s - target) / n

    return _result(out_v, [(logits, grad_z)])


def softmax_channels(x: Node) -> Node:
    """Softmax over axis 1 (any trailing axes preserved)."""
    v = x.value
    shifted = v - v.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    _add_flops(4 * v.size)

    def grad_x(g):
        return s * (g - (g * s).sum(axis=1, keepdims=True))

    return _result(s, [(x, grad_x)])


def mix_kernels(alpha: Node, bank: Node) -> Node:
    """Per-sample linear mix of a kernel bank.

    alpha: (B, n) coefficients; bank: (n, C_out, C_in, K, K).
    Returns (B*C_out, C_in, K, K), sample b occupying rows [b*C_out, (b+1)*C_out).
    """
    av, kv = alpha.value, bank.value
    if av.ndim != 2 or kv.ndim != 5 or av.shape[1] != kv.shape[0]:
        raise ShapeMismatch(f"alpha {av.shape} incompatible with bank {kv.shape}")
    batch, n = av.shape
    rest = kv.shape[1:]
    kflat = kv.reshape(n, -1)
    mixed = (av @ kflat).reshape(batch * rest[0], *rest[1:])
    _add_flops(2 * batch * kflat.size)

    def grad_alpha(g):
        return g.reshape(batch, -1) @ kflat.T

    def grad_bank(g):
        return (av.T @ g.reshape(batch, -1)).reshape(kv.shape)

    return _result(mixed, [(alpha, grad_alpha), (bank, grad_bank)])


# -- backward pass -----------------------------------------------------------


def topo_order(root: Node) -> list[Node]:
    """The tape: reachable nodes in topological order (inputs first)."""
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into .grad for every reachable node."""
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    order = topo_order(loss)
    loss.accum_grad(np.ones_like(loss.value))
    for node in reversed(order):
        g = node._grad
        if g is None:
            continue
        for parent, grad_fn in node.parents:
            parent.accum_grad(grad_fn(g))


def grad_check(f, x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps one Node to a scalar Node; evaluation runs in float64.
    """
    if not (0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    x64 = np.asarray(x, dtype=np.float64).copy()
    probe = Node(x64.copy(), requires_grad=True)
    out = f(probe)
    if out.value.size != 1:
        raise NonScalarLoss(f"grad_check target must be scalar, got {out.shape}")
    backward(out)
    analytic = probe.grad.copy()

    numeric = np.zeros_like(x64)
    flat = x64.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Node(x64)).item()
            flat[i] = orig - eps
            fm = f(Node(x64)).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * eps)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0
