"""Small dense-tensor engine with reverse-mode gradients.

Only the operations the fusion and observation networks need are provided.
Tensors are plain numpy arrays wrapped in :class:`Node` objects; every op
records a closure that maps the output gradient to parent gradients.
Image tensors use the (batch, channels, height, width) layout.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ARCCOS_CLAMP = 1e-7
SN_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Node:
    """A value in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; their
    ``grad`` accumulates across backward calls until cleared.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.parents: Tuple[Node, ...] = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.value) if requires_grad and not self.parents else None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the few ops used in losses
    def __add__(self, other):
        return add(self, as_node(other))

    def __sub__(self, other):
        return sub(self, as_node(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, as_node(other))

    __rmul__ = __mul__


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(np.asarray(x, dtype=np.float64))


def constant(x, name=None) -> Node:
    return Node(np.asarray(x), name=name)


def parameter(x, name=None) -> Node:
    return Node(np.array(x, copy=True), requires_grad=True, name=name)


def _make(value, parents: Sequence[Node], backward_fn, name=None) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, parents, backward_fn if needs else None, requires_grad=needs, name=name)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    out = a.value + b.value

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), back)


def sub(a: Node, b: Node) -> Node:
    out = a.value - b.value

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), back)


def mul(a: Node, b: Node) -> Node:
    out = a.value * b.value

    def back(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(out, (a, b), back)


def scale(a: Node, factor: float) -> Node:
    return _make(a.value * factor, (a,), lambda g: (g * factor,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def absolute(a: Node) -> Node:
    sign = np.sign(a.value)
    return _make(np.abs(a.value), (a,), lambda g: (g * sign,))


def total(a: Node) -> Node:
    """Sum of all elements, returned as a 0-d node."""
    shape = a.shape
    return _make(np.sum(a.value), (a,), lambda g: (np.full(shape, g, dtype=a.value.dtype),))


def mean(a: Node) -> Node:
    n = a.value.size
    shape = a.shape
    return _make(np.sum(a.value) / n, (a,), lambda g: (np.full(shape, g / n, dtype=a.value.dtype),))


def abs_sum(a: Node) -> Node:
    """L1 norm (sum of absolute values)."""
    return total(absolute(a))


def abs_mean(a: Node) -> Node:
    return mean(absolute(a))


def arccos_clamped(a: Node, bound: float = ARCCOS_CLAMP) -> Node:
    """arccos of the input clamped to [-1 + bound, 1 - bound]."""
    clipped = np.clip(a.value, -1.0 + bound, 1.0 - bound)
    inside = (a.value > -1.0 + bound) & (a.value < 1.0 - bound)

    def back(g):
        return (np.where(inside, -g / np.sqrt(1.0 - clipped * clipped), 0.0),)

    return _make(np.arccos(clipped), (a,), back)


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Node) -> Node:
    return _make(a.value.T, (a,), lambda g: (g.T,))


def concat_channels(a: Node, b: Node) -> Node:
    """Concatenate two (b, c, h, w) tensors along the channel axis."""
    if a.value.ndim != 4 or b.value.ndim != 4:
        raise ShapeError(f"concat expects 4-D tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat: batch/spatial extents differ: {a.shape} vs {b.shape}")
    split = a.shape[1]
    out = np.concatenate([a.value, b.value], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :split], g[:, split:]))


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def back(g):
        return g @ b.value.T, a.value.T @ g

    return _make(out, (a, b), back)


def softmax(a: Node, axis: int = -1) -> Node:
    """Softmax along ``axis`` with max subtraction."""
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (a,), back)


def pixel_cosine(a: Node, b: Node, eps: float = 1e-9) -> Node:
    """Cosine between spectra along the channel axis of (1, C, h, w) tensors.

    Returns an (h, w) node holding <a, b> / (|a| |b| + eps) per pixel.
    """
    if a.shape != b.shape:
        raise ShapeError(f"pixel_cosine: shapes differ {a.shape} vs {b.shape}")
    av, bv = a.value[0], b.value[0]
    dot = np.sum(av * bv, axis=0)
    na = np.sqrt(np.sum(av * av, axis=0))
    nb = np.sqrt(np.sum(bv * bv, axis=0))
    denom = na * nb + eps
    out = dot / denom

    def back(g):
        # d(denom)/da = nb * a / na ; guarded where na == 0
        ra = np.divide(nb, na, out=np.zeros_like(na), where=na > 0)
        rb = np.divide(na, nb, out=np.zeros_like(nb), where=nb > 0)
        k = g / denom
        q = g * dot / (denom * denom)
        ga = k * bv - q * ra * av
        gb = k * av - q * rb * bv
        return ga[None], gb[None]

    return _make(out, (a, b), back)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def conv2d(x: Node, kernel: Node, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation of a (b, ci, h, w) input with a (co, ci, kh, kw) kernel."""
    xv, kv = x.value, kernel.value
    if xv.ndim != 4 or kv.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {xv.shape} and {kv.shape}")
    b, ci, h, w = xv.shape
    co, kci, kh, kw = kv.shape
    if kci != ci:
        raise ShapeError(
            f"conv2d channel mismatch: input has c_in={ci}, kernel expects c_in={kci} "
            f"(input {xv.shape}, kernel {kv.shape})"
        )
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, kv, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def back(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                # (ci, b, ho, wo) contribution of kernel tap (i, j)
                contrib = np.tensordot(kv[:, :, i, j], g, axes=([0], [1]))
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib.transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return _make(np.ascontiguousarray(out), (x, kernel), back)


def take2d(x: Node, rows: np.ndarray, cols: np.ndarray) -> Node:
    """Gather along the last two axes: ``x[..., rows, :][..., cols]``.

    Used for symmetric padding and decimation; repeated indices accumulate
    in the backward pass.
    """
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = x.value[..., rows, :][..., cols]
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (..., rows[:, None], cols[None, :]), g)
        return (gx,)

    return _make(out, (x,), back)


def symmetric_pad_index(n: int, before: int, after: int) -> np.ndarray:
    return np.pad(np.arange(n), (before, after), mode="symmetric")


def bilinear_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """1-D interpolation matrix, half-pixel centres (align_corners=False)."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def upsample_bilinear(x: Node, factor: int) -> Node:
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"upsampling factor must be a positive integer, got {factor!r}")
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    mh = bilinear_matrix(h, factor, x.value.dtype)
    mw = bilinear_matrix(w, factor, x.value.dtype)
    out = mh @ x.value @ mw.T
    return _make(out, (x,), lambda g: (mh.T @ g @ mw,))


# ---------------------------------------------------------------------------
# spectral normalization
# ---------------------------------------------------------------------------


def _unit(x: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > 0 else fallback


def power_iteration(w2: np.ndarray, u: np.ndarray, iters: int):
    """Run ``iters`` power-iteration steps on ``w2`` starting from ``u``.

    Returns (sigma, u, v) with sigma = u^T w2 v.
    """
    u = _unit(u, u)
    v = np.zeros(w2.shape[1], dtype=w2.dtype)
    for _ in range(iters):
        v = _unit(w2.T @ u, v)
        u = _unit(w2 @ v, u)
    return float(u @ w2 @ v), u, v


def spectral_normalize(
    weight: Node,
    lam: float,
    u_state: np.ndarray,
    iters: int = 1,
    update: bool = True,
    detach_scale: bool = False,
    eps: float = SN_EPS,
) -> Node:
    """Return ``lam * W / sigma(W)`` with sigma from power iteration.

    ``u_state`` is advanced in place when ``update`` is true. The backward
    pass treats sigma = u^T W v with u, v held fixed; ``detach_scale``
    drops the sigma term entirely.
    """
    if not 0.0 < lam <= 1.0:
        raise ValueError(f"lambda must lie in (0, 1], got {lam}")
    wv = weight.value
    w2 = wv.reshape(wv.shape[0], -1)
    if u_state.shape != (w2.shape[0],):
        raise ShapeError(f"u_state has shape {u_state.shape}, expected ({w2.shape[0]},)")
    sigma, u, v = power_iteration(w2, u_state, iters)
    if update:
        u_state[...] = u
    denom = sigma + eps
    out = lam * wv / denom

    def back(g):
        gw = lam * g / denom
        if not detach_scale:
            gw = gw - (lam * np.sum(g * wv) / (denom * denom)) * np.outer(u, v).reshape(wv.shape)
        return (gw,)

    return _make(out, (weight,), back)


# ---------------------------------------------------------------------------
# backward pass and optimizer
# ---------------------------------------------------------------------------


def topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable parameter's ``grad``."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = node.grad + g if node.grad is not None else g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


class ParamStore:
    """Named trainable parameters with Adam moments and power-iteration vectors."""

    def __init__(self):
        self.params: Dict[str, Node] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}
        self.u: Dict[str, np.ndarray] = {}
        self.steps = 0

    def add(self, name: str, value: np.ndarray) -> Node:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        node = parameter(value, name=name)
        self.params[name] = node
        self.m[name] = np.zeros_like(node.value)
        self.v[name] = np.zeros_like(node.value)
        self.t[name] = 0
        return node

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> List[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for node in self.params.values():
            node.grad = np.zeros_like(node.value)

    def count(self) -> int:
        return sum(p.value.size for p in self.params.values())


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in store.params.values())))
    if norm > max_norm:
        factor = max_norm / norm
        for p in store.params.values():
            p.grad = p.grad * factor
    return norm


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Optional[Iterable[str]] = None,
) -> None:
    """One bias-corrected Adam update, then clear gradients.

    ``names`` restricts the update to a subset; the others keep their
    gradients cleared and moments untouched.
    """
    selected = store.names() if names is None else list(names)
    for name in selected:
        p = store.params[name]
        g = p.grad
        t = store.t[name] + 1
        store.t[name] = t
        m = store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    store.steps += 1
    store.zero_grad()


def finite_difference(f: Callable[[], float], array: np.ndarray, index, step: float = 1e-5) -> float:
    """Central difference of ``f`` w.r.t. ``array[index]`` (mutated and restored)."""
    old = array[index]
    array[index] = old + step
    hi = f()
    array[index] = old - step
    lo = f()
    array[index] = old
    return (hi - lo) / (2.0 * step)


def relative_error(g: float, g_hat: float, floor: float = 1e-8) -> float:
    return abs(g - g_hat) / max(abs(g), abs(g_hat), floor)


def is_finite(x: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(x)))

