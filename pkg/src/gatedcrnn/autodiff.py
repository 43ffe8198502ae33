"""Minimal dense tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to input gradients. Calling
``Tensor.backward`` walks the graph once in reverse topological order and
accumulates (sums) gradients, so shared subexpressions are handled.

Arrays are numpy float64 throughout. Layout for image-like data is
channels-last: ``(N, T, F, C)`` with an optional missing batch axis.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64
BCE_CLIP = 1e-7

_GRAD_ENABLED = True
_DEBUG = False
_POOL_REMAINDER_WARNED = False


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TrainingError(RuntimeError):
    """Raised when optimisation hits a non-finite value."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every forward output for non-finite values while active."""
    global _DEBUG
    prev = _DEBUG
    _DEBUG = enabled
    try:
        yield
    finally:
        _DEBUG = prev


class Tensor:
    """A node in the autodiff graph.

    ``data`` is never mutated in place by ops; the optimizer swaps in a new
    array for leaf parameters between graphs.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every node after its inputs."""
    order, seen = [], set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op '{op}'")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None
    return _make(out, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    return _make(out, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


elementwise_mul = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError:
        raise DimensionError(f"cannot divide shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), "div", backward)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _make(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows, unlike 1 / (1 + exp(-z))
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ------------------------------------------------------------------ reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), "sum", backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_over_time(x: Tensor) -> Tensor:
    """Average a ``(..., T, C)`` track over its time axis."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"mean_over_time expects (..., T, C), got {x.shape}")
    return mean(x, axis=-2)


# ------------------------------------------------------------------- reshaping

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, "concat", lambda g: tuple(np.split(g, splits, axis=axis)))


def split_last(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along the last axis into consecutive pieces of the given sizes."""
    x = as_tensor(x)
    if np.sum(sizes) != x.shape[-1]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover last axis of {x.shape}")
    pieces, start = [], 0
    for size in sizes:
        sl = (Ellipsis, slice(start, start + size))

        def backward(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        pieces.append(_make(x.data[sl], (x,), "slice", backward))
        start += size
    return pieces


# ---------------------------------------------------------------- linear maps

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes when ``b`` is 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(out, (a, b), "matmul", backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` over the last axis."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if b.shape != (w.shape[-1],):
        raise DimensionError(f"bias shape {b.shape} does not match weight {w.shape}")
    return add(matmul(x, w), b)


def softmax_over_classes(x: Tensor) -> Tensor:
    """Softmax along the last (class) axis, independently for each frame."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _make(out, (x,), "softmax",
                 lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


# ------------------------------------------------------------ convolution etc.

def _as_batched(x: Tensor, what: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"{what} expects (T, F, C) or (N, T, F, C), got {x.shape}")
    return x, False


def conv2d(x: Tensor, filters: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 2-D cross-correlation (no kernel flip) plus bias.

    ``x`` is ``(T, F, Cin)`` or ``(N, T, F, Cin)``; ``filters`` is
    ``(k, k, Cin, Cout)`` with odd ``k``; ``bias`` is ``(Cout,)``.
    """
    x, filters, bias = as_tensor(x), as_tensor(filters), as_tensor(bias)
    x, squeeze = _as_batched(x, "conv2d")
    if filters.ndim != 4 or filters.shape[0] != filters.shape[1] or filters.shape[0] % 2 == 0:
        raise DimensionError(f"filters must be (k, k, Cin, Cout) with odd k, got {filters.shape}")
    k, _, cin, cout = filters.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs filters {filters.shape}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({cout},)")
    n, t, f, _ = x.shape
    p = k // 2
    xpad = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    # (N, T, F, Cin, k, k) view -> (N*T*F, k*k*Cin) patch matrix ordered like the filters
    cols = (np.lib.stride_tricks.sliding_window_view(xpad, (k, k), axis=(1, 2))
            .transpose(0, 1, 2, 4, 5, 3)
            .reshape(-1, k * k * cin))
    w2 = filters.data.reshape(k * k * cin, cout)
    out = (cols @ w2).reshape(n, t, f, cout) + bias.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(filters.shape)
        gcols = (g2 @ w2.T).reshape(n, t, f, k, k, cin)
        gx = np.zeros_like(xpad)
        for i in range(k):
            for j in range(k):
                gx[:, i:i + t, j:j + f, :] += gcols[:, :, :, i, j, :]
        return gx[:, p:p + t, p:p + f, :], gw, g2.sum(axis=0)

    y = _make(out, (x, filters, bias), "conv2d", backward)
    return reshape(y, y.shape[1:]) if squeeze else y


def max_pool2d(x: Tensor, pt: int, pf: int) -> Tensor:
    """Non-overlapping max pooling over the (T, F) axes.

    A trailing remainder that does not fill a window is dropped.
    """
    global _POOL_REMAINDER_WARNED
    x = as_tensor(x)
    x, squeeze = _as_batched(x, "max_pool2d")
    n, t, f, c = x.shape
    if t < pt or f < pf:
        raise DimensionError(f"pool window ({pt}, {pf}) larger than input {x.shape[1:3]}")
    to, fo = t // pt, f // pf
    if (t % pt or f % pf) and not _POOL_REMAINDER_WARNED:
        logger.warning("max_pool2d: dropping remainder of %s under window (%d, %d)",
                       x.shape[1:3], pt, pf)
        _POOL_REMAINDER_WARNED = True
    windows = (x.data[:, :to * pt, :fo * pf, :]
               .reshape(n, to, pt, fo, pf, c)
               .transpose(0, 1, 3, 5, 2, 4)
               .reshape(n, to, fo, c, pt * pf))
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = (gw.reshape(n, to, fo, c, pt, pf)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(n, to * pt, fo * pf, c))
        gx = np.zeros_like(x.data)
        gx[:, :to * pt, :fo * pf, :] = gw
        return (gx,)

    y = _make(out, (x,), "max_pool2d", backward)
    return reshape(y, y.shape[1:]) if squeeze else y


# ----------------------------------------------------------------------- GRU

def gru_sequence(x: Tensor, w_in: Tensor, w_rec: Tensor, bias: Tensor,
                 reverse: bool = False) -> Tensor:
    """Run a GRU over ``x`` of shape ``(N, T, D)`` from a zero state.

    Gate blocks along the last axis of ``w_in`` (D, 3H), ``w_rec`` (H, 3H)
    and ``bias`` (3H,) are ordered update, reset, candidate::

        z = sigmoid(x Wz + h Uz + bz)
        r = sigmoid(x Wr + h Ur + br)
        n = tanh(x Wn + (r * h) Un + bn)
        h' = (1 - z) * h + z * n

    With ``reverse`` the sequence is consumed right to left; outputs stay
    aligned with input time indices. Back-propagation through time is
    hand-written and stored as a single graph node.
    """
    x, w_in, w_rec, bias = map(as_tensor, (x, w_in, w_rec, bias))
    if x.ndim != 3:
        raise DimensionError(f"gru_sequence expects (N, T, D), got {x.shape}")
    n, t_len, d = x.shape
    h_size = w_rec.shape[0]
    if w_in.shape != (d, 3 * h_size) or w_rec.shape != (h_size, 3 * h_size) \
            or bias.shape != (3 * h_size,):
        raise DimensionError(
            f"GRU weight shapes {w_in.shape}, {w_rec.shape}, {bias.shape} "
            f"inconsistent with input {x.shape}")
    H = h_size
    a = x.data @ w_in.data + bias.data
    U = w_rec.data
    steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
    hs = np.zeros((n, t_len, H), dtype=DTYPE)
    cache = {}
    h = np.zeros((n, H), dtype=DTYPE)
    for t in steps:
        hu = h @ U[:, :2 * H]
        z = _sigmoid(a[:, t, :H] + hu[:, :H])
        r = _sigmoid(a[:, t, H:2 * H] + hu[:, H:])
        rh = r * h
        cand = np.tanh(a[:, t, 2 * H:] + rh @ U[:, 2 * H:])
        cache[t] = (h, z, r, rh, cand)
        h = (1.0 - z) * h + z * cand
        hs[:, t] = h

    def backward(g):
        da = np.empty_like(a)
        dU = np.zeros_like(U)
        dh_next = np.zeros((n, H), dtype=DTYPE)
        for t in reversed(list(steps)):
            h_prev, z, r, rh, cand = cache[t]
            dh = g[:, t] + dh_next
            dcand = dh * z
            dz = dh * (cand - h_prev)
            dh_prev = dh * (1.0 - z)
            dpn = dcand * (1.0 - cand * cand)
            drh = dpn @ U[:, 2 * H:].T
            dU[:, 2 * H:] += rh.T @ dpn
            dr = drh * h_prev
            dh_prev += drh * r
            dpz = dz * z * (1.0 - z)
            dpr = dr * r * (1.0 - r)
            dzr = np.concatenate([dpz, dpr], axis=1)
            dh_prev += dzr @ U[:, :2 * H].T
            dU[:, :2 * H] += h_prev.T @ dzr
            da[:, t, :2 * H] = dzr
            da[:, t, 2 * H:] = dpn
            dh_next = dh_prev
        da2 = da.reshape(-1, 3 * H)
        return da @ w_in.data.T, x.data.reshape(-1, d).T @ da2, dU, da2.sum(axis=0)

    return _make(hs, (x, w_in, w_rec, bias), "gru", backward)


# ----------------------------------------------------------------------- loss

def bce_loss(pred: Tensor, target) -> Tensor:
    """Binary cross-entropy summed over classes, averaged over the batch.

    Predictions are clipped to ``[1e-7, 1 - 1e-7]`` before the logs; the
    clipped entries receive zero gradient.
    """
    pred = as_tensor(pred)
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if tgt.shape != pred.shape:
        raise DimensionError(f"bce_loss shape mismatch: pred {pred.shape} vs target {tgt.shape}")
    if not np.all((tgt == 0.0) | (tgt == 1.0)):
        raise ValueError("bce_loss targets must be 0 or 1")
    n = pred.shape[0] if pred.ndim > 1 else 1
    o = np.clip(pred.data, BCE_CLIP, 1.0 - BCE_CLIP)
    loss = -np.sum(tgt * np.log(o) + (1.0 - tgt) * np.log(1.0 - o)) / n
    inside = (pred.data >= BCE_CLIP) & (pred.data <= 1.0 - BCE_CLIP)

    def backward(g):
        d = (-tgt / o + (1.0 - tgt) / (1.0 - o)) / n
        return (g * d * inside,)

    return _make(np.asarray(loss), (pred,), "bce", backward)


# ---------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Parameters without an entry in ``grads`` are treated as having zero
    gradient. Each updated parameter receives a fresh data array.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Thin stateful wrapper pairing a parameter dict with an AdamState."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)
