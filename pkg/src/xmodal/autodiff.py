"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tensor` wraps a C-contiguous float64 array. Operations record
their inputs and a backward rule on the output node; :func:`backward`
replays the recorded sequence in reverse creation order, accumulating
gradients. Forward values are cached on the nodes and reused by the
backward rules.

Everything is 64-bit and single-threaded, and reductions run in a fixed
order, so results are bit-reproducible. :func:`grad_check` verifies any
scalar function of a :class:`ParamStore` against central finite
differences.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator

import numpy as np

from . import kernels
from .errors import DegenerateVectorError, DimensionError, EvaluationError

_seq_counter = 0
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus the bookkeeping for reverse-mode gradients."""

    __slots__ = ("data", "needs_grad", "_parents", "_bwd", "_seq")

    def __init__(self, data, needs_grad: bool = False):
        global _seq_counter
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.needs_grad = needs_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None
        _seq_counter += 1
        self._seq = _seq_counter

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, needs_grad={self.needs_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def _node(data, parents, bwd) -> Tensor:
    """Wrap an op result, recording the backward rule when grads are on."""
    if _grad_enabled and any(p.needs_grad for p in parents):
        t = Tensor(data, needs_grad=True)
        t._parents = tuple(parents)
        t._bwd = bwd
        return t
    return Tensor(data)


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(node) for every recorded node reachable from loss.

    Returns a mapping from ``id(tensor)`` to the gradient array; read it
    through :func:`grad_of`. ``loss`` must be a scalar.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar, got shape {loss.shape}")
    nodes = []
    seen = {id(loss)}
    stack = [loss]
    while stack:
        t = stack.pop()
        nodes.append(t)
        for p in t._parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned = {id(loss)}
    for t in nodes:
        g = grads.get(id(t))
        if g is None or t._bwd is None:
            continue
        for p, pg in zip(t._parents, t._bwd(g)):
            if pg is None or not p.needs_grad:
                continue
            key = id(p)
            acc = grads.get(key)
            if acc is None:
                grads[key] = pg
            else:
                if key not in owned:
                    acc = acc.copy()
                    grads[key] = acc
                    owned.add(key)
                np.add(acc, pg, out=acc)
    return grads


def grad_of(grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
    """Gradient of a tensor from a :func:`backward` result (zeros if unused)."""
    g = grads.get(id(t))
    return np.zeros_like(t.data) if g is None else g


# ---------------------------------------------------------------------------
# primitive operations


def _2d(a: np.ndarray, as_row: bool) -> np.ndarray:
    if a.ndim == 2:
        return a
    return a.reshape(1, -1) if as_row else a.reshape(-1, 1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 1-d operands behave as in ``np.matmul``."""
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise DimensionError(f"matmul supports 1-d/2-d, got {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    a2 = _2d(a.data, as_row=True)
    b2 = _2d(b.data, as_row=False)
    out2 = kernels.mm_nn(a2, b2)
    out_shape = a.shape[:-1] + b.shape[1:]
    out = out2.reshape(out_shape)
    need_a, need_b = a.needs_grad, b.needs_grad

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(a2.shape[0], b2.shape[1]))
        ga = kernels.mm_nt(g2, b2).reshape(a.shape) if need_a else None
        gb = kernels.mm_tn(a2, g2).reshape(b.shape) if need_b else None
        return ga, gb

    return _node(out, (a, b), bwd)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T`` for 2-d operands sharing their trailing extent."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul_t needs 2-d operands, got {a.shape}, {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"matmul_t trailing extents differ: {a.shape} vs {b.shape}")
    out = kernels.mm_nt(a.data, b.data)
    need_a, need_b = a.needs_grad, b.needs_grad

    def bwd(g):
        g = np.ascontiguousarray(g)
        ga = kernels.mm_nn(g, b.data) if need_a else None
        gb = kernels.mm_tn(g, a.data) if need_b else None
        return ga, gb

    return _node(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-d bias broadcast over 2-d rows."""
    if a.shape == b.shape:
        def bwd(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def bwd(g):
            return g, g.sum(axis=0)
    else:
        raise DimensionError(f"add shapes incompatible: {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {a.shape} vs {b.shape}")

    def bwd(g):
        return g, -g

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")

    def bwd(g):
        return g * b.data, g * a.data

    return _node(a.data * b.data, (a, b), bwd)


def affine(t: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * t + shift`` with python-scalar coefficients."""

    def bwd(g):
        return (g * scale,)

    return _node(scale * t.data + shift, (t,), bwd)


def tanh(t: Tensor) -> Tensor:
    out = np.tanh(t.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _node(out, (t,), bwd)


def sigmoid(t: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    x = t.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _node(out, (t,), bwd)


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0

    def bwd(g):
        return (g * mask,)

    return _node(np.where(mask, t.data, 0.0), (t,), bwd)


def sum_all(t: Tensor) -> Tensor:
    def bwd(g):
        return (np.full_like(t.data, g.item()),)

    return _node(np.asarray(t.data.sum()), (t,), bwd)


def softmax(v: Tensor) -> Tensor:
    """Exp-normalization of a 1-d score vector onto the probability simplex.

    Max-subtraction keeps exp in range; the shifted maximum contributes
    exp(0) = 1 to the denominator, so division by zero cannot occur.
    """
    if v.data.ndim != 1 or v.size == 0:
        raise DimensionError(f"softmax needs a nonempty 1-d tensor, got shape {v.shape}")
    e = np.exp(v.data - v.data.max())
    out = e / e.sum()

    def bwd(g):
        return (out * (g - float(g @ out)),)

    return _node(out, (v,), bwd)


def l2_normalize(v: Tensor) -> Tensor:
    """v / ||v||, rejecting vectors with (numerically) zero norm."""
    if v.data.ndim != 1:
        raise DimensionError(f"l2_normalize needs a 1-d tensor, got shape {v.shape}")
    r = float(np.linalg.norm(v.data))
    if r < np.finfo(np.float64).tiny:
        raise DegenerateVectorError("cannot normalize a zero vector")
    out = v.data / r

    def bwd(g):
        return ((g - out * float(g @ out)) / r,)

    return _node(out, (v,), bwd)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the angle between two 1-d tensors, in [-1, 1]."""
    if u.shape != v.shape or u.data.ndim != 1:
        raise DimensionError(f"cosine needs matching 1-d tensors: {u.shape} vs {v.shape}")
    ru = float(np.linalg.norm(u.data))
    rv = float(np.linalg.norm(v.data))
    tiny = np.finfo(np.float64).tiny
    if ru < tiny or rv < tiny:
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    c = float(u.data @ v.data) / (ru * rv)
    # Rounding can push |c| a few ulps past 1; clamp the value (the
    # backward rule is unaffected away from the clamp).
    c_clamped = min(1.0, max(-1.0, c))

    def bwd(g):
        gs = g.item()
        gu = gs * (v.data / (ru * rv) - (c / (ru * ru)) * u.data)
        gv = gs * (u.data / (ru * rv) - (c / (rv * rv)) * v.data)
        return gu, gv

    return _node(np.asarray(c_clamped), (u, v), bwd)


# ---------------------------------------------------------------------------
# parameter store and LSTM cell

LSTM_PARAM_NAMES = (
    "wx_i", "wh_i", "b_i",
    "wx_f", "wh_f", "b_f",
    "wx_o", "wh_o", "b_o",
    "wx_g", "wh_g", "b_g",
)


class ParamStore:
    """Named trainable tensors; iteration is always lexicographic."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.needs_grad = True
        self._tensors[name] = tensor
        return tensor

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._tensors[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())


def lstm_step(x: Tensor, h: Tensor, c: Tensor, params: ParamStore,
              prefix: str = "") -> tuple[Tensor, Tensor]:
    """One step of a standard LSTM cell (input/forget/output gates, tanh
    candidate). Gate parameters are looked up as ``prefix + name`` for the
    names in :data:`LSTM_PARAM_NAMES`.
    """
    def gate(tag):
        pre = add(add(matmul(params[prefix + "wx_" + tag], x),
                      matmul(params[prefix + "wh_" + tag], h)),
                  params[prefix + "b_" + tag])
        return pre

    i = sigmoid(gate("i"))
    f = sigmoid(gate("f"))
    o = sigmoid(gate("o"))
    g = tanh(gate("g"))
    c2 = add(mul(f, c), mul(i, g))
    h2 = mul(o, tanh(c2))
    return h2, c2


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f: Callable[[ParamStore], Tensor], params: ParamStore,
               h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the store to a scalar tensor. The error for each parameter
    element is |analytic - fd| / max(1, |fd|); the maximum over all
    elements of all parameters is returned.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    loss = f(params)
    base = loss.item()
    if not math.isfinite(base):
        raise EvaluationError(f"function is not finite at the base point: {base}")
    grads = backward(loss)

    def probe() -> float:
        with no_grad():
            val = f(params).item()
        if not math.isfinite(val):
            raise EvaluationError("function became non-finite during perturbation")
        return val

    worst = 0.0
    for _, tensor in params.items():
        analytic = grad_of(grads, tensor)
        flat = tensor.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = probe()
            flat[idx] = orig - h
            down = probe()
            flat[idx] = orig
            fd = (up - down) / (2.0 * h)
            rel = abs(aflat[idx] - fd) / max(1.0, abs(fd))
            if rel > worst:
                worst = rel
    return worst
