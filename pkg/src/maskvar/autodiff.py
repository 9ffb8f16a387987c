"""Dense float64 tensors with a dynamic reverse-mode tape.

A :class:`Tensor` wraps a C-contiguous ``float64`` ndarray.  Leaf tensors
(parameters, inputs) carry no history.  Any op whose inputs include a
tensor with ``requires_grad`` set, evaluated while a :class:`Tape` is
active, is appended to that tape together with its backward rule.
``Tape.backward`` then walks the recorded nodes once, in reverse order,
accumulating adjoints into a dictionary owned by the tape.

Only the shapes the transformer actually needs are supported.  Binary ops
require identical shapes, except the bias-add pattern (``(..., n) + (n,)``)
and ``matmul`` with a 2-D right operand.  Anything else raises
:class:`DimensionError`.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear",
    "reshape",
    "transpose",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "layernorm",
    "gelu",
    "embedding_gather",
    "take",
    "add_constant",
    "dropout",
    "tsum",
    "mean",
    "grad_check",
    "LAYERNORM_EPS",
]

LAYERNORM_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite entries in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records primitive ops while active; replays them backwards.

    Use as a context manager.  Tapes are thread-local: a tape activated on one
    thread is invisible to others, so independent forward/backward passes may
    run on separate threads against shared (read-only) parameters.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.grads: dict[int, np.ndarray] = {}
        self._keep: dict[int, Tensor] = {}

    @classmethod
    def current(cls) -> "Tape | None":
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    def __enter__(self):
        if not hasattr(self._local, "stack"):
            self._local.stack = []
        self._local.stack.append(self)
        return self

    def __exit__(self, *exc):
        self._local.stack.pop()
        return False

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> "Tape":
        """Accumulate d(loss)/d(leaf) for every leaf reachable from ``loss``.

        ``seed`` defaults to ones (a scalar loss gives the ordinary gradient).
        Calling ``backward`` twice on the same tape accumulates, so a sum of
        losses can be differentiated term by term.
        """
        if seed is None:
            seed = np.ones_like(loss.data)
        adj: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}
        if loss.backward_fn is None:
            self._accumulate(loss, adj.pop(id(loss)))
            return self
        for node in reversed(self.nodes):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.backward_fn is None:
                    self._accumulate(parent, pg)
                else:
                    key = id(parent)
                    prev = adj.get(key)
                    adj[key] = pg if prev is None else prev + pg
        return self

    def _accumulate(self, leaf: Tensor, g: np.ndarray) -> None:
        key = id(leaf)
        prev = self.grads.get(key)
        self.grads[key] = g.copy() if prev is None else prev + g
        self._keep[key] = leaf

    def grad(self, leaf: Tensor) -> np.ndarray:
        """Adjoint of ``leaf``; zeros if nothing flowed into it."""
        g = self.grads.get(id(leaf))
        return np.zeros_like(leaf.data) if g is None else g

    def has_grad(self, leaf: Tensor) -> bool:
        return id(leaf) in self.grads


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(data: np.ndarray) -> bool:
    # A single reduction: any NaN/Inf entry makes the sum non-finite.
    return bool(np.isfinite(data.sum())) or bool(np.all(np.isfinite(data)))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not _finite(data):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.parents = ()
    out.backward_fn = None
    out.requires_grad = False
    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def _unbroadcast_bias(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]
        return _make(a.data + b.data, (a, b), lambda g: (g, _unbroadcast_bias(g, n)), "add")
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``(m, k) @ (k, n)``, ``(..., m, k) @ (k, n)`` (weight applied to a
    batch) and ``(..., m, k) @ (..., k, n)`` with identical leading dims.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if bd.ndim == 2:
        k, n = bd.shape
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, k)

        def back(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(*lead, k), a2.T @ g2

        return _make((a2 @ bd).reshape(*lead, n), (a, b), back, "matmul")
    if ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")

    def back_batched(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), back_batched, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for a 2-D weight and bias vector, as one tape node."""
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0] or b.shape != (wd.shape[1],):
        raise DimensionError(f"linear: {x.shape} @ {w.shape} + {b.shape}")
    k, n = wd.shape
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, k)
    out = x2 @ wd
    out += b.data

    def back(g):
        g2 = g.reshape(-1, n)
        return (g2 @ wd.T).reshape(*lead, k), x2.T @ g2, g2.sum(axis=0)

    return _make(out.reshape(*lead, n), (x, w, b), back, "linear")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "transpose",
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for rank {x.data.ndim}")
    if axis in (-1, x.data.ndim - 1):
        rows = x.data.reshape(-1, x.shape[-1])
        y = _kernels.softmax_rows(rows).reshape(x.shape)

        def back(g):
            return (_kernels.softmax_rows_bwd(np.ascontiguousarray(g).reshape(rows.shape), y.reshape(rows.shape)).reshape(y.shape),)

        return _make(y, (x,), back, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


def _log_softmax_data(xd: np.ndarray, axis: int) -> np.ndarray:
    z = xd - xd.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _log_softmax_data(x.data, axis)

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), back, "log_softmax")


def cross_entropy(logits: Tensor, target) -> Tensor:
    """``-log softmax(logits)[target]``.

    A 1-D ``logits`` with an integer target gives a scalar; a 2-D ``logits``
    with one target per row gives a vector of per-row losses.
    """
    ld = logits.data
    if ld.ndim == 1:
        rows = ld[None, :]
        tgt = np.array([int(target)])
    elif ld.ndim == 2:
        rows = ld
        tgt = np.asarray(target, dtype=np.int64).reshape(-1)
        if tgt.shape[0] != rows.shape[0]:
            raise DimensionError("cross_entropy: one target per row required")
    else:
        raise DimensionError("cross_entropy expects rank-1 or rank-2 logits")
    vocab = rows.shape[1]
    if np.any(tgt < 0) or np.any(tgt >= vocab):
        raise IndexError(f"cross_entropy: target out of range for vocabulary of {vocab}")
    logp = _log_softmax_data(rows, -1)
    idx = np.arange(rows.shape[0])
    losses = -logp[idx, tgt]

    def back(g):
        g = np.asarray(g).reshape(-1)
        d = np.exp(logp)
        d[idx, tgt] -= 1.0
        d *= g[:, None]
        return (d.reshape(ld.shape),)

    out = losses.reshape(()) if ld.ndim == 1 else losses
    return _make(out, (logits,), back, "cross_entropy")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``."""
    xd = x.data
    n = xd.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layernorm: affine params must have shape ({n},)")
    y, xhat, inv = _kernels.layernorm_fwd(xd.reshape(-1, n), gamma.data, beta.data, eps)
    gd = gamma.data

    def back(g):
        dx, dgamma, dbeta = _kernels.layernorm_bwd(np.ascontiguousarray(g).reshape(-1, n), xhat, inv, gd)
        return dx.reshape(xd.shape), dgamma, dbeta

    return _make(y.reshape(xd.shape), (x, gamma, beta), back, "layernorm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    y, d = _kernels.gelu_fwd(x.data.reshape(-1))
    d = d.reshape(x.shape)
    return _make(y.reshape(x.shape), (x,), lambda g: (g * d,), "gelu")


def embedding_gather(table: Tensor, idx) -> Tensor:
    """Rows of a 2-D ``table`` picked by an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    td = table.data
    if td.ndim != 2:
        raise DimensionError("embedding_gather needs a 2-D table")
    if idx.size and (idx.min() < 0 or idx.max() >= td.shape[0]):
        raise IndexError("embedding_gather: index out of range")

    def back(g):
        out = np.zeros_like(td)
        rows = np.ascontiguousarray(g).reshape(-1, td.shape[1])
        return (_kernels.scatter_add_rows(out, idx.reshape(-1), rows),)

    return _make(td[idx], (table,), back, "embedding_gather")


def take(x: Tensor, flat_idx) -> Tensor:
    """Elements of ``x`` (viewed flat) at ``flat_idx``."""
    flat_idx = np.asarray(flat_idx, dtype=np.int64)
    shape = x.shape

    def back(g):
        out = np.zeros(x.data.size)
        np.add.at(out, flat_idx.reshape(-1), np.asarray(g).reshape(-1))
        return (out.reshape(shape),)

    return _make(x.data.reshape(-1)[flat_idx], (x,), back, "take")


def add_constant(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant array broadcastable to ``x`` (attention masks)."""
    c = np.asarray(c, dtype=np.float64)
    out = x.data + c
    if out.shape != x.shape:
        raise DimensionError(f"add_constant: {c.shape} does not broadcast onto {x.shape}")
    return _make(out, (x,), lambda g: (g,), "add_constant")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def grad_check(
    f: Callable,
    params: Tensor | Iterable[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between taped gradients and central differences.

    ``f(params)`` must return a scalar :class:`Tensor`.  Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.  With ``max_coords`` only a
    random subset of coordinates (drawn from ``rng``) is perturbed.
    """
    plist = [params] if isinstance(params, Tensor) else list(params)
    with Tape() as tape:
        y = f(params)
    tape.backward(y)
    coords = [(i, j) for i, p in enumerate(plist) for j in range(p.data.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    worst = 0.0
    for i, j in coords:
        flat = plist[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = float(f(params).data)
        flat[j] = orig - h
        fm = float(f(params).data)
        flat[j] = orig
        numeric = (fp - fm) / (2.0 * h)
        analytic = float(tape.grad(plist[i]).reshape(-1)[j])
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst
