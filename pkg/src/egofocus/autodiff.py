"""Tape-based reverse-mode autodiff over small dense numpy arrays.

Operations record themselves on the innermost active :class:`GradTape`.
Outside a tape they evaluate eagerly with no graph bookkeeping, which is
what evaluation code relies on for speed.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

_ACTIVE_TAPES: list["GradTape"] = []


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # arithmetic ----------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Records differentiable operations while active.

    Use as a context manager; :meth:`watch` turns a parameter mapping into
    leaf tensors and :meth:`gradient` runs the backward sweep::

        with GradTape() as tape:
            p = tape.watch(params)
            loss = model_loss(p)
        grads = tape.gradient(loss)
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self.watched: dict[str, Tensor] = {}

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        leaves = {}
        for name, value in params.items():
            t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
            leaves[name] = t
            self.watched[name] = t
        return leaves

    def record(self, out: Tensor, parents: tuple, backward_fn: Callable) -> None:
        self.nodes.append((out, parents, backward_fn))

    def gradient(self, loss: Tensor) -> dict[str, np.ndarray]:
        return backward(self, loss)


def backward(tape: GradTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep over the tape; returns ``name -> gradient`` for watched leaves.

    Parameters never touched by the forward pass report zeros.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ValueError(f"loss must be a scalar tensor, got shape {shape}")
    for out, parents, _ in tape.nodes:
        out.grad = None
        for p in parents:
            p.grad = None
    for leaf in tape.watched.values():
        leaf.grad = None
    loss.grad = np.ones_like(loss.data)
    for out, parents, backward_fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        parent_grads = backward_fn(out.grad)
        for parent, g in zip(parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g
    result = {}
    for name, leaf in tape.watched.items():
        result[name] = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
    return result


def _make(data, parents: tuple, backward_fn: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs and bool(_ACTIVE_TAPES))
    if out.requires_grad:
        _ACTIVE_TAPES[-1].record(out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # Sum out leading axes and size-1 axes that were broadcast.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def tabs(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,))


# linear algebra and shape ---------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        if ad.ndim == 1:
            ga = g @ bd.T
            gb = np.outer(ad, g)
        else:
            ga = g @ bd.T
            gb = ad.T @ g
        return ga, gb

    return _make(ad @ bd, (a, b), grad_fn)


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    x = as_tensor(x)
    old = x.shape

    def grad_fn(g):
        full = np.zeros(old)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), grad_fn)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(data, tuple(parts), grad_fn)


def stack(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.stack([p.data for p in parts], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _make(data, tuple(parts), grad_fn)


def tsum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(x.data.sum(axis=axis), (x,), grad_fn)


def tmean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax; raises on empty input."""
    x = as_tensor(x)
    if x.data.size == 0:
        raise ValueError("empty input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), grad_fn)


def min_over(x: Tensor, axis: int = 0) -> Tensor:
    """Minimum along ``axis``; the gradient routes to the first argmin."""
    x = as_tensor(x)
    idx = np.argmin(x.data, axis=axis)
    picked = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)

    def grad_fn(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(np.squeeze(picked, axis=axis), (x,), grad_fn)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(as_tensor(x).data.copy())


# verification oracle ---------------------------------------------------------

def finite_diff_check(f: Callable[[Mapping[str, np.ndarray]], Tensor | float],
                      params: Mapping[str, np.ndarray],
                      eps: float = 1e-5,
                      max_entries: int | None = None,
                      seed: int = 0) -> float:
    """Compare taped gradients of ``f`` with central differences.

    ``f`` maps a parameter mapping (numpy arrays or leaf tensors) to a
    scalar. Returns max over checked entries of
    ``|analytic - numeric| / max(1, |analytic|)``. With ``max_entries`` set,
    at most that many randomly chosen entries of each parameter are probed.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    with GradTape() as tape:
        leaves = tape.watch(base)
        loss = as_tensor(f(leaves))
    if not np.all(np.isfinite(loss.data)):
        raise ValueError("f returned a non-finite value")
    analytic = tape.gradient(loss)

    def evaluate(p):
        v = f(p)
        v = float(v.data) if isinstance(v, Tensor) else float(v)
        if not np.isfinite(v):
            raise ValueError("f returned a non-finite value")
        return v

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(base):
        arr = base[name]
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        for j in flat_idx:
            pos = np.unravel_index(j, arr.shape)
            orig = arr[pos]
            arr[pos] = orig + eps
            up = evaluate(base)
            arr[pos] = orig - eps
            down = evaluate(base)
            arr[pos] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic[name][pos]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
