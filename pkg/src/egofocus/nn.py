"""Parameters, layers and optimizer built on :mod:`egofocus.autodiff`."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT_VERSION = 1


class ParamSet(dict):
    """Ordered ``name -> float64 array`` mapping with the seed that made it."""

    def __init__(self, *args, seed: int | None = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.seed = seed

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.items()}, seed=self.seed)

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self.items()}, seed=self.seed)

    def num_values(self) -> int:
        return int(sum(v.size for v in self.values()))


class ParamBuilder:
    """Allocates uniformly initialised layers from one seeded generator.

    Weights draw from U(-g/sqrt(fan_in), g/sqrt(fan_in)) with gain ``g``
    (default sqrt(3), i.e. unit-variance preserving), biases from
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)). The draw order is the allocation
    order, so the same architecture and seed give bit-identical parameters.
    """

    def __init__(self, seed: int, weight_gain: float = math.sqrt(3.0)):
        self.seed = seed
        self.weight_gain = weight_gain
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.params = ParamSet(seed=seed)

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = value

    def linear(self, name: str, fan_in: int, fan_out: int) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        w_bound = self.weight_gain * bound
        self._add(f"{name}.weight", self.rng.uniform(-w_bound, w_bound, size=(fan_in, fan_out)))
        self._add(f"{name}.bias", self.rng.uniform(-bound, bound, size=(fan_out,)))

    def mlp(self, name: str, sizes: list[int]) -> None:
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.linear(f"{name}.{i}", fi, fo)

    def vector(self, name: str, size: int, scale: float) -> None:
        self._add(name, self.rng.uniform(-scale, scale, size=(size,)))


def mlp_layer_count(params: Mapping, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.weight" in params:
        n += 1
    if n == 0:
        raise KeyError(f"no layers under prefix {prefix!r}")
    return n


def mlp_apply(params: Mapping, x, prefix: str = "mlp", activation=ad.tanh) -> Tensor:
    """Apply the MLP stored under ``prefix``; last layer is linear.

    Works on a single vector or on a batch of row vectors.
    """
    h = ad.as_tensor(x)
    n = mlp_layer_count(params, prefix)
    for i in range(n):
        w = params[f"{prefix}.{i}.weight"]
        b = params[f"{prefix}.{i}.bias"]
        fan_in = w.shape[0]
        if h.shape[-1] != fan_in:
            raise ValueError(
                f"dimension mismatch at layer {prefix}.{i}: expected last dim {fan_in}, "
                f"got {h.shape[-1]}")
        h = ad.matmul(h, w) + b
        if i < n - 1 and activation is not None:
            h = activation(h)
    return h


def softmax(v) -> np.ndarray:
    """Numerically stable softmax of a plain vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty input")
    e = np.exp(v - v.max())
    return e / e.sum()


def mhca(query, keys, values, params: Mapping, heads: int, prefix: str = "mhca") -> Tensor:
    """Multi-head cross-attention of one query vector over ``N`` key/value rows.

    Parameters are the linear maps ``{prefix}.q``, ``.k``, ``.v`` and the
    output map ``.o``. Each head attends with scaled dot products; head
    outputs are concatenated and passed through the output map.
    """
    keys = ad.as_tensor(keys)
    values = ad.as_tensor(values)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("no agents to attend over")
    if values.shape[0] != keys.shape[0]:
        raise ValueError(f"keys have {keys.shape[0]} rows but values have {values.shape[0]}")

    q = ad.matmul(query, params[f"{prefix}.q.weight"]) + params[f"{prefix}.q.bias"]
    k = ad.matmul(keys, params[f"{prefix}.k.weight"]) + params[f"{prefix}.k.bias"]
    v = ad.matmul(values, params[f"{prefix}.v.weight"]) + params[f"{prefix}.v.bias"]
    dim = q.shape[-1]
    if dim % heads:
        raise ValueError(f"attention dim {dim} not divisible by {heads} heads")
    dh = dim // heads
    n = keys.shape[0]
    qh = ad.reshape(q, (heads, 1, dh))
    kh = ad.reshape(ad.transpose(k), (heads, dh, n))
    logits = _batched_matmul(qh, kh)  # (heads, 1, n)
    weights = ad.softmax(ad.mul(logits, 1.0 / math.sqrt(dh)), axis=-1)
    vh = _heads_first(v, n, heads, dh)  # (heads, n, dh)
    out = ad.reshape(_batched_matmul(weights, vh), (dim,))
    return ad.matmul(out, params[f"{prefix}.o.weight"]) + params[f"{prefix}.o.bias"]


def _heads_first(x: Tensor, n: int, heads: int, dh: int) -> Tensor:
    x = ad.as_tensor(x)
    data = x.data.reshape(n, heads, dh).transpose(1, 0, 2)
    return ad._make(data, (x,), lambda g: (g.transpose(1, 0, 2).reshape(n, heads * dh),))


def _batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    ad_, bd = a.data, b.data
    return ad._make(
        ad_ @ bd, (a, b),
        lambda g: (g @ bd.transpose(0, 2, 1), ad_.transpose(0, 2, 1) @ g))


# optimizer -----------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: OptimState) -> ParamSet:
    """One bias-corrected Adam update; returns new params, mutates ``state``."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"missing gradient for parameters: {missing}")
    state.step += 1
    t = state.step
    out = ParamSet(seed=params.seed)
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# checkpoints -----------------------------------------------------------------

def params_to_json(params: ParamSet, config: dict | None = None) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "seed": params.seed,
        "params": {
            name: {"shape": list(v.shape), "values": [repr(float(x)) for x in v.ravel()]}
            for name, v in params.items()
        },
        "config": config or {},
    }


def params_from_json(doc: dict) -> tuple[ParamSet, dict]:
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    params = ParamSet(seed=doc.get("seed"))
    for name, entry in doc["params"].items():
        values = np.array([float(x) for x in entry["values"]], dtype=np.float64)
        params[name] = values.reshape(entry["shape"])
    return params, doc.get("config", {})


def dumps_checkpoint(params: ParamSet, config: dict | None = None) -> str:
    return json.dumps(params_to_json(params, config), sort_keys=True, indent=1)


def save_checkpoint(path, params: ParamSet, config: dict | None = None) -> str:
    """Write the checkpoint and return its sha256 hex digest."""
    text = dumps_checkpoint(params, config)
    with open(path, "w") as fh:
        fh.write(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    with open(path) as fh:
        return params_from_json(json.load(fh))


def checkpoint_hash(params: ParamSet, config: dict | None = None) -> str:
    return hashlib.sha256(dumps_checkpoint(params, config).encode()).hexdigest()
