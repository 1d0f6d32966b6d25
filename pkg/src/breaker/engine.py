"""Dense float64 layer primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects (float64, C order). A parameter
set is an insertion-ordered ``dict`` of name -> array; a gradient map is a
``dict`` with a subset of those keys (missing key == zero gradient).

Every primitive comes as a ``*_forward`` / ``*_backward`` pair. The model
module composes them; there is no tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

ParamSet = Dict[str, np.ndarray]
GradMap = Dict[str, np.ndarray]


class EngineError(ValueError):
    pass


class ShapeError(EngineError):
    pass


class IndexRangeError(EngineError):
    pass


class NonFiniteError(EngineError):
    pass


def as_tensor(values, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, order="C")
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    return arr


# ---------------------------------------------------------------- embeddings


def embedding_lookup(table: np.ndarray, indices) -> np.ndarray:
    """Concatenate the rows of ``table`` selected along the last axis of ``indices``.

    ``indices`` of shape ``(m,)`` gives a vector of length ``m * d``; a batch
    of shape ``(B, m)`` gives ``B x (m * d)``.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or table.shape[1] < 1:
        raise ShapeError(f"embedding table must be V x d with d >= 1, got {table.shape}")
    vocab, d = table.shape
    if idx.ndim == 0:
        idx = idx.reshape(1)
    bad = (idx < 0) | (idx >= vocab)
    if bad.any():
        where = np.argwhere(bad)[0]
        raise IndexRangeError(
            f"feature position {int(where[-1])}: index {int(idx[tuple(where)])} "
            f"outside cardinality {vocab}"
        )
    return table[idx].reshape(*idx.shape[:-1], idx.shape[-1] * d)


def embedding_backward(grad_out: np.ndarray, indices, table_shape) -> np.ndarray:
    """Scatter-add the output gradient back into a zero table (repeats accumulate)."""
    vocab, d = table_shape
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    grad = np.zeros((vocab, d), dtype=np.float64)
    if idx.size:
        np.add.at(grad, idx, np.asarray(grad_out, dtype=np.float64).reshape(idx.size, d))
    return grad


# -------------------------------------------------------------------- affine


def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``W @ x + b`` for a vector ``x``, or row-wise for a ``B x n`` batch."""
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1:] != (W.shape[1],):
        raise ShapeError(
            f"affine shapes do not conform: x{tuple(x.shape)}, W{tuple(W.shape)}, b{tuple(b.shape)}"
        )
    return x @ W.T + b


def affine_backward(grad_out: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Return ``(dx, dW, db)``; batch inputs are summed over rows."""
    if grad_out.ndim == 1:
        return W.T @ grad_out, np.outer(grad_out, x), grad_out.copy()
    return grad_out @ W, grad_out.T @ x, grad_out.sum(axis=0)


# --------------------------------------------------------------- activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return grad_out * s * (1.0 - s)


# ------------------------------------------------------------------------ MLP


class MLPCache:
    __slots__ = ("inputs", "pre")

    def __init__(self):
        self.inputs: list = []
        self.pre: list = []


def mlp_forward(x: np.ndarray, layers: Sequence[tuple]) -> tuple:
    """ReLU between layers, linear last layer. ``layers`` is ``[(W, b), ...]``."""
    cache = MLPCache()
    h = x
    for i, (W, b) in enumerate(layers):
        cache.inputs.append(h)
        z = affine_forward(h, W, b)
        cache.pre.append(z)
        h = relu(z) if i < len(layers) - 1 else z
    return h, cache


def mlp_backward(grad_out: np.ndarray, layers: Sequence[tuple], cache: MLPCache):
    """Return ``(dx, [(dW, db), ...])``."""
    grads = [None] * len(layers)
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        if i < len(layers) - 1:
            g = relu_backward(g, cache.pre[i])
        W = layers[i][0]
        g, dW, db = affine_backward(g, cache.inputs[i], W)
        grads[i] = (dW, db)
    return g, grads


# ---------------------------------------------------------------------- init


def he_normal(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))


def small_normal(rng: np.random.Generator, shape, std: float = 0.01) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ParamSet, **kw) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            **kw,
        )


def adam_step(params: ParamSet, grads: GradMap, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters without an entry in ``grads`` are left untouched (their
    moments are not decayed either).
    """
    if not lr > 0:
        raise EngineError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise EngineError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ------------------------------------------------------------ gradient check


def finite_diff_check(
    loss_fn: Callable[[ParamSet], float],
    params: ParamSet,
    analytic: GradMap,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
) -> float:
    """Max relative error between ``analytic`` and central differences.

    Relative error per coordinate is ``|a - n| / max(1, |n|)``. When
    ``max_coords`` is set, each parameter contributes at most that many
    coordinates, drawn without replacement from ``seed``.
    """
    if not eps > 0:
        raise EngineError("eps must be positive")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names if names is not None else list(params):
        p = params[name]
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a = analytic.get(name)
        a_flat = np.zeros(flat.size) if a is None else np.asarray(a, dtype=np.float64).reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(loss_fn(params))
            flat[c] = orig - eps
            fm = float(loss_fn(params))
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss while perturbing {name}[{c}]")
            num = (fp - fm) / (2.0 * eps)
            err = abs(a_flat[c] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
