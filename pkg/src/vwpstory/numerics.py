"""Dense float64 autodiff core: exactly the kernels the story model needs.

Reverse-mode on a dynamically built graph. Every op returns a new Tensor
wired to its inputs; ``Tensor.backward()`` walks the graph once in reverse
topological order and accumulates gradients on the leaves. Kernels only,
no general broadcasting beyond what add/mul need for bias rows.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import DataError, NumericError, StateError

Array = np.ndarray

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _as_f64(data) -> Array:
    # asarray with order="C" keeps 0-d scalars 0-d (ascontiguousarray would not)
    return np.asarray(data, dtype=np.float64, order="C")


class Tensor:
    """A float64 ndarray plus the wiring for reverse-mode differentiation.

    ``data`` is always C-contiguous float64 (row-major). ``grad`` is filled
    in for leaves with ``requires_grad`` after ``backward()``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, parents=(), grad_fn=None):
        self.data = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._grad_fn: Callable[[Array], tuple] | None = grad_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error()

    def backward(self, grad: Array | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise NumericError("backward() without an explicit seed needs a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        pending: dict[int, Array] = {id(self): _as_f64(grad)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._grad_fn is None:
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # Arithmetic sugar used throughout the model code.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _scalar_error():
    raise NumericError("item() requires a single-element tensor")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out, parents=(a, b), grad_fn=grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor(out, parents=(a, b), grad_fn=grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DataError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out, parents=(a, b), grad_fn=grad_fn)


def transpose(a: Tensor) -> Tensor:
    return Tensor(a.data.T, parents=(a,), grad_fn=lambda g: (g.T,))


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Stack 2-D tensors along axis 0."""
    sizes = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)

    def grad_fn(g):
        grads, offset = [], 0
        for n in sizes:
            grads.append(g[offset:offset + n])
            offset += n
        return tuple(grads)

    return Tensor(out, parents=tuple(parts), grad_fn=grad_fn)


def concat_cols(parts: list[Tensor]) -> Tensor:
    sizes = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def grad_fn(g):
        grads, offset = [], 0
        for n in sizes:
            grads.append(g[:, offset:offset + n])
            offset += n
        return tuple(grads)

    return Tensor(out, parents=tuple(parts), grad_fn=grad_fn)


def narrow_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor(a.data[:, start:stop], parents=(a,), grad_fn=grad_fn)


def softmax(logits: Tensor) -> Tensor:
    """Row-stable softmax over the last axis.

    Rows sum to 1 within 1e-12; invariant to additive shifts of the input.
    """
    x = logits.data
    if not np.isfinite(x).all():
        raise NumericError("softmax: non-finite input")
    shifted = x - x.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    y = exps / exps.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return Tensor(y, parents=(logits,), grad_fn=grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        d = x.data.shape[-1]
        dxhat = g * gamma.data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        return dx, dgamma, dbeta

    return Tensor(out, parents=(x, gamma, beta), grad_fn=grad_fn)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (the GPT-2 formulation)."""
    v = x.data
    inner = _GELU_K * (v + _GELU_C * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * v ** 2)
        dv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * dinner
        return (g * dv,)

    return Tensor(out, parents=(x,), grad_fn=grad_fn)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise DataError("embedding expects a 1-D id list")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise DataError(f"embedding id out of range [0, {table.data.shape[0]})")
    out = table.data[idx]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(out, parents=(table,), grad_fn=grad_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise NumericError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


def cross_entropy_masked(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood over the masked positions.

    ``logits`` is (T, V), ``targets`` T token ids, ``mask`` T booleans that
    select which positions contribute. Positions outside the mask have no
    effect on the value or the gradient.
    """
    tgt = np.asarray(targets, dtype=np.intp)
    msk = np.asarray(mask, dtype=bool)
    t, v = logits.data.shape
    if tgt.shape != (t,) or msk.shape != (t,):
        raise DataError(f"targets/mask must have length {t}")
    if not msk.any():
        raise DataError("cross_entropy_masked: empty loss (all positions masked out)")
    sel = msk.nonzero()[0]
    if (tgt[sel] < 0).any() or (tgt[sel] >= v).any():
        raise DataError(f"target id out of range [0, {v})")
    rows = logits.data[sel]
    m = rows.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=-1))
    nll = lse - rows[np.arange(sel.size), tgt[sel]]
    loss = nll.mean()

    def grad_fn(g):
        probs = np.exp(rows - m)
        probs /= probs.sum(axis=-1, keepdims=True)
        probs[np.arange(sel.size), tgt[sel]] -= 1.0
        full = np.zeros_like(logits.data)
        full[sel] = probs * (float(np.reshape(g, ())) / sel.size)
        return (full,)

    return Tensor(loss, parents=(logits,), grad_fn=grad_fn)


class ParamStore:
    """Named trainable tensors plus Adam moment buffers and a step counter."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}
        self.step = 0

    def add(self, name: str, data) -> Tensor:
        if name in self.params:
            raise StateError(f"parameter {name!r} already registered")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def gradients(self) -> dict[str, Array | None]:
        return {name: p.grad for name, p in self.params.items()}


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter in the store."""
    t = store.step + 1
    for name, p in store.params.items():
        if p.grad is None:
            raise StateError(f"adam_step: missing gradient for {name!r}")
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m[:] = beta1 * m + (1.0 - beta1) * g
        v[:] = beta2 * v + (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    store.step = t


def clip_global_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in store.params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in store.params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def grad_check(f: Callable[[ParamStore], Tensor], store: ParamStore,
               epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar function of the store (fix any rng
    it uses per call). Relative error per element is
    |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise NumericError(f"epsilon must be in [1e-7, 1e-3], got {epsilon}")
    store.zero_grad()
    out = f(store)
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: f evaluated to a non-finite value")
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in store.params.items()
    }
    worst = 0.0
    for name, p in store.params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = f(store).item()
            flat[i] = orig - epsilon
            lo = f(store).item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NumericError(f"grad_check: non-finite perturbation at {name}[{i}]")
            numeric = (hi - lo) / (2.0 * epsilon)
            err = abs(ana[i] - numeric) / max(1.0, abs(ana[i]))
            if err > worst:
                worst = err
    store.zero_grad()
    return worst
