"""Dense float64 tensors with reverse-mode gradients, parameter storage and Adam.

Every operation records a closure on the output tensor that maps the output
gradient to input gradients; `Tensor.backward` replays them in reverse
topological order. Arrays may carry leading batch axes; 2-D helpers such as
`matmul` broadcast over them the way numpy does.
"""

from __future__ import annotations

import io
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad", "_owned")

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None,
                 requires_grad: bool | None = None, grad: np.ndarray | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = grad
        self._owned = grad is not None
        self._parents = parents
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        # the first contribution is borrowed; copy only when a second one arrives
        if self.grad is None:
            self.grad = g
            self._owned = False
        elif self._owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owned = True

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # leaves keep their (shared) gradient buffers; intermediates start empty
        for node in order:
            if node._backward is not None:
                node.grad = None
                node._owned = False
        self._accumulate(np.broadcast_to(grad, self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, (a, b), backward)


elementwise_mul = mul
elementwise_sub = sub


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    if b.ndim == 2:
        # batch-by-weight product: one flat GEMM instead of a broadcast loop
        k, n = b.shape
        a2 = a.data.reshape(-1, k)

        def backward(g):
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a2.T @ g2)

        return Tensor((a2 @ b.data).reshape(a.shape[:-1] + (n,)), (a, b), backward)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor(a.data @ b.data, (a, b), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            t._accumulate(piece)

    return Tensor(out, tuple(tensors), backward)


def concat_rows(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows: shapes {a.shape} and {b.shape} do not conform")
    return concat([a, b], axis=0)


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: shapes {a.shape} and {b.shape} do not conform")
    return concat([a, b], axis=1)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        a._accumulate(np.swapaxes(g, ax1, ax2))

    return Tensor(np.swapaxes(a.data, ax1, ax2), (a,), backward)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of a 2-D table indexed by an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accumulate(full)

    return Tensor(table.data[ids], (table,), backward)


def index_select(a: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather slices along `axis` by an integer index vector (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % a.ndim

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        a._accumulate(full)

    return Tensor(np.take(a.data, idx, axis=axis), (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def backward(g):
        a._accumulate(g * (s + out * (1.0 - s)))

    return Tensor(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accumulate(g * s * (1.0 - s))

    return Tensor(s, (a,), backward)


ACTIVATIONS = {"silu": silu, "sigmoid": sigmoid}


def masked_softmax(logits: Tensor, mask: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Softmax along `axis`; masked positions get exactly 0.

    Slices with no unmasked position come out all zero (no support); callers
    needing the strict contract use `softmax`.
    """
    x = logits.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    shifted = np.where(mask, x, -np.inf)
    mx = np.max(shifted, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(np.where(mask, x - mx, 0.0)), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    p = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        logits._accumulate(p * (g - dot))

    return Tensor(p, (logits,), backward)


def softmax(v, mask: np.ndarray | None = None) -> Tensor:
    """Softmax of a vector with optional boolean validity mask."""
    v = as_tensor(v)
    if mask is not None and not np.any(mask):
        raise DegenerateInputError("softmax over a fully masked vector")
    if v.data.size == 0:
        raise DegenerateInputError("softmax over an empty vector")
    return masked_softmax(v, mask)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    mx = x.max(axis=axis, keepdims=True)
    lse = mx + np.log(np.exp(x - mx).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def backward(g):
        a._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return Tensor(out, (a,), backward)


def nll_loss(logits: Tensor, labels: np.ndarray, clamp: float = 1e-12) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Log-probabilities are floored at log(clamp); floored entries pass no gradient.
    """
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits)
    floor = math.log(clamp)
    rows = np.arange(labels.shape[0])
    picked = logp.data[rows, labels]
    live = picked > floor
    n = labels.shape[0]

    def backward(g):
        full = np.zeros_like(logp.data)
        full[rows, labels] = np.where(live, -g / n, 0.0)
        logp._accumulate(full)

    return Tensor(-np.maximum(picked, floor).mean(), (logp,), backward)


# --------------------------------------------------------------------------
# parameters and optimisation


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


class ParamStore:
    """Named parameters with gradient slots and Adam moments."""

    def __init__(self):
        self.params: "OrderedDict[str, Param]" = OrderedDict()
        self.step = 0

    def __contains__(self, name):
        return name in self.params

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=DTYPE)
        self.params[name] = Param(value, np.zeros_like(value), np.zeros_like(value), np.zeros_like(value))

    def value(self, name: str) -> np.ndarray:
        return self.params[name].value

    def tensor(self, name: str) -> Tensor:
        """Leaf tensor whose gradient buffer is the stored gradient slot."""
        p = self.params[name]
        return Tensor(p.value, requires_grad=True, grad=p.grad)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def size(self, prefix: str = "") -> int:
        return sum(p.value.size for n, p in self.params.items() if n.startswith(prefix))

    def groups(self) -> set[str]:
        return {n.split(".")[0] for n in self.params}

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for n, p in self.params.items():
            other.params[n] = Param(p.value.copy(), p.grad.copy(), p.m.copy(), p.v.copy())
        other.step = self.step
        return other


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def embedding_uniform(rng: np.random.Generator, rows: int, dim: int, scale: float = 0.05) -> np.ndarray:
    return rng.uniform(-scale, scale, size=(rows, dim))


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def adam_step(store: ParamStore, cfg: AdamConfig = AdamConfig()) -> ParamStore:
    """One bias-corrected Adam update over every parameter; gradients are zeroed after."""
    for name, p in store.params.items():
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for p in store.params.values():
        g = p.grad
        p.m *= cfg.beta1
        p.m += (1.0 - cfg.beta1) * g
        p.v *= cfg.beta2
        p.v += (1.0 - cfg.beta2) * g * g
        p.value -= cfg.learning_rate * (p.m / c1) / (np.sqrt(p.v / c2) + cfg.epsilon)
        g[...] = 0.0
    return store


def relative_error(analytic: float, numeric: float, floor: float = 1e-10) -> float:
    """|a - n| / max(|a|, |n|, floor); symmetric in its arguments."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(f: Callable[[ParamStore], Tensor], store: ParamStore, eps: float = 1e-5,
               n_coords: int = 64, rng: np.random.Generator | None = None,
               coords: Iterable[tuple[str, int]] | None = None, floor: float = 1e-7) -> float:
    """Max relative error between backward-pass and central-difference gradients.

    `f` builds a scalar from the store's current values. Coordinates are drawn
    uniformly over all parameter entries unless given explicitly. `floor` bounds
    the denominator: float64 round-off in f(x+eps) - f(x-eps) is about 1e-11 for
    an O(1) loss, so gradients much smaller than 1e-7 cannot be resolved to 1e-4.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    saved = {n: p.grad.copy() for n, p in store.params.items()}
    store.zero_grad()
    f(store).backward()
    analytic = {n: p.grad.copy() for n, p in store.params.items()}
    if coords is None:
        names = store.names()
        sizes = np.array([store.params[n].value.size for n in names])
        flat = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        coords = []
        for k in flat:
            i = int(np.searchsorted(offsets, k, side="right") - 1)
            coords.append((names[i], int(k - offsets[i])))
    worst = 0.0
    for name, idx in coords:
        v = store.params[name].value.reshape(-1)
        orig = v[idx]
        v[idx] = orig + eps
        fp = float(f(store).data)
        v[idx] = orig - eps
        fm = float(f(store).data)
        v[idx] = orig
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, relative_error(float(analytic[name].reshape(-1)[idx]), numeric, floor))
    for n, p in store.params.items():
        p.grad[...] = saved[n]
    return worst


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, store: ParamStore, adam: AdamConfig = AdamConfig(),
                    meta: dict | None = None) -> None:
    """Write parameters, Adam moments, step and free-form metadata to one .npz file."""
    arrays = {}
    for n, p in store.params.items():
        arrays[f"value/{n}"] = p.value
        arrays[f"m/{n}"] = p.m
        arrays[f"v/{n}"] = p.v
    header = {"names": store.names(), "step": store.step, "adam": asdict(adam), "meta": meta or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ParamStore, AdamConfig, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        store = ParamStore()
        for n in header["names"]:
            store.add(n, z[f"value/{n}"])
            store.params[n].m[...] = z[f"m/{n}"]
            store.params[n].v[...] = z[f"v/{n}"]
    store.step = header["step"]
    return store, AdamConfig(**header["adam"]), header["meta"]
