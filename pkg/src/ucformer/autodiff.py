"""A small reverse-mode autodiff engine over numpy arrays.

Every primitive returns a new :class:`Tensor` that remembers its parents and
a closure pushing the output gradient back to them. :func:`backward` orders
the recorded graph into a :class:`Tape` (reverse topological order) and runs
the closures once each, accumulating gradients additively at fan-out.

Only the operations the ELU-CosFormer needs are provided. Everything is real
valued and float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    # operator sugar for the few places where it reads better
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)


def _node(data, parents, backward, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    out.op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), back, "matmul")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may broadcast over the leading axis of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from None
    if out.shape != a.shape and out.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def back(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), back, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    def back(g):
        _accumulate(x, c * g)

    return _node(c * x.data, (x,), back, "scale")


_KINK_LOG: list | None = None


@contextlib.contextmanager
def kink_probe():
    """Record the sign pattern of every ReLU input evaluated inside the block."""
    global _KINK_LOG
    saved, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = saved


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    if _KINK_LOG is not None:
        _KINK_LOG.append(active)

    def back(g):
        _accumulate(x, g * active)

    return _node(np.where(active, x.data, 0.0), (x,), back, "relu")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    pos = x.data > 0
    expm1 = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, alpha * expm1)

    def back(g):
        _accumulate(x, g * np.where(pos, 1.0, alpha * (expm1 + 1.0)))

    return _node(out, (x,), back, "elu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def back(g):
        _accumulate(x, g * s * (1.0 - s))

    return _node(s, (x,), back, "sigmoid")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply the per-feature gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape} with gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def back(g):
        _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            dx = inv_std * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return _node(xhat * gain.data + bias.data, (x, gain, bias), back, "layer_norm")


def dropout(x: Tensor, rate: float, train: bool, seed: int | None = None) -> Tensor:
    """Inverted dropout; identity when ``train`` is off or ``rate`` is zero."""
    if not train or rate == 0.0:
        return x
    keep = stream(0 if seed is None else seed, "dropout").random(x.shape) >= rate
    factor = keep / (1.0 - rate)

    def back(g):
        _accumulate(x, g * factor)

    return _node(x.data * factor, (x,), back, "dropout")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")

    def back(g):
        _accumulate(x, g.T)

    return _node(x.data.T, (x,), back, "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None

    def back(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(out, (x,), back, "reshape")


def take(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice [start, stop) along ``axis``."""
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[index] = g
            _accumulate(x, full)

    return _node(x.data[index], (x,), back, "take")


def split(x: Tensor, parts: int, axis: int = -1) -> list[Tensor]:
    n = x.shape[axis]
    if n % parts:
        raise ShapeError(f"cannot split axis of length {n} into {parts} parts")
    w = n // parts
    return [take(x, i * w, (i + 1) * w, axis) for i in range(parts)]


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat shape mismatch: {[t.shape for t in xs]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def back(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(index)])

    return _node(out, tuple(xs), back, "concat")


def row_scale(x: Tensor, weights: np.ndarray) -> Tensor:
    """Multiply row i of ``x`` by the fixed scalar ``weights[i]``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (x.shape[0],):
        raise ShapeError(f"row_scale: {w.shape} weights for {x.shape} input")

    def back(g):
        _accumulate(x, g * w[:, None])

    return _node(x.data * w[:, None], (x,), back, "row_scale")


def row_divide(x: Tensor, d: Tensor, floor: float = 1e-6) -> Tensor:
    """x / max(d, floor) row-wise; ``d`` has shape (rows, 1)."""
    if d.shape != (x.shape[0], 1):
        raise ShapeError(f"row_divide: divisor {d.shape} for {x.shape} input")
    clamped = d.data > floor
    den = np.where(clamped, d.data, floor)
    out = x.data / den

    def back(g):
        _accumulate(x, g / den)
        _accumulate(d, np.where(clamped, -(g * out).sum(axis=1, keepdims=True) / den, 0.0))

    return _node(out, (x, d), back, "row_divide")


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    def back(g):
        _accumulate(x, np.broadcast_to(np.expand_dims(g, axis) if axis is not None else g, x.shape))

    return _node(x.data.sum(axis=axis), (x,), back, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def back(g):
        _accumulate(x, np.full(x.shape, g / n))

    return _node(x.data.mean(), (x,), back, "mean")


def mse(a: Tensor, b) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    b = _as_tensor(b)
    if b.data.ndim == 0:
        b = Tensor(np.full(a.shape, float(b.data)))
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def back(g):
        _accumulate(a, 2.0 * g * diff / n)
        _accumulate(b, -2.0 * g * diff / n)

    return _node(np.mean(diff**2), (a, b), back, "mse")


# ---------------------------------------------------------------------------
# backward pass


@dataclass
class Tape:
    """Nodes of a graph in topological order (inputs before outputs)."""

    nodes: list[Tensor]

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` of every tensor that requires it; returns the tape used."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return tape


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(
    f,
    params: list[Tensor],
    eps: float = 1e-4,
    coords_per_tensor: int = 64,
    seed: int = 0,
    floor: float = 1e-8,
    skip_kinks: bool = True,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``. Coordinates whose +/- perturbation flips the sign of any ReLU
    input are skipped when ``skip_kinks`` is set.
    """
    zero_grad(params)
    with kink_probe() as base:
        loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= coords_per_tensor else rng.choice(n, coords_per_tensor, replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + eps
            with kink_probe() as plus:
                f_plus = f().item()
            flat[idx] = orig - eps
            with kink_probe() as minus:
                f_minus = f().item()
            flat[idx] = orig
            if skip_kinks and not (_same(base, plus) and _same(base, minus)):
                continue
            numeric = (f_plus - f_minus) / (2 * eps)
            exact = g.reshape(-1)[idx]
            rel = abs(numeric - exact) / max(abs(numeric), abs(exact), floor)
            worst = max(worst, rel)
    return worst


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# checkpoints


def save_tensors(path: str | Path, tensors: dict[str, Tensor | np.ndarray]) -> None:
    """Write named tensors (with shapes) to an ``.npz`` archive; round-trips exactly."""
    arrays = {k: (v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)) for k, v in tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as archive:
        return {k: archive[k].astype(np.float64) for k in archive.files}
