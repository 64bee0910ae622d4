"""Dense-tensor kernels with tape-based reverse-mode differentiation.

Just enough machinery for a small transformer encoder, its heads, and the
NLL losses: each kernel takes an optional :class:`Tape`; with ``tape=None``
it is a plain forward evaluation (used at eval time and for the
finite-difference reference in :func:`check_gradients`). Forward execution
order is a topological order of the graph, so the tape replays its records
in reverse to accumulate gradients, visiting each op exactly once.

Two precisions are in play: float32 for training, float64 for gradient
checking and oracle comparisons. Kernels preserve the dtype of their inputs.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

NLL_CLAMP = 1e-12


class Tensor:
    """Array value plus an additively-accumulated gradient slot."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Tape:
    """Recorded backward closures, replayed once in reverse order."""

    def __init__(self):
        self._records: list[Callable[[], None]] = []

    def record(self, fn: Callable[[], None]) -> None:
        self._records.append(fn)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError("backward starts from a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._records):
            fn()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def matmul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(np.matmul(a.data, b.data))
    if tape is not None:
        def bwd():
            g = out.grad
            _accum(a, np.matmul(g, b.data.swapaxes(-1, -2)))
            _accum(b, np.matmul(a.data.swapaxes(-1, -2), g))
        tape.record(bwd)
    return out


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    if tape is not None:
        def bwd():
            g = out.grad
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        tape.record(bwd)
    return out


def mul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    if tape is not None:
        def bwd():
            g = out.grad
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))
        tape.record(bwd)
    return out


def scale(tape: Tape | None, a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    if tape is not None:
        tape.record(lambda: _accum(a, out.grad * c))
    return out


def add_const(tape: Tape | None, a: Tensor, c: np.ndarray | float) -> Tensor:
    """Add a non-differentiable constant (used for -inf logit masks)."""
    out = Tensor(a.data + c)
    if tape is not None:
        tape.record(lambda: _accum(a, _unbroadcast(out.grad, a.data.shape)))
    return out


def embedding(tape: Tape | None, table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])
    if tape is not None:
        def bwd():
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            _accum(table, g)
        tape.record(bwd)
    return out


def layer_norm(tape: Tape | None, x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)
    if tape is not None:
        def bwd():
            g = out.grad
            _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
            _accum(bias, _unbroadcast(g, bias.data.shape))
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (gy - m1 - xhat * m2) * inv)
        tape.record(bwd)
    return out


def gelu(tape: Tape | None, x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    out = Tensor(x.data * cdf)
    if tape is not None:
        def bwd():
            pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
            _accum(x, out.grad * (cdf + x.data * pdf))
        tape.record(bwd)
    return out


def dropout(tape: Tape | None, x: Tensor, keep_mask: np.ndarray, keep_prob: float) -> Tensor:
    """Inverted dropout with a caller-supplied 0/1 keep mask (identity at eval
    is simply not calling this)."""
    factor = keep_mask / keep_prob
    out = Tensor(x.data * factor)
    if tape is not None:
        tape.record(lambda: _accum(x, out.grad * factor))
    return out


def softmax(tape: Tape | None, x: Tensor, axis: int = -1) -> Tensor:
    if x.data.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    if tape is not None:
        def bwd():
            g = out.grad
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, y * (g - dot))
        tape.record(bwd)
    return out


def log(tape: Tape | None, x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    if tape is not None:
        tape.record(lambda: _accum(x, out.grad / x.data))
    return out


def mean(tape: Tape | None, x: Tensor) -> Tensor:
    out = Tensor(x.data.mean())
    if tape is not None:
        tape.record(lambda: _accum(x, np.full_like(x.data, 1.0 / x.data.size) * out.grad))
    return out


def sum_all(tape: Tape | None, x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    if tape is not None:
        tape.record(lambda: _accum(x, np.broadcast_to(out.grad, x.data.shape)))
    return out


def add_n(tape: Tape | None, tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    out = Tensor(sum(t.data for t in tensors))
    if tape is not None:
        def bwd():
            for t in tensors:
                _accum(t, _unbroadcast(out.grad, t.data.shape))
        tape.record(bwd)
    return out


def reshape(tape: Tape | None, x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    if tape is not None:
        tape.record(lambda: _accum(x, out.grad.reshape(x.data.shape)))
    return out


def transpose(tape: Tape | None, x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.transpose(axes))
    if tape is not None:
        inv = tuple(np.argsort(axes))
        tape.record(lambda: _accum(x, out.grad.transpose(inv)))
    return out


def slice_rows(tape: Tape | None, x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[start:stop])
    if tape is not None:
        def bwd():
            g = np.zeros_like(x.data)
            g[start:stop] = out.grad
            _accum(x, g)
        tape.record(bwd)
    return out


def nll(tape: Tape | None, prob: Tensor, target: int) -> Tensor:
    """Negative log-likelihood of a probability vector at ``target``.

    The probability is clamped at ``NLL_CLAMP`` before the log; a clamped
    entry gets zero gradient.
    """
    if prob.data.ndim != 1:
        raise ValueError("nll expects a probability vector")
    if not 0 <= target < prob.data.shape[0]:
        raise ValueError(f"target {target} out of range")
    p = prob.data[target]
    clamped = max(float(p), NLL_CLAMP)
    out = Tensor(np.asarray(-np.log(clamped), dtype=prob.data.dtype))
    if tape is not None:
        def bwd():
            if p >= NLL_CLAMP:
                g = np.zeros_like(prob.data)
                g[target] = -out.grad / clamped
                _accum(prob, g)
        tape.record(bwd)
    return out


def nll_rows(tape: Tape | None, probs: Tensor, targets: np.ndarray) -> Tensor:
    """Row-wise NLL for a (rows, classes) probability matrix."""
    targets = np.asarray(targets)
    rows = np.arange(probs.data.shape[0])
    picked = probs.data[rows, targets]
    clamped = np.maximum(picked, NLL_CLAMP)
    out = Tensor(-np.log(clamped))
    if tape is not None:
        def bwd():
            g = np.zeros_like(probs.data)
            live = picked >= NLL_CLAMP
            g[rows[live], targets[live]] = -out.grad[live] / clamped[live]
            _accum(probs, g)
        tape.record(bwd)
    return out


# ---------------------------------------------------------------------------
# finite-difference checker
# ---------------------------------------------------------------------------

def check_gradients(
    loss_fn: Callable[[Tape | None], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn(tape)`` must rebuild the same loss from the live ``params``
    tensors on every call (any stochastic masks frozen). Run in float64.
    """
    zero_grads(params.values())
    tape = Tape()
    loss = loss_fn(tape)
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss {loss.data}")
    tape.backward(loss)
    tape_grads = {
        name: (np.zeros_like(p.data) if p.grad is None else np.array(p.grad))
        for name, p in params.items()
    }

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = tape_grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn(None).data)
            flat[i] = orig - eps
            down = float(loss_fn(None).data)
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            g = float(gflat[i])
            err = abs(g - fd) / max(abs(g), abs(fd), 1e-8)
            if err > worst:
                worst = err
    return worst
