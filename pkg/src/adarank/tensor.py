"""Dense float64 tensors with tape-based reverse-mode differentiation.

All arithmetic is 64-bit and deterministic: identical inputs produce
bit-identical outputs across runs.  Ops are pure functions over
immutable inputs and may be called from several threads; a ``GradTape``
is single-threaded and lives for one training step.

Element-wise nonlinearities and normalizations dispatch through
``adarank.kernels`` (numba or numpy backend); matrix products always use
BLAS via ``numpy.matmul``.
"""

from __future__ import annotations

import numpy as np

from . import kernels


class Tensor:
    """A shape + row-major float64 buffer, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim:  # ascontiguousarray would promote 0-d scalars to shape (1,)
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


# --- tape machinery ---------------------------------------------------------

_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Linear record of executed ops; backward replays each record exactly once."""

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss):
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
        if self._consumed:
            raise RuntimeError("tape already consumed; record a fresh forward pass")
        self._consumed = True
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, vjp in reversed(self._records):
            if out.grad is None:
                continue
            for tensor, grad in zip(inputs, vjp(out.grad)):
                if grad is None:
                    continue
                if tensor.grad is None:
                    tensor.grad = grad
                else:
                    tensor.grad = tensor.grad + grad


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_output(data, inputs, vjp):
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape._records.append((out, tuple(inputs), vjp))
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- ops --------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def vjp(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make_output(data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make_output(data, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c if a.requires_grad else None,)

    return _make_output(a.data * c, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make_output(data, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def vjp(g):
        return (g.reshape(a.data.shape) if a.requires_grad else None,)

    return _make_output(a.data.reshape(shape), (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse) if a.requires_grad else None,)

    return _make_output(np.ascontiguousarray(a.data.transpose(axes)), (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    x = a.data

    def vjp(g):
        return (kernels.gelu_vjp(x, np.ascontiguousarray(g)) if a.requires_grad else None,)

    return _make_output(kernels.gelu(x), (a,), vjp)


def softmax_lastdim(a: Tensor) -> Tensor:
    rows = a.data.reshape(-1, a.data.shape[-1])
    y = kernels.softmax(np.ascontiguousarray(rows))

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        g_rows = np.ascontiguousarray(g.reshape(y.shape))
        return (kernels.softmax_vjp(y, g_rows).reshape(a.data.shape),)

    return _make_output(y.reshape(a.data.shape), (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    if a.data.shape[-1] != gain.data.shape[-1] or a.data.shape[-1] != bias.data.shape[-1]:
        raise ValueError("layer_norm gain/bias must match the feature dimension")
    rows = np.ascontiguousarray(a.data.reshape(-1, a.data.shape[-1]))
    y = kernels.layer_norm(rows, gain.data, bias.data, eps)

    def vjp(g):
        g_rows = np.ascontiguousarray(g.reshape(rows.shape))
        dx, dgain, dbias = kernels.layer_norm_vjp(rows, gain.data, g_rows, eps)
        return (
            dx.reshape(a.data.shape) if a.requires_grad else None,
            dgain if gain.requires_grad else None,
            dbias if bias.requires_grad else None,
        )

    return _make_output(y.reshape(a.data.shape), (a, gain, bias), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    data = table.data[ids]

    def vjp(g):
        if not table.requires_grad:
            return (None,)
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _make_output(data, (table,), vjp)


def first_token(a: Tensor) -> Tensor:
    """Pick position 0 of a (batch, seq, features) tensor."""
    if a.data.ndim != 3:
        raise ValueError(f"first_token expects a 3-D tensor, got shape {a.data.shape}")

    def vjp(g):
        if not a.requires_grad:
            return (None,)
        da = np.zeros_like(a.data)
        da[:, 0, :] = g
        return (da,)

    return _make_output(a.data[:, 0, :], (a,), vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax vs integer labels (log-sum-exp form)."""
    labels = np.asarray(labels)
    x = logits.data
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ValueError("expected (n, classes) logits and (n,) labels")
    n = x.shape[0]
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    loss = np.mean(lse - x[np.arange(n), labels])

    def vjp(g):
        if not logits.requires_grad:
            return (None,)
        probs = np.exp(x - lse[:, None])
        probs[np.arange(n), labels] -= 1.0
        return (probs * (float(g) / n),)

    return _make_output(np.float64(loss), (logits,), vjp)


def tensor_sum(a: Tensor) -> Tensor:
    def vjp(g):
        return (np.full_like(a.data, float(g)) if a.requires_grad else None,)

    return _make_output(np.float64(a.data.sum()), (a,), vjp)


def tensor_mean(a: Tensor) -> Tensor:
    def vjp(g):
        if not a.requires_grad:
            return (None,)
        return (np.full_like(a.data, float(g) / a.data.size),)

    return _make_output(np.float64(a.data.mean()), (a,), vjp)


# --- reductions used by scoring (plain floats, not taped) --------------------


def population_std(t) -> float:
    """sqrt(mean((x - mean)^2)) over every entry (population normalization)."""
    x = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty tensor")
    centered = x - x.mean()
    return float(np.sqrt(np.mean(centered * centered)))


def l1_diff(a, b) -> float:
    """Sum of elementwise absolute differences."""
    xa = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    xb = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if xa.shape != xb.shape:
        raise ValueError(f"l1_diff shape mismatch: {xa.shape} vs {xb.shape}")
    return float(np.abs(xa - xb).sum())
