"""Reverse-mode autodiff over float64 numpy arrays.

Each operation records its inputs and a backward closure on the output
node; ``Tensor.backward()`` walks the recorded graph in reverse
topological order. The graph is rebuilt on every forward pass. All
arithmetic is 64-bit: gradient checks at 1e-4 tolerance are not reliable
in float32.

Shapes in comments follow the convention (B, P, d) etc.; the last axis is
always the feature axis.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ConfigError, DimensionError, NumericsError

# Pre-activation clamp for sigmoid. sigmoid(+/-30) is still strictly
# inside (0, 1) in float64, so gates can never saturate to exact 0 or 1.
SIGMOID_CLAMP = 30.0

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus an optional gradient accumulator.

    ``requires_grad`` marks leaves that want gradients; operation outputs
    inherit it from their inputs. ``grad`` is lazily allocated by
    ``backward()`` and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = parents if self.requires_grad else ()
        self._backward_fn = backward_fn if self.requires_grad else None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradient bookkeeping ------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        # Backward closures never hand the same array to two tensors (see
        # ``add``), so the first contribution can be stored without a copy.
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse sweep from a scalar output."""
        if self.data.size != 1:
            raise NumericsError(
                f"backward() requires a scalar output, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul_scalar(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul_scalar(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, 1.0 / float(other))
        return mul(self, reciprocal(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_tensor(self, index)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_tensor(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_tensor(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=req,
        parents=tuple(p for p in parents if p.requires_grad),
        backward_fn=backward_fn if req else None,
    )


# -- arithmetic ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        ga = None
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a.accumulate_grad(ga)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            if gb is ga:  # never hand one array to two tensors
                gb = gb.copy()
            b.accumulate_grad(gb)

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    out_data = a.data * s

    def backward(g):
        a.accumulate_grad(g * s)

    return _make(out_data, (a,), backward)


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def backward(g):
        a.accumulate_grad(-g * out_data * out_data)

    return _make(out_data, (a,), backward)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out_data = a.data**p

    def backward(g):
        a.accumulate_grad(g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a.accumulate_grad(g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        a.accumulate_grad(g / a.data)

    return _make(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        a.accumulate_grad(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU (smooth, so finite differences behave)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    half_1pt = 0.5 * (1.0 + t)
    out_data = x * half_1pt

    def backward(g):
        d_inner = _GELU_C * (1.0 + 0.134145 * x2)
        a.accumulate_grad(g * (half_1pt + x * (0.5 - 0.5 * (t * t)) * d_inner))

    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        a.accumulate_grad(g * (a.data > 0.0))

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    """Element-wise logistic with pre-activation clamp at +/-SIGMOID_CLAMP.

    The clamp keeps outputs strictly inside (0, 1) for every finite input;
    the backward pass is zero where the clamp is active, matching the true
    derivative of the clamped function.
    """
    z = np.clip(a.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    out_data = 1.0 / (1.0 + np.exp(-z))
    inside = (a.data > -SIGMOID_CLAMP) & (a.data < SIGMOID_CLAMP)

    def backward(g):
        a.accumulate_grad(g * out_data * (1.0 - out_data) * inside)

    return _make(out_data, (a,), backward)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires >=2-d operands, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.shape} @ {b.shape}"
        )
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


# -- shape manipulation -----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        a.accumulate_grad(g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward(g):
        a.accumulate_grad(g.transpose(inverse))

    return _make(out_data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make(out_data, tensors, backward)


def slice_tensor(a: Tensor, index) -> Tensor:
    """Basic (slice/int tuple) indexing with scatter-add backward."""
    out_data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a.accumulate_grad(full)

    return _make(out_data, (a,), backward)


# -- reductions -------------------------------------------------------------


def sum_tensor(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), backward)


def mean_tensor(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    out = sum_tensor(a, axis=axis, keepdims=keepdims)
    return mul_scalar(out, 1.0 / count)


def sorted_sum(a: Tensor, axis: int) -> Tensor:
    """Sum along ``axis`` after sorting values along it.

    Numerically equal to a plain sum up to rounding, but the float result
    depends only on the multiset of addends, so it is exactly invariant
    under any permutation along ``axis``. The gradient of a sum is 1 for
    every addend regardless of order, so the backward pass is the plain
    broadcast.
    """
    out_data = np.sort(a.data, axis=axis).sum(axis=axis)

    def backward(g):
        a.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(out_data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a.accumulate_grad(out_data * (g - dot))

    return _make(out_data, (a,), backward)


# -- neural-net primitives ---------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match "
            f"feature extent {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (dxhat - m1 - xhat * m2))

    return _make(out_data, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, training: bool, seed: int) -> Tensor:
    """Zero each element with probability ``p`` and rescale survivors.

    Evaluation mode returns the input node unchanged. The mask is drawn
    from a generator seeded with ``seed``, so a fixed seed reproduces the
    mask exactly.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if not training or p == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = rng.random(x.shape) >= p
    scale = 1.0 / (1.0 - p)
    out_data = x.data * keep * scale

    def backward(g):
        x.accumulate_grad(g * keep * scale)

    return _make(out_data, (x,), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = weight[ids[...], :]."""
    ids = np.asarray(ids)
    out_data = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        weight.accumulate_grad(gw)

    return _make(out_data, (weight,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over non-ignored positions.

    ``logits`` has shape (..., V); ``targets`` matches the leading shape.
    When every position is ignored the loss is 0 with zero gradient (the
    empty-mean convention).
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(
            f"targets shape {targets.shape} does not match logits {logits.shape}"
        )
    vocab = logits.shape[-1]
    flat_logits = logits.data.reshape(-1, vocab)
    flat_targets = targets.reshape(-1)
    mask = flat_targets != ignore_index
    valid = flat_targets[mask]
    if valid.size and (valid.min() < 0 or valid.max() >= vocab):
        bad = valid[(valid < 0) | (valid >= vocab)][0]
        raise IndexError(f"target id {bad} outside vocabulary of size {vocab}")
    n = int(mask.sum())
    if n == 0:
        # No supervised positions: defined as 0 with zero gradient.
        return _make(np.asarray(0.0), (logits,), lambda g: None)

    m = flat_logits.max(axis=-1, keepdims=True)
    shifted = flat_logits - m
    lse = np.log(np.exp(shifted).sum(axis=-1)) + m[:, 0]
    picked = flat_logits[np.arange(flat_logits.shape[0]), np.where(mask, flat_targets, 0)]
    losses = (lse - picked) * mask
    out_data = np.asarray(losses.sum() / n)

    def backward(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        probs[np.arange(probs.shape[0]), np.where(mask, flat_targets, 0)] -= 1.0
        probs[~mask] = 0.0
        logits.accumulate_grad((probs * (float(g) / n)).reshape(logits.shape))

    return _make(out_data, (logits,), backward)


# -- position gather / scatter (injection-hook support) ----------------------


def _check_positions(pos: np.ndarray, batch: int, length: int) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.intp)
    if pos.ndim != 2 or pos.shape[0] != batch:
        raise DimensionError(
            f"positions must have shape (batch, M); got {pos.shape} for batch {batch}"
        )
    if pos.size and (pos.min() < 0 or pos.max() >= length):
        raise IndexError(
            f"position {int(pos.max())} out of range for sequence length {length}"
        )
    return pos


def gather_positions(x: Tensor, pos: np.ndarray) -> Tensor:
    """out[b, m, :] = x[b, pos[b, m], :] for x of shape (B, P, d)."""
    b, p, _ = x.shape
    pos = _check_positions(pos, b, p)
    rows = np.arange(b)[:, None]
    out_data = x.data[rows, pos]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, pos), g)
        x.accumulate_grad(gx)

    return _make(out_data, (x,), backward)


def scatter_positions(x: Tensor, pos: np.ndarray, rows_t: Tensor) -> Tensor:
    """Copy of x with x[b, pos[b, m], :] replaced by rows_t[b, m, :].

    Positions must be unique within each batch row; the replaced slots
    receive gradient through ``rows_t`` only.
    """
    b, p, _ = x.shape
    pos = _check_positions(pos, b, p)
    for row in pos:
        if len(set(row.tolist())) != len(row):
            raise DimensionError("scatter positions must be unique per batch row")
    rows = np.arange(b)[:, None]
    out_data = x.data.copy()
    out_data[rows, pos] = rows_t.data

    def backward(g):
        if rows_t.requires_grad:
            rows_t.accumulate_grad(g[rows, pos])
        if x.requires_grad:
            gx = g.copy()
            gx[rows, pos] = 0.0
            x.accumulate_grad(gx)

    return _make(out_data, (x, rows_t), backward)
