"""Reverse-mode automatic differentiation over numpy arrays.

A `Tape` records every differentiable op executed inside its context; the
recorded order is a topological order, so `backward` replays closures in
reverse and accumulates gradients into `Tensor.grad`. Ops executed with no
active tape run as plain numpy forward passes (the inference path).

Dtype follows the wrapped arrays: float32 in production, float64 for
finite-difference gradient checks. Python-float constants are used for
op-internal scalars so numpy's weak promotion preserves the input dtype.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

_MASK_NEG = -1e9  # additive mask; exp underflows to exactly 0.0 after shift


class Tensor:
    """A numpy array plus an accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_needs_grad", "_creator_tape")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._needs_grad = requires_grad  # true if on a path to a parameter
        self._creator_tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __add__(self, other):  # Tensor | float
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def parameter(data: np.ndarray, name: str = "") -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


class Tape:
    """Records ops for one forward pass; replays them in reverse for grads.

    One backward per tape: a second call without `reset` raises, as does
    backward from a tensor the tape never produced.
    """

    _active: "list[Tape]" = []  # class-level stack of open tapes

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.pop()

    @staticmethod
    def current() -> "Tape | None":
        return Tape._active[-1] if Tape._active else None

    def record(self, out: Tensor, backward: Callable[[], None]) -> None:
        out._creator_tape = self
        self._nodes.append((out, backward))

    def reset(self) -> None:
        self._nodes.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise RuntimeError("backward already ran on this tape; call reset() first")
        if loss._creator_tape is not self:
            raise RuntimeError("backward target was not produced under this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, backward in reversed(self._nodes):
            if out.grad is not None:
                backward()
        # The node list pins the whole activation graph through closure
        # references, and tensor->tape back-references make it cyclic garbage
        # that only a gen-2 gc pass would reclaim. Dropping the nodes here
        # frees each iteration's activations promptly by refcount.
        self._nodes.clear()


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable[[], None]) -> Tensor:
    tape = Tape.current()
    if tape is not None and any(t._needs_grad for t in inputs):
        out._needs_grad = True
        tape.record(out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear ops


def add(a: Tensor, b: "Tensor | np.ndarray | float") -> Tensor:
    """a + b with numpy broadcasting; b may be a constant."""
    if not isinstance(b, Tensor):
        out = Tensor(a.data + b)

        def bwd():
            if a._needs_grad:
                a._accumulate(_unbroadcast(out.grad, a.data.shape))

        return _record(out, (a,), bwd)

    out = Tensor(a.data + b.data)

    def bwd():
        if a._needs_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b._needs_grad:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: "Tensor | np.ndarray | float") -> Tensor:
    """a * b elementwise; b may be a constant array or python float."""
    if not isinstance(b, Tensor):
        out = Tensor(a.data * b)

        def bwd():
            if a._needs_grad:
                a._accumulate(_unbroadcast(out.grad * b, a.data.shape))

        return _record(out, (a,), bwd)

    out = Tensor(a.data * b.data)

    def bwd():
        if a._needs_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        if b._needs_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the trailing two axes; both inputs must be >= 2-D."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires >= 2-D operands")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd():
        g = out.grad
        if a._needs_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b._needs_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd():
        if x._needs_grad:
            x._accumulate(out.grad * (x.data > 0))

    return _record(out, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))."""
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    # x*x*x, not x**3: this numpy build routes integer float powers through
    # generic pow, ~80x slower than two multiplies on f32.
    inner = c * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    out = Tensor(0.5 * xd * (1.0 + t))

    def bwd():
        if x._needs_grad:
            # d/dx = 0.5(1+t) + 0.5 x (1-t²) c (1 + 3·0.044715 x²)
            dt = (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * (x.data * x.data))
            x._accumulate(out.grad * (0.5 * (1.0 + t) + 0.5 * x.data * dt))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions / shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd():
        if x._needs_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return _record(out, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    denom = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / denom)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd():
        if x._needs_grad:
            x._accumulate(out.grad.reshape(x.data.shape))

    return _record(out, (x,), bwd)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.transpose(axes))
    inv = np.argsort(axes)

    def bwd():
        if x._needs_grad:
            x._accumulate(out.grad.transpose(inv))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization / activation stacks


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax: shifts by the axis max before exponentiating."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def bwd():
        if x._needs_grad:
            g = out.grad
            x._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _record(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - lse
    out = Tensor(logp)

    def bwd():
        if x._needs_grad:
            g = out.grad
            x._accumulate(g - np.exp(logp) * g.sum(axis=axis, keepdims=True))

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd():
        g = out.grad
        if gamma._needs_grad:
            gamma._accumulate(
                (g * xhat).sum(axis=tuple(range(g.ndim - 1))).reshape(gamma.data.shape)
            )
        if beta._needs_grad:
            beta._accumulate(g.sum(axis=tuple(range(g.ndim - 1))).reshape(beta.data.shape))
        if x._needs_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gx - m1 - xhat * m2))

    return _record(out, (x, gamma, beta), bwd)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """x / sqrt(sum(x², last axis) + eps); rows map onto the unit sphere."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True) + eps)
    y = x.data / n
    out = Tensor(y)

    def bwd():
        if x._needs_grad:
            g = out.grad
            x._accumulate((g - y * (g * y).sum(axis=-1, keepdims=True)) / n)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# lookup / loss


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """table (V, D) indexed by integer ids (any shape) -> (ids.shape, D)."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def bwd():
        if table._needs_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            table._accumulate(g)

    return _record(out, (table,), bwd)


def cross_entropy_from_logits(
    logits: Tensor, targets: np.ndarray, mask: np.ndarray
) -> Tensor:
    """Mean negative log-likelihood over positions where mask is nonzero.

    logits (N, V), targets (N,) int, mask (N,) in {0, 1}. The mean divides by
    the mask sum, so padded positions neither contribute nor dilute.
    """
    n, _ = logits.data.shape
    mask = np.asarray(mask, dtype=logits.data.dtype)
    total = mask.sum()
    if total <= 0:
        raise ValueError("cross entropy needs at least one unmasked position")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    nll = -(logp[rows, targets] * mask).sum() / total
    out = Tensor(np.asarray(nll, dtype=logits.data.dtype))

    def bwd():
        if logits._needs_grad:
            p = np.exp(logp)
            p[rows, targets] -= 1.0
            logits._accumulate(p * (mask * out.grad / total)[:, None])

    return _record(out, (logits,), bwd)


def causal_mask(t: int, dtype=np.float32) -> np.ndarray:
    """(t, t) additive mask: 0 on/below the diagonal, -1e9 above."""
    m = np.full((t, t), _MASK_NEG, dtype=dtype)
    return np.triu(m, k=1)


def padding_mask(lengths: np.ndarray, t: int, dtype=np.float32) -> np.ndarray:
    """(B, t) additive key mask: 0 for real positions, -1e9 for padding."""
    idx = np.arange(t)[None, :]
    return np.where(idx < np.asarray(lengths)[:, None], 0.0, _MASK_NEG).astype(dtype)
