"""Dense arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable op records its
parents and a closure mapping the output gradient to parent gradients;
:meth:`Tensor.backward` walks that graph once in reverse topological order.

Only the operations needed by a small transformer are provided. Fused
kernels (softmax, layer norm, cross-entropy) carry hand-written backward
rules for speed and numerical stability.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NdArray",
    "GraphConsumedError",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "matmul",
    "softmax_last_axis",
    "log_softmax_last_axis",
    "layer_norm",
    "relu",
    "embedding_lookup",
    "concat_last_axis",
    "slice_last_axis",
    "dropout",
    "cross_entropy_from_logits",
    "mse_loss",
]


class GraphConsumedError(RuntimeError):
    """Raised when backward is run twice over the same graph."""


class ShapeError(ValueError):
    """Raised on incompatible operand shapes."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


_KINK_LOG: list | None = None


@contextlib.contextmanager
def record_kinks():
    """Collect the active/inactive pattern of every ReLU evaluated in the block.

    Finite differences are only valid when both probes see the same pattern.
    """
    global _KINK_LOG
    prev = _KINK_LOG
    _KINK_LOG = log = []
    try:
        yield log
    finally:
        _KINK_LOG = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """A numpy array plus an optional gradient buffer and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # -- graph ------------------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out._consumed = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf.

        The graph is released afterwards; calling backward again on it
        raises :class:`GraphConsumedError`.
        """
        if self._consumed:
            raise GraphConsumedError("backward already ran over this graph; re-run the forward pass")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward without an explicit grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                # leaf
                if g is not None:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            if g is not None:
                pgrads = node._backward(g)
                for p, pg in zip(node._parents, pgrads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> Tensor:
        other = _lift(other, self)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = _lift(other, self)
        a_shape, b_shape = self.shape, other.shape

        def bw(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._make(self.data - other.data, (self, other), bw)

    def __rsub__(self, other) -> Tensor:
        return _lift(other, self) - self

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other) -> Tensor:
        other = _lift(other, self)
        a, b = self.data, other.data

        def bw(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            a, b = self.data, other.data

            def bw(g):
                return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

            return Tensor._make(a / b, (self, other), bw)
        c = float(other)
        return Tensor._make(self.data / c, (self,), lambda g: (g / c,))

    def __pow__(self, p: float) -> Tensor:
        a = self.data
        return Tensor._make(a**p, (self,), lambda g: (g * p * a ** (p - 1),))

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    # -- shape ops --------------------------------------------------------
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def swapaxes(self, a: int, b: int) -> Tensor:
        return Tensor._make(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> Tensor:
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def relu(self) -> Tensor:
        return relu(self)


NdArray = Tensor


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    # stacked matmul is much faster on contiguous operands
    A = np.ascontiguousarray(a.data) if a.ndim > 2 else a.data
    B = np.ascontiguousarray(b.data) if b.ndim > 2 else b.data
    try:
        out = A @ B
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            Bt = np.ascontiguousarray(B.swapaxes(-1, -2)) if B.ndim > 2 else B.T
            ga = _unbroadcast(g @ Bt, A.shape)
        if b.requires_grad:
            if B.ndim == 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.ascontiguousarray(A.swapaxes(-1, -2)) @ g, B.shape)
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINK_LOG is not None:
        _KINK_LOG.append(mask)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def softmax_last_axis(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted."""
    if np.isnan(x.data).any():
        raise FloatingPointError("softmax: NaN in input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), bw)


def _log_softmax(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax_last_axis(x: Tensor) -> Tensor:
    ls = _log_softmax(x.data)
    p = np.exp(ls)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(ls, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last axis {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    G = gain.data

    def bw(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * G
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return Tensor._make(out, (x, gain, bias), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; ids may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size:
        bad = ids[(ids < 0) | (ids >= V)]
        if bad.size:
            raise IndexError(f"embedding id {int(bad.flat[0])} out of range [0, {V})")
    out = table.data[ids]
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (gt,)

    return Tensor._make(out, (table,), bw)


def concat_last_axis(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(
                "concat_last_axis: leading dims differ: " + ", ".join(str(q.shape) for q in parts)
            )
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)
    out = np.concatenate([p.data for p in parts], axis=-1)

    def bw(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return Tensor._make(out, tuple(parts), bw)


def slice_last_axis(x: Tensor, lo: int, hi: int) -> Tensor:
    n = x.shape[-1]
    if not (0 <= lo < hi <= n):
        raise ShapeError(f"slice_last_axis: invalid range [{lo}, {hi}) for last dim {n}")
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., lo:hi] = g
        return (gx,)

    return Tensor._make(x.data[..., lo:hi], (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,))


def cross_entropy_from_logits(
    logits: Tensor, targets, mask=None, label_smoothing: float = 0.0
) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions.

    With one-hot references and ``label_smoothing=0`` this equals the KL
    divergence between the reference and model distributions.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"cross_entropy: target id out of range [0, {V})")
    m = np.ones(targets.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    count = m.sum()
    if count <= 0:
        raise ValueError("cross_entropy: every position is masked")
    ls = _log_softmax(logits.data)
    picked = np.take_along_axis(ls, targets[..., None], axis=-1)[..., 0]
    if label_smoothing > 0.0:
        per = -(1.0 - label_smoothing) * picked - label_smoothing * ls.mean(axis=-1)
    else:
        per = -picked
    loss = np.asarray((per * m).sum() / count, dtype=logits.dtype)

    def bw(g):
        p = np.exp(ls)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        ref = (1.0 - label_smoothing) * onehot + label_smoothing / V
        return ((p - ref) * (m / count)[..., None] * g,)

    return Tensor._make(loss, (logits,), bw)


def mse_loss(pred: Tensor, ref, mask=None) -> Tensor:
    """Mean squared difference over unmasked positions."""
    ref = np.asarray(ref.data if isinstance(ref, Tensor) else ref, dtype=pred.dtype)
    if ref.shape != pred.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {ref.shape}")
    m = np.ones(pred.shape, dtype=pred.dtype) if mask is None else np.asarray(mask, dtype=pred.dtype)
    count = m.sum()
    if count <= 0:
        raise ValueError("mse_loss: every position is masked")
    diff = pred.data - ref
    loss = np.asarray((diff * diff * m).sum() / count, dtype=pred.dtype)
    return Tensor._make(loss, (pred,), lambda g: (2.0 * diff * m / count * g,))


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
