"""Dense tensor operations with tape-based reverse-mode differentiation.

Values are plain :class:`numpy.ndarray` objects (row-major storage). An
operation applied only to arrays returns an array and records nothing, so
inference paths run without a tape. As soon as one operand is a
:class:`Node` that requires a gradient the result is a :class:`Node` and the
operation is recorded for :func:`backward`.

Matrix operations act on the trailing two axes; leading axes are treated as a
batch. That is the only broadcasting supported besides adding a row vector
(bias) to every row.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import RankError, ShapeError

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Node:
    """A differentiable value on the tape.

    ``grad`` starts at zero and accumulates across :func:`backward` calls until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, value, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), vjp: Callable | None = None):
        self.value = np.asarray(value)
        if self.value.dtype.kind != "f":
            self.value = self.value.astype(np.float64)
        self.grad = np.zeros_like(self.value)
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x)


def _tracked(x) -> bool:
    return isinstance(x, Node) and x.requires_grad


def _record(value: np.ndarray, parents: tuple, vjp: Callable, op: str):
    if not any(_tracked(p) for p in parents):
        return value
    return Node(value, requires_grad=True, op=op, parents=parents, vjp=vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_matrix(a: np.ndarray, name: str) -> None:
    if a.ndim < 2:
        raise RankError(f"{name} needs at least 2 dimensions, got shape {a.shape}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the trailing two axes."""
    av, bv = value_of(a), value_of(b)
    _require_matrix(av, "matmul lhs")
    _require_matrix(bv, "matmul rhs")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: lhs {av.shape} vs rhs {bv.shape}")
    out = np.matmul(av, bv)

    def vjp(g):
        ga = gb = None
        if _tracked(a):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if _tracked(b):
            if bv.ndim == 2 and av.ndim > 2:
                # fold the batch into rows instead of materialising per-sample products
                k, n = bv.shape
                gb = av.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _record(out, (a, b), vjp, "matmul")


def transpose(a):
    """Swap the trailing two axes."""
    av = value_of(a)
    _require_matrix(av, "transpose operand")
    return _record(np.swapaxes(av, -1, -2), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def kron(a, b):
    """Kronecker product of two matrices: block ``(i, j)`` is ``a[i, j] * b``."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise RankError(f"kron needs two matrices, got shapes {av.shape} and {bv.shape}")
    p, q = av.shape
    r, s = bv.shape
    out = np.kron(av, bv)

    def vjp(g):
        blocks = g.reshape(p, r, q, s)
        ga = np.einsum("irjs,rs->ij", blocks, bv) if _tracked(a) else None
        gb = np.einsum("irjs,ij->rs", blocks, av) if _tracked(b) else None
        return ga, gb

    return _record(out, (a, b), vjp, "kron")


def vec_cols(a):
    """Column-major vectorisation: ``out[j*m + i] = a[i, j]``."""
    av = value_of(a)
    if av.ndim != 2:
        raise RankError(f"vec_cols needs a matrix, got shape {av.shape}")
    m, n = av.shape
    out = av.T.reshape(-1).copy()
    return _record(out, (a,), lambda g: (g.reshape(n, m).T,), "vec_cols")


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    try:
        out = av + bv
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {av.shape} and {bv.shape}") from exc
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
                   "add")


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    try:
        out = av - bv
    except ValueError as exc:
        raise ShapeError(f"cannot subtract shapes {av.shape} and {bv.shape}") from exc
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)),
                   "sub")


def mul(a, b):
    """Elementwise product."""
    av, bv = value_of(a), value_of(b)
    try:
        out = av * bv
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {av.shape} and {bv.shape}") from exc
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
                   "mul")


def scale(a, c: float):
    av = value_of(a)
    c = av.dtype.type(c)
    return _record(av * c, (a,), lambda g: (g * c,), "scale")


def sum_all(a):
    av = value_of(a)
    out = np.asarray(av.sum(), dtype=av.dtype)
    return _record(out, (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),), "sum")


def mean_rows(a):
    """Average over the row (token) axis: ``[..., m, n] -> [..., n]``."""
    av = value_of(a)
    _require_matrix(av, "mean_rows operand")
    m = av.shape[-2]
    out = av.mean(axis=-2)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, -2) / av.dtype.type(m), av.shape).copy(),)

    return _record(out, (a,), vjp, "mean_rows")


def concat_cols(parts: Sequence):
    """Concatenate along the last axis."""
    values = [value_of(p) for p in parts]
    lead = {v.shape[:-1] for v in values}
    if len(lead) != 1:
        raise ShapeError(f"concat_cols row extents differ: {[v.shape for v in values]}")
    out = np.concatenate(values, axis=-1)
    bounds = np.cumsum([0] + [v.shape[-1] for v in values])

    def vjp(g):
        return tuple(g[..., bounds[k]:bounds[k + 1]] for k in range(len(values)))

    return _record(out, tuple(parts), vjp, "concat_cols")


def softmax_rows(a):
    """Row-wise softmax over the last axis, stabilised by the row maximum."""
    av = value_of(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), vjp, "softmax_rows")


def gelu(a):
    """Exact (erf-based) GELU."""
    av = value_of(a)
    cdf = 0.5 * (1.0 + erf(av / _SQRT_2))
    out = (av * cdf).astype(av.dtype, copy=False)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * av * av)
        return ((g * (cdf + av * pdf)).astype(av.dtype, copy=False),)

    return _record(out, (a,), vjp, "gelu")


def relu(a):
    av = value_of(a)
    mask = av > 0
    return _record(av * mask, (a,), lambda g: (g * mask,), "relu")


def layer_norm(a, eps: float = 1e-5):
    """Normalise each row of the last axis to zero mean and unit variance (no affine)."""
    av = value_of(a)
    mu = av.mean(axis=-1, keepdims=True)
    centered = av - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + av.dtype.type(eps))
    out = centered * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _record(out, (a,), vjp, "layer_norm")


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``[batch, classes]`` logits against integer labels."""
    lv = value_of(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if lv.ndim != 2:
        raise RankError(f"cross_entropy expects [batch, classes] logits, got {lv.shape}")
    if labels.shape != (lv.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {lv.shape}")
    logp = log_softmax_rows(lv)
    rows = np.arange(lv.shape[0])
    out = np.asarray(-logp[rows, labels].mean(), dtype=lv.dtype)

    def vjp(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / lv.dtype.type(lv.shape[0])),)

    return _record(out, (logits,), vjp, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if _tracked(p) and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate ``d loss / d value`` into ``grad`` of every reachable node.

    Each call propagates a fresh seed of one, so calling twice without
    zeroing doubles every gradient.
    """
    if not isinstance(loss, Node):
        raise TypeError("backward needs a Node produced from tracked inputs")
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not _tracked(parent):
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numeric_grad(fn: Callable[..., np.ndarray], inputs: Sequence[np.ndarray],
                 index: int, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn(*inputs)`` w.r.t. ``inputs[index]``."""
    base = [np.array(x, dtype=np.float64) for x in inputs]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = float(np.asarray(fn(*base)))
        flat[k] = orig - eps
        down = float(np.asarray(fn(*base)))
        flat[k] = orig
        gflat[k] = (up - down) / (2 * eps)
    return grad


def gradcheck(fn: Callable, inputs: Sequence[np.ndarray], eps: float = 1e-5,
              seed: int = 0) -> float:
    """Largest relative error between tape and finite-difference gradients.

    ``fn`` maps operands to a tensor; non-scalar outputs are contracted with a
    fixed random weighting so every output entry contributes. The error per
    input is ``||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12)``.
    Evaluate at float64.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    probe = value_of(fn(*arrays))
    weights = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(*xs):
        return sum_all(mul(fn(*xs), weights))

    nodes = [Node(x.copy(), requires_grad=True) for x in arrays]
    backward(scalar(*nodes))
    worst = 0.0
    for k, node in enumerate(nodes):
        numeric = numeric_grad(lambda *xs: value_of(scalar(*xs)), arrays, k, eps)
        denom = max(np.linalg.norm(node.grad), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(node.grad - numeric) / denom))
    return worst
