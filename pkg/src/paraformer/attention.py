"""Multi-head self-attention and its closed-form vectorised operator.

``mha_forward`` is the training path. ``closedform_ws`` builds the dense
``(m*D) x (m*D)`` matrix ``W_S`` that maps the column-major vectorised token
matrix onto the attention output (minus its residual):

    W_S = (W_O^T kron I_m) . [ W_V_1 kron H_1^T | ... | W_V_h kron H_h^T ]^T

It is quadratic in both token count and width and only exists to check the
identity ``vec(mha(X)) == W_S vec(X) + vec(X)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError, SizeError

DEFAULT_WS_CAP = 4096


@dataclass
class HeadWeights:
    w_q: np.ndarray  # [D, d]
    w_k: np.ndarray  # [D, d]
    w_v: np.ndarray  # [D, d_v]


@dataclass
class AttnBlockWeights:
    heads: list[HeadWeights]
    w_o: np.ndarray  # [h * d_v, D]

    def __post_init__(self):
        if not self.heads:
            raise ShapeError("attention block needs at least one head")
        width = sum(T.value_of(h.w_v).shape[1] for h in self.heads)
        if T.value_of(self.w_o).shape[0] != width:
            raise ShapeError(
                f"concatenated head width {width} does not match w_o rows "
                f"{T.value_of(self.w_o).shape}")
        for h in self.heads:
            if T.value_of(h.w_q).shape != T.value_of(h.w_k).shape:
                raise ShapeError("w_q and w_k must share the head dimension")


def head_attention_matrix(x, head: HeadWeights):
    """Row-stochastic ``[m, m]`` attention matrix ``softmax(Q K^T / sqrt(d))``."""
    xv = T.value_of(x)
    wq = T.value_of(head.w_q)
    if xv.shape[-1] != wq.shape[0]:
        raise ShapeError(f"token width {xv.shape[-1]} does not match w_q {wq.shape}")
    d = wq.shape[1]
    q = T.matmul(x, head.w_q)
    k = T.matmul(x, head.w_k)
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(d))
    return T.softmax_rows(logits)


def attention_delta(x, w: AttnBlockWeights, attn_matrices: Sequence | None = None):
    """Multi-head attention output without the residual: ``[||_j H_j X W_V_j] W_O``.

    ``attn_matrices`` replaces the computed ``H_j`` (verification only).
    """
    outs = []
    for j, head in enumerate(w.heads):
        h = head_attention_matrix(x, head) if attn_matrices is None else attn_matrices[j]
        outs.append(T.matmul(h, T.matmul(x, head.w_v)))
    cat = outs[0] if len(outs) == 1 else T.concat_cols(outs)
    return T.matmul(cat, w.w_o)


def mha_forward(x, w: AttnBlockWeights, attn_matrices: Sequence | None = None):
    """Multi-head self-attention with residual; shape preserving."""
    return T.add(attention_delta(x, w, attn_matrices), x)


def closedform_ws(x, w: AttnBlockWeights, attn_matrices: Sequence | None = None,
                  cap: int = DEFAULT_WS_CAP) -> np.ndarray:
    """Materialise ``W_S`` for a single ``[m, D]`` token matrix."""
    xv = np.asarray(T.value_of(x))
    if xv.ndim != 2:
        raise ShapeError(f"closed form needs a single [m, D] token matrix, got {xv.shape}")
    m, width = xv.shape
    if m * width > cap:
        raise SizeError(
            f"W_S would be {m * width}x{m * width} (m*D={m * width} > cap {cap}); "
            "use small token counts and widths for closed-form verification")
    blocks = []
    for j, head in enumerate(w.heads):
        h = (head_attention_matrix(xv, _values(head)) if attn_matrices is None
             else np.asarray(attn_matrices[j]))
        blocks.append(T.kron(np.asarray(T.value_of(head.w_v)), h.T))
    stacked = blocks[0] if len(blocks) == 1 else T.concat_cols(blocks)
    lift = T.kron(np.asarray(T.value_of(w.w_o)).T, np.eye(m, dtype=xv.dtype))
    return T.matmul(lift, T.transpose(stacked))


def _values(head: HeadWeights) -> HeadWeights:
    return HeadWeights(*(np.asarray(T.value_of(a)) for a in (head.w_q, head.w_k, head.w_v)))


def random_block(rng: np.random.Generator, width: int, heads: int,
                 head_dim: int | None = None, dtype=np.float64) -> AttnBlockWeights:
    """Gaussian attention weights scaled by ``1/sqrt(width)``."""
    d = head_dim if head_dim is not None else max(1, width // heads)
    s = 1.0 / np.sqrt(width)

    def draw(*shape):
        return (rng.standard_normal(shape) * s).astype(dtype)

    hs = [HeadWeights(draw(width, d), draw(width, d), draw(width, d)) for _ in range(heads)]
    return AttnBlockWeights(hs, draw(heads * d, width))


@dataclass
class EquivalenceReport:
    seed: int
    tokens: int
    width: int
    heads: int
    max_abs_err: float
    passed: bool


def verify_equivalence(seed: int, m: int, width: int, h: int, tol: float = 1e-8,
                       cap: int = DEFAULT_WS_CAP) -> EquivalenceReport:
    """Compare ``mha_forward`` against ``W_S vec(x) + vec(x)`` at float64.

    Head dimension is ``width // h`` (at least 1), so widths that ``h`` does not
    divide still produce a valid block.
    """
    if m < 1 or width < 1 or h < 1:
        raise ShapeError(f"tokens, width and heads must be positive: {(m, width, h)}")
    if m * width > cap:
        raise SizeError(f"m*D={m * width} exceeds closed-form cap {cap}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, width))
    w = random_block(rng, width, h)
    direct = T.vec_cols(mha_forward(x, w))
    xv = T.vec_cols(x)
    closed = closedform_ws(x, w, cap=cap) @ xv + xv
    err = float(np.max(np.abs(direct - closed)))
    return EquivalenceReport(seed, m, width, h, err, err < tol)
