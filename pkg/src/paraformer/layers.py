"""Transformer layer (attention block then FFN block) and branches of layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttnBlockWeights, attention_delta, closedform_ws, mha_forward
from .errors import ShapeError

ACTIVATIONS = {"gelu": T.gelu, "relu": T.relu}


@dataclass
class FfnWeights:
    w_f1: np.ndarray  # [D, D_ff]
    b_f1: np.ndarray  # [D_ff]
    w_f2: np.ndarray  # [D_ff, D]
    b_f2: np.ndarray  # [D]

    def __post_init__(self):
        d, dff = T.value_of(self.w_f1).shape
        if T.value_of(self.w_f2).shape != (dff, d):
            raise ShapeError(
                f"w_f2 {T.value_of(self.w_f2).shape} does not chain with w_f1 {(d, dff)}")
        if T.value_of(self.b_f1).shape != (dff,) or T.value_of(self.b_f2).shape != (d,):
            raise ShapeError("FFN bias shapes do not match projections")


@dataclass
class LayerWeights:
    attn: AttnBlockWeights
    ffn: FfnWeights

    @property
    def width(self) -> int:
        return T.value_of(self.attn.w_o).shape[1]


@dataclass
class BranchWeights:
    layers: list[LayerWeights]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a branch needs at least one layer")
        widths = {layer.width for layer in self.layers}
        if len(widths) != 1:
            raise ShapeError(f"layers in one branch disagree on width: {sorted(widths)}")


def _check_width(x, width: int) -> None:
    got = T.value_of(x).shape[-1]
    if got != width:
        raise ShapeError(f"token width {got} does not match layer width {width}")


def _ffn_delta(x_s, w: FfnWeights, activation: str):
    hidden = ACTIVATIONS[activation](T.add(T.matmul(x_s, w.w_f1), w.b_f1))
    return T.add(T.matmul(hidden, w.w_f2), w.b_f2)


def ffn_forward(x_s, w: FfnWeights, activation: str = "gelu"):
    """``sigma(x_s W1 + b1) W2 + b2 + x_s`` with biases broadcast over rows."""
    _check_width(x_s, T.value_of(w.w_f1).shape[0])
    return T.add(_ffn_delta(x_s, w, activation), x_s)


def layer_forward(x, w: LayerWeights, activation: str = "gelu", prenorm: bool = False):
    """One full layer: attention block then FFN block, each with its residual."""
    _check_width(x, w.width)
    if prenorm:
        x_s = T.add(attention_delta(T.layer_norm(x), w.attn), x)
        return T.add(_ffn_delta(T.layer_norm(x_s), w.ffn, activation), x_s)
    return ffn_forward(mha_forward(x, w.attn), w.ffn, activation)


def ghat_forward(x, w: LayerWeights, activation: str = "gelu"):
    """The layer without its outermost residual, computed directly.

    ``ghat(x) = A(x) + F(A(x) + x)`` where ``A`` and ``F`` are the attention and
    FFN blocks without residuals, so ``layer_forward(x) == ghat(x) + x``.
    """
    _check_width(x, w.width)
    a = attention_delta(x, w.attn)
    return T.add(_ffn_delta(T.add(a, x), w.ffn, activation), a)


def branch_forward(x0, b: BranchWeights, activation: str = "gelu", prenorm: bool = False):
    """Apply the branch's layers in sequence to the shared embedding."""
    x = x0
    for layer in b.layers:
        x = layer_forward(x, layer, activation, prenorm)
    return x


def expanded_layer_vec(x: np.ndarray, w: LayerWeights, activation: str = "gelu") -> np.ndarray:
    """Vec-space form of one layer for a single ``[m, D]`` input.

    Computes ``F2 sigma(W1 x + b1) + b2 + W_S x + x`` with
    ``W1 = F1 W_S + F1``, where ``F1 = W_f1^T kron I_m`` and
    ``F2 = W_f2^T kron I_m`` lift the row-wise projections to column-major vec
    space and biases are tiled per token. Dense and verification-only.
    """
    x = np.asarray(x)
    m = x.shape[0]
    eye = np.eye(m, dtype=x.dtype)
    ones = np.ones(m, dtype=x.dtype)
    ws = closedform_ws(x, w.attn)
    f1 = np.kron(np.asarray(w.ffn.w_f1).T, eye)
    f2 = np.kron(np.asarray(w.ffn.w_f2).T, eye)
    w1 = f1 @ ws + f1
    b1 = np.kron(np.asarray(w.ffn.b_f1), ones)
    b2 = np.kron(np.asarray(w.ffn.b_f2), ones)
    xv = T.vec_cols(x)
    hidden = T.value_of(ACTIVATIONS[activation](w1 @ xv + b1))
    return f2 @ hidden + b2 + ws @ xv + xv
