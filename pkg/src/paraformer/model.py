"""The ParaFormer: patch embedding, N parallel branches, linear aggregator.

Every branch consumes the same embedding ``X0``. Stage ``i`` pools the token
outputs of branches ``1..i`` (mean over tokens), projects each through its own
aggregator block and sums:

    logits_i = sum_{j<=i} mean_rows(X_j) @ A_j + bias

Per-branch blocks make stage ``i`` reuse exactly the prefix weights of the full
model, so dropping trailing branches is exact.
"""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import AttnBlockWeights, HeadWeights
from .errors import ConfigError, ShapeError, StageError
from .layers import ACTIVATIONS, BranchWeights, FfnWeights, LayerWeights, branch_forward

INIT_STD = 0.02


@dataclass
class ModelConfig:
    n_branches: int = 4
    layers_per_branch: int = 3
    width: int = 192
    heads: int = 3
    ffn_width: int = 768
    patch_size: int = 4
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    n_classes: int = 10
    activation: str = "gelu"
    prenorm: bool = False
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("n_branches", "layers_per_branch", "width", "heads", "ffn_width",
                    "patch_size", "image_height", "image_width", "channels", "n_classes")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        p = self.patch_size
        if self.image_height % p or self.image_width % p:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} not divisible by patch {p}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def tokens(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EmbeddingWeights:
    patch_proj: np.ndarray  # [p*p*C, D]
    pos: np.ndarray  # [m, D]


@dataclass
class AggregatorWeights:
    per_branch: list[np.ndarray]  # N blocks of [D, n_classes]
    bias: np.ndarray  # [n_classes]


@dataclass(eq=False)
class ParaFormerModel:
    config: ModelConfig
    embed: EmbeddingWeights
    branches: list[BranchWeights]
    agg: AggregatorWeights
    frozen: set[str] = field(default_factory=set)
    # branch index (1-based) -> number of forward evaluations
    branch_calls: Counter = field(default_factory=Counter)

    def __post_init__(self):
        n = len(self.branches)
        if n != len(self.agg.per_branch):
            raise ShapeError(
                f"{n} branches but {len(self.agg.per_branch)} aggregator blocks")
        if n != self.config.n_branches:
            raise ShapeError(f"config says {self.config.n_branches} branches, model has {n}")

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Every parameter array by dotted name, in a fixed order."""
        out: dict[str, np.ndarray] = {}
        for root in ("embed", "branches", "agg"):
            for name, leaf in _walk(getattr(self, root), root):
                out[name] = leaf
        return out

    def bind(self, mapping: dict) -> "ParaFormerModel":
        """Shallow copy whose named leaves are replaced from ``mapping``.

        Used to substitute tape nodes for arrays during training. Shares the
        evaluation counter with ``self``.
        """
        return ParaFormerModel(
            config=self.config,
            embed=_rebuild(self.embed, "embed", mapping),
            branches=_rebuild(self.branches, "branches", mapping),
            agg=_rebuild(self.agg, "agg", mapping),
            frozen=self.frozen,
            branch_calls=self.branch_calls,
        )


def branch_prefix(j: int) -> str:
    """Parameter-name prefix of the 1-based branch ``j``."""
    return f"branches.{j - 1}."


def agg_block_name(j: int) -> str:
    return f"agg.per_branch.{j - 1}"


def _walk(obj, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}")
    elif isinstance(obj, list):
        for k, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{k}")
    else:
        yield prefix, obj


def _rebuild(obj, prefix: str, mapping: dict):
    if dataclasses.is_dataclass(obj):
        kwargs = {f.name: _rebuild(getattr(obj, f.name), f"{prefix}.{f.name}", mapping)
                  for f in dataclasses.fields(obj)}
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [_rebuild(item, f"{prefix}.{k}", mapping) for k, item in enumerate(obj)]
    return mapping.get(prefix, obj)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations (redraw outside)."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_layer(cfg: ModelConfig, rng: np.random.Generator) -> LayerWeights:
    dt, d, dh = cfg.np_dtype, cfg.width, cfg.head_dim
    heads = [HeadWeights(trunc_normal(rng, (d, dh), dtype=dt),
                         trunc_normal(rng, (d, dh), dtype=dt),
                         trunc_normal(rng, (d, dh), dtype=dt))
             for _ in range(cfg.heads)]
    attn = AttnBlockWeights(heads, trunc_normal(rng, (cfg.heads * dh, d), dtype=dt))
    ffn = FfnWeights(trunc_normal(rng, (d, cfg.ffn_width), dtype=dt),
                     np.zeros(cfg.ffn_width, dtype=dt),
                     trunc_normal(rng, (cfg.ffn_width, d), dtype=dt),
                     np.zeros(d, dtype=dt))
    return LayerWeights(attn, ffn)


def init_branch(cfg: ModelConfig, rng: np.random.Generator) -> BranchWeights:
    return BranchWeights([init_layer(cfg, rng) for _ in range(cfg.layers_per_branch)])


def init_model(cfg: ModelConfig) -> ParaFormerModel:
    """Fresh model: truncated-normal projections, zero biases, zero aggregator."""
    rng = np.random.default_rng(cfg.seed)
    dt = cfg.np_dtype
    embed = EmbeddingWeights(trunc_normal(rng, (cfg.patch_dim, cfg.width), dtype=dt),
                             trunc_normal(rng, (cfg.tokens, cfg.width), dtype=dt))
    branches = [init_branch(cfg, rng) for _ in range(cfg.n_branches)]
    agg = AggregatorWeights([np.zeros((cfg.width, cfg.n_classes), dtype=dt)
                             for _ in range(cfg.n_branches)],
                            np.zeros(cfg.n_classes, dtype=dt))
    return ParaFormerModel(cfg, embed, branches, agg)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """``[B, H, W, C] -> [B, (H/p)*(W/p), p*p*C]``; patches and their pixels row-major."""
    b, h, w, c = images.shape
    grid = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return grid.reshape(b, (h // p) * (w // p), p * p * c)


def embed(images: np.ndarray, e: EmbeddingWeights, cfg: ModelConfig):
    """Token matrix ``X0``: projected non-overlapping patches plus positional rows.

    Accepts one image ``[H, W, C]`` or a batch ``[B, H, W, C]``.
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    expected = (cfg.image_height, cfg.image_width, cfg.channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ConfigError(f"image shape {images.shape[1:]} does not match config {expected}")
    patches = patchify(images.astype(cfg.np_dtype, copy=False), cfg.patch_size)
    x0 = T.add(T.matmul(patches, e.patch_proj), e.pos)
    if single:
        return x0.value[0] if isinstance(x0, T.Node) else x0[0]
    return x0


def _check_stage(model: ParaFormerModel, i: int, what: str = "stage") -> None:
    if not 1 <= i <= model.n_branches:
        raise StageError(f"{what} {i} outside [1, {model.n_branches}]")


def branch_output(x0, model: ParaFormerModel, j: int):
    """``X_j`` for the 1-based branch ``j``."""
    model.branch_calls[j] += 1
    cfg = model.config
    return branch_forward(x0, model.branches[j - 1], cfg.activation, cfg.prenorm)


def branch_term(xj, block):
    """Aggregator contribution of one branch output: ``mean_rows(X_j) @ A_j``."""
    return T.matmul(_as_rows(T.mean_rows(xj)), block)


def _as_rows(pooled):
    # a single sample pools to [D]; lift to [1, D] for matmul
    if T.value_of(pooled).ndim == 1:
        return T.Node(pooled.value[None], True, op="lift", parents=(pooled,),
                      vjp=lambda g: (g[0],)) if isinstance(pooled, T.Node) else pooled[None]
    return pooled


def aggregate(terms: list, bias):
    """Sum branch terms in ascending branch order, then add the bias."""
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.add(acc, bias)


def _squeeze_single(logits, x0):
    if T.value_of(x0).ndim == 2:
        return logits.value[0] if isinstance(logits, T.Node) else logits[0]
    return logits


def forward_stage(x0, model: ParaFormerModel, i: int):
    """Logits using branches ``1..i`` only; later branches are not evaluated."""
    _check_stage(model, i)
    terms = [branch_term(branch_output(x0, model, j), model.agg.per_branch[j - 1])
             for j in range(1, i + 1)]
    return _squeeze_single(aggregate(terms, model.agg.bias), x0)


def predict(x0, model: ParaFormerModel):
    return forward_stage(x0, model, model.n_branches)


def branch_features(x0, model: ParaFormerModel, j: int):
    """Token outputs ``X_j`` of branch ``j`` (read only)."""
    _check_stage(model, j, "branch")
    return branch_output(x0, model, j)


def stage_logits(x0: np.ndarray, model: ParaFormerModel) -> list[np.ndarray]:
    """Logits of every stage ``1..N`` from one evaluation of each branch.

    Cumulative sums follow the same order as :func:`forward_stage`, so
    ``stage_logits(x0, m)[i-1]`` is bitwise equal to ``forward_stage(x0, m, i)``.
    """
    out = []
    acc = None
    for j in range(1, model.n_branches + 1):
        t = branch_term(branch_output(x0, model, j), model.agg.per_branch[j - 1])
        acc = t if acc is None else T.add(acc, t)
        out.append(_squeeze_single(T.add(acc, model.agg.bias), x0))
    return out
