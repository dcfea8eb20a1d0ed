"""Progressive, milestone and joint training; per-stage evaluation.

Progressive training follows the staged loop literally: for every batch, stage
``i = 1..N`` is evaluated and only branches ``1..i``, the embedding and the
aggregator prefix ``1..i`` (plus its bias) are updated. A second sweep over
the batches then updates the full model on the stage-``N`` loss.

Batch order depends only on ``(seed, sweep)``, where every pass over the
training set consumes one sweep index. With one branch a progressive epoch is
therefore exactly two joint epochs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ConfigError, DataError
from .model import (ParaFormerModel, agg_block_name, branch_prefix, embed, forward_stage,
                    stage_logits)

SCHEDULES = ("progressive", "milestone", "joint")
# alternative spellings accepted in configs
SCHEDULE_ALIASES = {"verbatim-alg1": "progressive"}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: str = "progressive"
    milestones: tuple[int, ...] | None = None
    seed: int = 0
    loss: str = "cross_entropy"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        self.schedule = SCHEDULE_ALIASES.get(self.schedule, self.schedule)
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.loss != "cross_entropy":
            raise ConfigError(f"unsupported loss {self.loss!r}")
        if self.milestones is not None:
            ms = tuple(int(m) for m in self.milestones)
            if any(b < a for a, b in zip(ms, ms[1:])):
                raise ConfigError(f"milestones must be non-decreasing: {ms}")
            if ms and (ms[0] < 1 or ms[-1] > self.epochs):
                raise ConfigError(f"milestones {ms} must lie within epochs 1..{self.epochs}")
            self.milestones = ms
        elif self.schedule == "milestone":
            raise ConfigError("milestone schedule needs milestones")


@dataclass
class StageMetrics:
    epoch: int
    stage: int
    split: str
    loss: float
    accuracy: float
    wall_ms: float


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


@dataclass
class TrainState:
    adam: AdamState = field(default_factory=AdamState)
    sweep: int = 0
    epoch: int = 0


# hook(event, stage, model) with event "before" or "after" around every update
UpdateHook = Callable[[str, int, ParaFormerModel], None]


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place.

    Only names present in ``grads`` move; each parameter keeps its own step
    count so parameters updated at different rates stay correctly corrected.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        elif m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        v = state.v[name]
        t = state.t[name] = state.t[name] + 1
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p
        p -= (cfg.learning_rate * update).astype(p.dtype, copy=False)


def stage_parameter_names(model: ParaFormerModel, i: int) -> list[str]:
    """Parameters a stage-``i`` update may touch, minus frozen ones."""
    prefixes = ("embed.", *(branch_prefix(j) for j in range(1, i + 1)))
    blocks = {agg_block_name(j) for j in range(1, i + 1)} | {"agg.bias"}
    return [n for n in model.named_parameters()
            if (n.startswith(prefixes) or n in blocks) and n not in model.frozen]


def batch_order(n: int, batch_size: int, seed: int, sweep: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, sweep]).permutation(n)
    return [perm[k:k + batch_size] for k in range(0, n, batch_size)]


def _require_data(model: ParaFormerModel, data: Dataset) -> None:
    if len(data) == 0:
        raise DataError("training set is empty")
    cfg = model.config
    expected = (cfg.image_height, cfg.image_width, cfg.channels)
    if data.image_shape != expected:
        raise DataError(f"data images {data.image_shape} do not match model {expected}")
    if data.n_classes != cfg.n_classes:
        raise DataError(f"data has {data.n_classes} classes, model {cfg.n_classes}")


def train_step(model: ParaFormerModel, images: np.ndarray, labels: np.ndarray, stage: int,
               state: TrainState, cfg: TrainConfig,
               hook: UpdateHook | None = None) -> tuple[float, float]:
    """One update on the stage-``stage`` loss. Returns (loss, accuracy) before the update."""
    params = model.named_parameters()
    names = stage_parameter_names(model, stage)
    nodes = {n: T.Node(params[n], requires_grad=True) for n in names}
    bound = model.bind(nodes)
    x0 = embed(images, bound.embed, model.config)
    logits = forward_stage(x0, bound, stage)
    loss = T.cross_entropy(logits, labels)
    logit_values = T.value_of(logits)
    acc = float(np.mean(np.argmax(logit_values, axis=1) == labels))
    if hook is not None:
        hook("before", stage, model)
    if isinstance(loss, T.Node):
        T.backward(loss)
        adam_step(params, {n: nodes[n].grad for n in names}, state.adam, cfg)
    if hook is not None:
        hook("after", stage, model)
    return float(T.value_of(loss)), acc


class _Meter:
    def __init__(self):
        self.loss = self.correct = 0.0
        self.count = 0
        self.ms = 0.0

    def add(self, loss: float, acc: float, n: int, ms: float) -> None:
        self.loss += loss * n
        self.correct += acc * n
        self.count += n
        self.ms += ms

    def metrics(self, epoch: int, stage: int, split: str) -> StageMetrics:
        c = max(self.count, 1)
        return StageMetrics(epoch, stage, split, self.loss / c, self.correct / c, self.ms)


def progressive_epoch(model: ParaFormerModel, data: Dataset, cfg: TrainConfig,
                      state: TrainState | None = None,
                      hook: UpdateHook | None = None) -> list[StageMetrics]:
    """One epoch of staged training; returns per-stage train metrics.

    Stage ``i`` metrics average the stage-``i`` batch losses seen during the
    staged sweep. The wall time of the closing full-model sweep is added to
    stage ``N``.
    """
    _require_data(model, data)
    state = state if state is not None else TrainState()
    state.epoch += 1
    n = model.n_branches
    meters = [_Meter() for _ in range(n)]
    for idx in batch_order(len(data), cfg.batch_size, cfg.seed, state.sweep):
        images, labels = data.images[idx], data.labels[idx]
        for i in range(1, n + 1):
            t0 = time.perf_counter()
            loss, acc = train_step(model, images, labels, i, state, cfg, hook)
            meters[i - 1].add(loss, acc, len(idx), (time.perf_counter() - t0) * 1e3)
    state.sweep += 1
    t0 = time.perf_counter()
    for idx in batch_order(len(data), cfg.batch_size, cfg.seed, state.sweep):
        train_step(model, data.images[idx], data.labels[idx], n, state, cfg, hook)
    state.sweep += 1
    meters[-1].ms += (time.perf_counter() - t0) * 1e3
    return [meters[i].metrics(state.epoch, i + 1, "train") for i in range(n)]


def _active_stage(cfg: TrainConfig, epoch: int, n: int) -> int:
    return min(n, sum(1 for m in cfg.milestones if m <= epoch))


def milestone_epoch(model: ParaFormerModel, data: Dataset, cfg: TrainConfig,
                    state: TrainState | None = None,
                    hook: UpdateHook | None = None) -> int:
    """One epoch where branch ``i`` trains only from its milestone epoch on.

    Trains the stage-``k`` loss, ``k`` being the number of reached milestones.
    Returns ``k`` (0 means nothing was trained this epoch).
    """
    _require_data(model, data)
    state = state if state is not None else TrainState()
    state.epoch += 1
    if len(cfg.milestones) < model.n_branches:
        raise ConfigError(
            f"{len(cfg.milestones)} milestones for {model.n_branches} branches")
    k = _active_stage(cfg, state.epoch, model.n_branches)
    if k:
        for idx in batch_order(len(data), cfg.batch_size, cfg.seed, state.sweep):
            train_step(model, data.images[idx], data.labels[idx], k, state, cfg, hook)
    state.sweep += 1
    return k


def joint_epoch(model: ParaFormerModel, data: Dataset, cfg: TrainConfig,
                state: TrainState | None = None,
                hook: UpdateHook | None = None) -> None:
    """One epoch on the full-model loss only, updating every trainable parameter."""
    _require_data(model, data)
    state = state if state is not None else TrainState()
    state.epoch += 1
    for idx in batch_order(len(data), cfg.batch_size, cfg.seed, state.sweep):
        train_step(model, data.images[idx], data.labels[idx], model.n_branches, state, cfg,
                   hook)
    state.sweep += 1


def evaluate_stages(model: ParaFormerModel, data: Dataset, epoch: int = 0,
                    batch_size: int = 256) -> list[StageMetrics]:
    """Loss and accuracy of every stage on ``data``; weights are not modified."""
    n = model.n_branches
    meters = [_Meter() for _ in range(n)]
    for start in range(0, len(data), batch_size):
        images = data.images[start:start + batch_size]
        labels = data.labels[start:start + batch_size]
        t0 = time.perf_counter()
        x0 = embed(images, model.embed, model.config)
        per_stage = stage_logits(x0, model)
        ms = (time.perf_counter() - t0) * 1e3 / n
        for i, logits in enumerate(per_stage):
            loss = float(T.cross_entropy(logits, labels))
            acc = float(np.mean(np.argmax(logits, axis=1) == labels))
            meters[i].add(loss, acc, len(labels), ms)
    return [meters[i].metrics(epoch, i + 1, data.split) for i in range(n)]


def train(model: ParaFormerModel, data: Dataset, cfg: TrainConfig,
          test_data: Dataset | None = None, state: TrainState | None = None,
          hook: UpdateHook | None = None,
          log: Callable[[StageMetrics], None] | None = None) -> list[StageMetrics]:
    """Run ``cfg.epochs`` epochs of ``cfg.schedule``; returns the metrics stream.

    Every epoch emits one row per stage for the train split (and the test
    split when given). Progressive train rows are running averages from the
    staged sweep; milestone and joint train rows come from evaluating the
    model at the end of the epoch.
    """
    state = state if state is not None else TrainState()
    stream: list[StageMetrics] = []
    for _ in range(cfg.epochs):
        if cfg.schedule == "progressive":
            rows = progressive_epoch(model, data, cfg, state, hook)
        else:
            step = milestone_epoch if cfg.schedule == "milestone" else joint_epoch
            step(model, data, cfg, state, hook)
            rows = evaluate_stages(model, data, state.epoch)
        if test_data is not None:
            rows = rows + evaluate_stages(model, test_data, state.epoch)
        for r in rows:
            if log is not None:
                log(r)
        stream.extend(rows)
    return stream


def milestone_train(model, data, cfg, test_data=None, state=None, hook=None, log=None):
    if cfg.milestones is None:
        raise ConfigError("milestone schedule needs milestones")
    return train(model, data, _with_schedule(cfg, "milestone"), test_data, state, hook, log)


def joint_train(model, data, cfg, test_data=None, state=None, hook=None, log=None):
    return train(model, data, _with_schedule(cfg, "joint"), test_data, state, hook, log)


def progressive_train(model, data, cfg, test_data=None, state=None, hook=None, log=None):
    return train(model, data, _with_schedule(cfg, "progressive"), test_data, state, hook, log)


def _with_schedule(cfg: TrainConfig, schedule: str) -> TrainConfig:
    return cfg if cfg.schedule == schedule else replace(cfg, schedule=schedule)
