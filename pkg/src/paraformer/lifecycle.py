"""Branch-prefix compression, branch-addition expansion, retention reports."""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset
from .errors import StageError
from .model import (AggregatorWeights, ParaFormerModel, agg_block_name, branch_prefix,
                    init_branch)
from .trainer import StageMetrics, evaluate_stages


def compress_keep_prefix(model: ParaFormerModel, k: int) -> ParaFormerModel:
    """Model made of the first ``k`` branches and aggregator blocks.

    No recalibration: ``predict`` on the result equals ``forward_stage(model, k)``
    bitwise. Arrays are copied, so the original is untouched by later training.
    """
    if not 1 <= k <= model.n_branches:
        raise StageError(f"keep count {k} outside [1, {model.n_branches}]")
    cfg = replace(model.config, n_branches=k)
    kept = {n for n in model.frozen
            if not n.startswith("branches.") and not n.startswith("agg.per_branch.")}
    kept |= {n for n in model.frozen
             if any(n.startswith(branch_prefix(j)) or n == agg_block_name(j)
                    for j in range(1, k + 1))}
    return ParaFormerModel(
        config=cfg,
        embed=copy.deepcopy(model.embed),
        branches=copy.deepcopy(model.branches[:k]),
        agg=AggregatorWeights([b.copy() for b in model.agg.per_branch[:k]],
                              model.agg.bias.copy()),
        frozen=kept,
    )


def expand_add_branch(model: ParaFormerModel, init_seed: int,
                      freeze_existing: bool = False) -> ParaFormerModel:
    """Append a freshly initialised branch with a zero aggregator block.

    The zero block leaves every prediction unchanged until it is trained.
    With ``freeze_existing`` every parameter of the original model (embedding,
    branches, aggregator blocks and bias) is excluded from later updates.
    """
    cfg = replace(model.config, n_branches=model.n_branches + 1)
    rng = np.random.default_rng(init_seed)
    branches = copy.deepcopy(model.branches) + [init_branch(cfg, rng)]
    blocks = [b.copy() for b in model.agg.per_branch]
    blocks.append(np.zeros_like(blocks[0]))
    frozen = set(model.frozen)
    if freeze_existing:
        frozen |= set(model.named_parameters())
    return ParaFormerModel(cfg, copy.deepcopy(model.embed), branches,
                           AggregatorWeights(blocks, model.agg.bias.copy()), frozen)


@dataclass
class RetentionReport:
    """Per-stage accuracy on an old shard before and after further training."""
    before: list[StageMetrics]
    after: list[StageMetrics]

    def rows(self) -> list[dict]:
        after = {m.stage: m for m in self.after}
        return [{"stage": b.stage, "acc_before": b.accuracy,
                 "acc_after": after[b.stage].accuracy if b.stage in after else float("nan"),
                 "loss_before": b.loss,
                 "loss_after": after[b.stage].loss if b.stage in after else float("nan")}
                for b in self.before]


def retention_report(before_model: ParaFormerModel, after_model: ParaFormerModel,
                     old_shard: Dataset) -> RetentionReport:
    return RetentionReport(evaluate_stages(before_model, old_shard),
                           evaluate_stages(after_model, old_shard))
