"""Branch-parallel inference on a long-lived thread pool, and its benchmark.

Each task receives the shared embedding ``X0``, one branch's weights and that
branch's aggregator block, and returns the branch's logit term. The
coordinator sums the terms in ascending branch order whatever order they
finish in, so the result is bitwise equal to :func:`paraformer.model.predict`.

numpy releases the GIL inside matmul and most ufuncs, so threads give real
overlap when BLAS itself is held to one thread (see :func:`bench_inference`).
"""

from __future__ import annotations

import os
import queue
import statistics
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, PoolError
from .layers import BranchWeights, branch_forward
from .model import (ParaFormerModel, _squeeze_single, aggregate, branch_term, embed, predict)

PINNING = ("none", "round-robin")


@dataclass
class PoolConfig:
    workers: int = 1
    batch_size: int = 64
    pinning: str = "none"

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.pinning not in PINNING:
            raise ConfigError(f"pinning must be one of {PINNING}, got {self.pinning!r}")


@dataclass
class Dispatch:
    """What one task was handed: used to audit that branches share nothing but X0."""
    branch: int
    worker: int
    x0_id: int
    array_ids: frozenset


class _Call:
    def __init__(self, n: int):
        self.results: list[Any] = [None] * n
        self.remaining = n
        self.error: BaseException | None = None


class BranchPool:
    """Fixed set of worker threads fed by per-worker or shared queues.

    With ``pinning="round-robin"`` branch ``j`` always runs on worker
    ``(j - 1) % W`` and, where the OS allows, worker ``w`` is bound to CPU
    ``w % ncpu``. With ``"none"`` workers pull from one shared queue.
    Not safe for concurrent use from several coordinating threads.
    """

    def __init__(self, workers: int = 1, pinning: str = "none", record: bool = False):
        PoolConfig(workers=workers, pinning=pinning)
        self.workers = workers
        self.pinning = pinning
        self.record = record
        self.dispatch_log: list[Dispatch] = []
        self._closed = False
        self._cond = threading.Condition()
        n_queues = workers if pinning == "round-robin" else 1
        self._queues = [queue.SimpleQueue() for _ in range(n_queues)]
        self._threads = [threading.Thread(target=self._run, args=(w,), daemon=True,
                                          name=f"branch-worker-{w}")
                         for w in range(workers)]
        for t in self._threads:
            t.start()

    def __enter__(self) -> "BranchPool":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    @property
    def closed(self) -> bool:
        return self._closed

    def _run(self, w: int) -> None:
        if self.pinning == "round-robin" and hasattr(os, "sched_setaffinity"):
            cpus = sorted(os.sched_getaffinity(0))
            try:
                os.sched_setaffinity(0, {cpus[w % len(cpus)]})
            except OSError:
                pass
        q = self._queues[w if len(self._queues) > 1 else 0]
        while True:
            item = q.get()
            if item is None:
                return
            call, slot, fn, args = item
            try:
                out, err = fn(*args), None
            except BaseException as exc:  # surfaced to the coordinator
                out, err = None, exc
            with self._cond:
                if err is not None and call.error is None:
                    call.error = err
                call.results[slot] = out
                call.remaining -= 1
                self._cond.notify_all()

    def run(self, fn: Callable, arg_lists: Sequence[tuple]) -> list:
        """Run ``fn(*args)`` for each entry; results in input order, all or nothing."""
        if self._closed:
            raise PoolError("pool is shut down")
        call = _Call(len(arg_lists))
        for slot, args in enumerate(arg_lists):
            w = slot % self.workers
            if self.record:
                self.dispatch_log.append(_describe(slot + 1, w, args))
            q = self._queues[w if len(self._queues) > 1 else 0]
            q.put((call, slot, fn, args))
        with self._cond:
            while call.remaining and not self._closed:
                self._cond.wait()
            if call.remaining:
                raise PoolError("pool shut down before all branch results arrived")
        if call.error is not None:
            raise PoolError(f"branch task failed: {call.error!r}") from call.error
        return call.results

    def shutdown(self) -> None:
        with self._cond:
            if self._closed:
                return
            self._closed = True
            self._cond.notify_all()
        for q in self._queues:
            for _ in range(self.workers if len(self._queues) == 1 else 1):
                q.put(None)


def _describe(branch: int, worker: int, args: tuple) -> Dispatch:
    x0, weights, block = args[0], args[1], args[2]
    ids = {id(block)}
    for layer in weights.layers:
        ids |= {id(a) for a in (layer.attn.w_o, layer.ffn.w_f1, layer.ffn.b_f1,
                                layer.ffn.w_f2, layer.ffn.b_f2)}
        for h in layer.attn.heads:
            ids |= {id(h.w_q), id(h.w_k), id(h.w_v)}
    return Dispatch(branch, worker, id(x0), frozenset(ids))


def _branch_task(x0: np.ndarray, weights: BranchWeights, block: np.ndarray,
                 activation: str, prenorm: bool) -> np.ndarray:
    return branch_term(branch_forward(x0, weights, activation, prenorm), block)


def parallel_predict(x0: np.ndarray, model: ParaFormerModel, pool: BranchPool):
    """Full-model logits with branches evaluated concurrently on ``pool``."""
    cfg = model.config
    args = [(x0, model.branches[j - 1], model.agg.per_branch[j - 1], cfg.activation,
             cfg.prenorm) for j in range(1, model.n_branches + 1)]
    terms = pool.run(_branch_task, args)
    for j in range(1, model.n_branches + 1):
        model.branch_calls[j] += 1
    return _squeeze_single(aggregate(terms, model.agg.bias), x0)


@dataclass
class BenchReport:
    label: str
    workers: int
    n_branches: int
    layers_per_branch: int
    width: int
    batch_size: int
    samples: int
    wall_ms: float
    speedup: float
    per_branch_ms: list[float] = field(default_factory=list)
    outputs_match: bool = True
    pinning: str = "none"

    def row(self) -> dict:
        return {
            "label": self.label, "workers": self.workers, "pinning": self.pinning,
            "n_branches": self.n_branches, "layers_per_branch": self.layers_per_branch,
            "width": self.width, "batch_size": self.batch_size, "samples": self.samples,
            "wall_ms": self.wall_ms, "speedup": self.speedup,
            "per_branch_ms": ";".join(f"{v:.3f}" for v in self.per_branch_ms),
            "outputs_match": self.outputs_match,
        }


def _timed(fn: Callable[[], list], warmup: int, repeats: int) -> tuple[float, list]:
    for _ in range(warmup):
        fn()
    times = []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times), out


def bench_inference(model: ParaFormerModel, images: np.ndarray,
                    pool_configs: Sequence[PoolConfig], warmup: int = 2,
                    repeats: int = 5, blas_threads: int | None = 1) -> list[BenchReport]:
    """Median wall time over the whole image set for a sequential baseline and each pool.

    The first report is the single-threaded sequential baseline; speedups are
    relative to it. BLAS is limited to ``blas_threads`` threads during the run
    so that branch-level threading is what is measured.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("benchmark needs at least one image")
    cfg = model.config
    batch = pool_configs[0].batch_size if pool_configs else 64
    x0s = [embed(images[k:k + batch], model.embed, cfg) for k in range(0, len(images), batch)]

    def common(label, workers, pinning, ms, speedup, per_branch, match, bs):
        return BenchReport(label, workers, model.n_branches, cfg.layers_per_branch, cfg.width,
                           bs, len(images), ms, speedup, per_branch, match, pinning)

    reports = []
    limiter = threadpool_limits(blas_threads) if blas_threads else None
    try:
        base_ms, base_out = _timed(lambda: [predict(x, model) for x in x0s], warmup, repeats)
        per_branch = []
        for j in range(1, model.n_branches + 1):
            t0 = time.perf_counter()
            for x in x0s:
                _branch_task(x, model.branches[j - 1], model.agg.per_branch[j - 1],
                             cfg.activation, cfg.prenorm)
            per_branch.append((time.perf_counter() - t0) * 1e3)
        reports.append(common("sequential", 1, "none", base_ms, 1.0, per_branch, True, batch))
        for pc in pool_configs:
            if pc.batch_size != batch:
                xs = [embed(images[k:k + pc.batch_size], model.embed, cfg)
                      for k in range(0, len(images), pc.batch_size)]
            else:
                xs = x0s
            workers = min(pc.workers, model.n_branches)
            with BranchPool(workers, pc.pinning) as pool:
                ms, out = _timed(lambda: [parallel_predict(x, model, pool) for x in xs],
                                 warmup, repeats)
            match = (pc.batch_size == batch
                     and all(np.array_equal(a, b) for a, b in zip(out, base_out)))
            if pc.batch_size != batch:
                ref = [predict(x, model) for x in xs]
                match = all(np.array_equal(a, b) for a, b in zip(out, ref))
            reports.append(common(f"parallel-w{workers}", workers, pc.pinning, ms,
                                  base_ms / ms, [], match, pc.batch_size))
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return reports
