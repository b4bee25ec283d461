"""Per-layer recovery of the pre-fine-tuning weights.

The optimiser splits every fine-tuned matrix ``W'_i`` into a shared matrix ``W``
plus a residual ``M_i`` of rank at most ``r_i`` by coordinate descent:

* M-step: with ``W`` fixed, ``M_i`` is the best rank-``r_i`` approximation of
  ``W'_i - W``;
* W-step: with the residuals fixed, ``W`` is the mean of ``W'_i - M_i``.

Both sub-problems are solved exactly, so the loss never increases.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import linalg
from .errors import ConfigError, DivergenceError, ShapeMismatchError, UnderdeterminedError
from .scheduler import SchedulerConfig, initial_state, scheduler_step

MSE_FLOOR = 1e-30


@dataclass(frozen=True)
class LayerGroup:
    """The fine-tuned versions of one layer, with the true base when known.

    ``ground_truth`` is for evaluation only; the optimiser never receives it.
    """

    layer_id: str
    fine_tuned: Sequence[np.ndarray]
    ground_truth: np.ndarray | None = None

    def __post_init__(self):
        mats = [linalg.as_weight_matrix(w, f"{self.layer_id}[{i}]")
                for i, w in enumerate(self.fine_tuned)]
        if not mats:
            raise UnderdeterminedError(f"layer {self.layer_id!r} has no fine-tuned matrices")
        shape = mats[0].shape
        for i, w in enumerate(mats):
            if w.shape != shape:
                raise ShapeMismatchError(
                    f"layer {self.layer_id!r}: model {i} has shape {w.shape}, expected {shape}")
        object.__setattr__(self, "fine_tuned", tuple(mats))
        if self.ground_truth is not None:
            gt = linalg.as_weight_matrix(self.ground_truth, f"{self.layer_id}[ground_truth]")
            if gt.shape != shape:
                raise ShapeMismatchError(
                    f"layer {self.layer_id!r}: ground truth shape {gt.shape} != {shape}")
            object.__setattr__(self, "ground_truth", gt)

    @cached_property
    def stacked(self) -> np.ndarray:
        """The fine-tuned matrices as one read-only ``(n, d, k)`` array."""
        out = np.stack(self.fine_tuned)
        out.flags.writeable = False
        return out

    @property
    def n(self) -> int:
        return len(self.fine_tuned)

    @property
    def shape(self) -> tuple[int, int]:
        return self.fine_tuned[0].shape

    def without_ground_truth(self) -> "LayerGroup":
        return LayerGroup(self.layer_id, self.fine_tuned)

    def subset(self, indices: Sequence[int]) -> "LayerGroup":
        return LayerGroup(self.layer_id, [self.fine_tuned[i] for i in indices], self.ground_truth)


@dataclass(frozen=True)
class RecoveryConfig:
    """Settings for :func:`recover_layer`.

    ``ranks`` holds one LoRA rank per model. ``scheduler=None`` truncates at the
    full rank from the first iteration. ``loss_tolerance`` stops the loop once
    the loss is at or below it (``0`` stops only on an exactly-zero loss).
    ``svd_method`` picks the truncation backend (see
    :func:`detuner.linalg.svd_truncated`); ``seed`` only feeds ``'randomized'``.
    """

    steps: int
    ranks: Sequence[int]
    scheduler: SchedulerConfig | None = field(default_factory=SchedulerConfig)
    loss_tolerance: float = 0.0
    seed: int = 0
    svd_method: str = "exact"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        ranks = tuple(int(r) for r in self.ranks)
        if not ranks or min(ranks) < 1:
            raise ConfigError(f"ranks must be positive integers, got {list(self.ranks)}")
        object.__setattr__(self, "ranks", ranks)
        if self.loss_tolerance < 0:
            raise ConfigError("loss_tolerance must be non-negative")
        if self.svd_method not in ("exact", "gram", "randomized"):
            raise ConfigError(f"unknown svd_method {self.svd_method!r}")


@dataclass
class RecoveryTrace:
    layer_id: str
    losses: list[float]
    active_ranks: list[list[int]]
    final_w_star: np.ndarray
    w_errors: list[float] | None = None

    @property
    def steps_run(self) -> int:
        return len(self.losses)


def _check_like(group: LayerGroup, mats, what):
    if len(mats) != group.n:
        raise ShapeMismatchError(f"expected {group.n} {what}, got {len(mats)}")
    for i, m in enumerate(mats):
        if np.shape(m) != group.shape:
            raise ShapeMismatchError(f"{what}[{i}] has shape {np.shape(m)}, expected {group.shape}")


def initialize(group: LayerGroup) -> np.ndarray:
    """Starting point: the entrywise mean of the fine-tuned matrices."""
    return group.stacked.mean(axis=0)


def m_step(group: LayerGroup, w_star, active_ranks: Sequence[int], method="exact", rng=None):
    """Best rank-``active_ranks[i]`` approximation of each ``W'_i - w_star``."""
    w_star = linalg.as_weight_matrix(w_star, "w_star")
    if w_star.shape != group.shape:
        raise ShapeMismatchError(f"w_star shape {w_star.shape} != {group.shape}")
    if len(active_ranks) != group.n:
        raise ShapeMismatchError(f"expected {group.n} ranks, got {len(active_ranks)}")
    return [linalg.best_rank_r(w - w_star, r, method=method, rng=rng)
            for w, r in zip(group.fine_tuned, active_ranks)]


def w_step(group: LayerGroup, m_stars) -> np.ndarray:
    """Closed-form minimiser over ``W`` of ``sum_i ||W'_i - M_i - W||^2``."""
    _check_like(group, m_stars, "m_stars")
    return (group.stacked - np.stack(m_stars)).mean(axis=0)


def loss(group: LayerGroup, w_star, m_stars) -> float:
    """Mean over models of the mean squared entry of ``W'_i - (w_star + M_i)``."""
    _check_like(group, m_stars, "m_stars")
    if np.shape(w_star) != group.shape:
        raise ShapeMismatchError(f"w_star shape {np.shape(w_star)} != {group.shape}")
    resid = group.stacked - np.asarray(w_star) - np.stack(m_stars)
    return float(np.mean(np.mean(resid ** 2, axis=(1, 2))))


def log10_mse(a, b) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return math.log10(max(mse, MSE_FLOOR))


def _optimize(group: LayerGroup, config: RecoveryConfig, on_iterate=None):
    n = group.n
    if n < 2:
        raise UnderdeterminedError(
            f"layer {group.layer_id!r}: need at least 2 fine-tuned models, got {n}")
    if len(config.ranks) != n:
        raise ConfigError(f"{len(config.ranks)} ranks given for {n} models")
    p = min(group.shape)
    if max(config.ranks) > p:
        raise ConfigError(f"rank {max(config.ranks)} exceeds min(d, k)={p} "
                          f"for layer {group.layer_id!r}")

    rng = np.random.default_rng(config.seed) if config.svd_method == "randomized" else None
    if config.scheduler is not None:
        sched_cfgs = [config.scheduler.resolve(r, config.steps) for r in config.ranks]
        states = [initial_state(c) for c in sched_cfgs]
        active = [s.current_rank for s in states]
    else:
        active = list(config.ranks)

    w_star = initialize(group)
    stop_at = max(config.loss_tolerance,
                  np.finfo(np.float64).eps ** 2 * float(np.mean(group.stacked ** 2)))
    losses, ranks_trace = [], []
    for _ in range(config.steps):
        m_stars = m_step(group, w_star, active, method=config.svd_method, rng=rng)
        w_star = w_step(group, m_stars)
        value = loss(group, w_star, m_stars)
        if not math.isfinite(value):
            raise DivergenceError(f"layer {group.layer_id!r}: non-finite loss at "
                                  f"iteration {len(losses) + 1}")
        losses.append(value)
        ranks_trace.append(list(active))
        if on_iterate is not None:
            on_iterate(w_star)
        if value <= stop_at:
            break
        if config.scheduler is not None:
            states = [scheduler_step(s, c, value) for s, c in zip(states, sched_cfgs)]
            active = [s.current_rank for s in states]
    return w_star, losses, ranks_trace


def recover_layer(group: LayerGroup, config: RecoveryConfig) -> RecoveryTrace:
    """Run the alternating optimisation on one layer and record its trace.

    When ``group.ground_truth`` is present the per-iteration log10 MSE against
    it is recorded too; the optimiser itself only sees the fine-tuned matrices.
    """
    truth = group.ground_truth
    w_errors = [] if truth is not None else None
    callback = (lambda w: w_errors.append(log10_mse(w, truth))) if truth is not None else None
    w_star, losses, ranks_trace = _optimize(group.without_ground_truth(), config, callback)
    return RecoveryTrace(group.layer_id, losses, ranks_trace, w_star, w_errors)
