"""Increase-on-plateau schedule for the active truncation rank.

Modelled on ``ReduceLROnPlateau`` in relative-threshold mode, inverted: when the
loss stops improving for ``patience`` consecutive steps the rank is multiplied by
``factor`` instead of the learning rate being divided. Past a fixed fraction of
the step budget the rank jumps to ``end_rank`` regardless of progress.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import ConfigError, NonFiniteError


@dataclass(frozen=True)
class SchedulerConfig:
    """Scheduler hyper-parameters.

    ``end_rank`` and ``total_steps`` may be left as ``None`` on a template that
    :func:`detuner.engine.recover_layer` fills in per model from the recovery
    config; :meth:`resolve` does the filling.
    """

    start_rank: int = 1
    end_rank: int | None = None
    factor: float = 2.0
    patience: int = 15
    force_end_rank_percent: float = 0.5
    rel_improvement_threshold: float = 1e-4
    total_steps: int | None = None

    def __post_init__(self):
        if self.start_rank < 1:
            raise ConfigError(f"start_rank must be >= 1, got {self.start_rank}")
        if self.end_rank is not None and self.end_rank < self.start_rank:
            raise ConfigError(f"end_rank {self.end_rank} < start_rank {self.start_rank}")
        if not self.factor > 1:
            raise ConfigError(f"factor must be > 1, got {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0 < self.force_end_rank_percent <= 1:
            raise ConfigError("force_end_rank_percent must lie in (0, 1]")
        if self.rel_improvement_threshold < 0:
            raise ConfigError("rel_improvement_threshold must be non-negative")
        if self.total_steps is not None and self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")

    def resolve(self, end_rank: int, total_steps: int) -> "SchedulerConfig":
        """Concrete config for one model whose LoRA rank is ``end_rank``."""
        return replace(self, start_rank=min(self.start_rank, end_rank),
                       end_rank=end_rank, total_steps=total_steps)

    @property
    def force_step(self) -> float:
        return self.force_end_rank_percent * self.total_steps


@dataclass(frozen=True)
class SchedulerState:
    current_rank: int
    best_loss_since_increase: float = math.inf
    stall_counter: int = 0
    steps_elapsed: int = 0


def initial_state(config: SchedulerConfig) -> SchedulerState:
    return SchedulerState(current_rank=config.start_rank)


def scheduler_step(state: SchedulerState, config: SchedulerConfig, loss: float) -> SchedulerState:
    """Advance the schedule by one observed loss value."""
    if config.end_rank is None or config.total_steps is None:
        raise ConfigError("scheduler config is a template; call resolve() first")
    if not math.isfinite(loss):
        raise NonFiniteError(f"scheduler received non-finite loss {loss!r}")

    rank = state.current_rank
    best = state.best_loss_since_increase
    stall = state.stall_counter
    elapsed = state.steps_elapsed + 1

    if loss < best * (1 - config.rel_improvement_threshold):
        best, stall = loss, 0
    else:
        stall += 1

    if stall > config.patience:
        rank = min(config.end_rank, math.ceil(rank * config.factor))
        best, stall = math.inf, 0

    if elapsed >= config.force_step:
        rank = config.end_rank

    return SchedulerState(rank, best, stall, elapsed)


class RankScheduler:
    """Stateful wrapper: ``step(loss)`` then read ``current_rank``."""

    def __init__(self, config: SchedulerConfig):
        self.config = config
        self.state = initial_state(config)

    @property
    def current_rank(self) -> int:
        return self.state.current_rank

    def step(self, loss: float) -> int:
        self.state = scheduler_step(self.state, self.config, loss)
        return self.state.current_rank
