"""Seeded synthetic LoRA benchmarks with known ground truth, plus the two baselines.

Each layer draws a base ``W_P`` and, per model, factors ``B_i`` (d x r_i) and
``A_i`` (r_i x k); the fine-tuned matrix is the merged ``W_P + B_i @ A_i``.
Random streams are keyed by ``(seed, layer, role, model)`` through Philox, so
any layer can be regenerated on its own.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .engine import LayerGroup, RecoveryConfig, recover_layer
from .errors import ConfigError, InputError
from .metrics import w_error
from .scheduler import SchedulerConfig

_BASE, _MODEL, _FOREIGN_BASE, _FROZEN = 0, 1, 2, 3

METHODS = ("spectral", "mean_lora", "single_lora")


@dataclass(frozen=True)
class SyntheticSpec:
    d: int = 64
    k: int = 64
    n: int = 5
    ranks: Sequence[int] = (4,)
    base_scale: float = 1.0
    update_scale: float = 0.1
    m_layers: int = 1
    seed: int = 0
    foreign_count: int = 0
    frozen_layers: int = 0

    def __post_init__(self):
        ranks = tuple(int(r) for r in self.ranks)
        if len(ranks) == 1 and self.n > 1:
            ranks = ranks * self.n
        object.__setattr__(self, "ranks", ranks)
        if self.d < 1 or self.k < 1:
            raise ConfigError(f"d and k must be positive, got {self.d}x{self.k}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if len(ranks) != self.n:
            raise ConfigError(f"{len(ranks)} ranks given for n={self.n} models")
        if min(ranks) < 1 or max(ranks) > min(self.d, self.k):
            raise ConfigError(f"ranks {list(ranks)} must lie in [1, {min(self.d, self.k)}]")
        if self.base_scale <= 0 or self.update_scale < 0:
            raise ConfigError("base_scale must be positive and update_scale non-negative")
        if self.m_layers < 1:
            raise ConfigError(f"m_layers must be >= 1, got {self.m_layers}")
        if not 0 <= self.foreign_count < self.n:
            raise ConfigError(f"foreign_count must lie in [0, n), got {self.foreign_count}")
        if self.frozen_layers < 0:
            raise ConfigError("frozen_layers must be non-negative")

    @property
    def foreign_indices(self) -> list[int]:
        """Models built on the alternate base are the last ``foreign_count`` ones."""
        return list(range(self.n - self.foreign_count, self.n))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ranks"] = list(self.ranks)
        return out


def _stream(seed, *key) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def layer_name(j: int) -> str:
    return f"layer_{j:03d}"


def _base(spec, layer, role):
    rng = _stream(spec.seed, layer, role, 0)
    return rng.standard_normal((spec.d, spec.k)) * (spec.base_scale / np.sqrt(spec.d))


def lora_update(spec: SyntheticSpec, layer: int, model: int) -> np.ndarray:
    """The merged update ``B @ A`` for one model of one layer."""
    r = spec.ranks[model]
    rng = _stream(spec.seed, layer, _MODEL, model)
    std = spec.update_scale / np.sqrt(r)
    b = rng.standard_normal((spec.d, r)) * std
    a = rng.standard_normal((r, spec.k)) * std
    return b @ a


def generate_layer(spec: SyntheticSpec, layer: int) -> LayerGroup:
    base = _base(spec, layer, _BASE)
    foreign = set(spec.foreign_indices)
    alt = _base(spec, layer, _FOREIGN_BASE) if foreign else None
    mats = [(alt if i in foreign else base) + lora_update(spec, layer, i) for i in range(spec.n)]
    return LayerGroup(layer_name(layer), mats, base)


def generate(spec: SyntheticSpec) -> list[LayerGroup]:
    return [generate_layer(spec, j) for j in range(spec.m_layers)]


def generate_frozen(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    """Layers shared verbatim by every checkpoint (not fine-tuned)."""
    out = {}
    for j in range(spec.frozen_layers):
        rng = _stream(spec.seed, j, _FROZEN, 0)
        out[f"frozen_{j:03d}"] = rng.standard_normal((spec.d, spec.k)) / np.sqrt(spec.d)
    return out


def baseline_single_lora(group: LayerGroup) -> list[np.ndarray]:
    """Every fine-tuned matrix taken on its own as a guess for the base."""
    return [w.copy() for w in group.fine_tuned]


def baseline_mean_lora(group: LayerGroup) -> np.ndarray:
    """Entrywise mean of the fine-tuned matrices (exact when residuals sum to zero)."""
    return np.mean(np.stack(group.fine_tuned), axis=0)


@dataclass
class SubsetSummary:
    method: str
    runs: list[dict] = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        return np.array([r["w_error"] for r in self.runs])

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def std(self) -> float:
        return float(self.values.std())

    def to_dict(self) -> dict:
        return {"method": self.method, "runs": self.runs,
                "summary": {"mean": self.mean, "std": self.std}}


def evaluate_method(layers: Sequence[LayerGroup], method: str, ranks=None, steps=300,
                    scheduler: SchedulerConfig | None = SchedulerConfig(), seed=0,
                    svd_method: str = "exact") -> float:
    """W-error of one method over ``layers`` (which must carry ground truth)."""
    if any(g.ground_truth is None for g in layers):
        raise InputError("evaluation needs ground truth on every layer")
    truth = [g.ground_truth for g in layers]
    if method == "mean_lora":
        return w_error([baseline_mean_lora(g) for g in layers], truth)
    if method == "single_lora":
        n = layers[0].n
        per_model = [w_error([g.fine_tuned[i] for g in layers], truth) for i in range(n)]
        return float(np.mean(per_model))
    if method == "spectral":
        if ranks is None:
            raise ConfigError("spectral recovery needs per-model ranks")
        config = RecoveryConfig(steps=steps, ranks=ranks, scheduler=scheduler, seed=seed,
                                svd_method=svd_method)
        return w_error([recover_layer(g, config).final_w_star for g in layers], truth)
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


def run_subset_protocol(layers: Sequence[LayerGroup], L: int, repeats: int, method: str,
                        seed: int = 0, ranks=None, steps=300,
                        scheduler: SchedulerConfig | None = SchedulerConfig(),
                        svd_method: str = "exact") -> SubsetSummary:
    """Repeatedly sample ``L`` of the pooled models and score ``method`` on them.

    The same model indices are used for every layer of a repeat. ``ranks``
    gives the LoRA rank of each pooled model (needed by ``'spectral'`` only).
    Subset draws depend only on ``(seed, repeat)``, so different methods run
    with one seed see identical subsets.
    """
    pool = layers[0].n
    if not 1 <= L <= pool:
        raise InputError(f"cannot sample L={L} models from a pool of {pool}")
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    if ranks is not None and len(ranks) != pool:
        raise ConfigError(f"{len(ranks)} ranks given for a pool of {pool} models")
    summary = SubsetSummary(method)
    for rep in range(repeats):
        rng = _stream(seed, rep)
        subset = sorted(int(i) for i in rng.choice(pool, size=L, replace=False))
        sub_layers = [g.subset(subset) for g in layers]
        sub_ranks = None if ranks is None else [ranks[i] for i in subset]
        value = evaluate_method(sub_layers, method, sub_ranks, steps, scheduler, seed,
                                svd_method)
        summary.runs.append({"seed": seed, "repeat": rep, "subset": subset, "w_error": value})
    return summary
