"""Weight-error metrics, convergence tables and report files."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import MSE_FLOOR, RecoveryTrace
from .errors import InputError, ShapeMismatchError


@dataclass(frozen=True)
class LayerError:
    layer_id: str
    mse: float
    log10_mse: float

    @classmethod
    def from_mse(cls, layer_id: str, mse: float) -> "LayerError":
        return cls(layer_id, float(mse), math.log10(max(float(mse), MSE_FLOOR)))

    @classmethod
    def between(cls, layer_id: str, recovered, ground_truth) -> "LayerError":
        recovered, ground_truth = np.asarray(recovered), np.asarray(ground_truth)
        if recovered.shape != ground_truth.shape:
            raise ShapeMismatchError(f"layer {layer_id!r}: recovered shape {recovered.shape} "
                                     f"!= ground truth shape {ground_truth.shape}")
        return cls.from_mse(layer_id, np.mean((ground_truth - recovered) ** 2))


def layer_errors(recovered, ground_truth, layer_ids=None) -> list[LayerError]:
    if len(recovered) != len(ground_truth):
        raise ShapeMismatchError(f"{len(recovered)} recovered layers vs "
                                 f"{len(ground_truth)} ground-truth layers")
    if layer_ids is None:
        layer_ids = [str(i) for i in range(len(recovered))]
    return [LayerError.between(lid, r, g) for lid, r, g in zip(layer_ids, recovered, ground_truth)]


def mean_log10(errors: Sequence[LayerError]) -> float:
    if not errors:
        raise InputError("no layers to average")
    return float(np.mean([e.log10_mse for e in errors]))


def w_error(recovered, ground_truth) -> float:
    """Mean over layers of ``log10(MSE(ground_truth - recovered))``.

    Averaging in log space keeps one badly converged layer from swamping the
    rest. An exact match is clamped to ``log10(MSE_FLOOR) = -30``.
    """
    if len(recovered) == 0:
        raise InputError("w_error needs at least one layer")
    return mean_log10(layer_errors(recovered, ground_truth))


def loss_error_correlation(trace: RecoveryTrace) -> float:
    """Pearson correlation between log10(loss) and the per-iteration weight error."""
    if trace.w_errors is None:
        raise InputError("trace has no ground-truth error series")
    losses = np.asarray(trace.losses, dtype=np.float64)
    errors = np.asarray(trace.w_errors, dtype=np.float64)
    usable = losses > 0
    if usable.sum() < 3:
        raise InputError(f"need at least 3 iterations with positive loss, got {int(usable.sum())}")
    x, y = np.log10(losses[usable]), errors[usable]
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise InputError("correlation undefined for a constant series")
    return float(np.corrcoef(x, y)[0, 1])


def convergence_histogram(per_layer_final: Sequence[LayerError], bin_width=1.0, thresholds=None):
    """Cumulative percent of layers whose log10 error is at or below each threshold.

    Thresholds default to multiples of ``bin_width`` spanning the observed
    errors. Pass explicit ``thresholds`` to compare several runs on one grid.
    Returns a list of ``(log10_threshold, cumulative_percent)`` pairs.
    """
    if not per_layer_final:
        raise InputError("histogram needs at least one layer")
    values = np.array([e.log10_mse for e in per_layer_final])
    if thresholds is None:
        lo = math.floor(values.min() / bin_width)
        hi = math.ceil(values.max() / bin_width)
        thresholds = [i * bin_width for i in range(lo, hi + 1)]
    out = []
    for t in thresholds:
        pct = 100.0 * np.count_nonzero(values <= t + 1e-12) / values.size
        out.append((float(t), float(pct)))
    return out


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class BenchmarkReport:
    """Everything a run emits. ``to_dict`` matches the report.json schema."""

    method: str
    config: dict = field(default_factory=dict)
    layers: list[LayerError] = field(default_factory=list)
    traces: list[RecoveryTrace] = field(default_factory=list)
    runs: list[dict] = field(default_factory=list)
    summary: dict | None = None
    extra: dict = field(default_factory=dict)
    run_info: dict = field(default_factory=dict)

    @property
    def w_error(self) -> float | None:
        return mean_log10(self.layers) if self.layers else None

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "config_digest": config_digest(self.config),
            "config": self.config,
            "layers": [{"layer_id": e.layer_id, "mse": e.mse, "log10_mse": e.log10_mse}
                       for e in self.layers],
            "w_error": self.w_error,
            "runs": self.runs,
            "summary": self.summary,
        }
        if self.traces:
            out["convergence"] = [
                {"layer_id": t.layer_id, "iterations": t.steps_run,
                 "final_loss": t.losses[-1], "final_ranks": t.active_ranks[-1]}
                for t in self.traces]
        out.update(self.extra)
        out["run_info"] = self.run_info
        return out

    def check_consistency(self):
        if self.layers:
            recomputed = float(np.mean([e.log10_mse for e in self.layers]))
            if recomputed != self.w_error:
                raise AssertionError("report w_error disagrees with its per-layer entries")


def write_report_json(path, report: BenchmarkReport):
    report.check_consistency()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=False)
        fh.write("\n")


def write_curves_csv(path, traces: Sequence[RecoveryTrace]):
    """One row per (layer, iteration); ``active_rank`` joins per-model ranks with ';'."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer_id", "iteration", "loss", "active_rank", "w_error"])
        for t in traces:
            for i, (value, ranks) in enumerate(zip(t.losses, t.active_ranks), start=1):
                err = "" if t.w_errors is None else repr(t.w_errors[i - 1])
                writer.writerow([t.layer_id, i, repr(value), ";".join(map(str, ranks)), err])


def write_histogram_csv(path, histogram):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["log10_threshold", "cumulative_percent"])
        for threshold, pct in histogram:
            writer.writerow([threshold, pct])
