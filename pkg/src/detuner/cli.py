"""Command-line front end.

Subcommands: ``recover``, ``estimate-rank``, ``generate-synthetic``, ``evaluate``
and ``detect``. Exit codes: 0 success, 2 configuration error, 3 input error,
4 optimizer divergence, 5 no common ancestor among the inputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import fnmatch
import json
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint, metrics, ranks as rank_inference, synth
from .engine import LayerGroup, RecoveryConfig, recover_layer
from .errors import (CheckpointError, ConfigError, DetunerError, DivergenceError, InputError,
                     NoCommonAncestorError)
from .scheduler import SchedulerConfig

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_DIVERGED, EXIT_NO_ANCESTOR = 0, 2, 3, 4, 5
BENCHMARK_MANIFEST = "benchmark.json"
_SCHED_FIELDS = ("start_rank", "factor", "patience", "force_end_rank_percent",
                 "rel_improvement_threshold")
_SVD_METHODS = ("exact", "gram", "randomized")


@dataclasses.dataclass
class RunConfig:
    inputs: list
    output: str | None = None
    steps: int = 300
    scheduler: dict | None = dataclasses.field(default_factory=dict)
    ranks: object = "estimate"
    layers: str = "*"
    jobs: int = 1
    seed: int = 0
    method: str = "spectral"
    loss_tolerance: float = 0.0
    ground_truth: str | None = None
    svd_method: str = "exact"

    def validate(self):
        if not self.inputs:
            raise ConfigError("no --inputs given")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.method not in synth.METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {synth.METHODS}")
        if self.svd_method not in _SVD_METHODS:
            raise ConfigError(f"unknown svd_method {self.svd_method!r}; "
                              f"expected one of {_SVD_METHODS}")
        if self.ranks != "estimate":
            if not isinstance(self.ranks, list) or not all(
                    isinstance(r, int) and r >= 1 for r in self.ranks):
                raise ConfigError(f"ranks must be 'estimate' or positive integers, got {self.ranks}")
        if self.scheduler is not None:
            unknown = set(self.scheduler) - set(_SCHED_FIELDS)
            if unknown:
                raise ConfigError(f"unknown scheduler fields {sorted(unknown)}")
            self.scheduler_config()

    def scheduler_config(self) -> SchedulerConfig | None:
        if self.scheduler is None:
            return None
        return SchedulerConfig(**self.scheduler)

    def digest_view(self) -> dict:
        """Resolved settings that determine numeric output (no paths, no job count)."""
        out = dataclasses.asdict(self)
        for key in ("inputs", "output", "jobs", "ground_truth"):
            out.pop(key)
        out["scheduler"] = (None if self.scheduler is None
                            else dataclasses.asdict(self.scheduler_config()))
        return out


def _parse_ranks(text):
    if text is None:
        return None
    if text == "estimate":
        return "estimate"
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--ranks must be 'estimate' or comma-separated integers, got {text!r}")


def _default_jobs():
    env = os.environ.get("DETUNER_JOBS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"DETUNER_JOBS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _resolve_run_config(args) -> RunConfig:
    base: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                base = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(base) - {f.name for f in dataclasses.fields(RunConfig)}
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
    sched = base.get("scheduler", {})
    sched = None if sched is None else dict(sched)
    if getattr(args, "no_scheduler", False):
        sched = None
    for name in _SCHED_FIELDS:
        value = getattr(args, f"scheduler_{name}", None)
        if value is not None:
            if sched is None:
                sched = {}
            sched[name] = value
    merged = dict(base)
    merged["scheduler"] = sched
    for key in ("inputs", "output", "steps", "layers", "jobs", "seed", "method",
                "loss_tolerance", "ground_truth", "svd_method"):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    ranks = _parse_ranks(getattr(args, "ranks", None))
    if ranks is not None:
        merged["ranks"] = ranks
    merged.setdefault("jobs", _default_jobs())
    merged.setdefault("inputs", [])
    try:
        config = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    config.validate()
    return config


# -- input discovery ---------------------------------------------------------------

def _resolve_inputs(paths):
    """Expand a benchmark directory into model files (+ ground truth when recorded)."""
    if len(paths) == 1 and Path(paths[0]).is_dir():
        root = Path(paths[0])
        manifest = root / BENCHMARK_MANIFEST
        if manifest.exists():
            doc = json.loads(manifest.read_text(encoding="utf-8"))
            gt = doc.get("ground_truth")
            return [str(root / m) for m in doc["models"]], (str(root / gt) if gt else None)
        files = sorted(str(p) for p in root.iterdir()
                       if p.suffix in (".lwra", ".safetensors"))
        return files, None
    for p in paths:
        if not Path(p).is_file():
            raise InputError(f"input {p} does not exist")
    return list(paths), None


def _load_inputs(config: RunConfig, minimum: int):
    files, bench_truth = _resolve_inputs(config.inputs)
    if len(files) < minimum:
        raise InputError(f"need at least {minimum} input checkpoints, got {len(files)}")
    checkpoints = [checkpoint.load_any(f)[1] for f in files]
    tuned = sorted(rank_inference.detect_finetuned_layers(checkpoints))
    return files, checkpoints, tuned, config.ground_truth or bench_truth


def _select_layers(tuned, checkpoints, pattern):
    selected = [name for name in tuned if fnmatch.fnmatchcase(name, pattern)]
    if not selected:
        available = sorted(checkpoints[0])
        raise InputError(f"layer filter {pattern!r} matched no fine-tuned layer; "
                         f"fine-tuned: {tuned}; available: {available}")
    return selected


def _stamp():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# -- recover -----------------------------------------------------------------------

def _recover_task(task):
    layer_id, mats, layer_ranks, steps, sched, tol, seed, svd_method = task
    config = RecoveryConfig(steps=steps, ranks=layer_ranks, scheduler=sched,
                            loss_tolerance=tol, seed=seed, svd_method=svd_method)
    return recover_layer(LayerGroup(layer_id, mats), config)


def _layer_ranks(config, group):
    if config.ranks == "estimate":
        est = rank_inference.estimate_ranks(group)
        if est.status == "infeasible":
            raise InputError(f"layer {group.layer_id!r}: rank program infeasible")
        if est.status == "ambiguous":
            chosen = [max(col) for col in zip(*est.optimal_solutions)] if est.optimal_solutions \
                else [min(group.shape)] * group.n
            warnings.warn(f"layer {group.layer_id!r}: rank estimate ambiguous, using "
                          f"element-wise maximum {chosen}", stacklevel=2)
            return chosen
        return est.ranks
    if len(config.ranks) == 1:
        return config.ranks * group.n
    if len(config.ranks) != group.n:
        raise ConfigError(f"{len(config.ranks)} ranks given for {group.n} models")
    return list(config.ranks)


def cmd_recover(config: RunConfig, out=None) -> int:
    out = out or sys.stdout
    started = _stamp()
    t0 = time.perf_counter()
    files, checkpoints, tuned, truth_path = _load_inputs(config, minimum=2)
    selected = _select_layers(tuned, checkpoints, config.layers)
    groups = [LayerGroup(name, [c[name] for c in checkpoints]) for name in selected]
    truth = checkpoint.load_any(truth_path)[1] if truth_path else None
    if truth is not None:
        missing = sorted(set(selected) - set(truth))
        if missing:
            raise InputError(f"ground truth lacks layers {missing}")

    if config.output is None:
        raise ConfigError("--output is required")
    outdir = Path(config.output)
    outdir.mkdir(parents=True, exist_ok=True)

    layer_ranks, traces, recovered = {}, [], {}
    if config.method == "spectral":
        sched = config.scheduler_config()
        tasks = []
        for g in groups:
            layer_ranks[g.layer_id] = _layer_ranks(config, g)
            tasks.append((g.layer_id, list(g.fine_tuned), layer_ranks[g.layer_id], config.steps,
                          sched, config.loss_tolerance, config.seed, config.svd_method))
        if config.jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=min(config.jobs, len(tasks))) as pool:
                results = pool.map(_recover_task, tasks)
                for trace in results:
                    _progress(out, trace)
                    traces.append(trace)
        else:
            for task in tasks:
                trace = _recover_task(task)
                _progress(out, trace)
                traces.append(trace)
        recovered = {t.layer_id: t.final_w_star for t in traces}
    elif config.method == "mean_lora":
        recovered = {g.layer_id: synth.baseline_mean_lora(g) for g in groups}
    else:
        recovered = {g.layer_id: g.fine_tuned[0].copy() for g in groups}

    report = metrics.BenchmarkReport(method=config.method, config=config.digest_view(),
                                     traces=traces)
    if truth is not None:
        if config.method == "single_lora":
            # score every candidate and keep the layer-wise mean of their log errors
            per_layer = []
            for g in groups:
                errs = [metrics.LayerError.between(g.layer_id, w, truth[g.layer_id])
                        for w in g.fine_tuned]
                per_layer.append(metrics.LayerError(
                    g.layer_id, float(np.mean([e.mse for e in errs])),
                    float(np.mean([e.log10_mse for e in errs]))))
            report.layers = per_layer
        else:
            report.layers = [metrics.LayerError.between(n, recovered[n], truth[n])
                             for n in selected]
        metrics.write_histogram_csv(outdir / "histogram.csv",
                                    metrics.convergence_histogram(report.layers))
    report.extra = {"inputs": [Path(f).name for f in files], "fine_tuned_layers": tuned,
                    "recovered_layers": selected, "ranks": layer_ranks}
    report.run_info = {"started_at": started, "finished_at": _stamp(),
                       "elapsed_seconds": round(time.perf_counter() - t0, 3), "jobs": config.jobs}

    manifest = checkpoint.build_manifest(
        "recovered", recovered, role="recovered",
        provenance={"method": config.method, "inputs": [Path(f).name for f in files]})
    checkpoint.write_checkpoint(outdir / "recovered.lwra", manifest, recovered)
    metrics.write_report_json(outdir / "report.json", report)
    if traces:
        metrics.write_curves_csv(outdir / "curves.csv", traces)
    if report.w_error is not None:
        print(f"w_error {report.w_error:.3f} over {len(report.layers)} layers", file=out)
    return EXIT_OK


def _progress(out, trace):
    print(f"{trace.layer_id}: iterations={trace.steps_run} final_loss={trace.losses[-1]:.3e}",
          file=out, flush=True)


# -- estimate-rank -----------------------------------------------------------------

def _estimate_doc(layer_id, est: rank_inference.RankEstimate, n):
    return {"layer_id": layer_id, "ranks": est.ranks, "status": est.status,
            "b": est.b_matrix(n), "saturated_pairs": sorted(list(p) for p in est.saturated_pairs),
            "optimal_solutions": [list(s) for s in est.optimal_solutions]}


def cmd_estimate_rank(config: RunConfig, out=None) -> int:
    out = out or sys.stdout
    files, checkpoints, tuned, _ = _load_inputs(config, minimum=2)
    selected = _select_layers(tuned, checkpoints, config.layers)
    docs = []
    for name in selected:
        group = LayerGroup(name, [c[name] for c in checkpoints])
        docs.append(_estimate_doc(name, rank_inference.estimate_ranks(group), group.n))
    statuses = {d["status"] for d in docs}
    status = ("infeasible" if "infeasible" in statuses
              else "ambiguous" if "ambiguous" in statuses else "unique")
    consistent = all(d["ranks"] == docs[0]["ranks"] for d in docs)
    report = {"inputs": [Path(f).name for f in files], "status": status,
              "ranks": docs[0]["ranks"] if consistent else None, "layers": docs}
    _emit_json(config.output, "rank_report.json", report, out)
    if status == "ambiguous":
        print("warning: rank estimate is ambiguous (too few models or tied optima)",
              file=sys.stderr)
    if status == "infeasible":
        return EXIT_INPUT
    return EXIT_OK


def _emit_json(output, filename, doc, out):
    text = json.dumps(doc, indent=2) + "\n"
    if output:
        outdir = Path(output)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / filename).write_text(text, encoding="utf-8")
    print(text, end="", file=out)


# -- generate-synthetic ------------------------------------------------------------

def cmd_generate_synthetic(args, out=None) -> int:
    out = out or sys.stdout
    spec = synth.SyntheticSpec(d=args.d, k=args.k, n=args.n, ranks=_parse_ranks(args.ranks),
                               base_scale=args.base_scale, update_scale=args.update_scale,
                               m_layers=args.m_layers, seed=args.seed,
                               foreign_count=args.foreign_count, frozen_layers=args.frozen_layers)
    if args.dtype not in ("f16", "bf16", "f32", "f64"):
        raise ConfigError(f"unknown dtype {args.dtype!r}")
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    groups = synth.generate(spec)
    frozen = synth.generate_frozen(spec)
    models = []
    for i in range(spec.n):
        mats = {g.layer_id: g.fine_tuned[i] for g in groups}
        mats.update(frozen)
        name = f"model_{i:02d}.lwra"
        manifest = checkpoint.build_manifest(f"model_{i:02d}", mats, "fine_tuned", args.dtype,
                                             {"synthetic_seed": spec.seed, "model_index": i})
        checkpoint.write_checkpoint(outdir / name, manifest, mats)
        models.append(name)
    truth = {g.layer_id: g.ground_truth for g in groups}
    manifest = checkpoint.build_manifest("ground_truth", truth, "ground_truth", "f64",
                                         {"synthetic_seed": spec.seed})
    checkpoint.write_checkpoint(outdir / "ground_truth.lwra", manifest, truth)
    doc = {"spec": spec.to_dict(), "models": models, "ground_truth": "ground_truth.lwra",
           "fine_tuned_layers": [g.layer_id for g in groups], "frozen_layers": sorted(frozen),
           "foreign_indices": spec.foreign_indices, "dtype": args.dtype}
    (outdir / BENCHMARK_MANIFEST).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {spec.n} models x {spec.m_layers} layers to {outdir}", file=out)
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------------

def cmd_evaluate(args, out=None) -> int:
    out = out or sys.stdout
    _, recovered = checkpoint.load_any(args.recovered)
    _, truth = checkpoint.load_any(args.ground_truth)
    if args.layers:
        recovered = {k: v for k, v in recovered.items() if fnmatch.fnmatchcase(k, args.layers)}
        truth = {k: v for k, v in truth.items() if fnmatch.fnmatchcase(k, args.layers)}
    if set(recovered) != set(truth):
        diff = sorted(set(recovered).symmetric_difference(truth))
        raise InputError(f"recovered and ground-truth layer sets differ: {diff}")
    if not recovered:
        raise InputError("no layers to evaluate")
    names = sorted(recovered)
    report = metrics.BenchmarkReport(
        method="evaluate",
        config={"recovered": Path(args.recovered).name, "ground_truth": Path(args.ground_truth).name},
        layers=[metrics.LayerError.between(n, recovered[n], truth[n]) for n in names])
    report.run_info = {"evaluated_at": _stamp()}
    hist = metrics.convergence_histogram(report.layers, bin_width=args.bin_width)
    if args.output:
        outdir = Path(args.output)
        outdir.mkdir(parents=True, exist_ok=True)
        metrics.write_report_json(outdir / "report.json", report)
        metrics.write_histogram_csv(outdir / "histogram.csv", hist)
    for e in report.layers:
        print(f"{e.layer_id}\t{e.log10_mse:.3f}", file=out)
    print(f"w_error {report.w_error:.3f}", file=out)
    return EXIT_OK


# -- detect ------------------------------------------------------------------------

def cmd_detect(config: RunConfig, expected_max_rank=None, out=None) -> int:
    out = out or sys.stdout
    files, checkpoints, tuned, _ = _load_inputs(config, minimum=3)
    report = {"inputs": [Path(f).name for f in files], "fine_tuned_layers": tuned,
              "per_layer": {}, "flagged": []}
    if not tuned:
        print("warning: all checkpoints are identical; nothing was fine-tuned", file=sys.stderr)
        _emit_json(config.output, "detect_report.json", report, out)
        return EXIT_OK
    selected = _select_layers(tuned, checkpoints, config.layers)
    flagged = set()
    for name in selected:
        group = LayerGroup(name, [c[name] for c in checkpoints])
        hits = rank_inference.detect_foreign_models(group, expected_max_rank)
        report["per_layer"][name] = sorted(hits)
        flagged |= hits
    report["flagged"] = sorted(flagged)
    report["flagged_inputs"] = [Path(files[i]).name for i in sorted(flagged)]
    _emit_json(config.output, "detect_report.json", report, out)
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------

def _add_run_flags(p, with_recovery=True):
    p.add_argument("--inputs", nargs="+", help="checkpoint files, or one benchmark directory")
    p.add_argument("--output", help="output directory")
    p.add_argument("--config", help="JSON file with RunConfig fields (flags override it)")
    p.add_argument("--layers", help="glob selecting layers (default: all fine-tuned)")
    p.add_argument("--jobs", type=int, help="worker processes (default: $DETUNER_JOBS or #cores)")
    p.add_argument("--seed", type=int)
    if not with_recovery:
        return
    p.add_argument("--steps", type=int)
    p.add_argument("--ranks", help="'estimate', one integer, or one integer per input")
    p.add_argument("--method", choices=synth.METHODS)
    p.add_argument("--loss-tolerance", dest="loss_tolerance", type=float)
    p.add_argument("--ground-truth", dest="ground_truth",
                   help="checkpoint with the true base weights, used for scoring only")
    p.add_argument("--svd-method", dest="svd_method", choices=_SVD_METHODS,
                   help="truncation backend (default: exact)")
    p.add_argument("--no-scheduler", action="store_true", help="truncate at full rank throughout")
    types = {"start_rank": int, "factor": float, "patience": int,
             "force_end_rank_percent": float, "rel_improvement_threshold": float}
    for name in _SCHED_FIELDS:
        p.add_argument(f"--scheduler.{name}", dest=f"scheduler_{name}", type=types[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detuner",
                                     description="Recover pre-fine-tuning weights from LoRA merges.")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_run_flags(sub.add_parser("recover", help="recover base weights layer by layer"))
    _add_run_flags(sub.add_parser("estimate-rank", help="infer per-model LoRA ranks"), False)

    det = sub.add_parser("detect", help="find fine-tuned layers and foreign-base models")
    _add_run_flags(det, False)
    det.add_argument("--expected-max-rank", type=int, dest="expected_max_rank")

    gen = sub.add_parser("generate-synthetic", help="write a seeded synthetic benchmark")
    gen.add_argument("--output", required=True)
    gen.add_argument("--d", type=int, default=64)
    gen.add_argument("--k", type=int, default=64)
    gen.add_argument("--n", type=int, default=5)
    gen.add_argument("--ranks", default="4")
    gen.add_argument("--m-layers", dest="m_layers", type=int, default=8)
    gen.add_argument("--frozen-layers", dest="frozen_layers", type=int, default=2)
    gen.add_argument("--base-scale", dest="base_scale", type=float, default=1.0)
    gen.add_argument("--update-scale", dest="update_scale", type=float, default=0.1)
    gen.add_argument("--foreign-count", dest="foreign_count", type=int, default=0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--dtype", default="f64")

    ev = sub.add_parser("evaluate", help="score a recovered checkpoint against ground truth")
    ev.add_argument("--recovered", required=True)
    ev.add_argument("--ground-truth", dest="ground_truth", required=True)
    ev.add_argument("--output")
    ev.add_argument("--layers")
    ev.add_argument("--bin-width", dest="bin_width", type=float, default=1.0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "generate-synthetic":
            return cmd_generate_synthetic(args)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        config = _resolve_run_config(args)
        if args.command == "recover":
            return cmd_recover(config)
        if args.command == "estimate-rank":
            return cmd_estimate_rank(config)
        return cmd_detect(config, args.expected_max_rank)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"optimizer diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NoCommonAncestorError as exc:
        print(f"no common ancestor: {exc}", file=sys.stderr)
        return EXIT_NO_ANCESTOR
    except (InputError, CheckpointError, DetunerError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
