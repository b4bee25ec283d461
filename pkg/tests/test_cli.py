import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from detuner import cli
from detuner.checkpoint import build_manifest, read_checkpoint, write_checkpoint
from detuner.metrics import w_error
from detuner.synth import SyntheticSpec, baseline_mean_lora, generate


def gen(path, *extra):
    args = ["generate-synthetic", "--output", str(path), "--d", "24", "--k", "20", "--n", "5",
            "--m-layers", "3", "--seed", "5", *extra]
    assert cli.main(args) == 0
    return path


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    return gen(tmp_path_factory.mktemp("bench") / "b")


def report(path):
    return json.loads((path / "report.json").read_text())


def test_generate_layout(bench):
    doc = json.loads((bench / "benchmark.json").read_text())
    assert doc["models"] == [f"model_{i:02d}.lwra" for i in range(5)]
    _, m0 = read_checkpoint(bench / "model_00.lwra")
    assert sorted(m0) == ["frozen_000", "frozen_001", "layer_000", "layer_001", "layer_002"]
    _, truth = read_checkpoint(bench / "ground_truth.lwra")
    assert sorted(truth) == doc["fine_tuned_layers"]


def test_generate_is_reproducible(tmp_path):
    a, b = gen(tmp_path / "a"), gen(tmp_path / "b")
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_recover_end_to_end(bench, tmp_path, capsys):
    out = tmp_path / "rec"
    assert cli.main(["recover", "--inputs", str(bench), "--output", str(out),
                     "--steps", "200", "--ranks", "4", "--jobs", "1"]) == 0
    doc = report(out)
    assert doc["w_error"] <= -20
    assert doc["recovered_layers"] == ["layer_000", "layer_001", "layer_002"]
    assert len(doc["convergence"]) == 3
    _, rec = read_checkpoint(out / "recovered.lwra")
    assert sorted(rec) == doc["recovered_layers"]
    rows = list(csv.DictReader(open(out / "curves.csv")))
    assert {r["layer_id"] for r in rows} == set(rec)
    assert (out / "histogram.csv").exists()
    printed = capsys.readouterr().out
    assert printed.count("iterations=") == 3

    ev = tmp_path / "ev"
    assert cli.main(["evaluate", "--recovered", str(out / "recovered.lwra"),
                     "--ground-truth", str(bench / "ground_truth.lwra"), "--output", str(ev)]) == 0
    assert report(ev)["w_error"] == pytest.approx(doc["w_error"])


def test_estimated_ranks_and_config_file(bench, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 5, "scheduler": {"patience": 3}, "jobs": 1}))
    out = tmp_path / "rec"
    assert cli.main(["recover", "--config", str(cfg), "--inputs", str(bench), "--output", str(out),
                     "--steps", "30", "--svd-method", "gram"]) == 0
    doc = report(out)
    assert doc["config"]["steps"] == 30  # flag beats file
    assert doc["config"]["scheduler"]["patience"] == 3
    assert doc["config"]["svd_method"] == "gram"
    assert doc["ranks"]["layer_000"] == [4] * 5


def test_jobs_do_not_change_numbers(bench, tmp_path):
    docs = []
    for jobs in ("1", "3"):
        out = tmp_path / f"j{jobs}"
        assert cli.main(["recover", "--inputs", str(bench), "--output", str(out), "--steps", "40",
                         "--ranks", "4", "--jobs", jobs]) == 0
        doc = report(out)
        doc.pop("run_info")
        docs.append((doc, (out / "recovered.lwra").read_bytes(), (out / "curves.csv").read_text()))
    assert docs[0] == docs[1]


def test_jobs_from_environment(bench, tmp_path, monkeypatch):
    monkeypatch.setenv("DETUNER_JOBS", "2")
    out = tmp_path / "rec"
    assert cli.main(["recover", "--inputs", str(bench), "--output", str(out), "--steps", "3",
                     "--ranks", "4"]) == 0
    assert report(out)["run_info"]["jobs"] == 2
    monkeypatch.setenv("DETUNER_JOBS", "many")
    assert cli.main(["recover", "--inputs", str(bench), "--output", str(out)]) == 2


def test_mean_lora_matches_library(bench, tmp_path):
    out = tmp_path / "mean"
    assert cli.main(["recover", "--inputs", str(bench), "--output", str(out),
                     "--method", "mean_lora"]) == 0
    layers = generate(SyntheticSpec(d=24, k=20, n=5, ranks=(4,), m_layers=3, seed=5))
    expected = w_error([baseline_mean_lora(g) for g in layers], [g.ground_truth for g in layers])
    assert report(out)["w_error"] == pytest.approx(expected, abs=1e-12)


def test_single_lora_scores_every_candidate(bench, tmp_path):
    out = tmp_path / "single"
    assert cli.main(["recover", "--inputs", str(bench), "--output", str(out),
                     "--method", "single_lora"]) == 0
    from detuner.synth import evaluate_method
    layers = generate(SyntheticSpec(d=24, k=20, n=5, ranks=(4,), m_layers=3, seed=5))
    assert report(out)["w_error"] == pytest.approx(evaluate_method(layers, "single_lora"))


def test_evaluate_identity_and_mismatch(bench, tmp_path, capsys):
    truth = str(bench / "ground_truth.lwra")
    assert cli.main(["evaluate", "--recovered", truth, "--ground-truth", truth]) == 0
    assert "w_error -30.000" in capsys.readouterr().out
    other = tmp_path / "o.lwra"
    mats = {"zzz": np.zeros((2, 2))}
    write_checkpoint(other, build_manifest("o", mats), mats)
    assert cli.main(["evaluate", "--recovered", str(other), "--ground-truth", truth]) == 3
    assert "zzz" in capsys.readouterr().err


def test_exit_codes(bench, tmp_path, capsys):
    model = str(bench / "model_00.lwra")
    assert cli.main(["recover", "--inputs", model, "--output", str(tmp_path)]) == 3
    assert cli.main(["recover", "--inputs", str(bench), "--output", str(tmp_path),
                     "--layers", "nothing*"]) == 3
    assert "layer_000" in capsys.readouterr().err
    assert cli.main(["recover", "--inputs", str(bench), "--steps", "0"]) == 2
    assert cli.main(["recover", "--inputs", str(bench), "--scheduler.factor", "0.5"]) == 2
    assert cli.main(["recover", "--inputs", str(tmp_path / "missing.lwra")]) == 3
    assert cli.main(["bogus"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"stepz": 3}')
    assert cli.main(["recover", "--config", str(bad), "--inputs", str(bench)]) == 2


def test_divergence_exit_code(bench, tmp_path, monkeypatch):
    import detuner.engine as engine
    monkeypatch.setattr(engine, "loss", lambda *a: float("inf"))
    assert cli.main(["recover", "--inputs", str(bench), "--output", str(tmp_path),
                     "--ranks", "4", "--jobs", "1", "--steps", "3"]) == 4


def test_estimate_rank(tmp_path, capsys):
    b = gen(tmp_path / "b", "--ranks", "2,3,4,5,6", "--d", "32", "--k", "32")
    assert cli.main(["estimate-rank", "--inputs", str(b), "--output", str(tmp_path / "e")]) == 0
    doc = json.loads((tmp_path / "e" / "rank_report.json").read_text())
    assert doc["status"] == "unique" and doc["ranks"] == [2, 3, 4, 5, 6]
    capsys.readouterr()
    two = [str(b / "model_00.lwra"), str(b / "model_01.lwra")]
    assert cli.main(["estimate-rank", "--inputs", *two]) == 0
    assert "ambiguous" in capsys.readouterr().err


def test_detect(tmp_path):
    clean = gen(tmp_path / "clean", "--n", "4")
    assert cli.main(["detect", "--inputs", str(clean), "--output", str(tmp_path / "d1")]) == 0
    doc = json.loads((tmp_path / "d1" / "detect_report.json").read_text())
    assert doc["flagged"] == [] and doc["fine_tuned_layers"] == ["layer_000", "layer_001", "layer_002"]

    dirty = gen(tmp_path / "dirty", "--n", "6", "--foreign-count", "1")
    assert cli.main(["detect", "--inputs", str(dirty), "--output", str(tmp_path / "d2")]) == 0
    doc = json.loads((tmp_path / "d2" / "detect_report.json").read_text())
    assert doc["flagged"] == [5] and doc["flagged_inputs"] == ["model_05.lwra"]


def test_detect_no_common_ancestor(tmp_path, rng):
    files = []
    for i in range(3):
        mats = {"w": rng.standard_normal((8, 8))}
        files.append(str(tmp_path / f"m{i}.lwra"))
        write_checkpoint(files[-1], build_manifest(f"m{i}", mats), mats)
    assert cli.main(["detect", "--inputs", *files]) == 5


def test_detect_identical_checkpoints(tmp_path, capsys):
    mats = {"w": np.eye(3)}
    files = []
    for i in range(3):
        files.append(str(tmp_path / f"m{i}.lwra"))
        write_checkpoint(files[-1], build_manifest("m", mats), mats)
    assert cli.main(["detect", "--inputs", *files]) == 0
    assert "identical" in capsys.readouterr().err


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "detuner.cli", "generate-synthetic", "--output",
                           str(tmp_path / "x"), "--m-layers", "1", "--d", "8", "--k", "8"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "x" / "benchmark.json").exists()
