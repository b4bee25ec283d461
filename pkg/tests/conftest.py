import numpy as np
import pytest

from detuner import LayerGroup


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def low_rank(rng, d, k, r, scale=1.0):
    return (rng.standard_normal((d, r)) * scale) @ rng.standard_normal((r, k))


def make_group(rng, d=32, k=32, n=5, ranks=4, layer_id="L"):
    if isinstance(ranks, int):
        ranks = [ranks] * n
    base = rng.standard_normal((d, k)) / np.sqrt(d)
    mats = [base + 0.1 * low_rank(rng, d, k, r) / r for r in ranks]
    return LayerGroup(layer_id, mats, base)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str):
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
