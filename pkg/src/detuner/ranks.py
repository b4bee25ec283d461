"""Inferring LoRA ranks, fine-tuned layers and foreign models from weight differences.

For two models sharing a base, ``W'_i - W'_j = M_i - M_j`` has rank at most
``r_i + r_j``. Observing the numerical rank ``b_ij`` of every pairwise
difference gives the integer program

    minimise sum(r)  subject to  r_i + r_j >= b_ij,  r_i >= 1,

which is solved exactly by a small branch and bound. Models built on a
different base show up as pairs whose difference is full rank.
"""
from __future__ import annotations

import itertools
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linprog

from .engine import LayerGroup
from .errors import InputError, KeyMismatchError, NoCommonAncestorError, ShapeMismatchError
from .linalg import numerical_rank

#: Entries differing by more than this count as fine-tuned.
LAYER_DIFF_TOL = 1e-12
#: Pairs within this many of full rank are treated as saturated.
FOREIGN_SLACK = 2

_INT_TOL = 1e-7


@dataclass
class RankEstimate:
    ranks: list[int]
    pairwise_observed: dict[tuple[int, int], int]
    status: str  # "unique" | "ambiguous" | "infeasible"
    saturated_pairs: set[tuple[int, int]] = field(default_factory=set)
    optimal_solutions: list[tuple[int, ...]] = field(default_factory=list)

    def b_matrix(self, n: int | None = None) -> list[list[int]]:
        if n is None:
            n = len(self.ranks) or 1 + max(j for _, j in self.pairwise_observed)
        b = [[0] * n for _ in range(n)]
        for (i, j), v in self.pairwise_observed.items():
            b[i][j] = b[j][i] = v
        return b


def pairwise_ranks(group: LayerGroup, jobs: int = 1) -> dict[tuple[int, int], int]:
    """Numerical rank of ``W'_i - W'_j`` for every unordered pair ``i < j``."""
    if group.n < 2:
        raise InputError(f"pairwise ranks need at least 2 models, got {group.n}")
    pairs = list(itertools.combinations(range(group.n), 2))
    mats = group.fine_tuned

    def one(pair):
        i, j = pair
        return numerical_rank(mats[i] - mats[j])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(one, pairs))
    else:
        values = [one(p) for p in pairs]
    return dict(zip(pairs, values))


def _lp_bound(n, constraints, lo, hi):
    if any(l > h for l, h in zip(lo, hi)):
        return None
    if constraints:
        a_ub = np.zeros((len(constraints), n))
        b_ub = np.empty(len(constraints))
        for row, (i, j, b) in enumerate(constraints):
            a_ub[row, i] = a_ub[row, j] = -1.0
            b_ub[row] = -b
    else:
        a_ub = b_ub = None
    res = linprog(np.ones(n), A_ub=a_ub, b_ub=b_ub, bounds=list(zip(lo, hi)), method="highs")
    if res.status == 2:
        return None
    if res.status != 0:
        raise RuntimeError(f"LP relaxation failed: {res.message}")
    return res.fun, res.x


def solve_rank_program(n, constraints, upper, max_solutions=8):
    """Integer minimiser(s) of ``sum(r)`` s.t. ``r_i + r_j >= b`` and ``1 <= r <= upper``.

    ``constraints`` is a list of ``(i, j, b)``. Returns ``(value, solutions)``
    where ``solutions`` lists up to ``max_solutions`` distinct optimal vectors
    (``value`` is ``None`` when infeasible). Nodes are pruned with the LP
    relaxation; ties are kept so a second optimum is always discovered.
    """
    best = math.inf
    solutions: list[tuple[int, ...]] = []
    root_bound = None
    stack = [([1] * n, [upper] * n)]
    while stack:
        lo, hi = stack.pop()
        relaxed = _lp_bound(n, constraints, lo, hi)
        if relaxed is None:
            continue
        value, x = relaxed
        bound = math.ceil(value - _INT_TOL)
        if root_bound is None:
            root_bound = bound
        if bound > best:
            continue
        frac = np.abs(x - np.round(x))
        if frac.max() > _INT_TOL:
            k = int(np.argmax(frac))
            down_hi, up_lo = list(hi), list(lo)
            down_hi[k] = math.floor(x[k])
            up_lo[k] = math.ceil(x[k])
            stack.append((up_lo, hi))
            stack.append((lo, down_hi))
            continue
        sol = tuple(int(round(v)) for v in x)
        total = sum(sol)
        if total < best:
            best, solutions = total, [sol]
        elif total == best and sol not in solutions and len(solutions) < max_solutions:
            solutions.append(sol)
        if best == root_bound and len(solutions) >= max_solutions:
            break
        # partition the rest of this box around `sol` to look for tied optima
        for k in range(n):
            fixed = list(sol[:k])
            if sol[k] - 1 >= lo[k]:
                stack.append((fixed + lo[k:], fixed + [sol[k] - 1] + hi[k + 1:]))
            if sol[k] + 1 <= hi[k]:
                stack.append((fixed + [sol[k] + 1] + lo[k + 1:], fixed + hi[k:]))
    if not solutions:
        return None, []
    return best, solutions


def estimate_ranks(group: LayerGroup, pairwise=None) -> RankEstimate:
    """Smallest rank vector consistent with every observed pairwise rank.

    Pairs whose difference is full rank (``b_ij == min(d, k)``) say nothing
    beyond a possibly slack lower bound and are left out of the program; they
    are reported in ``saturated_pairs``. ``status`` is ``'ambiguous'`` when
    several integer vectors attain the minimum, or when some model takes part
    in no informative pair.
    """
    b = pairwise_ranks(group) if pairwise is None else dict(pairwise)
    n = group.n
    p = min(group.shape)
    saturated = {pair for pair, v in b.items() if v >= p}
    constraints = [(i, j, v) for (i, j), v in sorted(b.items()) if (i, j) not in saturated]
    value, solutions = solve_rank_program(n, constraints, upper=p)
    if value is None:
        return RankEstimate([], b, "infeasible", saturated)
    covered = {i for i, j, _ in constraints} | {j for i, j, _ in constraints}
    status = "unique" if len(solutions) == 1 and len(covered) == n else "ambiguous"
    return RankEstimate(list(solutions[0]), b, status, saturated, solutions)


def detect_finetuned_layers(checkpoints: Sequence[Mapping[str, np.ndarray]],
                            tol: float = LAYER_DIFF_TOL) -> set[str]:
    """Names of layers whose values differ between at least two checkpoints."""
    if len(checkpoints) < 2:
        raise InputError(f"need at least 2 checkpoints, got {len(checkpoints)}")
    keys = set(checkpoints[0])
    for ckpt in checkpoints[1:]:
        if set(ckpt) != keys:
            diff = keys.symmetric_difference(ckpt)
            raise KeyMismatchError(f"checkpoints disagree on layers: {sorted(diff)}", diff)
    tuned = set()
    for name in keys:
        stack = [np.asarray(c[name], dtype=np.float64) for c in checkpoints]
        if any(m.shape != stack[0].shape for m in stack):
            raise ShapeMismatchError(f"layer {name!r} has differing shapes across checkpoints")
        stack = np.stack(stack)
        if np.any(stack.max(axis=0) - stack.min(axis=0) > tol):
            tuned.add(name)
    return tuned


def _components(n, edges):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def detect_foreign_models(group: LayerGroup, expected_max_rank: int | None = None,
                          slack: int = FOREIGN_SLACK, pairwise=None) -> set[int]:
    """Indices of models that do not share the majority's base.

    A pair counts as "unrelated" when its difference rank reaches
    ``min(d, k) - slack``, or exceeds ``2 * expected_max_rank`` when that is
    given. Models are clustered by the remaining (low-rank) pairs; everything
    outside the largest cluster is flagged. Several non-singleton clusters
    trigger a warning; no low-rank pair at all, or a tie for the largest
    cluster, raises :class:`NoCommonAncestorError`.
    """
    n = group.n
    if n < 3:
        raise InputError(f"foreign-model detection needs at least 3 models, got {n}")
    b = pairwise_ranks(group) if pairwise is None else pairwise
    threshold = min(group.shape) - slack
    if expected_max_rank is not None:
        threshold = min(threshold, 2 * expected_max_rank + 1)
    related = [pair for pair, v in b.items() if v < threshold]
    if not related:
        raise NoCommonAncestorError("every pairwise difference is full rank; "
                                    "no two models appear to share a base")
    clusters = sorted(_components(n, related), key=len, reverse=True)
    if len(clusters) > 1 and len(clusters[0]) == len(clusters[1]):
        raise NoCommonAncestorError(
            f"models split into equally sized base clusters {clusters[0]} and {clusters[1]}")
    minority = [c for c in clusters[1:] if len(c) > 1]
    if minority:
        warnings.warn(f"models form several base clusters; keeping {clusters[0]}, "
                      f"flagging {minority}", stacklevel=2)
    return {i for c in clusters[1:] for i in c}
