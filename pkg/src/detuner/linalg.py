"""Dense matrix primitives: truncated SVD, best rank-r approximation, numerical rank.

Every function works in float64. Inputs of lower precision are upcast by
:func:`as_weight_matrix` before anything else happens.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg

from .errors import DimensionError, NonFiniteError

#: A surviving singular-value ratio must exceed this to count as a rank gap.
GAP_THRESHOLD = 1e3


class SvdTriplet(NamedTuple):
    """Leading ``q`` singular triplets of a ``d x k`` matrix."""

    U: np.ndarray
    singular_values: np.ndarray
    Vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.singular_values) @ self.Vt


def as_weight_matrix(m, name="matrix") -> np.ndarray:
    """Return ``m`` as a finite, 2-D float64 array (copying only when needed)."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"{name} must have at least one row and column, got {a.shape}")
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return a


def _check_rank(q, shape, what="q"):
    p = min(shape)
    if isinstance(q, bool) or int(q) != q:
        raise DimensionError(f"{what} must be an integer, got {q!r}")
    q = int(q)
    if not 1 <= q <= p:
        raise DimensionError(f"{what}={q} outside [1, {p}] for shape {shape}")
    return q


def _randomized_svd(a, q, rng, oversample, power_iters):
    d, k = a.shape
    width = min(q + oversample, min(d, k))
    omega = rng.standard_normal((k, width))
    y = a @ omega
    basis, _ = np.linalg.qr(y)
    for _ in range(power_iters):
        z, _ = np.linalg.qr(a.T @ basis)
        basis, _ = np.linalg.qr(a @ z)
    u_small, s, vt = scipy.linalg.svd(basis.T @ a, full_matrices=False, check_finite=False)
    return basis @ u_small[:, :q], s[:q], vt[:q]


def _gram_top(a, q):
    """Top-q eigenpairs of the smaller Gram matrix, largest first."""
    d, k = a.shape
    g = a.T @ a if d >= k else a @ a.T
    p = g.shape[0]
    w, vecs = scipy.linalg.eigh(g, subset_by_index=[p - q, p - 1], check_finite=False,
                                driver="evr")
    return np.sqrt(np.clip(w[::-1], 0.0, None)), vecs[:, ::-1]


def svd_truncated(m, q, method="exact", rng=None, oversample=10, power_iters=4) -> SvdTriplet:
    """Top-``q`` singular triplets of ``m``.

    Parameters
    ----------
    m : array_like, shape (d, k)
    q : int
        Number of triplets, ``1 <= q <= min(d, k)``.
    method : {'exact', 'randomized'}
        ``'exact'`` runs LAPACK's divide-and-conquer SVD (``gesdd``) and is
        bit-stable across reruns. ``'gram'`` takes the leading eigenvectors of
        the smaller of ``m.T @ m`` / ``m @ m.T``; also deterministic and about
        2.5x faster on square inputs, but subspace accuracy degrades like the
        squared condition number of the kept block. ``'randomized'`` is a
        seeded range-finder with power iterations.
    rng : numpy.random.Generator, optional
        Only used by ``'randomized'``. Defaults to ``default_rng(0)``.
    """
    a = as_weight_matrix(m)
    q = _check_rank(q, a.shape)
    if method == "exact":
        u, s, vt = scipy.linalg.svd(a, full_matrices=False, check_finite=False,
                                    lapack_driver="gesdd")
        return SvdTriplet(u[:, :q], s[:q], vt[:q])
    if method == "gram":
        s, vecs = _gram_top(a, q)
        safe = np.where(s > 0, s, 1.0)
        if a.shape[0] >= a.shape[1]:
            return SvdTriplet((a @ vecs) / safe, s, vecs.T)
        return SvdTriplet(vecs, s, (vecs.T @ a) / safe[:, None])
    if method == "randomized":
        if rng is None:
            rng = np.random.default_rng(0)
        return SvdTriplet(*_randomized_svd(a, q, rng, oversample, power_iters))
    raise ValueError(f"unknown SVD method {method!r}")


def best_rank_r(m, r, method="exact", rng=None) -> np.ndarray:
    """Closest matrix of rank at most ``r`` to ``m`` in Frobenius norm."""
    if method == "gram":
        a = as_weight_matrix(m)
        r = _check_rank(r, a.shape, "r")
        _, vecs = _gram_top(a, r)
        if a.shape[0] >= a.shape[1]:
            return (a @ vecs) @ vecs.T
        return vecs @ (vecs.T @ a)
    return svd_truncated(m, r, method=method, rng=rng).reconstruct()


def singular_values(m) -> np.ndarray:
    a = as_weight_matrix(m)
    return scipy.linalg.svd(a, compute_uv=False, check_finite=False, lapack_driver="gesdd")


def numerical_rank(m, gap_threshold=GAP_THRESHOLD) -> int:
    """Effective rank located at the largest multiplicative gap of the spectrum.

    Singular values below ``min(d, k) * eps * sigma_1`` are discarded as
    round-off. Among the survivors the rank is the index ``i`` maximising
    ``sigma_i / sigma_{i+1}``, provided that ratio exceeds ``gap_threshold``.
    Otherwise the count of survivors is returned, which is ``min(d, k)`` for a
    matrix with no gap at all.
    """
    s = singular_values(m)
    if s[0] == 0.0:
        return 0
    floor = s.size * np.finfo(np.float64).eps * s[0]
    survivors = s[s >= floor]
    if survivors.size > 1:
        ratios = survivors[:-1] / survivors[1:]
        i = int(np.argmax(ratios))
        if ratios[i] > gap_threshold:
            return i + 1
    return int(survivors.size)
