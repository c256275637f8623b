"""Pairwise sequence and attribution distances, and their weighted blend.

Sequence distance is dynamic time warping with Euclidean local cost between
d-dimensional columns; attribution distance is cosine distance between CAM
masks.  Both N x N matrices are min-max normalized over their off-diagonal
entries and combined as alpha * dtw + (1 - alpha) * cosine, so alpha trades
data-shape similarity against attribution similarity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numba import njit

from .data import AttributionMask, TimeSeries

KINDS = ("dtw", "cosine", "aggregated")


class SimilarityError(ValueError):
    """Dimension mismatch or invalid matrix state."""


@dataclass
class DistanceMatrix:
    ids: list[str]
    dist: np.ndarray
    kind: str
    alpha: Optional[float] = None

    def validate(self):
        n = len(self.ids)
        if self.kind not in KINDS:
            raise SimilarityError(f"unknown matrix kind {self.kind!r}")
        if self.dist.shape != (n, n):
            raise SimilarityError(f"matrix shape {self.dist.shape} != ({n}, {n})")
        if not np.all(np.isfinite(self.dist)):
            raise SimilarityError("non-finite distances")
        if np.any(self.dist < 0):
            raise SimilarityError("negative distances")
        if np.any(np.diag(self.dist) != 0):
            raise SimilarityError("nonzero diagonal")
        if np.abs(self.dist - self.dist.T).max() > 1e-9:
            raise SimilarityError("matrix not symmetric")
        if self.kind == "aggregated" and self.dist.max() > 1.0 + 1e-12:
            raise SimilarityError("aggregated entries must lie in [0, 1]")


@njit(cache=True)
def _dtw_kernel(a, b, band):
    # a (d, n), b (d, m); band 0 means no constraint
    d = a.shape[0]
    n = a.shape[1]
    m = b.shape[1]
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        jlo, jhi = 1, m
        if band > 0:
            # Sakoe-Chiba window around the length-scaled diagonal
            if n > 1:
                center = 1 + int(round((i - 1) * (m - 1) / (n - 1)))
            else:
                center = 1
            jlo = max(1, center - band)
            jhi = min(m, center + band)
        for j in range(jlo, jhi + 1):
            c = 0.0
            for ch in range(d):
                diff = a[ch, i - 1] - b[ch, j - 1]
                c += diff * diff
            c = np.sqrt(c)
            best = D[i - 1, j - 1]
            if D[i - 1, j] < best:
                best = D[i - 1, j]
            if D[i, j - 1] < best:
                best = D[i, j - 1]
            D[i, j] = c + best
    return D[n, m]


def dtw_distance(a: TimeSeries, b: TimeSeries, band: Optional[int] = None) -> float:
    """DTW distance; optional Sakoe-Chiba band width (None = exact full DP)."""
    if a.d != b.d:
        raise SimilarityError(f"channel mismatch: {a.id!r} has d={a.d}, {b.id!r} has d={b.d}")
    if band is not None and band < 1:
        raise SimilarityError("band must be >= 1 when given")
    val = _dtw_kernel(a.values, b.values, 0 if band is None else int(band))
    if not np.isfinite(val):
        raise SimilarityError(
            f"band {band} too narrow for lengths ({a.n}, {b.n}); no feasible warping path"
        )
    return float(val)


def cosine_attribution_distance(ma: AttributionMask, mb: AttributionMask) -> float:
    """1 - cosine similarity; zero-norm masks count as maximally distant from nonzero."""
    if ma.n != mb.n:
        raise SimilarityError(
            f"mask length mismatch: {ma.instance_id!r} n={ma.n}, {mb.instance_id!r} n={mb.n}"
        )
    na = float(np.linalg.norm(ma.weights))
    nb = float(np.linalg.norm(mb.weights))
    if na == 0.0 and nb == 0.0:
        return 0.0
    if na == 0.0 or nb == 0.0:
        return 1.0
    return 1.0 - float(np.dot(ma.weights, mb.weights)) / (na * nb)


def compute_dtw_matrix(instances: list[TimeSeries], band: Optional[int] = None) -> DistanceMatrix:
    n = len(instances)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dtw_distance(instances[i], instances[j], band=band)
    dist = dist + dist.T
    m = DistanceMatrix(ids=[ts.id for ts in instances], dist=dist, kind="dtw")
    m.validate()
    return m


def compute_cosine_matrix(masks: list[AttributionMask]) -> DistanceMatrix:
    n = len(masks)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = max(0.0, cosine_attribution_distance(masks[i], masks[j]))
    dist = dist + dist.T
    m = DistanceMatrix(ids=[mk.instance_id for mk in masks], dist=dist, kind="cosine")
    m.validate()
    return m


def _minmax_offdiag(dist: np.ndarray) -> np.ndarray:
    """Min-max scale using off-diagonal statistics; all-equal matrices go to zero."""
    n = dist.shape[0]
    if n < 2:
        return np.zeros_like(dist)
    off = ~np.eye(n, dtype=bool)
    lo, hi = dist[off].min(), dist[off].max()
    if hi - lo < 1e-15:
        return np.zeros_like(dist)
    out = (dist - lo) / (hi - lo)
    out[~off] = 0.0
    return np.clip(out, 0.0, 1.0)


def aggregated_matrix(
    instances: list[TimeSeries],
    masks: list[AttributionMask],
    alpha: float,
    band: Optional[int] = None,
    dtw_matrix: Optional[DistanceMatrix] = None,
    cosine_matrix: Optional[DistanceMatrix] = None,
) -> DistanceMatrix:
    """Blend normalized DTW and cosine matrices: alpha * dtw + (1 - alpha) * cos.

    Precomputed component matrices may be passed to avoid recomputation when
    sweeping alpha; their ids must match the instance order exactly.
    """
    if not (0.0 <= alpha <= 1.0):
        raise SimilarityError("alpha must be in [0, 1]")
    ids = [ts.id for ts in instances]
    if [mk.instance_id for mk in masks] != ids:
        raise SimilarityError("masks not aligned 1:1 with instances")
    if dtw_matrix is None:
        dtw_matrix = compute_dtw_matrix(instances, band=band)
    if cosine_matrix is None:
        cosine_matrix = compute_cosine_matrix(masks)
    for comp, kind in ((dtw_matrix, "dtw"), (cosine_matrix, "cosine")):
        if comp.ids != ids or comp.kind != kind:
            raise SimilarityError(f"precomputed {kind} matrix does not match instance order")
    blended = alpha * _minmax_offdiag(dtw_matrix.dist) + (1.0 - alpha) * _minmax_offdiag(cosine_matrix.dist)
    m = DistanceMatrix(ids=ids, dist=blended, kind="aggregated", alpha=float(alpha))
    m.validate()
    return m


def save_matrix(m: DistanceMatrix, path) -> None:
    m.validate()
    np.savez_compressed(
        Path(path),
        ids=np.array(m.ids, dtype=object),
        dist=m.dist,
        kind=np.array(m.kind),
        alpha=np.array(-1.0 if m.alpha is None else m.alpha),
    )


def load_matrix(path) -> DistanceMatrix:
    path = Path(path)
    if not path.exists():
        raise SimilarityError(f"matrix cache not found: {path}")
    with np.load(path, allow_pickle=True) as z:
        alpha = float(z["alpha"])
        m = DistanceMatrix(
            ids=[str(s) for s in z["ids"]],
            dist=np.asarray(z["dist"], dtype=np.float64),
            kind=str(z["kind"]),
            alpha=None if alpha < 0 else alpha,
        )
    m.validate()
    return m
