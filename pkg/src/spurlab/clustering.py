"""2D embedding of the aggregated distances, K selection, and clustering.

The embedding is classical metric MDS (double-centered squared distances,
top-2 eigenpairs).  K-means with k-means++ seeding runs on the embedded
points; K defaults to the elbow of the SSE curve (maximal second
difference).  Clusters are summarized by per-timestep means of member
sequences and attribution masks plus member-level model metrics, which is
what the annotation UI and the oracle annotator consume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LABEL_ANOMALY, AttributionMask, Dataset, TimeSeries
from .similarity import DistanceMatrix


class ClusteringError(ValueError):
    """Invalid clustering input or failed eigensolve."""


@dataclass
class Embedding2D:
    ids: list[str]
    points: np.ndarray  # (N, 2)

    def validate(self):
        if self.points.shape != (len(self.ids), 2):
            raise ClusteringError(f"points shape {self.points.shape} != ({len(self.ids)}, 2)")
        if not np.all(np.isfinite(self.points)):
            raise ClusteringError("non-finite embedding coordinates")


@dataclass
class BehaviorCluster:
    cluster_id: int
    member_ids: list[str]
    centroid_2d: np.ndarray
    summary_sequence: np.ndarray  # (d, n) member mean
    summary_attribution: np.ndarray  # (n,) member mean of masks
    accuracy: float
    mean_confidence: float

    def to_dict(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "member_ids": list(self.member_ids),
            "centroid_2d": self.centroid_2d.tolist(),
            "summary_sequence": self.summary_sequence.tolist(),
            "summary_attribution": self.summary_attribution.tolist(),
            "accuracy": self.accuracy,
            "mean_confidence": self.mean_confidence,
        }


def select_behavior_instances(ds: Dataset, class_indices: dict[str, int], split: str = "train") -> list[TimeSeries]:
    """Instances of a split whose true label or prediction is the anomaly class.

    Normal-only instances carry no anomaly behavior to inspect; they stay in
    the training set but out of the clustering view.
    """
    out = []
    for ts, sp in zip(ds.instances, ds.split):
        if sp != split:
            continue
        if ts.label == LABEL_ANOMALY or class_indices.get(ts.id, 0) == 1:
            out.append(ts)
    if not out:
        raise ClusteringError(f"no anomaly-related instances in split {split!r}")
    return out


def embed_2d(m: DistanceMatrix, seed: int = 0) -> Embedding2D:
    """Classical metric MDS projection to two axes.

    Negative eigenvalues (non-Euclidean distances) are clamped to zero.
    Axis signs follow a fixed convention: the first nonzero coordinate of
    each axis is positive, so the layout is reproducible.  The seed argument
    exists for interface symmetry with kmeans; the projection itself is
    deterministic.
    """
    m.validate()
    n = len(m.ids)
    d2 = m.dist ** 2
    j = np.eye(n) - np.ones((n, n)) / n
    b = -0.5 * j @ d2 @ j
    b = (b + b.T) / 2
    try:
        w, v = np.linalg.eigh(b)
    except np.linalg.LinAlgError as e:
        raise ClusteringError(f"embedding eigensolve failed: {e}") from e
    top = np.argsort(w)[::-1][:2]
    lam = np.clip(w[top], 0.0, None)
    pts = np.zeros((n, 2))
    pts[:, :len(top)] = v[:, top] * np.sqrt(lam)[None, :]
    for c in range(2):
        col = pts[:, c]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            pts[:, c] = -col
    emb = Embedding2D(ids=list(m.ids), points=pts)
    emb.validate()
    return emb


def _kpp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[int(rng.integers(n))]
    closest = ((X - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(np.argmin(closest))  # all remaining points coincide
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[c] = X[idx]
        closest = np.minimum(closest, ((X - centroids[c]) ** 2).sum(axis=1))
    return centroids


def kmeans(embedding: Embedding2D, k: int, seed: int, return_trace: bool = False):
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint.

    Ties in point-to-centroid distance break toward the lower centroid
    index; empty clusters are re-seeded from the currently worst-fit point.
    """
    X = embedding.points
    n = X.shape[0]
    if not (1 <= k <= n):
        raise ClusteringError(f"k={k} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = _kpp_init(X, k, rng)
    assign = np.full(n, -1, dtype=int)
    trace = []
    for _ in range(300):
        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        for c in range(k):
            members = X[new_assign == c]
            if members.shape[0] == 0:
                worst = int(np.argmax(((X - centroids[new_assign]) ** 2).sum(axis=1)))
                centroids[c] = X[worst]
                new_assign[worst] = c
            else:
                centroids[c] = members.mean(axis=0)
        trace.append(float(((X - centroids[new_assign]) ** 2).sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    if return_trace:
        return assign, trace
    return assign


def _sse(X: np.ndarray, assign: np.ndarray, k: int) -> float:
    total = 0.0
    for c in range(k):
        members = X[assign == c]
        if members.shape[0]:
            total += float(((members - members.mean(axis=0)) ** 2).sum())
    return total


def choose_k_elbow(m: DistanceMatrix, embedding: Embedding2D, k_max: int, seed: int) -> int:
    """K at the sharpest bend of the SSE curve (maximal second difference).

    Ties break toward smaller k; the result never exceeds the number of
    distinct embedded points.
    """
    if m.ids != embedding.ids:
        raise ClusteringError("matrix and embedding cover different instances")
    n = len(embedding.ids)
    if not (3 <= k_max <= n):
        raise ClusteringError(f"k_max={k_max} outside [3, {n}]")
    sse = []
    for k in range(1, k_max + 1):
        assign = kmeans(embedding, k, seed)
        sse.append(_sse(embedding.points, assign, k))
    best_k, best_curv = 2, -np.inf
    for k in range(2, k_max):
        curv = sse[k - 2] - 2 * sse[k - 1] + sse[k]
        if curv > best_curv + 1e-12:
            best_k, best_curv = k, curv
    n_distinct = np.unique(embedding.points, axis=0).shape[0]
    return min(best_k, n_distinct)


def summarize_clusters(
    instances: list[TimeSeries],
    masks: list[AttributionMask],
    predictions: list,
    assignment: np.ndarray,
    embedding: Embedding2D,
) -> list[BehaviorCluster]:
    """Per-cluster mean sequence/attribution and member-level model metrics.

    predictions are PredictionResult values aligned 1:1 with instances.
    """
    if not (len(instances) == len(masks) == len(predictions) == len(assignment) == len(embedding.ids)):
        raise ClusteringError("instances, masks, predictions, assignment not aligned")
    out = []
    for cid in sorted(set(int(a) for a in assignment)):
        idx = [i for i, a in enumerate(assignment) if int(a) == cid]
        members = [instances[i] for i in idx]
        correct = [1.0 if predictions[i].predicted == instances[i].label else 0.0 for i in idx]
        out.append(BehaviorCluster(
            cluster_id=cid,
            member_ids=[ts.id for ts in members],
            centroid_2d=embedding.points[idx].mean(axis=0),
            summary_sequence=np.mean([ts.values for ts in members], axis=0),
            summary_attribution=np.mean([masks[i].weights for i in idx], axis=0),
            accuracy=float(np.mean(correct)),
            mean_confidence=float(np.mean([predictions[i].confidence for i in idx])),
        ))
    return out
