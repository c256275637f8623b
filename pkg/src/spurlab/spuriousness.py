"""Annotation state, cluster adjacency, and spuriousness score propagation.

Human (or oracle) annotations label whole clusters as correct (0) or
spurious (1).  Scores spread from labeled to unlabeled clusters over a
Gaussian-kernel kNN graph of cluster centroids by iterated neighborhood
averaging with hard-clamped labels, so a handful of annotations scores the
whole clustering.  Instance-level overrides refine the resolved per-instance
scores without feeding back into propagation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .clustering import BehaviorCluster

LABEL_CORRECT = 0
LABEL_SPURIOUS = 1
UNLABELED = -1

MAX_ITER = 100
TOL = 1e-6

ANNOTATION_WORDS = {"correct": LABEL_CORRECT, "spurious": LABEL_SPURIOUS}


class AnnotationError(ValueError):
    """Invalid annotation state or propagation precondition."""


@dataclass
class AnnotationState:
    cluster_labels: dict[int, int] = field(default_factory=dict)
    instance_overrides: dict[str, str] = field(default_factory=dict)

    def validate(self):
        for cid, lab in self.cluster_labels.items():
            if lab not in (LABEL_CORRECT, LABEL_SPURIOUS, UNLABELED):
                raise AnnotationError(f"cluster {cid}: label must be 0, 1, or -1, got {lab}")
        for iid, word in self.instance_overrides.items():
            if word not in ANNOTATION_WORDS:
                raise AnnotationError(f"instance {iid!r}: override must be 'correct' or 'spurious'")

    def labeled_ids(self) -> list[int]:
        return [cid for cid, lab in self.cluster_labels.items() if lab != UNLABELED]

    def copy(self) -> "AnnotationState":
        return AnnotationState(
            cluster_labels=dict(self.cluster_labels),
            instance_overrides=dict(self.instance_overrides),
        )


@dataclass
class SpuriousnessState:
    scores: dict[int, float]
    adjacency: np.ndarray
    converged: bool
    iterations: int
    instance_scores: dict[str, float] = field(default_factory=dict)


def build_adjacency(clusters: list[BehaviorCluster]) -> np.ndarray:
    """Gaussian-kernel similarity over 2D centroids, kNN-sparsified.

    sigma is the median nonzero pairwise centroid distance (1.0 when every
    pair coincides); an edge survives when either endpoint ranks the other
    among its k_n = min(5, K-1) nearest neighbors.
    """
    K = len(clusters)
    if K < 2:
        raise AnnotationError("adjacency needs at least 2 clusters")
    cents = np.stack([c.centroid_2d for c in clusters])
    diff = cents[:, None, :] - cents[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    off = dist[~np.eye(K, dtype=bool)]
    nonzero = off[off > 0]
    sigma = float(np.median(nonzero)) if nonzero.size else 1.0
    A = np.exp(-(dist ** 2) / sigma ** 2)
    np.fill_diagonal(A, 0.0)

    k_n = min(5, K - 1)
    keep = np.zeros((K, K), dtype=bool)
    for i in range(K):
        d = dist[i].copy()
        d[i] = np.inf
        nearest = np.argsort(d, kind="stable")[:k_n]
        keep[i, nearest] = True
    keep = keep | keep.T  # union: either endpoint nominates the edge
    A = np.maximum(A * keep, (A * keep).T)
    np.fill_diagonal(A, 0.0)
    return A


def propagate(ann: AnnotationState, A: np.ndarray, cluster_ids: list[int]) -> SpuriousnessState:
    """Spread labels over the adjacency graph by clamped neighborhood averaging.

    Unlabeled clusters start at 0.5 and take the weighted mean of all
    neighbor scores each sweep (simultaneous update); labeled clusters never
    move.  Isolated unlabeled clusters keep 0.5.
    """
    ann.validate()
    K = len(cluster_ids)
    if A.shape != (K, K):
        raise AnnotationError(f"adjacency shape {A.shape} != ({K}, {K})")
    index = {cid: i for i, cid in enumerate(cluster_ids)}
    labeled = np.zeros(K, dtype=bool)
    S = np.full(K, 0.5)
    for cid, lab in ann.cluster_labels.items():
        if lab == UNLABELED:
            continue
        if cid not in index:
            raise AnnotationError(f"annotation for unknown cluster {cid}")
        labeled[index[cid]] = True
        S[index[cid]] = float(lab)
    if not labeled.any():
        raise AnnotationError("at least one cluster must be labeled before propagation")

    weight = A.sum(axis=1)
    converged = False
    iterations = 0
    for it in range(1, MAX_ITER + 1):
        iterations = it
        S_new = S.copy()
        for i in range(K):
            if labeled[i] or weight[i] <= 0:
                continue
            S_new[i] = float(A[i] @ S) / weight[i]
        delta = np.abs(S_new - S).max()
        S = S_new
        if delta < TOL:
            converged = True
            break
    scores = {cid: float(np.clip(S[index[cid]], 0.0, 1.0)) for cid in cluster_ids}
    return SpuriousnessState(scores=scores, adjacency=A, converged=converged, iterations=iterations)


def resolve_instance_scores(
    state: SpuriousnessState,
    ann: AnnotationState,
    clusters: list[BehaviorCluster],
) -> dict[str, float]:
    """Instances inherit their cluster score; overrides pin individual ones to 0 or 1."""
    member_of: dict[str, int] = {}
    for c in clusters:
        for iid in c.member_ids:
            member_of[iid] = c.cluster_id
    out = {iid: state.scores[cid] for iid, cid in member_of.items()}
    for iid, word in ann.instance_overrides.items():
        if iid not in member_of:
            raise AnnotationError(f"override for instance {iid!r} outside all clusters")
        out[iid] = float(ANNOTATION_WORDS[word])
    state.instance_scores = out
    return out


def select_enhancement_sets(
    instance_scores: dict[str, float],
    tau_s: float = 0.7,
    tau_c: float = 0.3,
) -> tuple[set[str], set[str]]:
    """Split instances into confidently-spurious and confidently-correct sets."""
    if not (0.0 <= tau_c < tau_s <= 1.0):
        raise AnnotationError(f"need 0 <= tau_c < tau_s <= 1, got tau_c={tau_c}, tau_s={tau_s}")
    t_s = {iid for iid, s in instance_scores.items() if s >= tau_s}
    t_c = {iid for iid, s in instance_scores.items() if s <= tau_c}
    return t_s, t_c


# ---------------------------------------------------------------------------
# Annotation file format
# ---------------------------------------------------------------------------

def save_annotations(ann: AnnotationState, path) -> None:
    ann.validate()
    words = {LABEL_CORRECT: "correct", LABEL_SPURIOUS: "spurious"}
    doc = {
        "clusters": {
            str(cid): words[lab]
            for cid, lab in sorted(ann.cluster_labels.items())
            if lab != UNLABELED
        },
        "instances": dict(sorted(ann.instance_overrides.items())),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_annotations(path) -> AnnotationState:
    path = Path(path)
    if not path.exists():
        raise AnnotationError(f"annotation file not found: {path}")
    doc = json.loads(path.read_text())
    for key in ("clusters", "instances"):
        if key not in doc:
            raise AnnotationError(f"{path}: missing {key!r} section")
    cluster_labels = {}
    for cid, word in doc["clusters"].items():
        if word not in ANNOTATION_WORDS:
            raise AnnotationError(f"{path}: cluster {cid}: bad label {word!r}")
        cluster_labels[int(cid)] = ANNOTATION_WORDS[word]
    ann = AnnotationState(cluster_labels=cluster_labels, instance_overrides=dict(doc["instances"]))
    ann.validate()
    return ann
