"""Classification metrics and the relevance-accuracy attention metric.

Relevance accuracy measures how well an attribution mask points at the
ground-truth anomalous region: rank time points by mask weight, keep the
top k = floor((1 + M/100) * |G|), and report the fraction of the truth
set G recovered.  A mask that highlights everything uniformly scores no
better than the tie-break baseline, so high RA requires focus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LABEL_ANOMALY, AttributionMask, Dataset

DEFAULT_M_GRID = (20, 25, 30, 35)


@dataclass
class ClassificationMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray  # rows true, cols predicted; index 1 = anomaly

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": self.confusion.tolist(),
        }


@dataclass
class RelevanceReport:
    """Mean RA per overlap percentage M, plus the per-instance values behind it."""

    mean_ra: dict[int, float]
    per_instance: dict[int, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean_ra": {str(m): v for m, v in self.mean_ra.items()},
            "per_instance": {
                str(m): dict(v) for m, v in self.per_instance.items()
            },
        }


def classification_metrics(y_true: np.ndarray, y_pred: np.ndarray) -> ClassificationMetrics:
    """Binary metrics with the anomaly class (label 1) as positive.

    Precision, recall, and f1 fall back to 0 when their denominators are
    zero rather than raising.
    """
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred must have the same shape")
    if y_true.size == 0:
        raise ValueError("empty label vectors")
    confusion = np.zeros((2, 2), dtype=int)
    for t, p in zip(y_true, y_pred):
        confusion[t, p] += 1
    tn, fp = confusion[0]
    fn, tp = confusion[1]
    accuracy = (tp + tn) / confusion.sum()
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ClassificationMetrics(
        accuracy=float(accuracy),
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
        confusion=confusion,
    )


def top_k_indices(weights: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest weights, ties resolved toward the lower index."""
    if k <= 0:
        return np.empty(0, dtype=int)
    weights = np.asarray(weights, dtype=np.float64)
    k = min(k, weights.shape[0])
    # stable sort on negated weights keeps earlier indices first among ties
    order = np.argsort(-weights, kind="stable")
    return order[:k]


def relevance_accuracy(mask: AttributionMask, truth: np.ndarray, M: float) -> float:
    """Fraction of the ground-truth set recovered by the top-k attention points.

    k = floor((1 + M/100) * |G|), capped at the sequence length.
    """
    truth = np.asarray(truth, dtype=bool)
    if mask.n != truth.shape[0]:
        raise ValueError(
            f"mask length {mask.n} != truth length {truth.shape[0]} for {mask.instance_id!r}"
        )
    g = np.flatnonzero(truth)
    if g.size == 0:
        raise ValueError(f"instance {mask.instance_id!r}: empty ground-truth set")
    k = int(np.floor((1.0 + M / 100.0) * g.size))
    k = min(k, mask.n)
    top = top_k_indices(mask.weights, k)
    hit = np.intersect1d(top, g, assume_unique=True).size
    return hit / g.size


def attention_report(model, ds: Dataset, split: str, Ms=DEFAULT_M_GRID) -> RelevanceReport:
    """Mean RA over every ground-truth anomaly instance of a split.

    Only instances carrying a truth_mask qualify; normal instances have no
    ground-truth attention target and are skipped.
    """
    from .fcn import compute_cam  # deferred: metrics must not import the model at module level

    ids, insts = [], []
    for ts, sp in zip(ds.instances, ds.split):
        if sp == split and ts.label == LABEL_ANOMALY and ts.truth_mask is not None:
            ids.append(ts.id)
            insts.append(ts)
    if not insts:
        raise ValueError(f"split {split!r} has no anomaly instances with truth masks")
    masks = [compute_cam(model, ts) for ts in insts]
    mean_ra: dict[int, float] = {}
    per_instance: dict[int, dict[str, float]] = {}
    for M in Ms:
        vals = {
            iid: relevance_accuracy(mk, ts.truth_mask, M)
            for iid, mk, ts in zip(ids, masks, insts)
        }
        per_instance[int(M)] = vals
        mean_ra[int(M)] = float(np.mean(list(vals.values())))
    return RelevanceReport(mean_ra=mean_ra, per_instance=per_instance)
