"""Ground-truth-driven simulated annotator for headless runs.

The oracle judges an attribution correct when its relevance accuracy
against the instance's truth mask clears a threshold, labels clusters by
member majority vote, and spends an action budget the way the interface
intends: seed the extremes, then walk unlabeled clusters in propagated
spuriousness order, re-propagating after every action.  Leftover budget
refines individual instances whose oracle judgment disagrees with their
cluster's label.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import AttributionMask
from .metrics import relevance_accuracy
from .spuriousness import (
    LABEL_CORRECT,
    LABEL_SPURIOUS,
    AnnotationState,
    propagate,
)

WORDS = {LABEL_CORRECT: "correct", LABEL_SPURIOUS: "spurious"}


@dataclass
class OracleConfig:
    overlap_M: float = 20.0
    correct_threshold: float = 0.5
    cluster_vote: float = 0.5
    budget: int = 15
    refine_instances: bool = True

    def validate(self):
        if not (0.0 <= self.correct_threshold <= 1.0):
            raise ValueError("correct_threshold must be in [0, 1]")
        if not (0.0 <= self.cluster_vote <= 1.0):
            raise ValueError("cluster_vote must be in [0, 1]")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")


def oracle_label_instance(mask: AttributionMask, truth: Optional[np.ndarray], cfg: OracleConfig) -> str:
    """correct iff the mask recovers enough of the truth set; no truth set means
    the model attends to a region with no real anomaly, which is spurious by
    definition."""
    if truth is None or not np.asarray(truth).any():
        return "spurious"
    ra = relevance_accuracy(mask, truth, cfg.overlap_M)
    return "correct" if ra >= cfg.correct_threshold else "spurious"


def _correct_fraction(cluster, masks_by_id, truth_by_id, cfg: OracleConfig) -> float:
    votes = [
        1.0 if oracle_label_instance(masks_by_id[iid], truth_by_id.get(iid), cfg) == "correct" else 0.0
        for iid in cluster.member_ids
    ]
    return float(np.mean(votes))


def oracle_label_cluster(cluster, masks_by_id: dict, truth_by_id: dict, cfg: OracleConfig) -> str:
    """Majority vote over members; an exact tie counts as spurious."""
    frac = _correct_fraction(cluster, masks_by_id, truth_by_id, cfg)
    return "correct" if frac > cfg.cluster_vote else "spurious"


def run_oracle_session(session, cfg: OracleConfig):
    """Drive the annotation loop on an analyzed session.

    session must expose clusters, masks_by_id, truth_by_id, adjacency, and
    cluster_ids (the analysis module and the HTTP session object both do).
    Returns the final AnnotationState and an action log; the log never
    exceeds cfg.budget entries and every action is followed by exactly one
    propagation.
    """
    cfg.validate()
    clusters = session.clusters
    masks_by_id = session.masks_by_id
    truth_by_id = session.truth_by_id
    A = session.adjacency
    cluster_ids = [c.cluster_id for c in clusters]

    fractions = {
        c.cluster_id: _correct_fraction(c, masks_by_id, truth_by_id, cfg) for c in clusters
    }
    oracle_labels = {
        cid: (LABEL_CORRECT if frac > cfg.cluster_vote else LABEL_SPURIOUS)
        for cid, frac in fractions.items()
    }

    ann = AnnotationState()
    log: list[dict] = []
    state = None

    def act_cluster(cid: int):
        nonlocal state
        ann.cluster_labels[cid] = oracle_labels[cid]
        state = propagate(ann, A, cluster_ids)
        log.append({
            "step": len(log) + 1,
            "kind": "cluster",
            "target": cid,
            "label": WORDS[oracle_labels[cid]],
            "iterations": state.iterations,
        })

    # seed the two extremes: most confidently spurious first, then most correct
    by_spurious = sorted(fractions, key=lambda cid: (fractions[cid], cid))
    seed_spurious = by_spurious[0]
    seed_correct = min(
        (cid for cid in fractions),
        key=lambda cid: (-fractions[cid], cid),
    )
    act_cluster(seed_spurious)
    if seed_correct != seed_spurious and len(log) < cfg.budget:
        act_cluster(seed_correct)

    # then walk the unlabeled clusters from most suspicious down
    while len(log) < cfg.budget:
        unlabeled = [cid for cid in cluster_ids if cid not in ann.cluster_labels]
        if not unlabeled:
            break
        target = max(unlabeled, key=lambda cid: (state.scores[cid], -cid))
        act_cluster(target)

    if cfg.refine_instances and len(log) < cfg.budget:
        # leftover budget: pin instances the cluster label gets wrong
        for c in sorted(clusters, key=lambda c: -state.scores[c.cluster_id]):
            cluster_word = WORDS[oracle_labels[c.cluster_id]]
            for iid in c.member_ids:
                if len(log) >= cfg.budget:
                    break
                word = oracle_label_instance(masks_by_id[iid], truth_by_id.get(iid), cfg)
                if word != cluster_word:
                    ann.instance_overrides[iid] = word
                    state = propagate(ann, A, cluster_ids)
                    log.append({
                        "step": len(log) + 1,
                        "kind": "instance",
                        "target": iid,
                        "label": word,
                        "iterations": state.iterations,
                    })
            if len(log) >= cfg.budget:
                break

    return ann, log
