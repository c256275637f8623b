"""Analysis orchestration and on-disk session state.

A session directory holds everything one analysis produces: the dataset
copy, model checkpoints, distance caches, the cluster report, annotations,
propagated scores, metrics history, and an append-only journal with a
logical counter (no wall-clock in any artifact, so reruns are
byte-reproducible).  The HTTP service and the CLI both operate on this
layout; reloading a directory reproduces the exact state that was saved.
"""

from __future__ import annotations

import json
import shutil
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .clustering import (
    BehaviorCluster,
    Embedding2D,
    choose_k_elbow,
    embed_2d,
    kmeans,
    select_behavior_instances,
    summarize_clusters,
)
from .data import Dataset, load_dataset
from .enhancement import EnhancementConfig, enhance_model
from .fcn import (
    FcnConfig,
    FcnModel,
    PredictionResult,
    TrainConfig,
    evaluate,
    init_model,
    load_model,
    predict_batch,
    save_model,
    train,
)
from .metrics import DEFAULT_M_GRID, attention_report
from .similarity import (
    DistanceMatrix,
    aggregated_matrix,
    compute_cosine_matrix,
    compute_dtw_matrix,
    load_matrix,
    save_matrix,
)
from .spuriousness import (
    ANNOTATION_WORDS,
    AnnotationState,
    SpuriousnessState,
    build_adjacency,
    propagate,
    resolve_instance_scores,
)
from .data import AttributionMask, LABELS

SCHEMA_VERSION = 1


class SessionError(ValueError):
    """Bad session operation (unknown id, missing prerequisite, conflict)."""


class JobConflict(SessionError):
    """A mutation arrived while a job is active."""


# ---------------------------------------------------------------------------
# Analysis pipeline
# ---------------------------------------------------------------------------

@dataclass
class AnalysisConfig:
    alpha: float = 0.5
    band: Optional[int] = None
    k: Optional[int] = None
    k_max: int = 10
    seed: int = 0
    split: str = "train"

    def validate(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise SessionError("alpha must be in [0, 1]")
        if self.k is not None and self.k < 1:
            raise SessionError("k must be >= 1")
        if self.k_max < 3:
            raise SessionError("k_max must be >= 3")


@dataclass
class Analysis:
    config: AnalysisConfig
    instances: list
    predictions: list
    masks: list
    dtw: DistanceMatrix
    cosine: DistanceMatrix
    aggregated: DistanceMatrix
    embedding: Embedding2D
    assignment: np.ndarray
    clusters: list[BehaviorCluster]
    adjacency: np.ndarray

    @property
    def cluster_ids(self) -> list[int]:
        return [c.cluster_id for c in self.clusters]

    @property
    def masks_by_id(self) -> dict[str, AttributionMask]:
        return {m.instance_id: m for m in self.masks}

    @property
    def truth_by_id(self) -> dict:
        return {ts.id: ts.truth_mask for ts in self.instances}


def analyze(
    model: FcnModel,
    ds: Dataset,
    cfg: AnalysisConfig,
    dtw: Optional[DistanceMatrix] = None,
    cosine: Optional[DistanceMatrix] = None,
) -> Analysis:
    """Run the full behavior-analysis pipeline on the anomaly-related subset.

    Precomputed dtw/cosine matrices (from a matching earlier run) can be
    supplied to skip the expensive pairwise passes, e.g. when sweeping alpha.
    """
    cfg.validate()
    split_insts = ds.subset(cfg.split)
    feats, probs, cls = predict_batch(model, split_insts)
    class_idx = {ts.id: int(c) for ts, c in zip(split_insts, cls)}
    selected = select_behavior_instances(ds, class_idx, cfg.split)

    pred_by_id: dict[str, PredictionResult] = {}
    mask_by_id: dict[str, AttributionMask] = {}
    Wl = model.params["linear/W"]
    for ts, fmap, p in zip(split_insts, feats, probs):
        ci = int(np.argmax(p))
        pred_by_id[ts.id] = PredictionResult(
            predicted=LABELS[ci], confidence=float(p[ci]), logits=np.log(p + 1e-300), probabilities=p,
        )
        raw = Wl[ci] @ fmap
        lo, hi = raw.min(), raw.max()
        if hi - lo < 1e-12:
            weights = np.full(raw.shape, 0.5)
        else:
            weights = (raw - lo) / (hi - lo)
        mask_by_id[ts.id] = AttributionMask(instance_id=ts.id, weights=weights)

    predictions = [pred_by_id[ts.id] for ts in selected]
    masks = [mask_by_id[ts.id] for ts in selected]

    if dtw is None:
        dtw = compute_dtw_matrix(selected, band=cfg.band)
    if cosine is None:
        cosine = compute_cosine_matrix(masks)
    agg = aggregated_matrix(selected, masks, cfg.alpha, dtw_matrix=dtw, cosine_matrix=cosine)

    embedding = embed_2d(agg, seed=cfg.seed)
    n = len(selected)
    if cfg.k is not None:
        k = min(cfg.k, n)
    elif n < 3:
        k = 1
    else:
        k = choose_k_elbow(agg, embedding, k_max=min(cfg.k_max, n), seed=cfg.seed)
    assignment = kmeans(embedding, k, seed=cfg.seed)
    clusters = summarize_clusters(selected, masks, predictions, assignment, embedding)
    if len(clusters) >= 2:
        adjacency = build_adjacency(clusters)
    else:
        adjacency = np.zeros((1, 1))
    return Analysis(
        config=cfg,
        instances=selected,
        predictions=predictions,
        masks=masks,
        dtw=dtw,
        cosine=cosine,
        aggregated=agg,
        embedding=embedding,
        assignment=np.asarray(assignment, dtype=int),
        clusters=clusters,
        adjacency=adjacency,
    )


# ---------------------------------------------------------------------------
# Serialization helpers
# ---------------------------------------------------------------------------

def _write_json(path: Path, doc) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def _cluster_from_doc(doc: dict) -> BehaviorCluster:
    return BehaviorCluster(
        cluster_id=int(doc["cluster_id"]),
        member_ids=list(doc["member_ids"]),
        centroid_2d=np.asarray(doc["centroid_2d"], dtype=np.float64),
        summary_sequence=np.asarray(doc["summary_sequence"], dtype=np.float64),
        summary_attribution=np.asarray(doc["summary_attribution"], dtype=np.float64),
        accuracy=float(doc["accuracy"]),
        mean_confidence=float(doc["mean_confidence"]),
    )


def analysis_to_doc(analysis: Analysis) -> dict:
    return {
        "alpha": analysis.config.alpha,
        "band": analysis.config.band,
        "seed": analysis.config.seed,
        "split": analysis.config.split,
        "k": len(analysis.clusters),
        "selected_ids": [ts.id for ts in analysis.instances],
        "embedding": {
            "ids": list(analysis.embedding.ids),
            "points": analysis.embedding.points.tolist(),
        },
        "assignment": analysis.assignment.tolist(),
        "clusters": [c.to_dict() for c in analysis.clusters],
        "adjacency": analysis.adjacency.tolist(),
        "predictions": {
            ts.id: {
                "predicted": p.predicted,
                "confidence": p.confidence,
                "probabilities": p.probabilities.tolist(),
            }
            for ts, p in zip(analysis.instances, analysis.predictions)
        },
        "masks": {m.instance_id: m.weights.tolist() for m in analysis.masks},
    }


# ---------------------------------------------------------------------------
# Session state
# ---------------------------------------------------------------------------

class Session:
    """One analysis session rooted in a directory; all state lives on disk."""

    def __init__(self, root: Path, session_id: str):
        self.root = Path(root)
        self.session_id = session_id
        self.lock = threading.Lock()
        self.meta: dict = {}
        self.analysis_doc: dict = {}
        self.annotation_doc: dict = {"clusters": {}, "instances": {}}
        self.spuriousness_doc: Optional[dict] = None
        self.dataset: Optional[Dataset] = None
        self.model: Optional[FcnModel] = None

    # -- paths --------------------------------------------------------------
    def _p(self, name: str) -> Path:
        return self.root / name

    # -- journal ------------------------------------------------------------
    def journal(self, event: str, **payload) -> None:
        path = self._p("journal.ndjson")
        counter = 0
        if path.exists():
            lines = path.read_text().splitlines()
            if lines:
                counter = json.loads(lines[-1])["counter"]
        rec = {"counter": counter + 1, "event": event}
        rec.update(payload)
        with path.open("a") as fh:
            fh.write(json.dumps(rec) + "\n")

    # -- creation -----------------------------------------------------------
    @classmethod
    def create(
        cls,
        root: Path,
        session_id: str,
        dataset_path,
        analysis_cfg: AnalysisConfig,
        model_checkpoint=None,
        model_cfg: Optional[FcnConfig] = None,
        train_cfg: Optional[TrainConfig] = None,
    ) -> "Session":
        analysis_cfg.validate()
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        ds = load_dataset(dataset_path)
        shutil.copyfile(dataset_path, root / "dataset.ndjson")

        if model_checkpoint is not None:
            model = load_model(model_checkpoint)
        else:
            if model_cfg is None:
                model_cfg = FcnConfig(in_channels=ds.d)
            if model_cfg.in_channels != ds.d:
                raise SessionError(
                    f"model expects {model_cfg.in_channels} channels, dataset has {ds.d}"
                )
            model, _ = train(init_model(model_cfg), ds, train_cfg or TrainConfig())
        save_model(model, root / "model.json")

        analysis = analyze(model, ds, analysis_cfg)
        save_matrix(analysis.dtw, root / "dtw.npz")
        save_matrix(analysis.cosine, root / "cosine.npz")
        save_matrix(analysis.aggregated, root / "aggregated.npz")

        sess = cls(root, session_id)
        sess.dataset = ds
        sess.model = model
        sess.analysis_doc = analysis_to_doc(analysis)
        _write_json(root / "analysis.json", sess.analysis_doc)
        _write_json(root / "annotations.json", sess.annotation_doc)

        metrics_entry = sess._metrics_entry("initial", model, ds)
        sess.meta = {
            "schema_version": SCHEMA_VERSION,
            "session_id": session_id,
            "alpha": analysis_cfg.alpha,
            "seed": analysis_cfg.seed,
            "band": analysis_cfg.band,
            "k": len(analysis.clusters),
            "job": {"id": None, "status": "idle", "error": None},
            "metrics_history": [metrics_entry],
        }
        _write_json(root / "meta.json", sess.meta)
        sess.journal("created", k=len(analysis.clusters), alpha=analysis_cfg.alpha)
        return sess

    def _metrics_entry(self, stage: str, model: FcnModel, ds: Dataset) -> dict:
        entry = {"stage": stage, "classification": evaluate(model, ds, "test").to_dict()}
        try:
            entry["relevance"] = attention_report(model, ds, "test", DEFAULT_M_GRID).to_dict()
        except ValueError:
            entry["relevance"] = None
        return entry

    # -- loading ------------------------------------------------------------
    @classmethod
    def load(cls, root: Path, session_id: str) -> "Session":
        root = Path(root)
        meta_path = root / "meta.json"
        if not meta_path.exists():
            raise SessionError(f"no session at {root}")
        sess = cls(root, session_id)
        sess.meta = json.loads(meta_path.read_text())
        if sess.meta.get("schema_version") != SCHEMA_VERSION:
            raise SessionError(f"unsupported session schema {sess.meta.get('schema_version')!r}")
        sess.analysis_doc = json.loads((root / "analysis.json").read_text())
        sess.annotation_doc = json.loads((root / "annotations.json").read_text())
        spur_path = root / "spuriousness.json"
        sess.spuriousness_doc = json.loads(spur_path.read_text()) if spur_path.exists() else None
        sess.dataset = load_dataset(root / "dataset.ndjson")
        sess.model = load_model(root / "model.json")
        # a job can't survive the process; mark it interrupted
        if sess.meta["job"]["status"] in ("analyzing", "retraining"):
            sess.meta["job"]["status"] = "failed"
            sess.meta["job"]["error"] = "interrupted by restart"
            _write_json(root / "meta.json", sess.meta)
            sess.journal("job-interrupted", job_id=sess.meta["job"]["id"])
        return sess

    # -- typed views over the stored docs ------------------------------------
    @property
    def clusters(self) -> list[BehaviorCluster]:
        return [_cluster_from_doc(d) for d in self.analysis_doc["clusters"]]

    @property
    def cluster_ids(self) -> list[int]:
        return [int(d["cluster_id"]) for d in self.analysis_doc["clusters"]]

    @property
    def adjacency(self) -> np.ndarray:
        return np.asarray(self.analysis_doc["adjacency"], dtype=np.float64)

    @property
    def masks_by_id(self) -> dict[str, AttributionMask]:
        return {
            iid: AttributionMask(instance_id=iid, weights=np.asarray(w, dtype=np.float64))
            for iid, w in self.analysis_doc["masks"].items()
        }

    @property
    def truth_by_id(self) -> dict:
        return {ts.id: ts.truth_mask for ts in self.dataset.instances}

    def annotation_state(self) -> AnnotationState:
        return AnnotationState(
            cluster_labels={int(cid): ANNOTATION_WORDS[w] for cid, w in self.annotation_doc["clusters"].items()},
            instance_overrides=dict(self.annotation_doc["instances"]),
        )

    def has_annotations(self) -> bool:
        return bool(self.annotation_doc["clusters"]) or bool(self.annotation_doc["instances"])

    def job_active(self) -> bool:
        return self.meta["job"]["status"] in ("analyzing", "retraining")

    # -- mutations ----------------------------------------------------------
    def annotate(self, target: str, target_id, label: str) -> dict:
        """Record one annotation, re-propagate, persist, return the score doc."""
        if self.job_active():
            raise JobConflict("a job is running; annotations are locked")
        if label not in ANNOTATION_WORDS:
            raise SessionError(f"label must be 'correct' or 'spurious', got {label!r}")
        if target == "cluster":
            cid = int(target_id)
            if cid not in self.cluster_ids:
                raise SessionError(f"unknown cluster {target_id!r}")
            self.annotation_doc["clusters"][str(cid)] = label
        elif target == "instance":
            member_ids = {iid for d in self.analysis_doc["clusters"] for iid in d["member_ids"]}
            if target_id not in member_ids:
                raise SessionError(f"unknown instance {target_id!r}")
            self.annotation_doc["instances"][str(target_id)] = label
        else:
            raise SessionError(f"target must be 'cluster' or 'instance', got {target!r}")

        if not self.annotation_doc["clusters"]:
            # instance-only overrides cannot seed propagation
            _write_json(self._p("annotations.json"), self.annotation_doc)
            self.journal("annotate", target=target, id=str(target_id), label=label)
            return {"scores": None, "note": "no cluster labels yet; propagation deferred"}

        self._repropagate()
        _write_json(self._p("annotations.json"), self.annotation_doc)
        _write_json(self._p("spuriousness.json"), self.spuriousness_doc)
        self.journal("annotate", target=target, id=str(target_id), label=label)
        return self.spuriousness_doc

    def _repropagate(self) -> None:
        ann = self.annotation_state()
        state = propagate(ann, self.adjacency, self.cluster_ids)
        clusters = self.clusters
        inst_scores = resolve_instance_scores(state, ann, clusters)
        self.spuriousness_doc = {
            "scores": {str(cid): state.scores[cid] for cid in self.cluster_ids},
            "instance_scores": {iid: inst_scores[iid] for iid in sorted(inst_scores)},
            "converged": state.converged,
            "iterations": state.iterations,
        }

    def apply_annotation_state(self, ann: AnnotationState) -> None:
        """Install a whole AnnotationState (oracle runs), propagate, persist."""
        if self.job_active():
            raise JobConflict("a job is running; annotations are locked")
        from .spuriousness import UNLABELED

        words = {0: "correct", 1: "spurious"}
        self.annotation_doc = {
            "clusters": {
                str(cid): words[lab]
                for cid, lab in sorted(ann.cluster_labels.items())
                if lab != UNLABELED
            },
            "instances": dict(sorted(ann.instance_overrides.items())),
        }
        self._repropagate()
        _write_json(self._p("annotations.json"), self.annotation_doc)
        _write_json(self._p("spuriousness.json"), self.spuriousness_doc)
        self.journal("annotate-bulk", clusters=len(self.annotation_doc["clusters"]),
                     instances=len(self.annotation_doc["instances"]))

    def start_retrain(self, cfg: EnhancementConfig) -> str:
        """Mark the retrain job active and persist the transition."""
        if self.job_active():
            raise JobConflict("another job is already running")
        if not self.has_annotations() or self.spuriousness_doc is None:
            raise SessionError("annotate at least one cluster before retraining")
        cfg.validate()
        job_id = f"job-{sum(1 for e in self.meta['metrics_history'])}"
        self.meta["job"] = {"id": job_id, "status": "retraining", "error": None}
        _write_json(self._p("meta.json"), self.meta)
        self.journal("retrain-start", job_id=job_id)
        return job_id

    def run_retrain(self, cfg: EnhancementConfig, job_id: str) -> dict:
        """Execute the enhancement job synchronously; swap model on success."""
        try:
            masks = list(self.masks_by_id.values())
            scores = {iid: float(s) for iid, s in self.spuriousness_doc["instance_scores"].items()}
            new_model, report = enhance_model(self.model, self.dataset, masks, scores, cfg)
            entry = self._metrics_entry(f"retrain-{job_id}", new_model, self.dataset)
            with self.lock:
                self.model = new_model
                save_model(new_model, self._p("model.json"))
                self.meta["metrics_history"].append(entry)
                self.meta["job"] = {"id": job_id, "status": "idle", "error": None,
                                    "report": report}
                _write_json(self._p("meta.json"), self.meta)
            self.journal("retrain-done", job_id=job_id,
                         selected_spurious=len(report["selected_spurious"]),
                         selected_correct=len(report["selected_correct"]))
            return report
        except Exception as e:  # persist the failure; service surfaces it
            with self.lock:
                self.meta["job"] = {"id": job_id, "status": "failed", "error": str(e)}
                _write_json(self._p("meta.json"), self.meta)
            self.journal("retrain-failed", job_id=job_id, error=str(e))
            raise

    # -- read views ---------------------------------------------------------
    def cluster_report(self, sort_by: str = "cluster_id") -> list[dict]:
        scores = None if self.spuriousness_doc is None else self.spuriousness_doc["scores"]
        rows = []
        for d in self.analysis_doc["clusters"]:
            cid = str(d["cluster_id"])
            rows.append({
                "cluster_id": d["cluster_id"],
                "size": len(d["member_ids"]),
                "member_ids": list(d["member_ids"]),
                "accuracy": d["accuracy"],
                "mean_confidence": d["mean_confidence"],
                "spuriousness": None if scores is None else scores.get(cid),
                "annotation": self.annotation_doc["clusters"].get(cid),
                "summary_sequence": d["summary_sequence"],
                "summary_attribution": d["summary_attribution"],
            })
        if sort_by == "accuracy":
            rows.sort(key=lambda r: (r["accuracy"], r["cluster_id"]))
        elif sort_by == "confidence":
            rows.sort(key=lambda r: (r["mean_confidence"], r["cluster_id"]))
        elif sort_by == "spuriousness":
            if scores is None:
                raise SessionError("spuriousness order needs at least one annotation")
            rows.sort(key=lambda r: (-r["spuriousness"], r["cluster_id"]))
        elif sort_by != "cluster_id":
            raise SessionError(f"unknown sort key {sort_by!r}")
        return rows

    def embedding_report(self) -> dict:
        return {
            "ids": self.analysis_doc["embedding"]["ids"],
            "points": self.analysis_doc["embedding"]["points"],
            "assignment": self.analysis_doc["assignment"],
            "centroids": {
                str(d["cluster_id"]): d["centroid_2d"] for d in self.analysis_doc["clusters"]
            },
        }

    def instances_report(self, cluster_id: int) -> list[dict]:
        doc = next(
            (d for d in self.analysis_doc["clusters"] if int(d["cluster_id"]) == int(cluster_id)),
            None,
        )
        if doc is None:
            raise SessionError(f"unknown cluster {cluster_id!r}")
        by_id = self.dataset.by_id()
        inst_scores = None if self.spuriousness_doc is None else self.spuriousness_doc["instance_scores"]
        rows = []
        for iid in doc["member_ids"]:
            ts = by_id[iid]
            rows.append({
                "id": iid,
                "values": ts.values.tolist(),
                "label": ts.label,
                "truth_mask": None if ts.truth_mask is None else ts.truth_mask.tolist(),
                "mask": self.analysis_doc["masks"][iid],
                "predicted": self.analysis_doc["predictions"][iid]["predicted"],
                "confidence": self.analysis_doc["predictions"][iid]["confidence"],
                "score": None if inst_scores is None else inst_scores.get(iid),
                "override": self.annotation_doc["instances"].get(iid),
            })
        return rows
