"""Noise-mask data enhancement, fine-tuning, and the comparison baselines.

Instances flagged spurious get Gaussian noise injected at their attended
time points (mask-weighted), destroying the shortcut feature; instances
flagged correct get noise everywhere except the attended points,
reinforcing them.  The corrected train split then fine-tunes the model.
Baselines perturb the same amount of data with less information: random
instances, random positions, or cluster-level decisions only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, SPLIT_TRAIN, TimeSeries, AttributionMask, train_channel_stats
from .fcn import FcnModel, TrainConfig, evaluate, init_model, train
from .spuriousness import select_enhancement_sets


class EnhancementError(ValueError):
    """Invalid enhancement input."""


@dataclass
class EnhancementConfig:
    noise_scale: float = 0.5
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, learning_rate=0.005))
    tau_s: float = 0.7
    tau_c: float = 0.3
    seed: int = 0
    append: bool = False  # append perturbed copies instead of replacing originals
    from_scratch: bool = True  # retrain fresh weights on the corrected data

    def validate(self):
        if self.noise_scale <= 0:
            raise EnhancementError("noise_scale must be > 0")
        if not (0.0 <= self.tau_c < self.tau_s <= 1.0):
            raise EnhancementError("need 0 <= tau_c < tau_s <= 1")
        self.finetune.validate()


def _masked_noise(x: TimeSeries, mask_vec: np.ndarray, cfg: EnhancementConfig,
                  rng: np.random.Generator, channel_std: np.ndarray) -> TimeSeries:
    if mask_vec.shape != (x.n,):
        raise EnhancementError(
            f"instance {x.id!r}: mask length {mask_vec.shape} does not match n={x.n}"
        )
    z = rng.normal(0.0, 1.0, x.values.shape) * (cfg.noise_scale * channel_std)[:, None]
    out = x.copy()
    out.values = x.values + mask_vec[None, :] * z
    return out


def corrupt_spurious(x: TimeSeries, m: AttributionMask, cfg: EnhancementConfig,
                     rng: np.random.Generator, channel_std: np.ndarray) -> TimeSeries:
    """Noise the attended points: T' = T + m (Hadamard) z, mask shared across channels."""
    return _masked_noise(x, m.weights, cfg, rng, channel_std)


def enhance_correct(x: TimeSeries, m: AttributionMask, cfg: EnhancementConfig,
                    rng: np.random.Generator, channel_std: np.ndarray) -> TimeSeries:
    """Noise everything except the attended points: T' = T + (1 - m) (Hadamard) z."""
    return _masked_noise(x, 1.0 - m.weights, cfg, rng, channel_std)


def _apply_replacements(ds: Dataset, replacements: dict[str, TimeSeries], append: bool) -> Dataset:
    out = ds.copy()
    if append:
        for iid, inst in replacements.items():
            inst = inst.copy()
            inst.id = iid + "-enh"
            out.instances.append(inst)
            out.split.append(SPLIT_TRAIN)
    else:
        for i, ts in enumerate(out.instances):
            if ts.id in replacements:
                out.instances[i] = replacements[ts.id]
    out.validate()
    return out


def _finetune(model: FcnModel, ds: Dataset, cfg: EnhancementConfig) -> FcnModel:
    start = init_model(model.config) if cfg.from_scratch else model
    tuned, _ = train(start, ds, cfg.finetune)
    return tuned


def enhance_model(model: FcnModel, ds: Dataset, masks: list[AttributionMask],
                  instance_scores: dict[str, float], cfg: EnhancementConfig):
    """Perturb the selected train instances per their scores, then fine-tune.

    Returns (model, report).  With nothing selected the input weights come
    back untouched and the report says so.
    """
    cfg.validate()
    t_s, t_c = select_enhancement_sets(instance_scores, cfg.tau_s, cfg.tau_c)
    split_of = ds.split_of()
    t_s = {i for i in t_s if split_of.get(i) == SPLIT_TRAIN}
    t_c = {i for i in t_c if split_of.get(i) == SPLIT_TRAIN}
    report = {
        "selected_spurious": sorted(t_s),
        "selected_correct": sorted(t_c),
        "noise_scale": cfg.noise_scale,
        "tau_s": cfg.tau_s,
        "tau_c": cfg.tau_c,
        "no_selection": False,
    }
    if not t_s and not t_c:
        report["no_selection"] = True
        return model.copy(), report

    mask_by_id = {m.instance_id: m for m in masks}
    missing = (t_s | t_c) - set(mask_by_id)
    if missing:
        raise EnhancementError(f"no attribution mask for selected instances: {sorted(missing)[:5]}")
    by_id = ds.by_id()
    _, channel_std = train_channel_stats(ds)
    rng = np.random.default_rng(cfg.seed)
    replacements: dict[str, TimeSeries] = {}
    # fixed id order keeps the noise draws reproducible
    for iid in sorted(t_s):
        replacements[iid] = corrupt_spurious(by_id[iid], mask_by_id[iid], cfg, rng, channel_std)
    for iid in sorted(t_c):
        replacements[iid] = enhance_correct(by_id[iid], mask_by_id[iid], cfg, rng, channel_std)
    tuned_ds = _apply_replacements(ds, replacements, cfg.append)
    report["pre_metrics"] = evaluate(model, ds, "test").to_dict()
    tuned = _finetune(model, tuned_ds, cfg)
    report["post_metrics"] = evaluate(tuned, ds, "test").to_dict()
    return tuned, report


def baseline_random_aug(model: FcnModel, ds: Dataset, gamma: int, cfg: EnhancementConfig) -> FcnModel:
    """Jitter gamma random train instances with full-sequence noise, fine-tune."""
    cfg.validate()
    train_ids = [ts.id for ts, sp in zip(ds.instances, ds.split) if sp == SPLIT_TRAIN]
    if gamma > len(train_ids):
        raise EnhancementError(f"gamma={gamma} exceeds train size {len(train_ids)}")
    if gamma == 0:
        return model.copy()
    rng = np.random.default_rng(cfg.seed)
    chosen = rng.choice(len(train_ids), size=gamma, replace=False)
    by_id = ds.by_id()
    _, channel_std = train_channel_stats(ds)
    full = None
    replacements = {}
    for c in sorted(int(i) for i in chosen):
        iid = train_ids[c]
        x = by_id[iid]
        if full is None or full.shape != (x.n,):
            full = np.ones(x.n)
        replacements[iid] = _masked_noise(x, full, cfg, rng, channel_std)
    return _finetune(model, _apply_replacements(ds, replacements, cfg.append), cfg)


def baseline_random_mask(model: FcnModel, ds: Dataset, proposed: set[str],
                         masks: list[AttributionMask], cfg: EnhancementConfig) -> FcnModel:
    """Same instances as the informed pipeline, but noise lands at random points.

    Each instance gets a binary mask with round(sum(CAM weights)) uniformly
    chosen positions, matching the total masked mass without the placement
    information.
    """
    cfg.validate()
    if not proposed:
        return model.copy()
    mask_by_id = {m.instance_id: m for m in masks}
    missing = proposed - set(mask_by_id)
    if missing:
        raise EnhancementError(f"no attribution mask for proposed instances: {sorted(missing)[:5]}")
    split_of = ds.split_of()
    by_id = ds.by_id()
    _, channel_std = train_channel_stats(ds)
    rng = np.random.default_rng(cfg.seed)
    replacements = {}
    for iid in sorted(proposed):
        if split_of.get(iid) != SPLIT_TRAIN:
            continue
        x = by_id[iid]
        mass = float(mask_by_id[iid].weights.sum())
        k = int(np.clip(round(mass), 0, x.n))
        vec = np.zeros(x.n)
        if k > 0:
            vec[rng.choice(x.n, size=k, replace=False)] = 1.0
        replacements[iid] = _masked_noise(x, vec, cfg, rng, channel_std)
    if not replacements:
        return model.copy()
    return _finetune(model, _apply_replacements(ds, replacements, cfg.append), cfg)


def baseline_cluster_mask(model: FcnModel, ds: Dataset, masks: list[AttributionMask],
                          clusters, cluster_scores: dict[int, float], cfg: EnhancementConfig):
    """enhance_model driven by cluster scores alone; instance overrides never apply."""
    inherited: dict[str, float] = {}
    for c in clusters:
        for iid in c.member_ids:
            inherited[iid] = cluster_scores[c.cluster_id]
    return enhance_model(model, ds, masks, inherited, cfg)
