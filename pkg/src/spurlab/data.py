"""Time-series data model, dataset file I/O, and synthetic data generation.

Datasets are stored as line-delimited JSON: a header line with global shape
information followed by one record per instance (see `save_dataset`).
Synthetic generators produce labeled sequences with ground-truth anomaly
masks, and `inject_spurious_artifact` plants a controlled shortcut feature
into the train split so that classifier bias can be studied end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

LABEL_NORMAL = "normal"
LABEL_ANOMALY = "anomaly"
LABELS = (LABEL_NORMAL, LABEL_ANOMALY)

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"
SPLITS = (SPLIT_TRAIN, SPLIT_TEST)


class DatasetError(ValueError):
    """Malformed dataset file or violated dataset invariant."""


@dataclass
class TimeSeries:
    """A labeled multichannel sequence with an optional ground-truth anomaly mask.

    values has shape (d, n): d channels by n time steps.  truth_mask, when
    present, is a boolean vector of length n that is true at the time points
    where the anomalous behavior actually occurs.
    """

    id: str
    values: np.ndarray
    label: str
    truth_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.truth_mask is not None:
            self.truth_mask = np.asarray(self.truth_mask, dtype=bool)

    @property
    def d(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def validate(self):
        if self.values.ndim != 2:
            raise DatasetError(f"instance {self.id!r}: values must be 2-D (d x n)")
        if self.n < 1 or self.d < 1:
            raise DatasetError(f"instance {self.id!r}: needs d >= 1 and n >= 1")
        if self.label not in LABELS:
            raise DatasetError(f"instance {self.id!r}: unknown label {self.label!r}")
        if not np.all(np.isfinite(self.values)):
            raise DatasetError(f"instance {self.id!r}: non-finite values")
        if self.truth_mask is not None:
            if self.truth_mask.shape != (self.n,):
                raise DatasetError(
                    f"instance {self.id!r}: truth_mask length {self.truth_mask.shape} "
                    f"does not match n={self.n}"
                )
            if self.label == LABEL_NORMAL and self.truth_mask.any():
                raise DatasetError(
                    f"instance {self.id!r}: normal instance with true mask points"
                )
            if self.label == LABEL_ANOMALY and not self.truth_mask.any():
                raise DatasetError(
                    f"instance {self.id!r}: anomaly instance with empty truth_mask"
                )

    def copy(self) -> "TimeSeries":
        return TimeSeries(
            id=self.id,
            values=self.values.copy(),
            label=self.label,
            truth_mask=None if self.truth_mask is None else self.truth_mask.copy(),
        )


@dataclass
class Dataset:
    """A named collection of equal-shape instances with per-instance split tags."""

    name: str
    instances: list[TimeSeries]
    split: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.split:
            self.split = [SPLIT_TRAIN] * len(self.instances)

    @property
    def d(self) -> int:
        return self.instances[0].d if self.instances else 0

    @property
    def n(self) -> int:
        return self.instances[0].n if self.instances else 0

    def validate(self):
        if len(self.split) != len(self.instances):
            raise DatasetError("split tags not aligned with instances")
        seen = set()
        for ts, sp in zip(self.instances, self.split):
            ts.validate()
            if ts.id in seen:
                raise DatasetError(f"duplicate instance id {ts.id!r}")
            seen.add(ts.id)
            if sp not in SPLITS:
                raise DatasetError(f"instance {ts.id!r}: unknown split {sp!r}")
            if ts.d != self.d:
                raise DatasetError(
                    f"instance {ts.id!r}: channel count {ts.d} != dataset d={self.d}"
                )
            if ts.n != self.n:
                raise DatasetError(
                    f"instance {ts.id!r}: length {ts.n} != dataset n={self.n}"
                )
        train_labels = {ts.label for ts, sp in zip(self.instances, self.split) if sp == SPLIT_TRAIN}
        if train_labels != set(LABELS):
            raise DatasetError("train split must contain both normal and anomaly instances")

    def subset(self, split: str) -> list[TimeSeries]:
        return [ts for ts, sp in zip(self.instances, self.split) if sp == split]

    def split_of(self) -> dict[str, str]:
        return {ts.id: sp for ts, sp in zip(self.instances, self.split)}

    def by_id(self) -> dict[str, TimeSeries]:
        return {ts.id: ts for ts in self.instances}

    def copy(self) -> "Dataset":
        return Dataset(
            name=self.name,
            instances=[ts.copy() for ts in self.instances],
            split=list(self.split),
        )


@dataclass
class SpuriousSpec:
    """Recipe for a shortcut artifact planted into anomalous train instances.

    artifact_window is a half-open [start, end) index range that must stay
    clear of every ground-truth anomaly region.  train_correlation is the
    fraction of anomalous train instances that receive the artifact.
    """

    artifact_window: tuple[int, int]
    artifact_shape: str = "offset"  # offset | spike | sine-burst | damp
    amplitude: float = 1.0
    train_correlation: float = 1.0
    amplitude_jitter: float = 0.0  # per-instance amplitude drawn U(amp - j, amp + j)

    def validate(self, n: int):
        start, end = self.artifact_window
        if not (0 <= start < end <= n):
            raise DatasetError(f"artifact_window {self.artifact_window} out of bounds for n={n}")
        if self.artifact_shape not in ("offset", "spike", "sine-burst", "damp"):
            raise DatasetError(f"unknown artifact_shape {self.artifact_shape!r}")
        if self.artifact_shape == "damp" and not (0.0 <= self.amplitude < 1.0):
            # for damp, amplitude is the retained fraction of local texture
            raise DatasetError("damp artifact needs amplitude in [0, 1)")
        if not (0.0 <= self.train_correlation <= 1.0):
            raise DatasetError("train_correlation must be in [0, 1]")
        if not (0.0 <= self.amplitude_jitter <= abs(self.amplitude)):
            raise DatasetError("amplitude_jitter must be in [0, |amplitude|]")


@dataclass
class AttributionMask:
    """Per-timestep importance in [0, 1] for one instance, as produced by CAM."""

    instance_id: str
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def validate(self):
        if self.weights.ndim != 1:
            raise ValueError(f"mask {self.instance_id!r}: weights must be 1-D")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError(f"mask {self.instance_id!r}: non-finite weights")
        if self.weights.min() < 0.0 or self.weights.max() > 1.0:
            raise ValueError(f"mask {self.instance_id!r}: weights outside [0, 1]")


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    """Write a dataset as header line + one JSON record per instance."""
    ds.validate()
    path = Path(path)
    header = {"name": ds.name, "d": ds.d, "n": ds.n, "count": len(ds.instances)}
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for ts, sp in zip(ds.instances, ds.split):
            rec = {
                "id": ts.id,
                "label": ts.label,
                "split": sp,
                "values": ts.values.tolist(),
                "truth_mask": None if ts.truth_mask is None else ts.truth_mask.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path, normalize: bool = False) -> Dataset:
    """Read a dataset file, validate invariants, optionally z-score channels.

    Normalization uses per-channel mean/std computed over the train split
    only, so the test split never influences the statistics.  It is off by
    default so that save -> load round-trips are bit-exact.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    instances: list[TimeSeries] = []
    split: list[str] = []
    with path.open() as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}:1: bad header: {e}") from e
        for key in ("name", "d", "n", "count"):
            if key not in header:
                raise DatasetError(f"{path}:1: header missing field {key!r}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: bad record: {e}") from e
            for key in ("id", "label", "split", "values"):
                if key not in rec:
                    raise DatasetError(f"{path}:{lineno}: record missing field {key!r}")
            ts = TimeSeries(
                id=rec["id"],
                values=np.asarray(rec["values"], dtype=np.float64),
                label=rec["label"],
                truth_mask=None if rec.get("truth_mask") is None else np.asarray(rec["truth_mask"], dtype=bool),
            )
            instances.append(ts)
            split.append(rec["split"])
    if len(instances) != header["count"]:
        raise DatasetError(
            f"{path}: header count {header['count']} != {len(instances)} records"
        )
    ds = Dataset(name=header["name"], instances=instances, split=split)
    ds.validate()
    if normalize:
        ds = normalize_dataset(ds)
    return ds


def train_channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over the train split (std floored at 1e-12)."""
    train = ds.subset(SPLIT_TRAIN)
    stacked = np.stack([ts.values for ts in train])  # (B, d, n)
    mean = stacked.mean(axis=(0, 2))
    std = stacked.std(axis=(0, 2))
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def normalize_dataset(ds: Dataset) -> Dataset:
    """Z-score every channel using train-split statistics."""
    mean, std = train_channel_stats(ds)
    out = ds.copy()
    for ts in out.instances:
        ts.values = (ts.values - mean[:, None]) / std[:, None]
    return out


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def _split_tags(labels: list[str], rng: np.random.Generator, train_fraction: float) -> list[str]:
    # stratified by label so both classes land in the train split
    tags = [SPLIT_TEST] * len(labels)
    for label in LABELS:
        idx = [i for i, lb in enumerate(labels) if lb == label]
        perm = rng.permutation(len(idx))
        n_train = max(1, int(round(train_fraction * len(idx))))
        for p in perm[:n_train]:
            tags[idx[p]] = SPLIT_TRAIN
    return tags


def generate_steve_like(
    n_instances: int,
    seed: int,
    anomaly_ratio: float = 0.2,
    cycle_len: int = 200,
    train_fraction: float = 0.7,
) -> Dataset:
    """Simulated 3-channel gas-scrubber data: four adsorb/desorb cycles.

    Channels are bed temperature, gas concentration, and flow rate.
    Anomalous instances carry a leak-like deviation starting at a random
    point of the third cycle and visible on all three channels; truth_mask
    marks the deviated points.
    """
    if n_instances < 10:
        raise DatasetError("n_instances must be >= 10")
    if not (0.0 < anomaly_ratio < 1.0):
        raise DatasetError("anomaly_ratio must be in (0, 1)")
    rng = np.random.default_rng(seed)
    n = 4 * cycle_len
    half = cycle_len // 2
    t_cycle = np.arange(cycle_len)
    # adsorb ramp up then desorb decay, repeated four times
    phase = np.where(t_cycle < half, t_cycle / half, 1.0 - (t_cycle - half) / (cycle_len - half))
    phase = np.tile(phase, 4)

    n_anomaly = int(round(n_instances * anomaly_ratio))
    labels = [LABEL_ANOMALY] * n_anomaly + [LABEL_NORMAL] * (n_instances - n_anomaly)
    order = rng.permutation(n_instances)

    instances = []
    for i in range(n_instances):
        label = labels[order[i]]
        level = rng.uniform(0.9, 1.1)
        temp = 20.0 + 5.0 * level * phase + rng.normal(0, 0.08, n)
        conc = 1.0 - 0.6 * level * phase + rng.normal(0, 0.02, n)
        flow = 2.0 + 0.1 * np.sin(2 * np.pi * np.arange(n) / cycle_len) + rng.normal(0, 0.03, n)
        values = np.stack([temp, conc, flow])
        truth_mask = None
        if label == LABEL_ANOMALY:
            width = int(rng.integers(30, 61))
            start = int(rng.integers(2 * cycle_len, 3 * cycle_len - width))
            sl = slice(start, start + width)
            ramp = 1.0 - np.abs(np.linspace(-1, 1, width))  # triangular leak profile
            depth = rng.uniform(0.8, 1.4)
            values[0, sl] -= 3.0 * depth * ramp
            values[1, sl] += 0.45 * depth * ramp
            values[2, sl] -= 0.35 * depth * ramp
            truth_mask = np.zeros(n, dtype=bool)
            truth_mask[sl] = True
        instances.append(TimeSeries(id=f"steve-{i:04d}", values=values, label=label, truth_mask=truth_mask))

    split = _split_tags([ts.label for ts in instances], rng, train_fraction)
    ds = Dataset(name=f"steve-like-{seed}", instances=instances, split=split)
    ds.validate()
    return ds


def generate_univariate(
    n_instances: int,
    length: int,
    seed: int,
    anomaly_ratio: float = 0.4,
    train_fraction: float = 0.7,
    pulse_window: Optional[tuple[int, int]] = None,
    pulse_prob: float = 0.0,
    pulse_amplitude: tuple[float, float] = (0.7, 1.3),
    anomaly_scale: float = 1.0,
    anomaly_kinds: tuple[str, ...] = ("level", "shape", "spikes"),
    texture_noise: tuple[float, float] = (0.05, 0.05),
) -> Dataset:
    """Single-channel sequences with seeded point/level/shape anomalies.

    Normal instances share a smooth two-tone oscillation (random phases and
    mild amplitude jitter).  Anomalies add one of three deviation kinds in
    the later three quarters of the sequence, with truth_mask marking the
    actually deviated points.

    When pulse_window is given, each instance independently (prob
    pulse_prob, both labels, both splits) carries a benign calibration
    burst there: a recurring maintenance pattern that is part of normal
    behavior and never enters truth_mask.
    """
    if n_instances < 10:
        raise DatasetError("n_instances must be >= 10")
    if length < 100:
        raise DatasetError("length must be >= 100")
    if not (0.0 < anomaly_ratio < 1.0):
        raise DatasetError("anomaly_ratio must be in (0, 1)")
    if anomaly_scale <= 0:
        raise DatasetError("anomaly_scale must be > 0")
    bad = set(anomaly_kinds) - {"level", "shape", "spikes"}
    if bad or not anomaly_kinds:
        raise DatasetError(f"anomaly_kinds must be a nonempty subset of level/shape/spikes, got {anomaly_kinds}")
    if not (0.0 < texture_noise[0] <= texture_noise[1]):
        raise DatasetError("texture_noise must satisfy 0 < lo <= hi")
    if pulse_window is not None:
        ps, pe = pulse_window
        if not (0 <= ps < pe <= length):
            raise DatasetError(f"pulse_window {pulse_window} out of bounds for n={length}")
    rng = np.random.default_rng(seed)
    n = length
    tau = np.arange(n) / n

    n_anomaly = int(round(n_instances * anomaly_ratio))
    labels = [LABEL_ANOMALY] * n_anomaly + [LABEL_NORMAL] * (n_instances - n_anomaly)
    order = rng.permutation(n_instances)

    instances = []
    for i in range(n_instances):
        label = labels[order[i]]
        a1 = rng.uniform(0.9, 1.1)
        a2 = rng.uniform(0.25, 0.35)
        p1, p2 = rng.uniform(0, 2 * np.pi, 2)
        base = a1 * np.sin(2 * np.pi * 3 * tau + p1) + a2 * np.sin(2 * np.pi * 7 * tau + p2)
        # per-instance texture level; the degenerate range keeps the draw count stable
        sig = texture_noise[0] if texture_noise[0] == texture_noise[1] else rng.uniform(*texture_noise)
        base += rng.normal(0, sig, n)
        if pulse_window is not None and rng.random() < pulse_prob:
            ps, pe = pulse_window
            width = pe - ps
            amp = rng.uniform(*pulse_amplitude)
            base[ps:pe] += amp * np.sin(2 * np.pi * 3 * np.arange(width) / width)
        truth_mask = None
        if label == LABEL_ANOMALY:
            truth_mask = np.zeros(n, dtype=bool)
            kind = rng.choice(list(anomaly_kinds))
            lo, hi = int(0.25 * n), int(0.95 * n)
            if kind == "level":
                width = int(rng.integers(int(0.05 * n), int(0.10 * n)))
                start = int(rng.integers(lo, hi - width))
                shift = rng.choice([-1.0, 1.0]) * rng.uniform(0.8, 1.4) * anomaly_scale
                base[start:start + width] += shift
                truth_mask[start:start + width] = True
            elif kind == "shape":
                width = int(rng.integers(int(0.05 * n), int(0.10 * n)))
                start = int(rng.integers(lo, hi - width))
                local = np.arange(width)
                wobble = rng.uniform(0.8, 1.3) * anomaly_scale * np.sin(2 * np.pi * local / 8.0)
                base[start:start + width] += wobble
                truth_mask[start:start + width] = True
            else:  # spikes
                count = int(rng.integers(3, 8))
                width = int(0.06 * n)
                start = int(rng.integers(lo, hi - width))
                pts = start + rng.choice(width, size=count, replace=False)
                base[pts] += rng.choice([-1.0, 1.0], size=count) * rng.uniform(1.5, 2.5, size=count) * anomaly_scale
                truth_mask[pts] = True
        instances.append(
            TimeSeries(id=f"uni-{i:04d}", values=base[None, :], label=label, truth_mask=truth_mask)
        )

    split = _split_tags([ts.label for ts in instances], rng, train_fraction)
    ds = Dataset(name=f"univariate-{seed}", instances=instances, split=split)
    ds.validate()
    return ds


_DAMP_MEAN_WIDTH = 9  # moving-average span for the damp artifact


def _artifact_profile(spec: SpuriousSpec) -> np.ndarray:
    start, end = spec.artifact_window
    width = end - start
    if spec.artifact_shape == "offset":
        return np.full(width, spec.amplitude)
    if spec.artifact_shape == "spike":
        return spec.amplitude * (1.0 - np.abs(np.linspace(-1, 1, width)))
    # sine-burst: three full cycles across the window
    return spec.amplitude * np.sin(2 * np.pi * 3 * np.arange(width) / width)


def _local_mean(seg: np.ndarray, width: int) -> np.ndarray:
    pad = width // 2
    padded = np.pad(seg, ((0, 0), (pad, pad)), mode="reflect")
    kernel = np.ones(width) / width
    return np.stack([np.convolve(row, kernel, mode="valid") for row in padded])


def inject_spurious_artifact(ds: Dataset, spec: SpuriousSpec, seed: int) -> Dataset:
    """Plant the artifact into a fraction of anomalous train instances.

    The test split and every truth_mask are left untouched, so the artifact
    is a pure train-time shortcut: correlated with the anomaly label but
    carrying no ground-truth anomaly content.
    """
    ds.validate()
    spec.validate(ds.n)
    start, end = spec.artifact_window
    for ts in ds.instances:
        if ts.truth_mask is not None and ts.truth_mask[start:end].any():
            raise DatasetError(
                f"artifact_window {spec.artifact_window} overlaps truth_mask of instance {ts.id!r}"
            )
    rng = np.random.default_rng(seed)
    out = ds.copy()
    train_anoms = [
        i for i, (ts, sp) in enumerate(zip(out.instances, out.split))
        if sp == SPLIT_TRAIN and ts.label == LABEL_ANOMALY
    ]
    n_apply = int(round(spec.train_correlation * len(train_anoms)))
    chosen = rng.choice(len(train_anoms), size=n_apply, replace=False) if n_apply else []
    profile = None if spec.artifact_shape == "damp" else _artifact_profile(spec)
    for c in chosen:
        inst = out.instances[train_anoms[int(c)]]
        scale = 1.0
        if spec.amplitude_jitter > 0.0:
            scale = 1.0 + rng.uniform(-1.0, 1.0) * spec.amplitude_jitter / spec.amplitude
        if profile is None:
            # damp: flatten local texture, keeping amplitude fraction of the residual
            seg = inst.values[:, start:end]
            sm = _local_mean(seg, _DAMP_MEAN_WIDTH)
            keep = float(np.clip(spec.amplitude * scale, 0.0, 1.0))
            inst.values[:, start:end] = sm + keep * (seg - sm)
        else:
            inst.values[:, start:end] += scale * profile[None, :]
    return out
