"""Data model, synthetic task factories, dataset persistence, and seeding.

The toy domain is feature vectors in R^D with class-conditional Gaussian
mixture subpopulations. Tasks that share the same class modes but weight the
subpopulations differently in their evaluation splits reproduce the
phenomenon that different downstream tasks prefer different kinds of
training data, while keeping subpopulation membership exactly computable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from taskaug.errors import ConfigError, DatasetFormatError

PROVENANCES = ("real", "synthetic", "validation", "test")


def derive_seed(root_seed: int, label: str) -> int:
    """Derive a stream-specific sub-seed from the root seed and a name.

    sha256 of "<label>|<root_seed>", first 4 bytes big-endian. Deterministic
    and language-neutral, so split draws stay independent: resizing one split
    never perturbs another.
    """
    digest = hashlib.sha256(f"{label}|{root_seed}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


@dataclass(frozen=True)
class Sample:
    """One labeled feature vector."""

    features: np.ndarray
    label: int


class LabeledDataset:
    """An ordered collection of samples with shared dimensionality.

    Features are stored as one (N, D) float64 array; order is positional and
    survives serialization round-trips exactly.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, num_classes: int,
                 provenance: str = "real"):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be (N, D), got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ValueError(f"labels shape {labels.shape} does not match {features.shape[0]} samples")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite values")
        if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}; expected one of {PROVENANCES}")
        self.features = features
        self.labels = labels
        self.num_classes = int(num_classes)
        self.provenance = provenance

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return [Sample(self.features[i].copy(), int(self.labels[i])) for i in range(len(self))]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], num_classes: int,
                     provenance: str = "real") -> "LabeledDataset":
        if not samples:
            raise ValueError("cannot infer feature_dim from an empty sample list; use empty()")
        feats = np.stack([s.features for s in samples]).astype(np.float64)
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return cls(feats, labels, num_classes, provenance)

    @classmethod
    def empty(cls, num_classes: int, feature_dim: int, provenance: str = "real") -> "LabeledDataset":
        return cls(np.zeros((0, feature_dim)), np.zeros((0,), dtype=np.int64), num_classes, provenance)

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.features[i].copy(), int(self.labels[i]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.num_classes == other.num_classes
                and self.provenance == other.provenance
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[indices], self.labels[indices],
                              self.num_classes, self.provenance)

    def restrict_to_class(self, class_id: int) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.labels == class_id))

    def with_provenance(self, provenance: str) -> "LabeledDataset":
        return LabeledDataset(self.features, self.labels, self.num_classes, provenance)


def concat_datasets(parts: Sequence[LabeledDataset], provenance: str = "real") -> LabeledDataset:
    parts = [p for p in parts if p is not None]
    if not parts:
        raise ValueError("nothing to concatenate")
    k = parts[0].num_classes
    d = parts[0].feature_dim
    for p in parts:
        if p.num_classes != k or p.feature_dim != d:
            raise ValueError("datasets disagree on num_classes or feature_dim")
    feats = np.concatenate([p.features for p in parts], axis=0)
    labels = np.concatenate([p.labels for p in parts], axis=0)
    return LabeledDataset(feats, labels, k, provenance)


@dataclass(frozen=True)
class SubpopulationMode:
    """One Gaussian subpopulation of a class: isotropic, scale * I covariance."""

    mean: np.ndarray
    scale: float
    weight: float


@dataclass
class TaskSpec:
    """Generative description of one classification task.

    ``modes[k]`` lists the subpopulations of class k; their ``weight`` fields
    give the training-split mixture. ``validation_mixing[k]`` gives the
    mixture used for the evaluation splits, which is what makes two tasks
    with identical training data prefer different samples. ``label_noise``
    is the uniform flip rate applied to the training split only.
    """

    num_classes: int
    modes: list[list[SubpopulationMode]]
    validation_mixing: list[np.ndarray]
    label_noise: float = 0.0

    def __post_init__(self) -> None:
        if self.num_classes < 1 or len(self.modes) != self.num_classes:
            raise ConfigError(f"need one mode list per class, got {len(self.modes)} for K={self.num_classes}")
        if len(self.validation_mixing) != self.num_classes:
            raise ConfigError("need one validation mixing vector per class")
        if not (0.0 <= self.label_noise <= 1.0):
            raise ConfigError(f"label_noise must lie in [0, 1], got {self.label_noise}")
        d = self.modes[0][0].mean.shape[0]
        for k, class_modes in enumerate(self.modes):
            if not class_modes:
                raise ConfigError(f"class {k} has no subpopulation modes")
            w = np.array([m.weight for m in class_modes], dtype=np.float64)
            if not np.isclose(w.sum(), 1.0, atol=1e-9):
                raise ConfigError(f"class {k} training mode weights sum to {w.sum()}, expected 1")
            if any(m.scale <= 0 for m in class_modes):
                raise ConfigError(f"class {k} has a non-positive covariance scale")
            if any(m.mean.shape != (d,) for m in class_modes):
                raise ConfigError(f"class {k} mode means disagree on dimension {d}")
            v = np.asarray(self.validation_mixing[k], dtype=np.float64)
            if v.shape != (len(class_modes),) or not np.isclose(v.sum(), 1.0, atol=1e-9):
                raise ConfigError(f"class {k} validation mixing must have {len(class_modes)} weights summing to 1")

    @property
    def feature_dim(self) -> int:
        return self.modes[0][0].mean.shape[0]


@dataclass
class SplitBundle:
    """Train/validation/test partitions of one task, plus optional synthetic data.

    ``train_flipped`` records which training indices had their label corrupted,
    so tests can partition noisy vs clean samples exactly.
    """

    real_train: LabeledDataset
    validation: LabeledDataset
    test: LabeledDataset
    synthetic: Optional[LabeledDataset] = None
    train_flipped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        k = self.real_train.num_classes
        d = self.real_train.feature_dim
        for name, split in (("validation", self.validation), ("test", self.test)):
            if split.num_classes != k or split.feature_dim != d:
                raise ValueError(f"{name} split disagrees with real_train on K or D")


def _draw_split(spec: TaskSpec, n: int, mixing: Sequence[np.ndarray],
                rng: np.random.Generator, provenance: str) -> LabeledDataset:
    """Draw n samples: class uniform, then a subpopulation per mixing weights."""
    d = spec.feature_dim
    labels = rng.integers(0, spec.num_classes, size=n)
    feats = np.empty((n, d), dtype=np.float64)
    for i, k in enumerate(labels):
        class_modes = spec.modes[k]
        j = rng.choice(len(class_modes), p=np.asarray(mixing[k], dtype=np.float64))
        m = class_modes[j]
        feats[i] = m.mean + m.scale * rng.standard_normal(d)
    return LabeledDataset(feats, labels.astype(np.int64), spec.num_classes, provenance)


def make_synthetic_task(spec: TaskSpec, sizes: tuple[int, int, int], seed: int) -> SplitBundle:
    """Materialize a task as concrete splits, deterministically from the seed.

    ``sizes`` is (train, validation, test). The training split mixes each
    class's subpopulations by their training weights; validation and test
    both draw from the task's validation composition, i.e. the distribution
    the task is actually evaluated on. Training labels are then flipped
    uniformly at the spec's noise rate, with the flipped indices recorded.
    Each split and the noise process consume independent sub-seeded streams.
    """
    if any(s <= 0 for s in sizes):
        raise ConfigError(f"split sizes must be positive, got {sizes}")
    train_mix = [np.array([m.weight for m in class_modes]) for class_modes in spec.modes]

    train = _draw_split(spec, sizes[0], train_mix,
                        np.random.default_rng(derive_seed(seed, "train")), "real")
    val = _draw_split(spec, sizes[1], spec.validation_mixing,
                      np.random.default_rng(derive_seed(seed, "validation")), "validation")
    test = _draw_split(spec, sizes[2], spec.validation_mixing,
                       np.random.default_rng(derive_seed(seed, "test")), "test")

    flipped = np.zeros(0, dtype=np.int64)
    if spec.label_noise > 0:
        noise_rng = np.random.default_rng(derive_seed(seed, "train-noise"))
        mask = noise_rng.random(sizes[0]) < spec.label_noise
        flipped = np.flatnonzero(mask).astype(np.int64)
        labels = train.labels.copy()
        for i in flipped:
            # uniform over the other K-1 classes
            shift = noise_rng.integers(1, spec.num_classes)
            labels[i] = (labels[i] + shift) % spec.num_classes
        train = LabeledDataset(train.features, labels, spec.num_classes, "real")

    return SplitBundle(real_train=train, validation=val, test=test, train_flipped=flipped)


def mode_membership_fractions(data: LabeledDataset, spec: TaskSpec) -> np.ndarray:
    """Per-class fractions of samples nearest to each subpopulation mode.

    Returns an array of shape (K, max_modes); classes with fewer modes are
    zero-padded. Membership is nearest-mean assignment within the sample's
    own class, which is exact up to Gaussian overlap.
    """
    max_modes = max(len(ms) for ms in spec.modes)
    out = np.zeros((spec.num_classes, max_modes), dtype=np.float64)
    for k in range(spec.num_classes):
        feats = data.features[data.labels == k]
        if len(feats) == 0:
            continue
        means = np.stack([m.mean for m in spec.modes[k]])
        dists = np.linalg.norm(feats[:, None, :] - means[None, :, :], axis=2)
        nearest = np.argmin(dists, axis=1)
        for j in range(len(spec.modes[k])):
            out[k, j] = np.mean(nearest == j)
    return out


def save_dataset(data: LabeledDataset, path: str | Path) -> None:
    """Write a dataset as delimited text.

    Line 1 is the header ``num_classes,feature_dim,provenance``; each further
    line is ``label,f_0,...,f_{D-1}``. Floats are written with shortest
    round-trip repr, so load(save(d)) == d exactly and re-serialization is
    byte-identical.
    """
    path = Path(path)
    lines = [f"{data.num_classes},{data.feature_dim},{data.provenance}"]
    for i in range(len(data)):
        vals = ",".join(repr(float(v)) for v in data.features[i])
        lines.append(f"{int(data.labels[i])},{vals}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> LabeledDataset:
    """Inverse of save_dataset. Raises DatasetFormatError naming the bad record."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file, missing header")
    header = lines[0].split(",")
    if len(header) != 3:
        raise DatasetFormatError(f"{path}:1: header must be 'num_classes,feature_dim,provenance', got {lines[0]!r}")
    try:
        num_classes, feature_dim = int(header[0]), int(header[1])
    except ValueError as e:
        raise DatasetFormatError(f"{path}:1: non-integer header fields in {lines[0]!r}") from e
    provenance = header[2]
    feats = np.zeros((len(lines) - 1, feature_dim), dtype=np.float64)
    labels = np.zeros(len(lines) - 1, dtype=np.int64)
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != feature_dim + 1:
            raise DatasetFormatError(
                f"{path}:{n}: expected {feature_dim + 1} fields, got {len(parts)} in record {line!r}")
        try:
            labels[n - 2] = int(parts[0])
            feats[n - 2] = [float(v) for v in parts[1:]]
        except ValueError as e:
            raise DatasetFormatError(f"{path}:{n}: unparsable value in record {line!r}") from e
    try:
        return LabeledDataset(feats, labels, num_classes, provenance)
    except ValueError as e:
        raise DatasetFormatError(f"{path}: {e}") from e


def default_task_spec(num_classes: int = 4, feature_dim: int = 2,
                      center_radius: float = 3.0, core_scale: float = 0.5,
                      halo_scale: float = 0.8,
                      train_mix: tuple[float, float] = (0.5, 0.5),
                      val_mix: tuple[float, float] = (0.5, 0.5),
                      label_noise: float = 0.0) -> TaskSpec:
    """Standard two-subpopulation geometry: a label tug-of-war.

    Class centers sit on a circle (embedded in the first two coordinates for
    D > 2). Each class has a tight "core" subpopulation at its own center and
    a broader "halo" subpopulation co-located at the NEXT class's center, so
    every center hosts two subpopulations with contradictory labels. The
    achievable posterior at a center is set by how training weights the two
    sides, which gives the two mode types persistently different, genuinely
    reducible loss levels: a task whose evaluation split emphasizes cores
    wants each center labeled by its own class, while a halo-heavy task wants
    the rotated labeling. Subpopulation membership within a class stays
    unambiguous because a class's own core and halo live at different
    centers.
    """
    modes: list[list[SubpopulationMode]] = []
    val: list[np.ndarray] = []
    centers = []
    for k in range(num_classes):
        angle = 2.0 * np.pi * k / num_classes
        center = np.zeros(feature_dim)
        center[0] = center_radius * np.cos(angle)
        center[1 % feature_dim] = center_radius * np.sin(angle)
        centers.append(center)
    for k in range(num_classes):
        core = centers[k]
        halo = centers[(k + 1) % num_classes]
        modes.append([
            SubpopulationMode(mean=core, scale=core_scale, weight=float(train_mix[0])),
            SubpopulationMode(mean=halo, scale=halo_scale, weight=float(train_mix[1])),
        ])
        val.append(np.array(val_mix, dtype=np.float64))
    return TaskSpec(num_classes=num_classes, modes=modes, validation_mixing=val,
                    label_noise=label_noise)
