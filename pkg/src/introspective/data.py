"""Synthetic ambiguous-cluster data, CSV persistence and zero-shot splits."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from .mixer import LabelSet, mix_pair


class DataFormatError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 8
    samples_per_class: int = 250
    feature_dim: int = 32
    cluster_spread: float = 1.0
    center_scale: float = 1.0
    ambiguity_fraction: float = 0.2
    noise_sigma: float = 0.0
    seed: int = 0
    train_class_fraction: float = 0.5

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if not self.cluster_spread > 0 or not self.center_scale > 0:
            raise ValueError("cluster_spread and center_scale must be > 0")
        if not 0.0 <= self.ambiguity_fraction < 1.0:
            raise ValueError("ambiguity_fraction must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Dataset:
    features: np.ndarray
    labels: List[LabelSet]
    split: List[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.labels):
            raise ValueError("features and labels disagree on the number of rows")
        if not self.split:
            self.split = ["train"] * len(self.labels)

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self):
        return sorted(set().union(*self.labels))

    def subset(self, idx, split_tag=None) -> "Dataset":
        idx = list(idx)
        tags = [split_tag or self.split[i] for i in idx]
        return Dataset(self.features[idx], [self.labels[i] for i in idx], tags, dict(self.meta))

    def primary_labels(self) -> np.ndarray:
        """Singleton labels as an int array; raises on set-valued rows."""
        if any(len(ls) != 1 for ls in self.labels):
            raise ValueError("dataset has set-valued labels")
        return np.array([next(iter(ls)) for ls in self.labels], dtype=np.int64)

    def checksum(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.features).tobytes())
        h.update("\n".join(ls.to_text() for ls in self.labels).encode())
        return h.hexdigest()


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Gaussian clusters around random centers.

    After a zero-shot split by class id, ``ambiguity_fraction`` of the
    training rows are replaced by blends of two cross-class training samples
    (weight drawn from U(0.3, 0.7)) labeled with both classes. Test rows stay
    singletons.
    """
    rng = np.random.default_rng(spec.seed)
    centers = rng.standard_normal((spec.n_classes, spec.feature_dim)) * spec.center_scale
    n = spec.n_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    noise = rng.standard_normal((n, spec.feature_dim))
    features = centers[labels] + spec.cluster_spread * noise / np.sqrt(spec.feature_dim)
    label_sets = [LabelSet(int(c)) for c in labels]
    ds = Dataset(features, label_sets, meta={"spec": asdict(spec)})

    n_train_classes = math.ceil(spec.train_class_fraction * spec.n_classes)
    train_idx = np.flatnonzero(labels < n_train_classes)
    n_blend = int(round(spec.ambiguity_fraction * train_idx.size))
    if n_blend and n_train_classes >= 2:
        originals = features.copy()
        targets = rng.choice(train_idx, size=n_blend, replace=False)
        for t in sorted(targets):
            i, j = rng.choice(train_idx, size=2, replace=False)
            while labels[i] == labels[j]:
                i, j = rng.choice(train_idx, size=2, replace=False)
            lam = rng.uniform(0.3, 0.7)
            ds.features[t] = mix_pair(originals[i], originals[j], lam)
            ds.labels[t] = LabelSet((int(labels[i]), int(labels[j])))
    if spec.noise_sigma > 0:
        ds.features += spec.noise_sigma * rng.standard_normal(ds.features.shape)
    ds.split = ["train" if c < n_train_classes else "test" for c in labels]
    ds.meta["n_train_classes"] = n_train_classes
    return ds


def split_zero_shot(dataset: Dataset, train_class_fraction: float):
    """Class-disjoint split: the lowest ``ceil(fraction * n_classes)`` class ids train.

    A set-valued row goes to train only if all its classes are train classes;
    rows straddling the boundary are dropped.
    """
    classes = dataset.classes
    if len(classes) < 2:
        raise ValueError("a zero-shot split needs at least two classes")
    n_train = math.ceil(train_class_fraction * len(classes))
    if not 0 < n_train < len(classes):
        raise ValueError(f"fraction {train_class_fraction} leaves one side empty")
    train_classes = set(classes[:n_train])
    tr, te = [], []
    for i, ls in enumerate(dataset.labels):
        if ls <= train_classes:
            tr.append(i)
        elif ls.isdisjoint(train_classes):
            te.append(i)
    return dataset.subset(tr, "train"), dataset.subset(te, "test")


def save_csv(dataset: Dataset, path) -> None:
    d = dataset.features.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label," + ",".join(f"f{k}" for k in range(d)) + "\n")
        for ls, row in zip(dataset.labels, dataset.features):
            fh.write(ls.to_text() + "," + ",".join(repr(float(v)) for v in row) + "\n")


def load_csv(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].strip():
        raise DataFormatError(path, 1, "empty file")
    header = lines[0].split(",")
    if header[0] != "label" or len(header) < 2:
        raise DataFormatError(path, 1, "header must be 'label,f0,...'")
    width = len(header)
    labels, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != width:
            raise DataFormatError(path, lineno, f"expected {width} fields, got {len(fields)}")
        try:
            labels.append(LabelSet.from_text(fields[0]))
        except ValueError as exc:
            raise DataFormatError(path, lineno, f"bad label {fields[0]!r}: {exc}") from None
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError:
            raise DataFormatError(path, lineno, "non-numeric feature value") from None
        if not all(math.isfinite(v) for v in values):
            raise DataFormatError(path, lineno, "non-finite feature value")
        rows.append(values)
    if not rows:
        raise DataFormatError(path, len(lines), "no data rows")
    return Dataset(np.array(rows), labels, meta={"source": str(path)})


def write_sidecar(dataset: Dataset, path) -> None:
    doc = {"meta": dataset.meta, "rows": len(dataset), "checksum": dataset.checksum(),
           "classes": dataset.classes}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
