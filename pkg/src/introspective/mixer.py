"""Feature-level mixup with set-valued labels."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class LabelSet(frozenset):
    """One or two class ids. Two label sets count as equal when they intersect.

    ``==`` keeps ordinary set semantics; use :func:`label_equal` for the
    intersection rule, which is reflexive and symmetric but not transitive.
    """

    def __new__(cls, ids: Iterable[int] | int):
        if isinstance(ids, (int, np.integer)):
            ids = (int(ids),)
        ids = [int(i) for i in ids]
        if not 1 <= len(ids) <= 2:
            raise ValueError(f"a LabelSet holds 1 or 2 ids, got {ids}")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate ids in LabelSet: {ids}")
        return super().__new__(cls, ids)

    def __repr__(self):
        return "{" + ",".join(str(i) for i in sorted(self)) + "}"

    def to_text(self) -> str:
        return "|".join(str(i) for i in sorted(self))

    @classmethod
    def from_text(cls, text: str) -> "LabelSet":
        return cls(int(tok) for tok in text.split("|"))


def label_equal(a: LabelSet, b: LabelSet) -> bool:
    return not a.isdisjoint(b)


def positive_mask(row_labels: Sequence[LabelSet], col_labels: Sequence[LabelSet]) -> np.ndarray:
    """Boolean matrix of :func:`label_equal` over all label pairs."""
    classes = sorted(set().union(*row_labels, *col_labels))
    col = {c: k for k, c in enumerate(classes)}

    def onehot(labels):
        m = np.zeros((len(labels), len(classes)))
        for i, ls in enumerate(labels):
            for c in ls:
                m[i, col[c]] = 1.0
        return m

    return (onehot(row_labels) @ onehot(col_labels).T) > 0


def mix_pair(x1, x2, lam: float) -> np.ndarray:
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"dimension mismatch: {x1.shape} vs {x2.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixing weight must lie in [0, 1], got {lam}")
    return lam * x1 + (1.0 - lam) * x2


@dataclass(frozen=True)
class MixConfig:
    mix_prob: float = 1.0
    beta_a: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mix_prob <= 1.0:
            raise ValueError("mix_prob must lie in [0, 1]")
        if not self.beta_a > 0:
            raise ValueError("beta_a must be > 0")


@dataclass
class MixedBatch:
    features: np.ndarray
    labels: list
    mixed: np.ndarray          # True for appended mixup samples
    parents: list              # (i, j, lam) per mixed sample
    skipped: bool = False      # mixing impossible (single-class batch)


def mix_batch(features, labels: Sequence[LabelSet], cfg: MixConfig, rng=None) -> MixedBatch:
    """Append mixed samples drawn from cross-class pairs of the batch.

    The batch is shuffled and split into ``n // 2`` candidate pairs; each pair
    whose parents share no class is mixed with probability ``mix_prob``. Pairs
    that collide on a class are re-paired greedily with the remaining samples
    before giving up. ``rng`` defaults to a generator seeded by ``cfg.rng_seed``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = [ls if isinstance(ls, LabelSet) else LabelSet(ls) for ls in labels]
    n = len(labels)
    if n < 2:
        raise ValueError("mix_batch needs at least two samples")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    out = MixedBatch(features.copy(), list(labels), np.zeros(n, dtype=bool), [])
    if len(set().union(*labels)) < 2:
        out.skipped = True
        return out
    if cfg.mix_prob == 0.0:
        return out

    order = list(rng.permutation(n))
    pairs = []
    while len(order) >= 2:
        i = order.pop(0)
        # first remaining partner in shuffled order from a disjoint class set
        k = next((k for k, j in enumerate(order) if not label_equal(labels[i], labels[j])), None)
        if k is None:
            continue
        pairs.append((i, order.pop(k)))

    new_x, new_l, parents = [], [], []
    for i, j in pairs:
        if rng.random() >= cfg.mix_prob:
            continue
        union = labels[i] | labels[j]
        if len(union) != 2:
            # parents already carry set labels; a 3- or 4-class blend has no LabelSet
            continue
        lam = float(rng.beta(cfg.beta_a, cfg.beta_a))
        new_x.append(mix_pair(features[i], features[j], lam))
        new_l.append(LabelSet(union))
        parents.append((int(i), int(j), lam))
    if not new_x:
        return out
    out.features = np.vstack([features, np.asarray(new_x)])
    out.labels = list(labels) + new_l
    out.mixed = np.concatenate([out.mixed, np.ones(len(new_x), dtype=bool)])
    out.parents = parents
    return out
