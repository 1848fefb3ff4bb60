"""Retrieval metrics (Recall@K, R-Precision, MAP@R, NMI) and uncertainty diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .metric import MetricParams, pairwise_distance


@dataclass
class RetrievalIndex:
    semantic: np.ndarray
    uncertainty: Optional[np.ndarray]
    labels: np.ndarray
    distances: np.ndarray
    mode: str

    @property
    def size(self) -> int:
        return self.labels.size

    def ranking(self) -> np.ndarray:
        """Gallery order per query, self excluded; ties broken by sample index."""
        n = self.size
        order = np.argsort(self.distances, axis=1, kind="stable")
        # the +inf diagonal sorts last; drop it
        return order[:, : n - 1]

    def relevance(self) -> np.ndarray:
        order = self.ranking()
        return self.labels[order] == self.labels[:, None]


def build_index(semantic, labels, mode: str = "euclidean", p: Optional[MetricParams] = None,
                uncertainty=None) -> RetrievalIndex:
    semantic = np.asarray(semantic, dtype=np.float64)
    labels = np.asarray(labels)
    if semantic.shape[0] < 2:
        raise ValueError("a retrieval index needs at least two samples")
    if labels.shape[0] != semantic.shape[0]:
        raise ValueError("labels and embeddings differ in length")
    if mode == "euclidean":
        dist = pairwise_distance(semantic, None, semantic, None, None).value
    elif mode == "ism":
        if uncertainty is None or p is None:
            raise ValueError("ism mode needs uncertainty embeddings and MetricParams")
        uncertainty = np.asarray(uncertainty, dtype=np.float64)
        dist = pairwise_distance(semantic, uncertainty, semantic, uncertainty, p).value
    else:
        raise ValueError(f"unknown index mode {mode!r}")
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, np.inf)
    return RetrievalIndex(semantic, uncertainty, labels, dist, mode)


def recall_at_k(index: RetrievalIndex, k: int) -> float:
    if not 1 <= k < index.size:
        raise ValueError(f"k must lie in [1, {index.size - 1}]")
    rel = index.relevance()[:, :k]
    return float(rel.any(axis=1).mean())


def _r_counts(index: RetrievalIndex) -> np.ndarray:
    _, inverse, counts = np.unique(index.labels, return_inverse=True, return_counts=True)
    return counts[inverse] - 1


def r_precision(index: RetrievalIndex) -> float:
    rel = index.relevance()
    r = _r_counts(index)
    scores = [rel[i, : r[i]].sum() / r[i] for i in range(index.size) if r[i]]
    # fsum makes the mean independent of accumulation order
    return math.fsum(scores) / len(scores) if scores else 0.0


def map_at_r(index: RetrievalIndex) -> float:
    rel = index.relevance()
    r = _r_counts(index)
    scores = []
    for i in range(index.size):
        if r[i] == 0:
            continue
        hits = rel[i, : r[i]]
        pos = np.flatnonzero(hits)
        precision = np.arange(1, pos.size + 1) / (pos + 1)
        scores.append(math.fsum(precision) / r[i])
    return math.fsum(scores) / len(scores) if scores else 0.0


def nmi_score(a: Sequence[int], b: Sequence[int]) -> float:
    """``2 I(A;B) / (H(A) + H(B))`` with natural-log entropies."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("labelings differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= a.size
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    nz = joint > 0
    mi = np.sum(joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz]))
    ha = -np.sum(pa * np.log(pa))
    hb = -np.sum(pb * np.log(pb))
    if ha + hb == 0:
        return 1.0
    return float(max(0.0, 2.0 * mi / (ha + hb)))


def kmeans(x, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300):
    """Lloyd's k-means with k-means++ seeding; best of ``n_init`` by inertia.

    A cluster that empties out is re-seeded with the point farthest from its
    centroid among clusters holding more than one point.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = [x[rng.integers(n)]]
        d2 = np.sum((x - centers[0]) ** 2, axis=1)
        for _ in range(1, k):
            total = d2.sum()
            idx = rng.integers(n) if total == 0 else rng.choice(n, p=d2 / total)
            centers.append(x[idx])
            d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
        centers = np.array(centers)
        assign = None
        for _ in range(max_iter):
            dist = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
            new = dist.argmin(axis=1)
            for c in range(k):
                if not np.any(new == c):
                    # take the worst-fit point from a cluster that can spare one
                    spare = np.bincount(new, minlength=k)[new] > 1
                    err = np.where(spare, dist[np.arange(n), new], -1.0)
                    new[int(err.argmax())] = c
            if assign is not None and np.array_equal(new, assign):
                break
            assign = new
            centers = np.array([x[assign == c].mean(axis=0) for c in range(k)])
        inertia = float(((x - centers[assign]) ** 2).sum())
        if best is None or inertia < best[0]:
            best = (inertia, assign.copy())
    return best[1]


def nmi(index: RetrievalIndex, n_clusters: Optional[int] = None, seed: int = 0) -> float:
    if n_clusters is None:
        n_clusters = np.unique(index.labels).size
    clusters = kmeans(index.semantic, n_clusters, seed=seed)
    return nmi_score(clusters, index.labels)


def evaluate(index: RetrievalIndex, ks=(1, 2, 4, 8), seed: int = 0) -> dict:
    out = {}
    for k in ks:
        if k < index.size:
            out[f"recall@{k}"] = recall_at_k(index, k)
    out["nmi"] = nmi(index, seed=seed)
    out["r_precision"] = r_precision(index)
    out["map_at_r"] = map_at_r(index)
    return out


HIST_EDGES = tuple(np.round(np.linspace(0.0, 10.0, 21), 10))


def uncertainty_report(uncertainty, mixed_flags=None, edges=HIST_EDGES) -> dict:
    """Per-group mean/median/histogram of ``||u||_2``.

    The last bin is open-ended so counts always sum to the group size.
    """
    u = np.atleast_2d(np.asarray(uncertainty, dtype=np.float64))
    norms = np.linalg.norm(u, axis=1)
    flags = np.zeros(norms.size, dtype=bool) if mixed_flags is None else np.asarray(mixed_flags, bool)
    edges = np.asarray(edges, dtype=np.float64)
    report = {"edges": edges.tolist()}
    for name, sel in (("original", ~flags), ("mixed", flags)):
        v = norms[sel]
        clipped = np.minimum(v, np.nextafter(edges[-1], -np.inf))
        counts = np.histogram(clipped, bins=edges)[0] if v.size else np.zeros(edges.size - 1, int)
        report[name] = {
            "count": int(v.size),
            "mean": float(v.mean()) if v.size else 0.0,
            "median": float(np.median(v)) if v.size else 0.0,
            "histogram": [int(c) for c in counts],
        }
    return report
