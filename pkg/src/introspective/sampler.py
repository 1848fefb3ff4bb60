"""Negative mining on introspective distances: semi-hard selection and
distance-weighted sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .metric import MetricParams, PairedEmbedding, introspective_distance
from .mixer import LabelSet, label_equal

D_MIN = 0.05


@dataclass(frozen=True)
class MiningConfig:
    phi: float = 1e4
    n_dim: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError("phi must be > 0")
        if self.n_dim < 3:
            raise ValueError("n_dim must be >= 3")


def log_dw_density(d, n_dim: int, phi: float):
    """Log of the clipped inverse-density weight, evaluated in log space."""
    d = np.asarray(d, dtype=np.float64)
    if np.any((d <= 0) | (d >= 2)):
        raise ValueError("distance-weighted density needs 0 < d < 2")
    raw = (2.0 - n_dim) * np.log(d) + 0.5 * (3.0 - n_dim) * np.log1p(-0.25 * d * d)
    return np.minimum(np.log(phi), raw)


def dw_density(d: float, cfg: MiningConfig) -> float:
    """``min(phi, d^(2-n) * (1 - d^2/4)^((3-n)/2))``, evaluated directly."""
    if not 0.0 < d < 2.0:
        raise ValueError(f"distance-weighted density needs 0 < d < 2, got {d}")
    n = cfg.n_dim
    d = np.float64(d)
    with np.errstate(over="ignore"):
        raw = d ** (2.0 - n) * (1.0 - 0.25 * d * d) ** ((3.0 - n) / 2.0)
    return float(min(cfg.phi, raw))


def dw_probabilities(distances, cfg: MiningConfig, d_min: float = D_MIN) -> np.ndarray:
    """Normalized sampling probabilities over candidate negatives."""
    d = np.clip(np.asarray(distances, dtype=np.float64), d_min, 2.0 - d_min)
    logw = log_dw_density(d, cfg.n_dim, cfg.phi)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def _anchor_distances(anchor_idx, batch, p):
    return np.array([introspective_distance(batch[anchor_idx], e, p) for e in batch])


def _negatives(anchor_idx, labels):
    return [j for j, ls in enumerate(labels)
            if j != anchor_idx and not label_equal(labels[anchor_idx], ls)]


def select_semi_hard(d_ap: float, d_an: np.ndarray, candidates: Sequence[int]) -> Optional[int]:
    """Pick the closest candidate farther than ``d_ap``; fall back to the
    farthest candidate. Ties go to the lowest index."""
    if len(candidates) == 0:
        return None
    candidates = sorted(candidates)
    best = None
    for j in candidates:
        if d_an[j] > d_ap and (best is None or d_an[j] < d_an[best]):
            best = j
    if best is not None:
        return best
    far = candidates[0]
    for j in candidates:
        if d_an[j] > d_an[far]:
            far = j
    return far


def semi_hard_negative(anchor_idx: int, positive_idx: int, batch: Sequence[PairedEmbedding],
                       labels: Sequence[LabelSet], p: MetricParams) -> Optional[int]:
    negs = _negatives(anchor_idx, labels)
    if not negs:
        return None
    d = _anchor_distances(anchor_idx, batch, p)
    return select_semi_hard(d[positive_idx], d, sorted(negs))


def distance_weighted_negative(anchor_idx: int, batch: Sequence[PairedEmbedding],
                               labels: Sequence[LabelSet], p: MetricParams,
                               cfg: MiningConfig, rng: Optional[np.random.Generator] = None) -> int:
    """Draw one negative for ``anchor_idx`` with probability proportional to
    the clipped inverse density of its introspective distance.

    Without ``rng`` the draw uses a stream derived from ``(cfg.rng_seed, anchor_idx)``.
    """
    negs = _negatives(anchor_idx, labels)
    if not negs:
        raise ValueError(f"anchor {anchor_idx} has no negatives in the batch")
    if rng is None:
        rng = np.random.default_rng([cfg.rng_seed, anchor_idx])
    d = _anchor_distances(anchor_idx, batch, p)
    probs = dw_probabilities(d[negs], cfg)
    return negs[int(_inverse_cdf(probs[None, :], rng.random(1))[0])]


# matrix forms used inside the losses -------------------------------------------------

def mine_semi_hard(dist: np.ndarray, pos: np.ndarray, neg: np.ndarray, pairs):
    """Semi-hard negative per ``(anchor, positive)`` pair; pairs without any
    negative are dropped. Returns a list of ``(a, p, n)``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    a, q = pairs[:, 0], pairs[:, 1]
    keep = neg[a].any(axis=1)
    a, q = a[keep], q[keep]
    rows = dist[a]
    cand = neg[a]
    harder = cand & (rows > dist[a, q][:, None])
    # argmin/argmax return the first (lowest index) extremum
    closest = np.argmin(np.where(harder, rows, np.inf), axis=1)
    farthest = np.argmax(np.where(cand, rows, -np.inf), axis=1)
    n = np.where(harder.any(axis=1), closest, farthest)
    return [(int(x), int(y), int(z)) for x, y, z in zip(a, q, n)]


def _inverse_cdf(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Row-wise categorical draw: the first column whose cumulative mass exceeds
    the uniform. Rounding at the top end falls back to the last column with mass."""
    cum = np.cumsum(probs, axis=1)
    picks = np.sum(cum <= uniforms[:, None], axis=1)
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(picks, last)


def mine_distance_weighted(dist: np.ndarray, neg: np.ndarray, anchors, cfg: MiningConfig,
                           rng: np.random.Generator) -> np.ndarray:
    """One sampled negative per entry of ``anchors`` (in order), drawn from
    the anchor's normalized distance-weighted distribution. Anchors without
    any negative get ``-1``. Uniforms are drawn in anchor order, one per entry."""
    anchors = np.asarray(anchors, dtype=np.int64)
    uniforms = rng.random(anchors.size)
    out = np.full(anchors.size, -1, dtype=np.int64)
    if anchors.size == 0:
        return out
    d = np.clip(dist, D_MIN, 2.0 - D_MIN)
    logw = np.where(neg, log_dw_density(d, cfg.n_dim, cfg.phi), -np.inf)
    has_neg = neg.any(axis=1)
    top = np.where(has_neg, logw.max(axis=1), 0.0)
    w = np.where(neg, np.exp(logw - top[:, None]), 0.0)
    probs = w / np.where(has_neg, w.sum(axis=1), 1.0)[:, None]
    ok = has_neg[anchors]
    # zero-probability columns never win: cumsum stays flat across them
    picks = _inverse_cdf(probs[anchors[ok]], uniforms[ok])
    out[ok] = picks
    return out
