"""Metric-learning losses built on the introspective distance / cosine.

Every loss returns a :class:`LossResult` holding the scalar loss and exact
gradients for the batch embeddings (and proxies where relevant). Mining
decisions are returned in ``result.mining``; passing them back in freezes the
pair set, which is what finite-difference checks need.

With ``cfg.metric == "euclidean"`` the same losses run on plain Euclidean
distance / cosine similarity and ignore uncertainty; that is the baseline.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .metric import MetricParams, pairwise_distance, pairwise_similarity
from .mixer import LabelSet, positive_mask
from .sampler import MiningConfig, mine_distance_weighted, mine_semi_hard

VARIANTS = (
    "margin_dw", "triplet_semihard", "contrastive", "multi_similarity",
    "proxy_nca", "proxy_anchor", "softmax_ism",
)
PROXY_VARIANTS = ("proxy_nca", "proxy_anchor", "softmax_ism")
COSINE_VARIANTS = ("multi_similarity", "proxy_anchor", "softmax_ism")


@dataclass(frozen=True)
class LossConfig:
    variant: str = "margin_dw"
    xi: float = 0.2
    omega: float = 1.2
    delta_triplet: float = 0.2
    delta_contrastive: float = 1.0
    ms_alpha: float = 2.0
    ms_beta: float = 50.0
    ms_lambda: float = 1.0
    ms_epsilon: float = 0.1
    pa_alpha: float = 32.0
    pa_delta: float = 0.1
    log_cap: float = 50.0
    fidelity_mode: bool = False
    metric: str = "ism"          # "ism" or "euclidean" (uncertainty ignored)
    cosine_form: str = "sim"     # "sim" or "dis"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if not 0 <= self.xi < self.omega:
            raise ValueError("margins need 0 <= xi < omega")
        for name in ("ms_alpha", "ms_beta", "pa_alpha", "log_cap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.metric not in ("ism", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.cosine_form not in ("sim", "dis"):
            raise ValueError(f"unknown cosine form {self.cosine_form!r}")


@dataclass
class ProxyBank:
    semantic: np.ndarray
    uncertainty: np.ndarray
    labels: np.ndarray

    @classmethod
    def init(cls, classes: Sequence[int], d_s: int, d_u: int, rng: np.random.Generator,
             per_class: int = 1) -> "ProxyBank":
        labels = np.repeat(np.asarray(sorted(classes), dtype=np.int64), per_class)
        s = rng.standard_normal((labels.size, d_s)) / np.sqrt(d_s)
        # zero uncertainty: the first evaluation matches the plain-cosine loss
        return cls(s, np.zeros((labels.size, d_u)), labels)

    def label_sets(self):
        return [LabelSet(int(c)) for c in self.labels]


@dataclass
class LossResult:
    loss: float
    grad_s: np.ndarray
    grad_u: np.ndarray
    grad_proxy_s: Optional[np.ndarray] = None
    grad_proxy_u: Optional[np.ndarray] = None
    mining: object = None
    warnings: list = field(default_factory=list)
    clamp_events: int = 0


def _params(p: MetricParams, cfg: LossConfig):
    return None if cfg.metric == "euclidean" else p


def _self_backward(res, grad, u):
    g_s1, g_u1, g_s2, g_u2 = res.backward(grad)
    g_u = np.zeros_like(u) if g_u1 is None else g_u1 + g_u2
    return g_s1 + g_s2, g_u


def _masks(labels):
    pos = positive_mask(labels, labels)
    neg = ~pos
    np.fill_diagonal(pos, False)
    return pos, neg


def _logsumexp_rows(x: np.ndarray, mask: np.ndarray, add_one: bool = False):
    """Row-wise ``log(sum_{mask} exp(x))`` (plus an extra ``exp(0)`` term if
    ``add_one``) and the matching softmax weights. Empty rows give -inf (or 0)."""
    x = np.where(mask, x, -np.inf)
    m = x.max(axis=1)
    if add_one:
        m = np.maximum(m, 0.0)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(x - m[:, None]), 0.0)
    total = e.sum(axis=1)
    if add_one:
        total = total + np.exp(-m)
    with np.errstate(divide="ignore"):
        lse = np.log(total) + m
    safe = np.where(total > 0, total, 1.0)
    return lse, e / safe[:, None]


# ---------------------------------------------------------------------------
# sample-pair losses
# ---------------------------------------------------------------------------

def margin_dw_loss(s, u, labels, p: MetricParams, cfg: LossConfig, mining_cfg: MiningConfig,
                   rng: Optional[np.random.Generator] = None, mining=None) -> LossResult:
    """Margin loss over ordered anchor-positive pairs, each paired with one
    distance-weighted negative drawn for its anchor.

    ``mining`` is a list of ``(anchor, positive, negative)``; negative ``-1``
    means the anchor had none.
    """
    res = pairwise_distance(s, u, s, u, _params(p, cfg))
    d = res.value
    pos, neg = _masks(labels)
    warnings = []
    if mining is None:
        pairs = [(int(i), int(j)) for i, j in zip(*np.nonzero(pos))]
        if rng is None:
            rng = np.random.default_rng(mining_cfg.rng_seed)
        negs = mine_distance_weighted(d, neg, [a for a, _ in pairs], mining_cfg, rng)
        mining = [(a, q, int(n)) for (a, q), n in zip(pairs, negs)]
    if not neg.any():
        warnings.append("single-class batch: no negative pairs")
    sign = -1.0 if cfg.fidelity_mode else 1.0
    trip = np.asarray(mining, dtype=np.int64).reshape(-1, 3)
    a, q, n = trip[:, 0], trip[:, 1], trip[:, 2]
    grad = np.zeros_like(d)
    h_pos = d[a, q] - cfg.xi
    act = h_pos > 0
    np.add.at(grad, (a[act], q[act]), 1.0)
    has = n >= 0
    h_neg = cfg.omega - d[a[has], n[has]]
    act_n = h_neg > 0
    np.add.at(grad, (a[has][act_n], n[has][act_n]), -sign)
    loss = h_pos[act].sum() + sign * h_neg[act_n].sum()
    g_s, g_u = _self_backward(res, grad, np.asarray(u, float))
    return LossResult(float(loss), g_s, g_u, mining=mining, warnings=warnings)


def triplet_semihard_loss(s, u, labels, p: MetricParams, cfg: LossConfig, mining=None) -> LossResult:
    """Hinge on ``D(a,p) - D(a,n) + delta`` over all ordered anchor-positive
    pairs, each with its semi-hard negative."""
    res = pairwise_distance(s, u, s, u, _params(p, cfg))
    d = res.value
    pos, neg = _masks(labels)
    if mining is None:
        pairs = [(int(i), int(j)) for i, j in zip(*np.nonzero(pos))]
        mining = mine_semi_hard(d, pos, neg, pairs)
    warnings = [] if mining else ["no valid triplets"]
    trip = np.asarray(mining, dtype=np.int64).reshape(-1, 3)
    a, q, n = trip[:, 0], trip[:, 1], trip[:, 2]
    h = d[a, q] - d[a, n] + cfg.delta_triplet
    act = h > 0
    grad = np.zeros_like(d)
    np.add.at(grad, (a[act], q[act]), 1.0)
    np.add.at(grad, (a[act], n[act]), -1.0)
    g_s, g_u = _self_backward(res, grad, np.asarray(u, float))
    return LossResult(float(h[act].sum()), g_s, g_u, mining=mining, warnings=warnings)


def contrastive_loss(s, u, labels, p: MetricParams, cfg: LossConfig, mining=None) -> LossResult:
    """Sum of positive distances plus hinged negatives over unordered pairs."""
    res = pairwise_distance(s, u, s, u, _params(p, cfg))
    d = res.value
    pos, neg = _masks(labels)
    upper = np.triu(np.ones_like(pos), 1)
    pos_u = pos & upper
    neg_act = neg & upper & (cfg.delta_contrastive - d > 0)
    loss = d[pos_u].sum() + (cfg.delta_contrastive - d[neg_act]).sum()
    grad = pos_u.astype(float) - neg_act.astype(float)
    g_s, g_u = _self_backward(res, grad, np.asarray(u, float))
    return LossResult(float(loss), g_s, g_u, mining=None)


def multi_similarity_loss(s, u, labels, p: MetricParams, cfg: LossConfig, mining=None) -> LossResult:
    """Multi-similarity loss with hard-pair filtering on introspective cosine.

    ``mining`` is the pair ``(kept_pos, kept_neg)`` of boolean matrices.
    """
    res = pairwise_similarity(s, u, s, u, _params(p, cfg), cfg.cosine_form)
    c = res.value
    pos, neg = _masks(labels)
    n = c.shape[0]
    if mining is None:
        min_pos = np.where(pos, c, np.inf).min(axis=1)
        max_neg = np.where(neg, c, -np.inf).max(axis=1)
        keep_neg = neg & (c > min_pos[:, None] - cfg.ms_epsilon)
        keep_pos = pos & (c < max_neg[:, None] + cfg.ms_epsilon)
        mining = (keep_pos, keep_neg)
    keep_pos, keep_neg = mining
    a, b, lam = cfg.ms_alpha, cfg.ms_beta, cfg.ms_lambda
    lse_p, w_p = _logsumexp_rows(-a * (c - lam), keep_pos, add_one=True)
    lse_n, w_n = _logsumexp_rows(b * (c - lam), keep_neg, add_one=True)
    loss = (lse_p / a + lse_n / b).sum() / n
    grad = (-w_p + w_n) / n
    g_s, g_u = _self_backward(res, grad, np.asarray(u, float))
    return LossResult(float(loss), g_s, g_u, mining=mining)


# ---------------------------------------------------------------------------
# proxy losses
# ---------------------------------------------------------------------------

def _proxy_masks(labels, proxies: ProxyBank):
    covered = set(int(c) for c in proxies.labels)
    missing = set().union(*labels) - covered
    if missing:
        raise ValueError(f"no proxy for classes {sorted(missing)}")
    pos = positive_mask(labels, proxies.label_sets())
    return pos, ~pos


def _proxy_result(res, grad, u, proxies, loss, **kw) -> LossResult:
    g_s, g_u, g_ps, g_pu = res.backward(grad)
    if g_u is None:
        g_u = np.zeros_like(np.asarray(u, float))
        g_pu = np.zeros_like(proxies.uncertainty)
    return LossResult(float(loss), g_s, g_u, g_ps, g_pu, **kw)


def _clamp_rows(values, grad, cap):
    hit = np.abs(values) > cap
    values = np.clip(values, -cap, cap)
    grad[hit] = 0.0
    return values, int(hit.sum())


def proxy_nca_loss(s, u, labels, proxies: ProxyBank, p: MetricParams, cfg: LossConfig,
                   mining=None) -> LossResult:
    """``-log(sum_pos exp(-D) / sum_neg exp(-D))`` summed over samples.

    Negative proxies only in the denominator; ``fidelity_mode`` flips the
    exponent to ``+D``. Each per-sample term is clipped to ``+-log_cap``.
    """
    pos, neg = _proxy_masks(labels, proxies)
    res = pairwise_distance(s, u, proxies.semantic, proxies.uncertainty, _params(p, cfg))
    e = 1.0 if cfg.fidelity_mode else -1.0
    x = e * res.value
    lse_p, w_p = _logsumexp_rows(x, pos)
    lse_n, w_n = _logsumexp_rows(x, neg)
    values = lse_n - lse_p
    grad = e * (w_n - w_p)
    # rows without negatives (single-class vocabulary) carry no signal
    empty = ~neg.any(axis=1)
    values[empty] = 0.0
    grad[empty] = 0.0
    values, clamps = _clamp_rows(values, grad, cfg.log_cap)
    return _proxy_result(res, grad, u, proxies, values.sum(), clamp_events=clamps)


def proxy_anchor_loss(s, u, labels, proxies: ProxyBank, p: MetricParams, cfg: LossConfig,
                      mining=None) -> LossResult:
    pos, neg = _proxy_masks(labels, proxies)
    res = pairwise_similarity(s, u, proxies.semantic, proxies.uncertainty, _params(p, cfg),
                              cfg.cosine_form)
    c = res.value
    a, dl = cfg.pa_alpha, cfg.pa_delta
    with_pos = pos.any(axis=0)
    n_pos = max(int(with_pos.sum()), 1)
    n_all = c.shape[1]
    # work proxy-wise: transpose so rows are proxies
    lse_p, w_p = _logsumexp_rows((-a * (c - dl)).T, pos.T, add_one=True)
    lse_n, w_n = _logsumexp_rows((a * (c + dl)).T, neg.T, add_one=True)
    loss = lse_p[with_pos].sum() / n_pos + lse_n.sum() / n_all
    grad = (-a * w_p.T / n_pos) + (a * w_n.T / n_all)
    return _proxy_result(res, grad, u, proxies, loss)


def softmax_ism_loss(s, u, labels, proxies: ProxyBank, p: MetricParams, cfg: LossConfig,
                     mining=None) -> LossResult:
    """Softmax cross-entropy with introspective-cosine logits, averaged over samples.

    All proxies sit in the denominator by default; ``fidelity_mode`` keeps
    only the negative ones.
    """
    pos, neg = _proxy_masks(labels, proxies)
    res = pairwise_similarity(s, u, proxies.semantic, proxies.uncertainty, _params(p, cfg),
                              cfg.cosine_form)
    c = res.value
    n = c.shape[0]
    denom_mask = neg if cfg.fidelity_mode else np.ones_like(pos)
    lse_p, w_p = _logsumexp_rows(c, pos)
    lse_d, w_d = _logsumexp_rows(c, denom_mask)
    values = lse_d - lse_p
    grad = w_d - w_p
    empty = ~denom_mask.any(axis=1)
    values[empty] = 0.0
    grad[empty] = 0.0
    values, clamps = _clamp_rows(values, grad, cfg.log_cap)
    return _proxy_result(res, grad / n, u, proxies, values.sum() / n, clamp_events=clamps)


def compute_loss(s, u, labels, p: MetricParams, cfg: LossConfig, proxies: Optional[ProxyBank] = None,
                 mining_cfg: Optional[MiningConfig] = None, rng=None, mining=None) -> LossResult:
    """Dispatch on ``cfg.variant``."""
    v = cfg.variant
    if v == "margin_dw":
        mining_cfg = mining_cfg or MiningConfig(n_dim=max(3, np.shape(s)[1]))
        return margin_dw_loss(s, u, labels, p, cfg, mining_cfg, rng, mining)
    if v == "triplet_semihard":
        return triplet_semihard_loss(s, u, labels, p, cfg, mining)
    if v == "contrastive":
        return contrastive_loss(s, u, labels, p, cfg, mining)
    if v == "multi_similarity":
        return multi_similarity_loss(s, u, labels, p, cfg, mining)
    if proxies is None:
        raise ValueError(f"{v} needs a ProxyBank")
    fn = {"proxy_nca": proxy_nca_loss, "proxy_anchor": proxy_anchor_loss,
          "softmax_ism": softmax_ism_loss}[v]
    return fn(s, u, labels, proxies, p, cfg)
