"""Introspective similarity metric: distances and similarities weakened by
pairwise uncertainty, plus their closed-form gradients.

Scalar functions operate on single :class:`PairedEmbedding` objects. The
``pairwise_*`` helpers evaluate the same quantities over whole matrices and
return a cache that turns an upstream gradient matrix into gradients for
the semantic and uncertainty vectors of both sides.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

EPS_DIV = 1e-12


@dataclass(frozen=True)
class MetricParams:
    gamma: float = 0.0
    tau: float = 5.0
    eps_div: float = EPS_DIV

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 0 < self.eps_div <= 1e-6:
            raise ValueError(f"eps_div must lie in (0, 1e-6], got {self.eps_div}")


class PairedEmbedding:
    """A semantic vector together with its uncertainty vector."""

    __slots__ = ("semantic", "uncertainty")

    def __init__(self, semantic, uncertainty):
        s = np.asarray(semantic, dtype=np.float64).reshape(-1)
        u = np.asarray(uncertainty, dtype=np.float64).reshape(-1)
        if s.size < 1 or u.size < 1:
            raise ValueError("semantic and uncertainty vectors must be nonempty")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(u))):
            raise ValueError("embedding contains NaN or Inf")
        self.semantic = s
        self.uncertainty = u

    def __repr__(self):
        return f"PairedEmbedding(d_s={self.semantic.size}, d_u={self.uncertainty.size})"


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        var = np.asarray(self.var, dtype=np.float64).reshape(-1)
        if mean.shape != var.shape:
            raise ValueError("mean and var must have the same dimension")
        if np.any(~(var > 0)):
            raise ValueError("variances must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)


def _check_dims(x: np.ndarray, y: np.ndarray, what: str) -> None:
    if x.shape != y.shape:
        raise ValueError(f"{what} dimension mismatch: {x.shape} vs {y.shape}")


# ---------------------------------------------------------------------------
# the weakening kernel shared by the distance and cosine forms
# ---------------------------------------------------------------------------

def weaken(a, b, params: MetricParams):
    """``a * exp(-(b + gamma) / (tau * max(a, eps)))`` with its partials.

    ``a`` is a nonnegative discrepancy (Euclidean distance or ``1 - cos``),
    ``b`` the pairwise uncertainty. Works elementwise on arrays. Returns
    ``(value, d_value/d_a, d_value/d_b)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    floored = a <= params.eps_div
    denom = np.where(floored, params.eps_div, a)
    ratio = (b + params.gamma) / denom
    decay = np.exp(-ratio / params.tau)
    value = a * decay
    # below the floor the denominator is constant, so only the linear factor moves
    d_a = np.where(floored, decay, decay * (1.0 + ratio / params.tau))
    d_b = -(a / denom) * decay / params.tau
    return value, d_a, d_b


# ---------------------------------------------------------------------------
# scalar API
# ---------------------------------------------------------------------------

def semantic_distance(a: PairedEmbedding, b: PairedEmbedding) -> float:
    _check_dims(a.semantic, b.semantic, "semantic")
    return float(np.linalg.norm(a.semantic - b.semantic))


def similarity_uncertainty(a: PairedEmbedding, b: PairedEmbedding) -> float:
    # norm of the vector sum, so opposite uncertainties can cancel
    _check_dims(a.uncertainty, b.uncertainty, "uncertainty")
    return float(np.linalg.norm(a.uncertainty + b.uncertainty))


def relative_uncertainty(a: PairedEmbedding, b: PairedEmbedding, p: MetricParams) -> float:
    alpha = semantic_distance(a, b)
    beta = similarity_uncertainty(a, b)
    return (beta + p.gamma) / max(alpha, p.eps_div)


def introspective_distance(a: PairedEmbedding, b: PairedEmbedding, p: MetricParams) -> float:
    value, _, _ = weaken(semantic_distance(a, b), similarity_uncertainty(a, b), p)
    return float(value)


def strict_introspective_distance(a: PairedEmbedding, b: PairedEmbedding, p: MetricParams) -> float:
    """Hard-gated distance: ``alpha`` if ``alpha > beta + gamma`` else 0.

    Diagnostic only; the indicator has no useful gradient.
    """
    alpha = semantic_distance(a, b)
    beta = similarity_uncertainty(a, b)
    return alpha if alpha - beta - p.gamma > 0 else 0.0


def cosine(a: PairedEmbedding, b: PairedEmbedding) -> float:
    _check_dims(a.semantic, b.semantic, "semantic")
    na = np.linalg.norm(a.semantic)
    nb = np.linalg.norm(b.semantic)
    if na == 0 or nb == 0:
        raise ValueError("cosine undefined for a zero-norm semantic vector")
    return float(np.clip(a.semantic @ b.semantic / (na * nb), -1.0, 1.0))


def cosine_relative_uncertainty(a: PairedEmbedding, b: PairedEmbedding, p: MetricParams) -> float:
    """Relative uncertainty with ``1 - cos`` standing in for the distance."""
    c = cosine(a, b)
    return (similarity_uncertainty(a, b) + p.gamma) / max(1.0 - c, p.eps_div)


def introspective_cosine(a: PairedEmbedding, b: PairedEmbedding, p: MetricParams) -> float:
    """Cosine similarity pulled toward 1 as uncertainty grows."""
    c = cosine(a, b)
    return float(_lift(c, similarity_uncertainty(a, b), p))


def introspective_cosine_dis(a: PairedEmbedding, b: PairedEmbedding, p: MetricParams) -> float:
    """Variant that shrinks similarity toward 0 (treats uncertain pairs as dissimilar)."""
    c = cosine(a, b)
    return float(c * np.exp(-cosine_relative_uncertainty(a, b, p) / p.tau))


def _lift(c, beta, p: MetricParams):
    """``1 - (1 - c) e^{-r/tau}`` written as ``c`` plus a nonnegative term, so
    rounding never drops it below ``c``."""
    gap = 1.0 - c
    ratio = (beta + p.gamma) / np.maximum(gap, p.eps_div)
    return np.minimum(c + gap * -np.expm1(-ratio / p.tau), 1.0)


def gaussian_kl(a: DiagGaussian, b: DiagGaussian) -> float:
    """KL(a || b) for diagonal Gaussians."""
    _check_dims(a.mean, b.mean, "gaussian")
    ratio = a.var / b.var
    terms = -np.log(ratio) + ratio + (a.mean - b.mean) ** 2 / b.var - 1.0
    return float(0.5 * np.sum(terms))


def grad_decay_factor(x):
    """g(x) = exp(-x) * (1 + x), the factor scaling the semantic gradient."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("grad_decay_factor is defined for x >= 0")
    out = np.exp(-x) * (1.0 + x)
    return float(out) if out.ndim == 0 else out


def grad_introspective_distance(a: PairedEmbedding, b: PairedEmbedding, p: MetricParams):
    """Gradients of the introspective distance w.r.t. ``(s_a, s_b, u_a, u_b)``.

    Degenerate directions (semantic distance or pairwise uncertainty at or
    below ``eps_div``) get a zero subgradient.
    """
    _check_dims(a.semantic, b.semantic, "semantic")
    _check_dims(a.uncertainty, b.uncertainty, "uncertainty")
    diff = a.semantic - b.semantic
    usum = a.uncertainty + b.uncertainty
    alpha = float(np.linalg.norm(diff))
    beta = float(np.linalg.norm(usum))
    _, d_alpha, d_beta = weaken(alpha, beta, p)
    if alpha > p.eps_div:
        g_s = float(d_alpha) * diff / alpha
    else:
        g_s = np.zeros_like(diff)
    if beta > p.eps_div:
        g_u = float(d_beta) * usum / beta
    else:
        g_u = np.zeros_like(usum)
    return g_s, -g_s, g_u, g_u.copy()


# ---------------------------------------------------------------------------
# pairwise (matrix) API used by the losses and the retrieval index
# ---------------------------------------------------------------------------

def _pairwise_norm_of(x: np.ndarray, y: np.ndarray, sign: float, chunk: int = 256) -> np.ndarray:
    # exact differences rather than the Gram identity: keeps small distances accurate
    out = np.empty((x.shape[0], y.shape[0]))
    for start in range(0, x.shape[0], chunk):
        block = x[start:start + chunk, None, :] + sign * y[None, :, :]
        out[start:start + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", block, block))
    return out


def pairwise_semantic_distance(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    return _pairwise_norm_of(np.asarray(s1, float), np.asarray(s2, float), -1.0)


def pairwise_similarity_uncertainty(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    return _pairwise_norm_of(np.asarray(u1, float), np.asarray(u2, float), +1.0)


def pairwise_cosine(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    n1 = np.linalg.norm(s1, axis=1)
    n2 = np.linalg.norm(s2, axis=1)
    if np.any(n1 == 0) or np.any(n2 == 0):
        raise ValueError("cosine undefined for a zero-norm semantic vector")
    return np.clip((s1 / n1[:, None]) @ (s2 / n2[:, None]).T, -1.0, 1.0)


@dataclass
class PairwiseResult:
    """Pairwise metric values plus what is needed to backpropagate them."""

    value: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    u1: Optional[np.ndarray]
    u2: Optional[np.ndarray]
    kind: str
    d_base: np.ndarray            # d value / d (alpha or cos)
    d_beta: Optional[np.ndarray]  # d value / d beta, None when uncertainty is unused
    base: np.ndarray              # alpha or cos
    beta: Optional[np.ndarray]
    eps: float

    def backward(self, grad: np.ndarray):
        """Map d loss / d value (same shape as ``value``) to
        ``(g_s1, g_u1, g_s2, g_u2)``; uncertainty grads are None if unused."""
        grad = np.asarray(grad, dtype=np.float64)
        if self.kind == "distance":
            safe = np.where(self.base > self.eps, self.base, 1.0)
            w = np.where(self.base > self.eps, grad * self.d_base / safe, 0.0)
            g_s1 = w.sum(axis=1)[:, None] * self.s1 - w @ self.s2
            g_s2 = w.sum(axis=0)[:, None] * self.s2 - w.T @ self.s1
        else:
            w = grad * self.d_base
            n1 = np.linalg.norm(self.s1, axis=1)
            n2 = np.linalg.norm(self.s2, axis=1)
            h1 = self.s1 / n1[:, None]
            h2 = self.s2 / n2[:, None]
            g_s1 = (w @ h2 - (w * self.base).sum(axis=1)[:, None] * h1) / n1[:, None]
            g_s2 = (w.T @ h1 - (w * self.base).sum(axis=0)[:, None] * h2) / n2[:, None]
        if self.d_beta is None:
            return g_s1, None, g_s2, None
        safe = np.where(self.beta > self.eps, self.beta, 1.0)
        v = np.where(self.beta > self.eps, grad * self.d_beta / safe, 0.0)
        g_u1 = v.sum(axis=1)[:, None] * self.u1 + v @ self.u2
        g_u2 = v.sum(axis=0)[:, None] * self.u2 + v.T @ self.u1
        return g_s1, g_u1, g_s2, g_u2


def pairwise_distance(s1, u1, s2, u2, p: Optional[MetricParams]) -> PairwiseResult:
    """Introspective distance matrix; ``p=None`` gives the plain Euclidean baseline."""
    s1 = np.asarray(s1, float)
    s2 = np.asarray(s2, float)
    alpha = pairwise_semantic_distance(s1, s2)
    if p is None:
        return PairwiseResult(alpha, s1, s2, None, None, "distance",
                              np.ones_like(alpha), None, alpha, None, EPS_DIV)
    u1 = np.asarray(u1, float)
    u2 = np.asarray(u2, float)
    beta = pairwise_similarity_uncertainty(u1, u2)
    value, d_a, d_b = weaken(alpha, beta, p)
    return PairwiseResult(value, s1, s2, u1, u2, "distance", d_a, d_b, alpha, beta, p.eps_div)


def pairwise_similarity(s1, u1, s2, u2, p: Optional[MetricParams], form: str = "sim") -> PairwiseResult:
    """Introspective cosine matrix.

    ``form="sim"`` pulls uncertain pairs toward similarity 1 (default),
    ``form="dis"`` shrinks them toward 0. ``p=None`` gives plain cosine.
    """
    s1 = np.asarray(s1, float)
    s2 = np.asarray(s2, float)
    c = pairwise_cosine(s1, s2)
    if p is None:
        return PairwiseResult(c, s1, s2, None, None, "cosine",
                              np.ones_like(c), None, c, None, EPS_DIV)
    u1 = np.asarray(u1, float)
    u2 = np.asarray(u2, float)
    beta = pairwise_similarity_uncertainty(u1, u2)
    gap = 1.0 - c
    if form == "sim":
        _, d_gap, d_b = weaken(gap, beta, p)
        return PairwiseResult(_lift(c, beta, p), s1, s2, u1, u2, "cosine",
                              d_gap, -d_b, c, beta, p.eps_div)
    if form == "dis":
        floored = gap <= p.eps_div
        denom = np.where(floored, p.eps_div, gap)
        ratio = (beta + p.gamma) / denom
        decay = np.exp(-ratio / p.tau)
        # d ratio / d c = ratio / gap where the floor is inactive
        d_ratio_dc = np.where(floored, 0.0, ratio / denom)
        d_c = decay * (1.0 - c * d_ratio_dc / p.tau)
        d_b = -c * decay / (p.tau * denom)
        return PairwiseResult(c * decay, s1, s2, u1, u2, "cosine", d_c, d_b, c, beta, p.eps_div)
    raise ValueError(f"unknown cosine form {form!r}")
