"""Central finite-difference checks for the metric, every loss and the encoder.

Error measure: ``max |analytic - numeric| / max(|numeric|, |analytic|)``, the
maxima taken over every gradient entry of one case (all embeddings, proxies
or parameters together). Mining is frozen across perturbations, and cases
whose hinges or ReLU pre-activations sit within reach of a kink are redrawn.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from .encoder import EncoderSpec, backward, forward, init_params
from .losses import PROXY_VARIANTS, VARIANTS, LossConfig, ProxyBank, compute_loss
from .metric import MetricParams, pairwise_distance, pairwise_similarity
from .mixer import LabelSet
from .sampler import MiningConfig

H = 1e-5
KINK_MARGIN = 1e-3
SATURATION = 1e-4


@dataclass
class CheckResult:
    name: str
    cases: int
    max_rel_error: float
    tol: float
    worst_case: int = -1

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric) -> float:
    a = np.concatenate([np.ravel(v) for v in analytic])
    n = np.concatenate([np.ravel(v) for v in numeric])
    scale = max(np.abs(n).max(), np.abs(a).max())
    if scale == 0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def random_params(rng) -> MetricParams:
    return MetricParams(gamma=float(rng.uniform(0, 3)), tau=float(rng.uniform(1, 9)))


# ---------------------------------------------------------------------------
# metric
# ---------------------------------------------------------------------------

def check_metric(n_cases: int, rng, dim: int = 16, inject_sign_bug: bool = False,
                 tol: float = 1e-6) -> List[CheckResult]:
    out = []
    for kind in ("distance", "cosine_sim", "cosine_dis"):
        worst, worst_k = 0.0, -1
        done = 0
        while done < n_cases:
            p = random_params(rng)
            s = rng.standard_normal((2, dim))
            u = rng.standard_normal((2, dim))
            if kind == "distance":
                def value():
                    return pairwise_distance(s[:1], u[:1], s[1:], u[1:], p)
                base = np.linalg.norm(s[0] - s[1])
            else:
                form = kind.split("_")[1]

                def value():
                    return pairwise_similarity(s[:1], u[:1], s[1:], u[1:], p, form)
                base = 1 - s[0] @ s[1] / np.linalg.norm(s[0]) / np.linalg.norm(s[1])
            if base < 1e-3 or np.linalg.norm(u[0] + u[1]) < 1e-3:
                continue
            # 1 - (1-C) e^{-r/tau} rounds to 1 once the decay is tiny, and central
            # differences of a value pinned at 1 cannot resolve its gradient
            r = (np.linalg.norm(u[0] + u[1]) + p.gamma) / base
            if kind == "cosine_sim" and np.exp(-r / p.tau) < SATURATION:
                continue
            res = value()
            g_s1, g_u1, g_s2, g_u2 = res.backward(np.ones((1, 1)))
            analytic_s = np.vstack([g_s1, g_s2])
            analytic_u = np.vstack([g_u1, g_u2])
            if inject_sign_bug:
                analytic_u = -analytic_u
            f = lambda: float(value().value[0, 0])
            err = rel_error([analytic_s, analytic_u], [numeric_grad(f, s), numeric_grad(f, u)])
            if err > worst:
                worst, worst_k = err, done
            done += 1
        out.append(CheckResult(f"metric/{kind}", n_cases, worst, tol, worst_k))
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def random_batch(rng, n: int = 10, d_s: int = 6, d_u: int = 5, n_classes: int = 3):
    labels = [LabelSet(int(c)) for c in rng.integers(0, n_classes, size=n - 2)]
    labels += [LabelSet(c) for c in range(n_classes)][:2]
    # one set-valued sample so the intersection rule is exercised
    labels[-1] = LabelSet((0, 1))
    s = rng.standard_normal((n, d_s))
    s /= np.linalg.norm(s, axis=1, keepdims=True)
    u = 0.5 * rng.standard_normal((n, d_u))
    return s, u, labels


def random_proxies(rng, n_classes: int, d_s: int, d_u: int) -> ProxyBank:
    bank = ProxyBank.init(range(n_classes), d_s, d_u, rng)
    bank.uncertainty = 0.5 * rng.standard_normal(bank.uncertainty.shape)
    return bank


def near_kink(variant: str, res, s, u, labels, p, cfg) -> bool:
    """True when a hinge argument lies within ``KINK_MARGIN`` of zero."""
    if variant in ("margin_dw", "triplet_semihard", "contrastive"):
        d = pairwise_distance(s, u, s, u, None if cfg.metric == "euclidean" else p).value
        if variant == "margin_dw":
            args = [d[a, q] - cfg.xi for a, q, _ in res.mining]
            args += [cfg.omega - d[a, n] for a, _, n in res.mining if n >= 0]
        elif variant == "triplet_semihard":
            args = [d[a, q] - d[a, n] + cfg.delta_triplet for a, q, n in res.mining]
        else:
            args = list((cfg.delta_contrastive - d).ravel())
        return bool(np.any(np.abs(args) < KINK_MARGIN))
    return res.clamp_events > 0


def check_losses(n_cases: int, rng, tol: float = 1e-5, variants=VARIANTS,
                 inject_sign_bug: bool = False) -> List[CheckResult]:
    out = []
    for variant in variants:
        worst, worst_k, done = 0.0, -1, 0
        while done < n_cases:
            p = random_params(rng)
            cfg = LossConfig(variant=variant)
            s, u, labels = random_batch(rng)
            proxies = random_proxies(rng, 3, s.shape[1], u.shape[1]) if variant in PROXY_VARIANTS else None
            mcfg = MiningConfig(n_dim=s.shape[1], rng_seed=int(rng.integers(1 << 31)))
            res = compute_loss(s, u, labels, p, cfg, proxies, mcfg)
            if near_kink(variant, res, s, u, labels, p, cfg):
                continue
            mining = res.mining

            def f():
                return compute_loss(s, u, labels, p, cfg, proxies, mcfg, mining=mining).loss
            analytic = [res.grad_s, res.grad_u]
            numeric = [numeric_grad(f, s), numeric_grad(f, u)]
            if proxies is not None:
                analytic += [res.grad_proxy_s, res.grad_proxy_u]
                numeric += [numeric_grad(f, proxies.semantic), numeric_grad(f, proxies.uncertainty)]
            if inject_sign_bug:
                analytic[1] = -analytic[1]
            err = rel_error(analytic, numeric)
            if err > worst:
                worst, worst_k = err, done
            done += 1
        out.append(CheckResult(f"loss/{variant}", n_cases, worst, tol, worst_k))
    return out


# ---------------------------------------------------------------------------
# encoder end to end
# ---------------------------------------------------------------------------

def check_encoder(n_cases: int, rng, tol: float = 1e-5, variants=VARIANTS) -> List[CheckResult]:
    out = []
    for variant in variants:
        worst, worst_k, done = 0.0, -1, 0
        while done < n_cases:
            p = random_params(rng)
            cfg = LossConfig(variant=variant)
            spec = EncoderSpec(input_dim=5, hidden_dims=(8,), d_s=6, d_u=5,
                               normalize_semantic=bool(rng.integers(2)),
                               init_seed=int(rng.integers(1 << 31)))
            params = init_params(spec)
            _, _, labels = random_batch(rng)
            x = rng.standard_normal((len(labels), spec.input_dim))
            s, u, trace = forward(spec, params, x)
            if np.any(np.abs(trace.pre[0]) < KINK_MARGIN):
                continue
            if np.any(np.linalg.norm(trace.raw_s, axis=1) < KINK_MARGIN):
                continue  # cosine is undefined at a zero semantic vector
            proxies = random_proxies(rng, 3, spec.d_s, spec.d_u) if variant in PROXY_VARIANTS else None
            mcfg = MiningConfig(n_dim=spec.d_s, rng_seed=int(rng.integers(1 << 31)))
            res = compute_loss(s, u, labels, p, cfg, proxies, mcfg)
            if near_kink(variant, res, s, u, labels, p, cfg):
                continue
            mining = res.mining
            grads = backward(spec, params, trace, res.grad_s, res.grad_u)

            def f():
                s2, u2, _ = forward(spec, params, x)
                return compute_loss(s2, u2, labels, p, cfg, proxies, mcfg, mining=mining).loss
            names = list(params)
            err = rel_error([grads[k] for k in names], [numeric_grad(f, params[k]) for k in names])
            if err > worst:
                worst, worst_k = err, done
            done += 1
        out.append(CheckResult(f"encoder/{variant}", n_cases, worst, tol, worst_k))
    return out


def run_suite(seed: int = 0, metric_cases: int = 400, loss_cases: int = 40,
              encoder_cases: int = 8, inject_sign_bug: bool = False, tol: float = 1e-5):
    """Full check; returns ``(results, seconds)``."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    results = check_metric(metric_cases, rng, inject_sign_bug=inject_sign_bug, tol=tol)
    results += check_losses(loss_cases, rng, tol=tol, inject_sign_bug=inject_sign_bug)
    results += check_encoder(encoder_cases, rng, tol=tol)
    return results, time.perf_counter() - t0
