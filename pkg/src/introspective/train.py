"""Training loop and evaluation glue shared by the CLI and the experiments."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import build_parts, encoder_spec
from .data import Dataset, generate_synthetic, load_csv, split_zero_shot
from .encoder import OptimState, adamw_step, backward, forward, init_params
from .losses import PROXY_VARIANTS, ProxyBank, compute_loss
from .mixer import mix_batch
from .retrieval import build_index, evaluate, uncertainty_report

log = logging.getLogger(__name__)

UNCERTAINTY_PARAMS = ("unc.W", "unc.b")


class Divergence(FloatingPointError):
    """Raised when the loss, parameters or embeddings stop being finite."""


@dataclass
class TrainResult:
    spec: object
    params: dict
    state: OptimState
    history: list = field(default_factory=list)
    proxy_labels: Optional[list] = None


def load_splits(cfg: dict):
    """Return ``(train, test)`` datasets for a run config."""
    parts = build_parts(cfg)
    if cfg["data"]["csv"]:
        ds = load_csv(cfg["data"]["csv"])
        return split_zero_shot(ds, cfg["data"]["train_class_fraction"])
    ds = generate_synthetic(parts["synthetic"])
    return split_zero_shot(ds, parts["synthetic"].train_class_fraction)


def _mean(values):
    return float(np.mean(values)) if len(values) else 0.0


def train(cfg: dict, train_set: Optional[Dataset] = None,
          on_epoch: Optional[Callable[[dict, "TrainResult"], None]] = None,
          on_start: Optional[Callable[["TrainResult"], None]] = None) -> TrainResult:
    """Train an encoder under ``cfg``.

    ``on_start`` sees the initialized model before the first update and
    ``on_epoch`` gets each epoch's log record.
    """
    parts = build_parts(cfg)
    if train_set is None:
        train_set, _ = load_splits(cfg)
    seed = int(cfg["seed"])
    loss_cfg = parts["loss"]
    spec = encoder_spec(cfg, train_set.features.shape[1])
    params = init_params(spec)
    proxy_labels = None
    if loss_cfg.variant in PROXY_VARIANTS:
        bank = ProxyBank.init(train_set.classes, spec.d_s, spec.d_u,
                              np.random.default_rng([seed, 4]),
                              per_class=int(cfg["train"]["proxies_per_class"]))
        params["proxy.s"] = bank.semantic
        params["proxy.u"] = bank.uncertainty
        proxy_labels = bank.labels
    o = cfg["optim"]
    state = OptimState(lr=float(o["lr"]), weight_decay=float(o["weight_decay"]),
                       beta1=float(o["beta1"]), beta2=float(o["beta2"]), eps=float(o["eps"]))
    frozen = UNCERTAINTY_PARAMS if cfg["train"]["freeze_uncertainty"] else ()
    if frozen:
        params["unc.W"][:] = 0.0
        params["unc.b"][:] = 0.0

    shuffle_rng = np.random.default_rng([seed, 1])
    mix_rng = np.random.default_rng([seed, 2])
    mining_rng = np.random.default_rng([seed, 3])
    x_all = train_set.features
    labels_all = train_set.labels
    blended_all = np.array([len(ls) == 2 for ls in labels_all])
    n = len(labels_all)
    bs = int(cfg["train"]["batch_size"])
    max_steps = cfg["train"].get("max_steps")
    result = TrainResult(spec, params, state)
    result.proxy_labels = proxy_labels
    if on_start is not None:
        on_start(result)
    steps = 0

    for epoch in range(1, int(cfg["train"]["epochs"]) + 1):
        order = shuffle_rng.permutation(n)
        losses, clamps, warnings = [], 0, 0
        u_orig, u_mixed, u_blend = [], [], []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            if idx.size < 2:
                continue
            x = x_all[idx]
            labels = [labels_all[i] for i in idx]
            mixed = np.zeros(idx.size, dtype=bool)
            if cfg["mix"]["enabled"]:
                mb = mix_batch(x, labels, parts["mix"], rng=mix_rng)
                x, labels, mixed = mb.features, mb.labels, mb.mixed
            blended = np.concatenate([blended_all[idx], np.zeros(len(labels) - idx.size, bool)])
            s, u, trace = forward(spec, params, x)
            if not (np.all(np.isfinite(s)) and np.all(np.isfinite(u))):
                raise Divergence(f"non-finite embeddings at epoch {epoch}")
            proxies = None
            if proxy_labels is not None:
                proxies = ProxyBank(params["proxy.s"], params["proxy.u"], proxy_labels)
            res = compute_loss(s, u, labels, parts["metric"], loss_cfg, proxies=proxies,
                               mining_cfg=parts["mining"], rng=mining_rng)
            if not np.isfinite(res.loss):
                raise Divergence(f"non-finite loss at epoch {epoch}")
            grads = backward(spec, params, trace, res.grad_s, res.grad_u)
            if proxies is not None:
                grads["proxy.s"] = res.grad_proxy_s
                grads["proxy.u"] = res.grad_proxy_u
            adamw_step(params, grads, state, frozen=frozen)
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise Divergence(f"non-finite parameters at epoch {epoch}")
            norms = np.linalg.norm(u, axis=1)
            if not np.all(np.isfinite(norms)):
                raise Divergence(f"uncertainty norms overflow at epoch {epoch}")
            u_orig.extend(norms[~mixed & ~blended])
            u_mixed.extend(norms[mixed])
            u_blend.extend(norms[blended])
            losses.append(res.loss)
            clamps += res.clamp_events
            warnings += len(res.warnings)
            steps += 1
            if max_steps is not None and steps >= int(max_steps):
                break
        record = {
            "epoch": epoch,
            "steps": steps,
            "loss": _mean(losses),
            "u_norm_original": _mean(u_orig),
            "u_norm_mixed": _mean(u_mixed),
            "u_norm_blended": _mean(u_blend),
            "clamp_events": clamps,
            "warnings": warnings,
        }
        result.history.append(record)
        log.debug("epoch %d loss %.6f", epoch, record["loss"])
        if on_epoch is not None:
            on_epoch(record, result)
        if max_steps is not None and steps >= int(max_steps):
            break
    return result


def embed(spec, params, features):
    s, u, _ = forward(spec, params, features)
    return s, u


def evaluate_model(cfg: dict, spec, params, test_set: Dataset, mode: Optional[str] = None):
    """Retrieval metrics on ``test_set`` plus an uncertainty report.

    The report covers the test samples and mixup blends of test pairs drawn
    with a fixed stream; only the original samples enter retrieval.
    """
    parts = build_parts(cfg)
    mode = mode or cfg["eval"]["mode"]
    s, u = embed(spec, params, test_set.features)
    index = build_index(s, test_set.primary_labels(), mode, parts["metric"], uncertainty=u)
    metrics = evaluate(index, ks=tuple(cfg["eval"]["ks"]), seed=int(cfg["seed"]))
    mb = mix_batch(test_set.features, test_set.labels, parts["mix"],
                   rng=np.random.default_rng([int(cfg["seed"]), 5]))
    _, u_mixed = embed(spec, params, mb.features[mb.mixed])
    report = uncertainty_report(np.vstack([u, u_mixed]),
                                np.r_[np.zeros(len(u), bool), np.ones(len(u_mixed), bool)])
    return metrics, report, index
