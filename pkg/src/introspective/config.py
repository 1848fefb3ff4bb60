"""Run configuration: JSON file + ``key=value`` overrides on top of defaults."""
from __future__ import annotations

import copy
import json
import os
from typing import Any, Dict, Optional

from .data import SyntheticSpec
from .encoder import EncoderSpec
from .losses import COSINE_VARIANTS, LossConfig
from .metric import MetricParams
from .mixer import MixConfig
from .sampler import MiningConfig

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "data": {
        "csv": None,
        "n_classes": 8, "samples_per_class": 250, "feature_dim": 32,
        "cluster_spread": 1.0, "center_scale": 1.0, "ambiguity_fraction": 0.2,
        "noise_sigma": 0.0, "train_class_fraction": 0.5,
    },
    "encoder": {
        "hidden_dims": [64], "d_s": 32, "d_u": 32,
        # None: on for margin_dw and the cosine losses, off otherwise
        "normalize_semantic": None,
        "uncertainty_init": "he",
        "uncertainty_scale": 1.0,
    },
    "loss": {k: v for k, v in vars(LossConfig()).items()},
    "metric": {"gamma": 0.0, "tau": 5.0, "eps_div": 1e-12},
    "mix": {"enabled": True, "mix_prob": 1.0, "beta_a": 1.0},
    "mining": {"phi": 1e4},
    "optim": {"lr": 1e-3, "weight_decay": 1e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "train": {"epochs": 100, "batch_size": 120, "freeze_uncertainty": False,
              "proxies_per_class": 1, "max_steps": None},
    "eval": {"mode": "euclidean", "ks": [1, 2, 4, 8]},
    "sweep": {"gammas": [0.0, 1.0, 2.0, 3.0, 4.0], "taus": [1.0, 3.0, 5.0, 7.0, 9.0], "workers": 1},
    "seed": 0,
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, extra: dict, path: str = "") -> dict:
    for key, value in extra.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, path + key + ".")
        else:
            base[key] = value
    return base


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_key(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def load_config(path: Optional[str] = None, overrides=(), seed: Optional[int] = None) -> dict:
    """Defaults < file < ``--seed`` < ``--set`` overrides. Validates everything."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                _merge(cfg, json.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if seed is not None:
        cfg["seed"] = int(seed)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        set_key(cfg, key.strip(), parse_value(raw))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    try:
        build_parts(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    t = cfg["train"]
    if int(t["epochs"]) < 1 or int(t["batch_size"]) < 2:
        raise ConfigError("train.epochs must be >= 1 and train.batch_size >= 2")
    if cfg["eval"]["mode"] not in ("euclidean", "ism"):
        raise ConfigError(f"unknown eval.mode {cfg['eval']['mode']!r}")
    if not float(cfg["optim"]["lr"]) > 0:
        raise ConfigError("optim.lr must be > 0")
    sw = cfg["sweep"]
    if not sw["gammas"] or not sw["taus"]:
        raise ConfigError("sweep.gammas and sweep.taus must be nonempty")
    for g in sw["gammas"]:
        for t in sw["taus"]:
            try:
                MetricParams(gamma=float(g), tau=float(t))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"sweep cell gamma={g} tau={t}: {exc}") from None
    if int(sw["workers"]) < 1:
        raise ConfigError("sweep.workers must be >= 1")
    csv = cfg["data"]["csv"]
    if csv is not None:
        if not os.path.isfile(csv):
            raise ConfigError(f"data.csv {csv!r} does not exist")


def build_parts(cfg: dict) -> dict:
    """Instantiate the typed configuration objects from a config dict."""
    seed = int(cfg["seed"])
    d = cfg["data"]
    synth = SyntheticSpec(**{k: v for k, v in d.items() if k != "csv"}, seed=seed)
    loss = LossConfig(**cfg["loss"])
    e = dict(cfg["encoder"])
    if e["normalize_semantic"] is None:
        e["normalize_semantic"] = loss.variant == "margin_dw" or loss.variant in COSINE_VARIANTS
    if cfg["train"]["freeze_uncertainty"]:
        e["uncertainty_init"] = "zero"
    metric = MetricParams(**cfg["metric"])
    mix = MixConfig(mix_prob=cfg["mix"]["mix_prob"], beta_a=cfg["mix"]["beta_a"], rng_seed=seed)
    mining = MiningConfig(phi=cfg["mining"]["phi"], n_dim=max(3, int(e["d_s"])), rng_seed=seed)
    return {"synthetic": synth, "encoder": e, "loss": loss, "metric": metric,
            "mix": mix, "mining": mining}


def encoder_spec(cfg: dict, input_dim: int) -> EncoderSpec:
    e = build_parts(cfg)["encoder"]
    return EncoderSpec(input_dim=input_dim, hidden_dims=tuple(e["hidden_dims"]), d_s=e["d_s"],
                       d_u=e["d_u"], normalize_semantic=e["normalize_semantic"],
                       init_seed=int(cfg["seed"]), uncertainty_init=e["uncertainty_init"],
                       uncertainty_scale=float(e["uncertainty_scale"]))
