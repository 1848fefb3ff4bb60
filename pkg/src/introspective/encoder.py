"""Feed-forward encoder with a semantic head and an uncertainty head,
hand-written backward pass, AdamW, and a binary checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int = 32
    hidden_dims: tuple = (64,)
    d_s: int = 32
    d_u: int = 32
    activation: str = "relu"
    normalize_semantic: bool = False
    init_seed: int = 0
    uncertainty_init: str = "he"   # "he" or "zero"
    uncertainty_scale: float = 1.0  # multiplier on the He bound of the uncertainty head

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = [self.input_dim, *self.hidden_dims, self.d_s, self.d_u]
        if any(d < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {dims}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.uncertainty_init not in ("he", "zero"):
            raise ValueError(f"unknown uncertainty_init {self.uncertainty_init!r}")


def _he_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(spec: EncoderSpec) -> Dict[str, np.ndarray]:
    """Parameters in declaration order: trunk layers, semantic head, uncertainty head."""
    rng = np.random.default_rng(spec.init_seed)
    params = {}
    prev = spec.input_dim
    for k, h in enumerate(spec.hidden_dims):
        params[f"trunk{k}.W"] = _he_uniform(rng, prev, h)
        params[f"trunk{k}.b"] = np.zeros(h)
        prev = h
    params["sem.W"] = _he_uniform(rng, prev, spec.d_s)
    params["sem.b"] = np.zeros(spec.d_s)
    if spec.uncertainty_init == "zero":
        params["unc.W"] = np.zeros((prev, spec.d_u))
    else:
        params["unc.W"] = spec.uncertainty_scale * _he_uniform(rng, prev, spec.d_u)
    params["unc.b"] = np.zeros(spec.d_u)
    return params


@dataclass
class Trace:
    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    feat: np.ndarray
    raw_s: np.ndarray
    s: np.ndarray
    u: np.ndarray
    n: int


def forward(spec: EncoderSpec, params, x):
    """Return ``(s, u, trace)`` for a batch ``x`` of shape ``(n, input_dim)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"expected input_dim {spec.input_dim}, got {x.shape[1]}")
    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite values in parameter {name}")
    h = x
    inputs, pre = [], []
    for k in range(len(spec.hidden_dims)):
        inputs.append(h)
        z = h @ params[f"trunk{k}.W"] + params[f"trunk{k}.b"]
        pre.append(z)
        h = np.maximum(z, 0.0)
    raw_s = h @ params["sem.W"] + params["sem.b"]
    u = h @ params["unc.W"] + params["unc.b"]
    s = raw_s
    if spec.normalize_semantic:
        norms = np.linalg.norm(raw_s, axis=1, keepdims=True)
        s = raw_s / np.maximum(norms, 1e-12)
    return s, u, Trace(inputs, pre, h, raw_s, s, u, x.shape[0])


def backward(spec: EncoderSpec, params, trace: Trace, grad_s, grad_u) -> Dict[str, np.ndarray]:
    grad_s = np.asarray(grad_s, dtype=np.float64)
    grad_u = np.asarray(grad_u, dtype=np.float64)
    if grad_s.shape != trace.s.shape or grad_u.shape != trace.u.shape:
        raise ValueError("upstream gradients do not match the forward trace")
    if spec.normalize_semantic:
        # Jacobian of v/|v| is (I - s s^T)/|v|
        norms = np.maximum(np.linalg.norm(trace.raw_s, axis=1, keepdims=True), 1e-12)
        s = trace.s
        grad_s = (grad_s - s * np.sum(grad_s * s, axis=1, keepdims=True)) / norms
    grads = {}
    h = trace.feat
    grads["sem.W"] = h.T @ grad_s
    grads["sem.b"] = grad_s.sum(axis=0)
    grads["unc.W"] = h.T @ grad_u
    grads["unc.b"] = grad_u.sum(axis=0)
    g_h = grad_s @ params["sem.W"].T + grad_u @ params["unc.W"].T
    for k in reversed(range(len(spec.hidden_dims))):
        g_z = g_h * (trace.pre[k] > 0)
        grads[f"trunk{k}.W"] = trace.inputs[k].T @ g_z
        grads[f"trunk{k}.b"] = g_z.sum(axis=0)
        if k > 0:
            g_h = g_z @ params[f"trunk{k}.W"].T
    return {name: grads[name] for name in params if name in grads}


@dataclass
class OptimState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params, grads, state: OptimState, frozen=()):
    """One AdamW update in place; returns ``(params, state)``.

    Weight decay is decoupled: ``theta -= lr * wd * theta`` before the Adam step.
    Names in ``frozen`` are left untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, theta in params.items():
        if name in frozen or name not in grads:
            continue
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta -= state.lr * state.weight_decay * theta
        theta -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# checkpoint: 8-byte LE header length, JSON header, LE float64 blocks
# ---------------------------------------------------------------------------

MAGIC = b"ISMCKPT1"


def save_checkpoint(path, params: Dict[str, np.ndarray], meta: dict,
                    state: Optional[OptimState] = None) -> None:
    blocks = [(name, np.asarray(a, dtype="<f8")) for name, a in params.items()]
    header = dict(meta)
    if state is not None:
        header["optim"] = {"lr": state.lr, "weight_decay": state.weight_decay,
                           "beta1": state.beta1, "beta2": state.beta2,
                           "eps": state.eps, "step": state.step}
        blocks += [(f"adam.m.{k}", np.asarray(a, dtype="<f8")) for k, a in state.m.items()]
        blocks += [(f"adam.v.{k}", np.asarray(a, dtype="<f8")) for k, a in state.v.items()]
    header["blocks"] = [{"name": n, "shape": list(a.shape)} for n, a in blocks]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for _, a in blocks:
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path):
    """Return ``(params, meta, state)``; ``state`` is None if no optimizer was saved."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for block in header.pop("blocks"):
        shape = tuple(block["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[block["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter blocks")
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    state = None
    optim = header.pop("optim", None)
    if optim is not None:
        state = OptimState(**optim)
        state.m = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        state.v = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.v.")}
    return params, header, state


def spec_to_dict(spec: EncoderSpec) -> dict:
    d = asdict(spec)
    d["hidden_dims"] = list(spec.hidden_dims)
    return d
