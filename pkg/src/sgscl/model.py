"""Feature extractor, lung-class head, device head and contrastive projector.

Parameters live in :class:`ModelState` as plain float64 arrays. Forward
functions take a mapping of parameter Tensors so the trainer can bind
gradient-tracking leaves while inference binds constants.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .audio import N_MELS
from .tensor import Tensor

NUM_CLASSES = 4
EXTRACTORS = ("mlp", "small-cnn")
GRL_PLACEMENTS = ("projector-input", "projector-output")

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

CNN_CHANNELS = 64
CNN_KERNEL = 3
CNN_STRIDE = 2


@dataclass(frozen=True)
class ModelConfig:
    extractor: str = "mlp"
    embed_dim: int = 128
    num_classes: int = NUM_CLASSES
    num_devices: int = 4
    tau: float = 0.06
    n_mels: int = N_MELS
    # where the contrastive path is reversed: between z and the projector, or
    # between the projector and the loss
    grl_placement: str = "projector-input"
    seed: int = 0

    def __post_init__(self):
        if self.extractor not in EXTRACTORS:
            raise ValueError(f"extractor must be one of {EXTRACTORS}, got {self.extractor!r}")
        if self.embed_dim <= 0 or self.n_mels <= 0:
            raise ValueError("embed_dim and n_mels must be positive")
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes must be {NUM_CLASSES}")
        if self.num_devices < 2:
            raise ValueError("num_devices must be at least 2")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.grl_placement not in GRL_PLACEMENTS:
            raise ValueError(f"grl_placement must be one of {GRL_PLACEMENTS}")


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    step: int = 0

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.step,
        )


@dataclass(frozen=True)
class LambdaSchedule:
    start: float = 0.0096
    end: float = 1.0
    ramp_steps: int = 200
    shape: str = "linear"

    def __post_init__(self):
        if self.ramp_steps < 0:
            raise ValueError("ramp_steps must be nonnegative")
        if not 0 <= self.start <= self.end:
            raise ValueError("need 0 <= start <= end")
        if self.shape not in ("linear", "sigmoid"):
            raise ValueError(f"unknown ramp shape {self.shape!r}")


def lambda_at(schedule: LambdaSchedule, step: int) -> float:
    """Domain-adaptation weight at optimiser step ``step``.

    Ramps from ``start`` at step 0 to ``end`` at ``ramp_steps`` and stays
    there. ``shape="sigmoid"`` uses the 2/(1+exp(-10p))-1 ramp rescaled onto
    the same endpoints.
    """
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step >= schedule.ramp_steps:
        return float(schedule.end)
    if step == 0:
        return float(schedule.start)
    p = step / schedule.ramp_steps
    if schedule.shape == "sigmoid":
        p = (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0) / (2.0 / (1.0 + math.exp(-10.0)) - 1.0)
    return float(schedule.start + (schedule.end - schedule.start) * p)


# --- initialisation ---------------------------------------------------------


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.embed_dim
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.extractor == "mlp":
        shapes.update({
            "ext.w1": (cfg.n_mels, d), "ext.b1": (d,),
            "ext.w2": (d, d), "ext.b2": (d,),
        })
    else:
        c = CNN_CHANNELS
        shapes.update({
            "ext.c1": (CNN_KERNEL * cfg.n_mels, c), "ext.c1b": (c,),
            "ext.c2": (CNN_KERNEL * c, c), "ext.c2b": (c,),
            "ext.fc": (c, d), "ext.fcb": (d,),
        })
    shapes.update({
        "cls.w": (d, cfg.num_classes), "cls.b": (cfg.num_classes,),
        "dom.w": (d, cfg.num_devices), "dom.b": (cfg.num_devices,),
        "proj.w1": (d, d), "proj.b1": (d,),
        "proj.bn_g": (d,), "proj.bn_b": (d,),
        "proj.w2": (d, d), "proj.b2": (d,),
    })
    return shapes


def init_model(cfg: ModelConfig) -> ModelState:
    """Fan-in uniform weights, zero biases, unit batch-norm scale."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == "proj.bn_g":
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = _uniform(rng, shape[0], shape)
    d = cfg.embed_dim
    buffers = {"proj.bn_mean": np.zeros(d), "proj.bn_var": np.ones(d)}
    return ModelState(cfg, params, buffers, 0)


# --- forward ----------------------------------------------------------------


def _params(state: ModelState, params: Mapping[str, Tensor] | None) -> Mapping[str, Tensor]:
    return state.tensors() if params is None else params


def _conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    n, t, c = x.shape
    k = w.shape[0] // c
    t_out = (t - k) // stride + 1
    if t_out < 1:
        raise ValueError(f"conv1d: sequence of length {t} too short for kernel {k}")
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    cols = T.reshape(T.take(x, idx, axis=1), (n, t_out, k * c))
    return T.relu(cols @ w + b)


def extract(state: ModelState, features, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Embeddings ``z`` of shape (batch, embed_dim) from (batch, frames, n_mels) features.

    ``mlp``: mean over time, then linear-ReLU-linear. ``small-cnn``: two
    strided temporal convolutions with ReLU, global average pool, linear.
    """
    cfg = state.config
    p = _params(state, params)
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != cfg.n_mels:
        raise ValueError(f"extract: expected (batch, frames, {cfg.n_mels}) features, got {x.shape}")
    if cfg.extractor == "mlp":
        pooled = Tensor(x.mean(axis=1))
        return T.relu(pooled @ p["ext.w1"] + p["ext.b1"]) @ p["ext.w2"] + p["ext.b2"]
    h = _conv1d(Tensor(x), p["ext.c1"], p["ext.c1b"], CNN_STRIDE)
    h = _conv1d(h, p["ext.c2"], p["ext.c2b"], CNN_STRIDE)
    return T.mean(h, axis=1) @ p["ext.fc"] + p["ext.fcb"]


def project(state: ModelState, z, params: Mapping[str, Tensor] | None = None,
            training: bool = True, stats: dict | None = None) -> Tensor:
    """Projector h: linear, ReLU, batch-norm, linear; output width equals input width.

    In training mode batch statistics are used and, if ``stats`` is a dict,
    the batch mean and variance are written into it for the running averages.
    """
    p = _params(state, params)
    a = T.relu(T.as_tensor(z) @ p["proj.w1"] + p["proj.b1"])
    if training:
        if stats is not None:
            stats["mean"] = a.data.mean(axis=0)
            stats["var"] = a.data.var(axis=0)
        a = T.batch_norm(a, p["proj.bn_g"], p["proj.bn_b"], eps=BN_EPS)
    else:
        a = T.batch_norm(a, p["proj.bn_g"], p["proj.bn_b"], state.buffers["proj.bn_mean"],
                         state.buffers["proj.bn_var"], eps=BN_EPS)
    return a @ p["proj.w2"] + p["proj.b2"]


def update_bn_running(state: ModelState, stats: dict, batch_size: int) -> None:
    """Exponential running averages (momentum 0.1, unbiased variance)."""
    unbiased = stats["var"] * batch_size / max(batch_size - 1, 1)
    state.buffers["proj.bn_mean"] = (1 - BN_MOMENTUM) * state.buffers["proj.bn_mean"] + BN_MOMENTUM * stats["mean"]
    state.buffers["proj.bn_var"] = (1 - BN_MOMENTUM) * state.buffers["proj.bn_var"] + BN_MOMENTUM * unbiased


def classify(state: ModelState, z, params: Mapping[str, Tensor] | None = None) -> Tensor:
    p = _params(state, params)
    return T.as_tensor(z) @ p["cls.w"] + p["cls.b"]


def classify_domain(state: ModelState, z, reversal: float = 1.0,
                    params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Device logits computed on ``gradient_reversal(z, reversal)``."""
    p = _params(state, params)
    return T.gradient_reversal(T.as_tensor(z), reversal) @ p["dom.w"] + p["dom.b"]


# --- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"SGCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")


def save_checkpoint(state: ModelState, path, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header length, JSON header, then
    every tensor section as little-endian float64 in header order."""
    sections = []
    blobs = []
    offset = 0
    for kind, table in (("param", state.params), ("buffer", state.buffers)):
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype="<f8")
            sections.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = {"config": asdict(state.config), "step": state.step, "sections": sections}
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> ModelState:
    raw = Path(path).read_bytes()
    magic, version, hlen = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError(f"{path}: not a v{CKPT_VERSION} checkpoint")
    start = _CKPT_HEAD.size
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    body = start + hlen
    params, buffers = {}, {}
    for sec in header["sections"]:
        n = int(np.prod(sec["shape"])) if sec["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=body + sec["offset"])
        (params if sec["kind"] == "param" else buffers)[sec["name"]] = arr.reshape(sec["shape"]).astype(np.float64)
    return ModelState(ModelConfig(**header["config"]), params, buffers, int(header["step"]))
