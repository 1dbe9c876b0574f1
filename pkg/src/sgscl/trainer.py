"""Deterministic training for the ce, dat and sgscl methods.

All randomness for a run (initialisation, data order, SpecAugment) comes
from that run's seed, so ``(seed, config, data)`` fully determines the
parameters and the run log.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import audio
from . import evaluation as E
from . import model as M
from . import objectives as O
from . import tensor as T
from .corpus import CorpusRecord, load_record_audio

log = logging.getLogger(__name__)

METHODS = ("ce", "dat", "sgscl")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


class NonFiniteLossError(FloatingPointError):
    pass


# --- data ---------------------------------------------------------------------


@dataclass
class FeatureSet:
    """Normalised features (N, frames, n_mels) with labels; float32 storage."""

    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    ids: list[str]
    split: list[str]

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.intp)
        self.d = np.asarray(self.d, dtype=np.intp)
        if not (len(self.x) == len(self.y) == len(self.d) == len(self.ids) == len(self.split)):
            raise ValueError("FeatureSet fields differ in length")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, split: str) -> "FeatureSet":
        idx = [i for i, s in enumerate(self.split) if s == split]
        return FeatureSet(self.x[idx], self.y[idx], self.d[idx],
                          [self.ids[i] for i in idx], [self.split[i] for i in idx])


def featurize_records(records: Sequence[CorpusRecord]) -> FeatureSet:
    feats = [audio.featurize(load_record_audio(r)).astype(np.float32) for r in records]
    return FeatureSet(
        np.stack(feats) if feats else np.zeros((0, 0, audio.N_MELS), np.float32),
        [int(r.lung) for r in records], [r.device for r in records],
        [r.record_id for r in records], [r.split for r in records],
    )


def feature_path(feature_dir, rec: CorpusRecord) -> Path:
    stem = Path(rec.path).stem
    if rec.end is not None:
        stem = f"{stem}_{rec.start:.3f}_{rec.end:.3f}"
    return Path(feature_dir) / f"{stem}.fbnk"


def load_feature_dir(records: Sequence[CorpusRecord], feature_dir) -> FeatureSet:
    paths = [feature_path(feature_dir, r) for r in records]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError("missing feature files:\n  " + "\n  ".join(missing))
    feats = [audio.read_fbank(p) for p in paths]
    return FeatureSet(np.stack(feats), [int(r.lung) for r in records], [r.device for r in records],
                      [r.record_id for r in records], [r.split for r in records])


# --- config -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    method: str = "ce"
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_start: float = 0.0096
    lambda_end: float = 1.0
    lambda_steps: int = 200
    lambda_shape: str = "linear"
    tau: float = 0.06
    variant: str = str(O.DEFAULT_VARIANT)
    contrastive_form: str = O.LOG_OF_MEAN
    # None: weighted lung CE for method=ce, unweighted for dat and sgscl
    weighted_ce: bool | None = None
    reduction: str = "mean"
    extractor: str = "mlp"
    embed_dim: int = 128
    num_devices: int = 4
    grl_placement: str = "projector-input"
    time_masks: int = 2
    max_time_mask: int = 80
    freq_masks: int = 2
    max_freq_mask: int = 20
    seeds: tuple[int, ...] = DEFAULT_SEEDS

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or (self.method == "sgscl" and self.batch_size < 2):
            raise ValueError("batch_size must be >= 1 (>= 2 for sgscl)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        O.Variant.parse(self.variant)
        self.schedule
        self.contrastive
        self.specaugment

    @property
    def schedule(self) -> M.LambdaSchedule:
        return M.LambdaSchedule(self.lambda_start, self.lambda_end, self.lambda_steps, self.lambda_shape)

    @property
    def contrastive(self) -> O.ContrastiveConfig:
        return O.ContrastiveConfig(self.tau, O.Variant.parse(self.variant), self.contrastive_form)

    @property
    def specaugment(self) -> audio.SpecAugmentParams:
        return audio.SpecAugmentParams(self.max_time_mask, self.max_freq_mask, self.time_masks, self.freq_masks)

    @property
    def use_class_weights(self) -> bool:
        return self.method == "ce" if self.weighted_ce is None else self.weighted_ce

    def model_config(self, seed: int) -> M.ModelConfig:
        return M.ModelConfig(extractor=self.extractor, embed_dim=self.embed_dim,
                             num_devices=self.num_devices, tau=self.tau,
                             grl_placement=self.grl_placement, seed=seed)

    def to_json(self) -> str:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --- batches --------------------------------------------------------------------


@dataclass
class MultiViewBatch:
    """``2n`` views; rows ``2k`` and ``2k+1`` are two augmentations of source ``k``."""

    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    source: np.ndarray
    batch_id: int = 0


def make_multiview_batch(features, y, d, rng: np.random.Generator,
                         params: audio.SpecAugmentParams, batch_id: int = 0) -> MultiViewBatch:
    """Two independent SpecAugment views per sample, interleaved as pairs."""
    n = len(features)
    if n == 0:
        raise ValueError("make_multiview_batch: empty input")
    views = []
    for i in range(n):
        views.append(audio.spec_augment(features[i], params, rng))
        views.append(audio.spec_augment(features[i], params, rng))
    rep = np.repeat(np.arange(n), 2)
    return MultiViewBatch(np.stack(views), np.asarray(y)[rep], np.asarray(d)[rep], rep, batch_id)


# --- optimiser ------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState) -> dict[str, np.ndarray]:
    """One Adam (bias-corrected) or plain SGD update, in place; returns ``params``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"optimizer_step: gradient shape {g.shape} != parameter shape "
                             f"{params[name].shape} for {name}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"optimizer_step: non-finite gradient for {name}")
    state.t += 1
    if state.kind == "sgd":
        for name, g in grads.items():
            params[name] = params[name] - state.lr * g
        return params
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        params[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --- steps ------------------------------------------------------------------------


def compute_losses(state: M.ModelState, batch: MultiViewBatch, cfg: TrainConfig,
                   params: dict[str, T.Tensor], weights=None, lam: float | None = None,
                   bn_stats: dict | None = None) -> dict[str, T.Tensor]:
    """Build the method's graph and return its loss Tensors (``total`` plus components)."""
    if lam is None:
        lam = M.lambda_at(cfg.schedule, state.step)
    z = M.extract(state, batch.x, params)
    logits = M.classify(state, z, params)
    w = weights if cfg.use_class_weights else None
    if cfg.method == "ce":
        l_ce = O.weighted_ce(logits, batch.y, w, cfg.reduction)
        return {"total": l_ce, "l_ce": l_ce}
    if cfg.method == "dat":
        dom = M.classify_domain(state, z, 1.0, params)
        total, l_ce, l_da = O.dat_loss(logits, dom, batch.y, batch.d, lam, w, cfg.reduction)
        return {"total": total, "l_ce": l_ce, "l_da": l_da}
    l_ce = O.weighted_ce(logits, batch.y, w, cfg.reduction)

    def projector(t):
        return M.project(state, t, params, training=True, stats=bn_stats)

    l_cl = O.sgscl_loss(z, batch.d, projector, cfg.contrastive, 1.0,
                        state.config.grl_placement, cfg.reduction)
    return {"total": l_ce + lam * l_cl, "l_ce": l_ce, "l_cl": l_cl}


def train_step(state: M.ModelState, batch: MultiViewBatch, cfg: TrainConfig,
               opt: OptimizerState, weights=None) -> tuple[M.ModelState, dict]:
    """One optimiser update. ``state`` is updated in place and returned."""
    lam = M.lambda_at(cfg.schedule, state.step)
    params = state.tensors(requires_grad=True)
    stats: dict = {}
    try:
        losses = compute_losses(state, batch, cfg, params, weights, lam, stats)
        T.backward(losses["total"])
    except FloatingPointError as exc:
        raise NonFiniteLossError(
            f"non-finite value at step {state.step}, batch {batch.batch_id} "
            f"(sources {batch.source.tolist()}, labels {batch.y.tolist()}, devices {batch.d.tolist()}): {exc}"
        ) from exc
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    optimizer_step(state.params, grads, opt)
    if stats:
        M.update_bn_running(state, stats, len(batch.y))
    record = {"step": state.step, "lambda": lam}
    record.update({k: v.item() for k, v in losses.items()})
    state.step += 1
    return state, record


# --- full runs ----------------------------------------------------------------------


@dataclass
class RunLog:
    seed: int
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "step", **s}, sort_keys=True) for s in self.steps]
        lines += [json.dumps({"type": "epoch", **e}, sort_keys=True) for e in self.epochs]
        return "".join(line + "\n" for line in lines)


def _metrics_dict(reports: dict[str, E.MetricsReport]) -> dict:
    return {p: {"S_p": r.specificity, "S_e": r.sensitivity, "Score": r.score} for p, r in reports.items()}


def train_one(cfg: TrainConfig, train_set: FeatureSet, seed: int, test_set: FeatureSet | None = None,
              eval_every: int = 0) -> tuple[M.ModelState, RunLog]:
    """Train one seed. ``eval_every > 0`` evaluates on ``test_set`` every that many epochs."""
    if len(train_set) < cfg.batch_size:
        raise ValueError(f"need at least batch_size={cfg.batch_size} training samples")
    if train_set.d.max() >= cfg.num_devices:
        raise ValueError(f"device id {train_set.d.max()} out of range for num_devices={cfg.num_devices}")
    state = M.init_model(cfg.model_config(seed))
    opt = OptimizerState(cfg.optimizer, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    counts = np.bincount(train_set.y, minlength=4)
    weights = O.class_weights(np.maximum(counts, 1)) if cfg.use_class_weights else None
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5C1]))
    aug = cfg.specaugment
    runlog = RunLog(seed)
    n_batches = len(train_set) // cfg.batch_size
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        sums: dict[str, float] = {}
        for b in range(n_batches):
            idx = np.sort(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            batch = make_multiview_batch(train_set.x[idx], train_set.y[idx], train_set.d[idx], rng, aug,
                                         batch_id=epoch * n_batches + b)
            state, rec = train_step(state, batch, cfg, opt, weights)
            runlog.steps.append(rec)
            for k, v in rec.items():
                if k not in ("step", "lambda"):
                    sums[k] = sums.get(k, 0.0) + v
        entry = {"epoch": epoch, "train": {k: v / n_batches for k, v in sums.items()}}
        if test_set is not None and eval_every and ((epoch + 1) % eval_every == 0 or epoch + 1 == cfg.epochs):
            entry["eval"] = _metrics_dict(E.evaluate(state, test_set.x, test_set.y))
        runlog.epochs.append(entry)
        log.info("seed %d epoch %d %s", seed, epoch, entry["train"])
    return state, runlog


def aggregate(per_seed: Sequence[dict[str, E.MetricsReport]]) -> dict:
    """Mean and sample standard deviation of S_p, S_e, Score across seeds."""
    out = {}
    for protocol in E.PROTOCOLS:
        rows = np.array([[r[protocol].specificity, r[protocol].sensitivity, r[protocol].score] for r in per_seed])
        std = rows.std(axis=0, ddof=1) if len(rows) > 1 else np.zeros(3)
        out[protocol] = {
            name: {"mean": float(rows[:, j].mean()), "std": float(std[j])}
            for j, name in enumerate(("S_p", "S_e", "Score"))
        }
    return out


def train(cfg: TrainConfig, train_set: FeatureSet, test_set: FeatureSet | None = None,
          out_dir=None, eval_every: int = 0) -> dict:
    """Run every seed in ``cfg.seeds``; write checkpoints, run logs and an aggregate.

    Returns ``{"runs": [(state, runlog, reports)], "aggregate": {...}}``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())
    runs = []
    for seed in cfg.seeds:
        state, runlog = train_one(cfg, train_set, seed, test_set, eval_every)
        reports = E.evaluate(state, test_set.x, test_set.y) if test_set is not None and len(test_set) else None
        if out is not None:
            sd = out / f"seed{seed}"
            sd.mkdir(exist_ok=True)
            M.save_checkpoint(state, sd / "checkpoint.sgck")
            (sd / "runlog.jsonl").write_text(runlog.to_jsonl())
            if reports is not None:
                E.write_metrics(reports, sd / "metrics.json")
        runs.append((state, runlog, reports))
    result = {"runs": runs, "aggregate": None}
    if all(r[2] is not None for r in runs):
        result["aggregate"] = aggregate([r[2] for r in runs])
        if out is not None:
            payload = {"method": cfg.method, "variant": cfg.variant if cfg.method == "sgscl" else None,
                       "seeds": list(cfg.seeds), "metrics": result["aggregate"]}
            (out / "aggregate.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return result


def with_overrides(cfg: TrainConfig, **kwargs) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
