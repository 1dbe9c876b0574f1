"""The synthetic domain-adaptation experiment: CE versus SG-SCL on a biased corpus."""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import evaluation as E
from . import trainer as TR
from .corpus import SynthSpec, synthesize_corpus

# short, fast schedule used for the synthetic comparison
SYNTH_TRAIN = dict(epochs=10, lr=1e-3, num_devices=2)


def synthetic_features(spec: SynthSpec | None = None) -> TR.FeatureSet:
    """Synthesize ``spec`` (default: 2 devices, correlation 0.8, 800/400) and featurize it."""
    spec = SynthSpec.biased() if spec is None else spec
    with tempfile.TemporaryDirectory() as tmp:
        return TR.featurize_records(synthesize_corpus(spec, tmp))


@dataclass
class MethodResult:
    method: str
    scores: list[float] = field(default_factory=list)
    probes: list[float] = field(default_factory=list)

    @property
    def median_score(self) -> float:
        return float(np.median(self.scores))

    @property
    def median_probe(self) -> float:
        return float(np.median(self.probes))


def compare_methods(features: TR.FeatureSet, methods=("ce", "sgscl"), seeds=TR.DEFAULT_SEEDS,
                    **overrides) -> dict[str, MethodResult]:
    """4-class Score and device-probe accuracy per seed for each method."""
    train, test = features.subset("train"), features.subset("test")
    out = {}
    for method in methods:
        cfg = TR.TrainConfig(method=method, seeds=tuple(seeds), **{**SYNTH_TRAIN, **overrides})
        res = MethodResult(method)
        for seed in cfg.seeds:
            state, _ = TR.train_one(cfg, train, seed)
            res.scores.append(E.evaluate(state, test.x, test.y)["4-class"].score)
            res.probes.append(E.domain_probe(E.embed(state, train.x), train.d, E.embed(state, test.x), test.d))
        out[method] = res
    return out
