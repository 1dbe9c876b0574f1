"""
Which representation should anchor the contrast?
================================================

The contrastive term can compare extractor outputs z or projector outputs
h(z), with or without stopping the gradient through the targets. This
trains all six combinations with identical seeds and prints them in one
table; the starred row is the default.
"""

from sgscl import corpus
from sgscl import objectives as O
from sgscl.cli import ablation_table
from sgscl.experiment import SYNTH_TRAIN, synthetic_features
from sgscl.trainer import TrainConfig

# a smaller corpus keeps the six runs short
features = synthetic_features(corpus.SynthSpec.biased(n_train=400, n_test=200))
cfg = TrainConfig(method="sgscl", seeds=(0, 1), **SYNTH_TRAIN)

rows = ablation_table(cfg, features.subset("train"), features.subset("test"), O.VARIANTS)

print(f"{'anchor':8s} {'target':14s} {'S_p':>13s} {'S_e':>13s} {'Score':>13s}")
for r in rows:
    target = r["target"] + ("*" if r["default"] else "")
    cells = [f"{r[k]:6.2f}±{r[k + '_std']:5.2f}" for k in ("S_p", "S_e", "Score")]
    print(f"{r['anchor']:8s} {target:14s} " + " ".join(cells))
