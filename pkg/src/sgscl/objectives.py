"""Loss functions: weighted cross-entropy, domain-adversarial loss and the
stethoscope-guided supervised contrastive loss.

Losses are sums over the batch by default; ``reduction="mean"`` divides by
the number of rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

NUM_CLASSES = 4
REDUCTIONS = ("sum", "mean")


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights ``N_total / (4 * N_c)``."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != (NUM_CLASSES,):
        raise ValueError(f"expected {NUM_CLASSES} class counts, got shape {counts.shape}")
    if (counts <= 0).any():
        raise ValueError("every class needs a positive count")
    return counts.sum() / (NUM_CLASSES * counts)


def _reduce(total: Tensor, n: int, reduction: str) -> Tensor:
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    return total / n if reduction == "mean" else total


def weighted_ce(logits, labels, weights=None, reduction: str = "sum") -> Tensor:
    """``-sum_i w[y_i] * log_softmax(logits_i)[y_i]``; unit weights when ``weights`` is None."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"weighted_ce: {n} logit rows but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"weighted_ce: labels must lie in [0, {k})")
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,) or (w <= 0).any():
        raise ValueError(f"weighted_ce: need {k} positive weights")
    pick = np.zeros((n, k))
    pick[np.arange(n), labels] = w[labels]
    return _reduce(-T.sum(T.log_softmax(logits, axis=1) * pick), n, reduction)


def dat_loss(class_logits, domain_logits, y, d, lam: float, weights=None,
             reduction: str = "sum") -> tuple[Tensor, Tensor, Tensor]:
    """Domain-adversarial objective ``L_CE + lam * L_DA``.

    ``domain_logits`` are expected to come through a gradient-reversal edge
    (see :func:`sgscl.model.classify_domain`). The device term is unweighted
    cross-entropy. Returns ``(total, l_ce, l_da)``.
    """
    if lam < 0:
        raise ValueError(f"dat_loss: lam must be >= 0, got {lam}")
    l_ce = weighted_ce(class_logits, y, weights, reduction)
    l_da = weighted_ce(domain_logits, d, None, reduction)
    return l_ce + float(lam) * l_da, l_ce, l_da


# --- contrastive ---------------------------------------------------------------


@dataclass(frozen=True)
class Variant:
    """Anchor/target choice: ``"z"`` (extractor output) or ``"h"`` (projector output)."""

    anchor: str
    target: str
    stop_target: bool = False

    def __str__(self) -> str:
        return f"{self.anchor}:{self.target}" + (":sgd" if self.stop_target else "")

    @property
    def label(self) -> tuple[str, str]:
        a = "z_i" if self.anchor == "z" else "h(z_i)"
        t = "z_p" if self.target == "z" else "h(z_p)"
        return a, (f"sgd({t})" if self.stop_target else t)

    @property
    def uses_projector(self) -> bool:
        return "h" in (self.anchor, self.target)

    @classmethod
    def parse(cls, text: str) -> "Variant":
        parts = text.strip().split(":")
        if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] != "sgd"):
            raise ValueError(f"variant must look like <anchor>:<target>[:sgd], got {text!r}")
        v = cls(parts[0], parts[1], len(parts) == 3)
        if v not in VARIANTS:
            raise ValueError(f"unsupported variant {text!r}; choose from {[str(x) for x in VARIANTS]}")
        return v


VARIANTS = (
    Variant("z", "z"),
    Variant("z", "h"),
    Variant("h", "z"),
    Variant("h", "h"),
    Variant("h", "z", True),
    Variant("h", "h", True),
)
DEFAULT_VARIANT = Variant("h", "h", True)

LOG_OF_MEAN = "log-of-mean"
MEAN_OF_LOG = "mean-of-log"


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.06
    variant: Variant = DEFAULT_VARIANT
    # LOG_OF_MEAN averages the positive probabilities inside the log;
    # MEAN_OF_LOG averages the log-probabilities of the positives
    form: str = LOG_OF_MEAN

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unsupported variant {self.variant}")
        if self.form not in (LOG_OF_MEAN, MEAN_OF_LOG):
            raise ValueError(f"unknown form {self.form!r}")


def anchor_mask(n: int) -> np.ndarray:
    """``A(i)``: every index but ``i``."""
    return ~np.eye(n, dtype=bool)


def positive_mask(devices) -> np.ndarray:
    """``P(i)``: indices other than ``i`` recorded by the same device."""
    d = np.asarray(devices)
    return (d[:, None] == d[None, :]) & anchor_mask(len(d))


def contrastive_loss(anchors, targets, devices, tau: float = 0.06, form: str = LOG_OF_MEAN,
                     reduction: str = "sum") -> Tensor:
    """Device-guided supervised contrastive loss between anchor and target rows.

    Rows are l2-normalised, similarities divided by ``tau``. For each anchor
    ``i`` the softmax runs over ``A(i)`` and the positives are ``P(i)``.
    """
    anchors, targets = T.as_tensor(anchors), T.as_tensor(targets)
    n = anchors.shape[0]
    if anchors.shape != targets.shape or anchors.ndim != 2:
        raise ValueError(f"contrastive_loss: anchors {anchors.shape} and targets {targets.shape} differ")
    if n < 4:
        raise ValueError("contrastive_loss: need at least 4 views (2 source samples)")
    if tau <= 0:
        raise ValueError("tau must be positive")
    devices = np.asarray(devices)
    if devices.shape != (n,):
        raise ValueError(f"contrastive_loss: {n} rows but devices of shape {devices.shape}")
    allm = anchor_mask(n)
    pos = positive_mask(devices)
    n_pos = pos.sum(axis=1)
    if (n_pos == 0).any():
        raise ValueError("contrastive_loss: an anchor has no positive; views must come in same-device pairs")

    a = T.l2_normalize(anchors, axis=1)
    t = T.l2_normalize(targets, axis=1)
    sim = (a @ T.transpose(t)) / tau
    if form == LOG_OF_MEAN:
        per_anchor = T.logsumexp(sim, axis=1, mask=allm) - T.logsumexp(sim, axis=1, mask=pos)
        total = T.sum(per_anchor) + float(np.log(n_pos).sum())
    elif form == MEAN_OF_LOG:
        logp = T.log_softmax(sim, axis=1, mask=allm)
        total = -T.sum(logp * (pos / n_pos[:, None]))
    else:
        raise ValueError(f"unknown form {form!r}")
    return _reduce(total, n, reduction)


def sgscl_loss(z, devices, projector: Callable[[Tensor], Tensor] | None,
               cfg: ContrastiveConfig = ContrastiveConfig(), reversal: float = 1.0,
               placement: str = "projector-input", reduction: str = "sum") -> Tensor:
    """Contrastive loss of a multi-view batch of extractor outputs ``z``.

    ``z`` is reversed (``gradient_reversal(z, reversal)``) before anything
    else, so the extractor is pushed to *increase* the loss while the
    projector is trained to decrease it. With ``placement="projector-output"``
    the projector sees ``z`` directly and its output is reversed instead.
    Stop-gradient is applied to the targets when the variant asks for it.
    """
    variant = cfg.variant
    z = T.as_tensor(z)
    zr = T.gradient_reversal(z, reversal)
    h = None
    if variant.uses_projector:
        if projector is None:
            raise ValueError(f"variant {variant} needs a projector")
        if placement == "projector-input":
            h = projector(zr)
        elif placement == "projector-output":
            h = T.gradient_reversal(projector(z), reversal)
        else:
            raise ValueError(f"unknown placement {placement!r}")
    anchors = zr if variant.anchor == "z" else h
    targets = zr if variant.target == "z" else h
    if variant.stop_target:
        targets = T.stop_gradient(targets)
    return contrastive_loss(anchors, targets, devices, cfg.tau, cfg.form, reduction)
