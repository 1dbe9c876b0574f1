"""Finite-difference check of every training loss on random multi-view batches."""

from __future__ import annotations

import numpy as np

from . import model as M
from . import objectives as O
from . import tensor as T

GRADCHECK_TOL = 1e-5


def random_batch(rng: np.random.Generator, n_views: int = 8, dim: int = 4, num_devices: int = 2) -> dict:
    """``n_views`` rows in same-source pairs, devices drawn per source."""
    n_src = n_views // 2
    dev = rng.integers(0, num_devices, size=n_src)
    # every device that appears needs a positive, which the pair partner provides
    d = np.repeat(dev, 2)
    y = np.repeat(rng.integers(0, 4, size=n_src), 2)
    return {"z": rng.standard_normal((n_views, dim)), "y": y, "d": d}


def _head(rng, dim, k):
    return rng.standard_normal((dim, k)) / np.sqrt(dim), 0.1 * rng.standard_normal(k)


def loss_cases(rng: np.random.Generator, dim: int = 4):
    """Yield ``(name, loss_fn, inputs)`` for one random batch and every loss."""
    b = random_batch(rng, dim=dim)
    cw, cb = _head(rng, dim, 4)
    dw, db = _head(rng, dim, 2)
    weights = rng.uniform(0.5, 2.0, size=4)
    lam = float(rng.uniform(0.0, 1.0))

    def ce(z, cls_w, cls_b):
        return O.weighted_ce(z @ cls_w + cls_b, b["y"], weights, "mean")

    yield "weighted_ce", ce, {"z": b["z"], "cls_w": cw, "cls_b": cb}

    def dat(z, cls_w, cls_b, dom_w, dom_b):
        dom = T.gradient_reversal(z, 1.0) @ dom_w + dom_b
        return O.dat_loss(z @ cls_w + cls_b, dom, b["y"], b["d"], lam, weights, "mean")[0]

    yield "dat_loss", dat, {"z": b["z"], "cls_w": cw, "cls_b": cb, "dom_w": dw, "dom_b": db}

    proj = {
        "w1": rng.standard_normal((dim, dim)) / np.sqrt(dim), "b1": 0.5 + 0.1 * rng.standard_normal(dim),
        "g": rng.uniform(0.5, 1.5, dim), "beta": 0.1 * rng.standard_normal(dim),
        "w2": rng.standard_normal((dim, dim)) / np.sqrt(dim), "b2": 0.1 * rng.standard_normal(dim),
    }
    for variant in O.VARIANTS:
        cfg = O.ContrastiveConfig(variant=variant)

        def scl(z, w1, b1, g, beta, w2, b2, cfg=cfg):
            def projector(t):
                a = T.relu(t @ w1 + b1)
                return T.batch_norm(a, g, beta, eps=M.BN_EPS) @ w2 + b2
            return O.sgscl_loss(z, b["d"], projector, cfg, reversal=1.0, reduction="mean")

        yield f"sgscl[{variant}]", scl, {"z": b["z"], **proj}


def run_gradcheck(n_batches: int = 20, seed: int = 0, dim: int = 4, epsilon: float = 1e-5) -> dict[str, float]:
    """Worst relative error per loss over ``n_batches`` random 8-view batches."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(n_batches):
        for name, fn, inputs in loss_cases(rng, dim):
            err = T.grad_check(fn, inputs, epsilon)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
