"""Brute-force double-loop evaluation of the device-guided contrastive loss.

Written independently of ``sgscl.objectives``: plain Python floats and
math, no masks, no log-sum-exp.
"""

import math

import numpy as np


def _unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def contrastive_oracle(anchors, targets, devices, tau, mean_of_log=False):
    anchors = [_unit(list(r)) for r in np.asarray(anchors, dtype=float)]
    targets = [_unit(list(r)) for r in np.asarray(targets, dtype=float)]
    devices = list(devices)
    n = len(anchors)
    total = 0.0
    for i in range(n):
        a_set = [a for a in range(n) if a != i]
        p_set = [p for p in a_set if devices[p] == devices[i]]
        denom = sum(math.exp(_dot(anchors[i], targets[a]) / tau) for a in a_set)
        if mean_of_log:
            total -= sum(math.log(math.exp(_dot(anchors[i], targets[p]) / tau) / denom) for p in p_set) / len(p_set)
        else:
            ratio = sum(math.exp(_dot(anchors[i], targets[p]) / tau) / denom for p in p_set) / len(p_set)
            total -= math.log(ratio)
    return total


def projector_oracle(z, w1, b1, g, beta, w2, b2, eps=1e-5):
    a = np.maximum(np.asarray(z) @ w1 + b1, 0.0)
    mu = a.mean(axis=0)
    var = ((a - mu) ** 2).mean(axis=0)
    return ((a - mu) / np.sqrt(var + eps) * g + beta) @ w2 + b2
