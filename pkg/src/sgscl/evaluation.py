"""ICBHI metrics, prediction, device probing and embedding export."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M

PROTOCOLS = ("4-class", "2-class")
NORMAL = 0


def round_half_up(x: float, digits: int = 2) -> float:
    q = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def icbhi_score(specificity: float, sensitivity: float) -> float:
    """Arithmetic mean of specificity and sensitivity."""
    return (specificity + sensitivity) / 2.0


def confusion_matrix(y_true, y_pred, num_classes: int = 4) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def group_binary(cm: np.ndarray) -> np.ndarray:
    """Collapse a 4x4 matrix to normal-vs-abnormal on both axes."""
    cm = np.asarray(cm)
    groups = [[0], [1, 2, 3]]
    return np.array([[cm[np.ix_(r, c)].sum() for c in groups] for r in groups], dtype=np.int64)


@dataclass
class MetricsReport:
    protocol: str
    specificity: float
    sensitivity: float
    score: float
    per_class_accuracy: list[float] = field(default_factory=list)
    confusion: list[list[int]] = field(default_factory=list)

    def display(self) -> dict:
        return {
            "protocol": self.protocol,
            "S_p": round_half_up(self.specificity),
            "S_e": round_half_up(self.sensitivity),
            "Score": round_half_up(self.score),
        }

    def to_dict(self) -> dict:
        return asdict(self)


def icbhi_metrics(cm, protocol: str = "4-class") -> MetricsReport:
    """Specificity, sensitivity and Score (percent) from a 4x4 confusion matrix.

    Rows are true labels, columns predictions, index 0 is Normal. Under the
    4-class protocol an abnormal cycle counts as detected only if its exact
    class is predicted; under the 2-class protocol any abnormal prediction
    counts.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.shape != (4, 4):
        raise ValueError(f"expected a 4x4 confusion matrix, got {cm.shape}")
    if cm.sum() == 0:
        raise ValueError("empty confusion matrix")
    if (cm < 0).any():
        raise ValueError("confusion matrix has negative counts")
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    n_normal = cm[NORMAL].sum()
    n_abnormal = cm[1:].sum()
    if n_normal == 0 or n_abnormal == 0:
        raise ValueError("need both normal and abnormal cycles to compute S_p and S_e")
    sp = 100.0 * cm[NORMAL, NORMAL] / n_normal
    if protocol == "4-class":
        se = 100.0 * np.trace(cm[1:, 1:]) / n_abnormal
        used = cm
    else:
        used = group_binary(cm)
        se = 100.0 * used[1, 1] / n_abnormal
    rows = used.sum(axis=1)
    per_class = [float(100.0 * used[i, i] / rows[i]) if rows[i] else float("nan") for i in range(len(used))]
    return MetricsReport(protocol, float(sp), float(se), float(icbhi_score(sp, se)),
                         per_class, used.tolist())


def predict_from_logits(logits) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(np.asarray(logits), axis=1)


def embed(state: M.ModelState, features, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(features), batch_size):
        out.append(M.extract(state, np.asarray(features[i:i + batch_size], dtype=np.float64)).data)
    return np.concatenate(out) if out else np.zeros((0, state.config.embed_dim))


def predict(state: M.ModelState, features, batch_size: int = 256) -> np.ndarray:
    """Lung label per cycle (argmax of class logits, ties to the lowest index)."""
    z = embed(state, features, batch_size)
    return predict_from_logits(M.classify(state, z).data)


def evaluate(state: M.ModelState, features, labels) -> dict[str, MetricsReport]:
    cm = confusion_matrix(labels, predict(state, features))
    return {p: icbhi_metrics(cm, p) for p in PROTOCOLS}


def _normalize_rows(z: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    return z / np.maximum(norm, 1e-12)


def domain_probe(z_train, d_train, z_test, d_test, steps: int = 500, lr: float = 0.1) -> float:
    """Held-out device accuracy (percent) of a linear softmax probe.

    The probe is fit on l2-normalised training embeddings by full-batch
    gradient descent on the mean cross-entropy, starting from zero weights.
    """
    d_train = np.asarray(d_train, dtype=np.intp)
    d_test = np.asarray(d_test, dtype=np.intp)
    if len(np.unique(d_train)) < 2:
        raise ValueError("domain_probe: the training split must contain at least two devices")
    if len(d_test) == 0:
        raise ValueError("domain_probe: empty test split")
    k = int(max(d_train.max(), d_test.max())) + 1
    x = _normalize_rows(np.asarray(z_train, dtype=np.float64))
    xt = _normalize_rows(np.asarray(z_test, dtype=np.float64))
    n = len(x)
    onehot = np.eye(k)[d_train]
    w = np.zeros((x.shape[1], k))
    b = np.zeros(k)
    for _ in range(steps):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    pred = np.argmax(xt @ w + b, axis=1)
    return float(100.0 * np.mean(pred == d_test))


def export_embeddings(state: M.ModelState, features, ids: Sequence[str], lung, device,
                      split: Sequence[str], path=None) -> str:
    """CSV with header ``id,lung,device,split,e0..e{D-1}``; returns the text."""
    z = embed(state, features)
    d = z.shape[1]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "lung", "device", "split"] + [f"e{j}" for j in range(d)])
    for i in range(len(z)):
        writer.writerow([ids[i], int(lung[i]), int(device[i]), split[i]] + [repr(float(v)) for v in z[i]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def write_metrics(reports: dict[str, MetricsReport], path, extra: dict | None = None) -> None:
    payload = {p: {**r.to_dict(), "display": r.display()} for p, r in reports.items()}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
