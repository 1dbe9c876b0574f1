"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately small: it covers the extractor, the heads, the
projector and the three loss families, plus the two operators whose backward
pass differs from the derivative of their forward pass:

* :func:`gradient_reversal` is the identity going forward and multiplies the
  upstream gradient by ``-lam`` going backward.
* :func:`stop_gradient` is the identity going forward and blocks the gradient.

Every op checks that its output is finite and raises ``FloatingPointError``
otherwise, so a diverging run fails at the op that produced the first
non-finite value.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "l2_normalize",
    "logsumexp",
    "log_softmax",
    "softmax",
    "sum",
    "mean",
    "batch_norm",
    "reshape",
    "take",
    "transpose",
    "gradient_reversal",
    "stop_gradient",
    "backward",
    "grad_check",
    "declared_semantics",
]

_seq = itertools.count()
_local = threading.local()

L2_EPS = 1e-12


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise FloatingPointError("tensor: non-finite input data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def backward(self, seed=None) -> None:
        backward(self, seed)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"{op}: non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._seq = next(_seq)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and a 2-D ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    # derivative at exactly 0 is taken as 0
    active = a.data > 0
    return _make("relu", np.where(active, a.data, 0.0), (a,), lambda g: (g * active,))


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit length; the norm is floored at 1e-12."""
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    clamped = norm < L2_EPS
    denom = np.where(clamped, L2_EPS, norm)
    y = a.data / denom

    def bw(g):
        radial = np.sum(g * y, axis=axis, keepdims=True)
        ga = np.where(clamped, g / denom, (g - y * radial) / denom)
        return (ga,)

    return _make("l2_normalize", y, (a,), bw)


def _masked(x: np.ndarray, mask) -> np.ndarray:
    return x if mask is None else np.where(mask, x, -np.inf)


def _check_mask(op: str, x: Tensor, mask, axis: int):
    if mask is None:
        return None
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=axis).all():
        raise ValueError(f"{op}: every slice along axis {axis} needs at least one unmasked entry")
    return mask


def logsumexp(a, axis: int = -1, mask=None, keepdims: bool = False) -> Tensor:
    """Stabilised log-sum-exp; entries where ``mask`` is False are excluded."""
    a = as_tensor(a)
    mask = _check_mask("logsumexp", a, mask, axis)
    x = _masked(a.data, mask)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = m + np.log(s)
    p = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return _make("logsumexp", out if keepdims else np.squeeze(out, axis=axis), (a,), bw)


def log_softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Log-softmax along ``axis``. Masked-out positions are excluded and read 0."""
    a = as_tensor(a)
    mask = _check_mask("log_softmax", a, mask, axis)
    x = _masked(a.data, mask)
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    if mask is not None:
        y = np.where(mask, y, 0.0)

    def bw(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make("log_softmax", y, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data - np.max(a.data, axis=axis, keepdims=True))
    p = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _make("softmax", p, (a,), bw)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make("mean", np.asarray(out, dtype=np.float64), (a,), bw)


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, eps: float = 1e-5) -> Tensor:
    """Batch normalisation over axis 0 of a (batch, features) tensor.

    With ``running_mean``/``running_var`` given, those fixed statistics are
    used (inference mode). Otherwise the biased batch statistics are used and
    differentiated through (training mode).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(
            f"batch_norm: incompatible shapes x={x.shape} gamma={gamma.shape} beta={beta.shape}"
        )
    if running_mean is not None:
        mu = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv

        def bw_eval(g):
            return g * gamma.data * inv, np.sum(g * xhat, axis=0), np.sum(g, axis=0)

        return _make("batch_norm", gamma.data * xhat + beta.data, (x, gamma, beta), bw_eval)

    if x.shape[0] < 2:
        raise ValueError("batch_norm: training mode needs at least 2 rows")
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bw_train(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * np.mean(gxhat * xhat, axis=0))
        return gx, np.sum(g * xhat, axis=0), np.sum(g, axis=0)

    return _make("batch_norm", gamma.data * xhat + beta.data, (x, gamma, beta), bw_train)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (used for im2col)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ValueError(f"take: index out of range for axis {axis} of shape {a.shape}")
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (ga,)

    return _make("take", out, (a,), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose: expected a 2-D tensor, got shape {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


# --- ops whose backward is declared rather than derived -------------------


class _Replay:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self.recording = True
        self.cursor = 0

    def frozen(self, value: np.ndarray) -> np.ndarray:
        if self.recording:
            self.values.append(value.copy())
            return value
        out = self.values[self.cursor]
        self.cursor += 1
        return out


def _replay() -> _Replay | None:
    return getattr(_local, "replay", None)


def gradient_reversal(x, lam: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""
    if lam < 0:
        raise ValueError(f"gradient_reversal: lam must be >= 0, got {lam}")
    x = as_tensor(x)
    lam = float(lam)
    rp = _replay()
    if rp is not None:
        # forward surrogate whose ordinary derivative equals the declared one
        base = rp.frozen(x.data)
        data = -lam * x.data + (1.0 + lam) * base
    else:
        data = x.data.copy()
    return _make("gradient_reversal", data, (x,), lambda g: (-lam * g,))


def stop_gradient(x) -> Tensor:
    """Identity forward; no gradient flows back through this edge."""
    x = as_tensor(x)
    rp = _replay()
    data = rp.frozen(x.data) if rp is not None else x.data
    return _make("stop_gradient", data.copy(), (), None)


class declared_semantics:
    """Context manager used by finite-difference checks.

    The first evaluation inside the context records the inputs of every
    :func:`stop_gradient` and :func:`gradient_reversal` call; subsequent
    evaluations (after :meth:`replay`) reuse those recorded values as constants.
    Central differences of the forward pass then reproduce the declared
    backward semantics of both operators.
    """

    def __enter__(self):
        self._prev = _replay()
        self.state = _Replay()
        _local.replay = self.state
        return self

    def replay(self) -> None:
        self.state.recording = False
        self.state.cursor = 0

    def __exit__(self, *exc):
        _local.replay = self._prev
        return False


# --- backward --------------------------------------------------------------


def backward(output: Tensor, seed=None) -> None:
    """Accumulate d(output)/d(leaf) into ``.grad`` of every reachable leaf.

    Nodes are processed in decreasing creation order, which is a valid reverse
    topological order because inputs are always created before consumers.
    """
    if seed is None:
        if output.data.size != 1:
            raise ValueError(f"backward: seed required for non-scalar output of shape {output.shape}")
        seed = np.ones_like(output.data)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ValueError(f"backward: seed shape {seed.shape} does not match output shape {output.shape}")

    nodes: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t._seq in nodes or not t.requires_grad:
            continue
        nodes[t._seq] = t
        stack.extend(t._parents)

    grads: dict[int, np.ndarray] = {output._seq: seed}
    for key in sorted(nodes, reverse=True):
        t = nodes[key]
        g = grads.pop(key, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._seq)
            grads[parent._seq] = pg if prev is None else prev + pg


class Graph:
    """A differentiable computation with named inputs.

    ``fn`` receives one Tensor keyword argument per input and returns a Tensor.
    """

    def __init__(self, fn: Callable[..., Tensor]):
        self.fn = fn
        self._inputs: dict[str, Tensor] | None = None
        self._output: Tensor | None = None

    def forward(self, **inputs) -> Tensor:
        self._inputs = {k: Tensor(v.data if isinstance(v, Tensor) else v, requires_grad=True)
                        for k, v in inputs.items()}
        self._output = self.fn(**self._inputs)
        return self._output

    def backward(self, seed=None) -> dict[str, np.ndarray]:
        if self._output is None or self._inputs is None:
            raise RuntimeError("Graph.backward called before forward")
        for t in self._inputs.values():
            t.grad = None
        backward(self._output, seed)
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self._inputs.items()}


def grad_check(loss_fn: Callable[..., Tensor], inputs: Mapping[str, np.ndarray] | Sequence[np.ndarray],
               epsilon: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    Finite differences are taken under :class:`declared_semantics`, so
    gradient reversal and stop-gradient are checked against their declared
    backward behaviour rather than the derivative of their identity forward.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    named = isinstance(inputs, Mapping)
    names = list(inputs) if named else list(range(len(inputs)))
    arrays = {k: np.array(inputs[k], dtype=np.float64) for k in names}

    def call(values: dict, requires_grad: bool) -> Tensor:
        ts = {k: Tensor(v, requires_grad=requires_grad) for k, v in values.items()}
        out = loss_fn(**ts) if named else loss_fn(*ts.values())
        if out.data.size != 1:
            raise ValueError(f"grad_check: loss must be scalar, got shape {out.shape}")
        return out, ts

    out, leaves = call(arrays, True)
    backward(out)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    worst = 0.0
    with declared_semantics() as ctx:
        call(arrays, False)
        ctx.replay()
        for k in names:
            flat = arrays[k].reshape(-1)
            a_flat = analytic[k].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + epsilon
                ctx.replay()
                fp = call(arrays, False)[0].item()
                flat[j] = orig - epsilon
                ctx.replay()
                fm = call(arrays, False)[0].item()
                flat[j] = orig
                numeric = (fp - fm) / (2.0 * epsilon)
                err = abs(a_flat[j] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
