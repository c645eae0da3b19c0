"""Tape-based reverse-mode differentiation over numpy arrays.

Every kernel takes :class:`Var` inputs, computes its value eagerly and, when
any input needs a gradient, appends a record with a hand-written adjoint to
the owning :class:`Tape`.  ``Tape.backward`` replays the records in reverse
order, visiting each exactly once.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, EmptyMaskWarning, NumericalError

LN_EPS = 1e-5
ACTIVATIONS = ("relu", "tanh", "sigmoid")


class Var:
    __slots__ = ("value", "tape", "requires_grad", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", requires_grad: bool = False, name: str | None = None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar for tests and small scripts
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Record:
    op: str
    inputs: tuple[Var, ...]
    output: Var
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Single-writer record of forward operations.

    With ``grad=False`` nothing is recorded, which makes the same model code
    usable for inference without holding intermediates.
    """

    def __init__(self, grad: bool = True, check_finite: bool = True):
        self.grad = grad
        self.check_finite = check_finite
        self.records: list[Record] = []
        self.params: dict[str, Var] = {}

    def param(self, name: str, value: np.ndarray) -> Var:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        v = Var(np.asarray(value, dtype=np.float64), self, requires_grad=self.grad, name=name)
        self.params[name] = v
        return v

    def constant(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self)

    def register(self, params: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.param(k, v) for k, v in params.items()}

    def _emit(self, op: str, inputs: tuple[Var, ...], value: np.ndarray, backward) -> Var:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite output from {op}")
        needs = self.grad and any(v.requires_grad for v in inputs)
        out = Var(value, self, requires_grad=needs)
        if needs:
            self.records.append(Record(op, inputs, out, backward))
        return out

    def release(self) -> None:
        """Drop recorded intermediates (they form reference cycles with the tape)."""
        self.records.clear()
        self.params.clear()

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every registered parameter.

        Unused parameters get exact zeros.  The tape is not consumed, so a
        second call reproduces the same result bit for bit.
        """
        if loss.value.size != 1:
            raise DimensionError("backward requires a scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return {
            name: grads.get(id(v), np.zeros_like(v.value)).reshape(v.value.shape)
            for name, v in self.params.items()
        }


def _as_var(x, like: Var) -> Var:
    return x if isinstance(x, Var) else like.tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- linear algebra


def matmul(a: Var, b: Var) -> Var:
    """``a @ b`` with numpy batching rules; 2-D ``b`` is the common weight case."""
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    flat = bv.ndim == 2 and av.ndim > 2
    if flat:
        k = av.shape[-1]
        a2 = av.reshape(-1, k)
        out = (a2 @ bv).reshape(av.shape[:-1] + (bv.shape[1],))
    else:
        out = np.matmul(av, bv)

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bv.T).reshape(av.shape)
            if b.requires_grad:
                gb = a2.T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return a.tape._emit("matmul", (a, b), out, backward)


def add(a: Var, b) -> Var:
    b = _as_var(b, a)
    out = a.value + b.value
    sa, sb = a.value.shape, b.value.shape
    return a.tape._emit("add", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Var, b) -> Var:
    b = _as_var(b, a)
    out = a.value - b.value
    sa, sb = a.value.shape, b.value.shape
    return a.tape._emit("sub", (a, b), out, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Var, b) -> Var:
    b = _as_var(b, a)
    av, bv = a.value, b.value
    return a.tape._emit(
        "mul", (a, b), av * bv,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Var, c: float) -> Var:
    return a.tape._emit("scale", (a,), a.value * c, lambda g: (g * c,))


def total(a: Var) -> Var:
    shape = a.value.shape
    return a.tape._emit("sum", (a,), np.asarray(a.value.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def transpose(a: Var, axes: Sequence[int] | None = None) -> Var:
    """Swaps the two trailing axes unless ``axes`` is given."""
    if axes is None:
        axes = list(range(a.value.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return a.tape._emit("transpose", (a,), np.transpose(a.value, axes), lambda g: (np.transpose(g, inv),))


def reshape(a: Var, shape: Sequence[int]) -> Var:
    old = a.value.shape
    return a.tape._emit("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    """Concatenate along ``axis`` after broadcasting the leading axes.

    Node tables (N×k) and per-sample calendar rows (B×1×k) can be mixed with
    a B×N×k feature block; their gradients are reduced back.
    """
    tape = parts[0].tape
    if axis != -1:
        raise DimensionError("concat supports the trailing axis only")
    lead = np.broadcast_shapes(*(p.value.shape[:-1] for p in parts))
    arrays = [np.broadcast_to(p.value, lead + p.value.shape[-1:]) for p in parts]
    out = np.concatenate(arrays, axis=-1)
    widths = [p.value.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(
            _unbroadcast(g[..., bounds[i]:bounds[i + 1]], p.value.shape) for i, p in enumerate(parts)
        )

    return tape._emit("concat", tuple(parts), out, backward)


def take_rows(table: Var, idx: np.ndarray) -> Var:
    """Gather ``table[idx]``; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows")

    def backward(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.value.shape[-1]))
        return (gt,)

    return table.tape._emit("take_rows", (table,), table.value[idx], backward)


# ---------------------------------------------------------------- nonlinearities


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def softmax(m: Var, axis: int = -1) -> Var:
    y = _softmax(m.value, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return m.tape._emit("softmax", (m,), y, backward)


def softmax_rows(m: Var) -> Var:
    return softmax(m, axis=-1)


def activation(x: Var, kind: str = "relu") -> Var:
    v = x.value
    if kind == "relu":
        pos = v > 0
        return x.tape._emit("relu", (x,), np.maximum(v, 0.0), lambda g: (g * pos,))
    if kind == "tanh":
        y = np.tanh(v)
        return x.tape._emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = 0.5 * (1.0 + np.tanh(0.5 * v))
        return x.tape._emit("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def layer_norm(h: Var, gamma: Var, beta: Var, eps: float = LN_EPS) -> Var:
    x = h.value
    d = x.shape[-1]
    xc = x - x.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xc, xc)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc
    xhat *= inv
    gv = gamma.value
    out = xhat * gv
    out += beta.value

    def backward(g):
        gh = gg = gb = None
        if h.requires_grad:
            gx = g * gv
            proj = np.einsum("...i,...i->...", gx, xhat)[..., None] / d
            gh = gx - gx.mean(axis=-1, keepdims=True)
            gh -= xhat * proj
            gh *= inv
        if gamma.requires_grad:
            gg = np.einsum("ij,ij->j", g.reshape(-1, d), xhat.reshape(-1, d))
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gh, gg, gb

    return h.tape._emit("layer_norm", (h, gamma, beta), out, backward)


# ---------------------------------------------------------------- losses


def l1_loss(pred: Var, target, mask=None) -> Var:
    """Mean absolute error over unmasked entries.

    An all-zero mask yields an exact zero loss (and zero gradient) with an
    :class:`EmptyMaskWarning` instead of NaN.
    """
    t = target.value if isinstance(target, Var) else np.asarray(target, dtype=np.float64)
    p = pred.value
    if p.shape != t.shape:
        raise DimensionError(f"l1_loss shape mismatch: {p.shape} vs {t.shape}")
    diff = p - t
    if mask is None:
        count = diff.size
        w = None
    else:
        w = np.asarray(mask.value if isinstance(mask, Var) else mask, dtype=np.float64)
        if w.shape != p.shape:
            raise DimensionError(f"mask shape {w.shape} does not match {p.shape}")
        count = float(w.sum())
    if count == 0:
        warnings.warn("l1_loss: mask selects no entries; loss defined as 0", EmptyMaskWarning, stacklevel=2)
        return pred.tape._emit("l1_loss", (pred,), np.asarray(0.0), lambda g: (np.zeros_like(p),))
    a = np.abs(diff)
    if w is not None:
        a = a * w
    value = np.asarray(a.sum() / count)

    def backward(g):
        s = np.sign(diff)
        if w is not None:
            s = s * w
        return (s * (g / count),)

    return pred.tape._emit("l1_loss", (pred,), value, backward)


# ---------------------------------------------------------------- checking


def grad_check(
    f: Callable[[Mapping[str, Var]], Var],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-6,
    samples_per_param: int = 8,
    seed: int = 0,
) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over sampled coordinates.

    ``f`` maps tape-bound parameters to a scalar loss; it is called once with
    a recording tape and then repeatedly without one for central differences.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    loss = f(tape.register(base))
    if not np.isfinite(loss.value):
        raise NumericalError("loss is not finite")
    analytic = tape.backward(loss)

    def value_at(store):
        t = Tape(grad=False)
        out = float(f(t.register(store)).value)
        if not math.isfinite(out):
            raise NumericalError("loss is not finite under perturbation")
        return out

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples_per_param, flat.size), replace=False)
        for k in picks:
            orig = flat[k]
            flat[k] = orig + eps
            up = value_at(base)
            flat[k] = orig - eps
            down = value_at(base)
            flat[k] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(analytic[name].reshape(-1)[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
