"""Minimal reverse-mode gradient tape over float64 numpy arrays.

Covers exactly the operations the head and its losses need. Graphs are
built implicitly through closures and are single-use: call backward()
once on a scalar root, read .grad off the parameter leaves.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import numerics
from .errors import NonFiniteLoss, ShapeMismatch, ZeroNormRow


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    """Graph node holding a float64 array value and, after backward, its grad."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None, requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @staticmethod
    def param(value) -> "Var":
        return Var(value, requires_grad=True)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def backward(self) -> None:
        if self.value.shape != ():
            raise ShapeMismatch("backward() requires a scalar root")
        order: list[Var] = []
        seen: set[int] = set()
        stack: list[tuple[Var, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._vjp is None:
                continue
            parent_grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if not parent.requires_grad or g is None:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.value.shape)
                if parent.grad is None:
                    parent.grad = g  # may alias; accumulation below never mutates
                else:
                    parent.grad = parent.grad + g

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def constant(x) -> Var:
    return Var(np.asarray(x, dtype=np.float64), requires_grad=False)


# grad_check support: stop-gradient outputs recorded at the base point and
# replayed during probe evaluations, so finite differences probe the same
# function the tape differentiates (sg values are constants of the step).
_REPLAY: dict | None = None


def detach(x: Var) -> Var:
    """Stop-gradient: same value, no parents."""
    global _REPLAY
    if _REPLAY is not None:
        if _REPLAY["mode"] == "record":
            _REPLAY["values"].append(np.array(x.value))
            return constant(_REPLAY["values"][-1])
        i = _REPLAY["cursor"]
        _REPLAY["cursor"] = i + 1
        if i >= len(_REPLAY["values"]):
            raise ShapeMismatch("stop-gradient replay ran past the recorded trace")
        return constant(_REPLAY["values"][i])
    return constant(x.value)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value / b.value

    def vjp(g):
        return g / b.value, -g * out / b.value

    return Var(out, (a, b), vjp)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def bmm(a, b) -> Var:
    """Batched matmul on stacked matrices [..., m, k] @ [..., k, n]."""
    a, b = as_var(a), as_var(b)
    return Var(
        np.matmul(a.value, b.value),
        (a, b),
        lambda g: (
            np.matmul(g, b.value.swapaxes(-1, -2)),
            np.matmul(a.value.swapaxes(-1, -2), g),
        ),
    )


def transpose(a: Var) -> Var:
    a = as_var(a)
    return Var(a.value.T, (a,), lambda g: (g.T,))


def swap_last(a: Var) -> Var:
    """Swap the trailing two axes."""
    a = as_var(a)
    return Var(
        a.value.swapaxes(-1, -2), (a,), lambda g: (g.swapaxes(-1, -2),)
    )


def reshape(a: Var, shape) -> Var:
    a = as_var(a)
    old = a.value.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = as_var(a)
    return Var(np.log(a.value), (a,), lambda g: (g / a.value,))


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.value)
    return Var(out, (a,), lambda g: (g / (2.0 * out),))


def absolute(a) -> Var:
    a = as_var(a)
    return Var(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return Var(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def clamp_min(a, floor: float) -> Var:
    a = as_var(a)
    mask = a.value > floor
    return Var(np.where(mask, a.value, floor), (a,), lambda g: (g * mask,))


def vsum(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape),)

    return Var(out, (a,), vjp)


def vmean(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    if axis is None:
        n = a.value.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.value.shape[ax] for ax in axis]))
    else:
        n = a.value.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def take_rows(a: Var, idx: np.ndarray) -> Var:
    a = as_var(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return Var(a.value[idx], (a,), vjp)


def topk_mean_axis(m: Var, k: int, axis: int = 0) -> Var:
    """Mean of the k largest entries along `axis`; ties to the lowest index.

    The selection is treated as constant, so the gradient is the lowest-index
    subgradient: 1/k routed to each selected entry.
    """
    m = as_var(m)
    v = m.value
    extent = v.shape[axis]
    if not 1 <= k <= extent:
        from .errors import KOutOfRange

        raise KOutOfRange(f"k={k} outside [1, {extent}]")
    if k == extent:
        sel = np.ones_like(v, dtype=bool)
    else:
        # k-th largest value as threshold; fill ties in ascending index order
        part = np.partition(v, extent - k, axis=axis)
        thresh = np.take(part, [extent - k], axis=axis)
        gt = v > thresh
        eq = v == thresh
        need = k - gt.sum(axis=axis, keepdims=True)
        sel = gt | (eq & (np.cumsum(eq, axis=axis) <= need))
    out = (v * sel).sum(axis=axis) / k

    def vjp(g):
        return (np.expand_dims(g / k, axis) * sel,)

    return Var(out, (m,), vjp)


def topk_mean_cols(m: Var, k: int) -> Var:
    return topk_mean_axis(m, k, axis=0)


def l2_normalize_rows(a: Var) -> Var:
    """Normalize along the last axis; raises on numerically zero rows."""
    a = as_var(a)
    norms = np.linalg.norm(a.value, axis=-1, keepdims=True)
    if np.any(norms < numerics.EPS_NORM):
        raise ZeroNormRow(f"row norm below {numerics.EPS_NORM}")
    out = a.value / norms

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner * out) / norms,)

    return Var(out, (a,), vjp)


def cosine_rows(a: Var, b: Var) -> Var:
    """Differentiable pairwise cosine similarity (rows of a vs rows of b)."""
    return matmul(l2_normalize_rows(as_var(a)), transpose(l2_normalize_rows(as_var(b))))


def softmax_rows(m: Var, tau: float) -> Var:
    """Softmax along the last axis of m / tau, with max subtraction."""
    if not tau > 0:
        from .errors import NonPositiveTemperature

        raise NonPositiveTemperature(f"tau must be > 0, got {tau}")
    m = as_var(m)
    z = m.value / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return ((g - inner) * p / tau,)

    return Var(p, (m,), vjp)


def logsumexp(v: Var) -> Var:
    v = as_var(v)
    shift = float(v.value.max())
    return add(log(vsum(exp(sub(v, shift)))), shift)


def logsumexp_rows(v: Var) -> Var:
    """Log-sum-exp along the last axis, one fused node."""
    v = as_var(v)
    shift = v.value.max(axis=-1, keepdims=True)
    e = np.exp(v.value - shift)
    s = e.sum(axis=-1)
    out = np.log(s) + shift[..., 0]
    p = e / s[..., None]  # softmax, reused for the gradient

    def vjp(g):
        return (g[..., None] * p,)

    return Var(out, (v,), vjp)


def grad_check(
    loss_fn: Callable[[list[Var]], Var],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
    num_coords: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    Samples at least `num_coords` coordinates across all parameters
    (deterministic under seed) and returns
    max |analytic - fd| / max(1, |analytic|). Stop-gradient values are
    frozen at the base point for all probe evaluations.
    """
    global _REPLAY
    params = [np.asarray(p, dtype=np.float64) for p in params]
    try:
        _REPLAY = {"mode": "record", "values": [], "cursor": 0}
        leaves = [Var.param(p.copy()) for p in params]
        out = loss_fn(leaves)
        if not np.isfinite(out.value):
            raise NonFiniteLoss("loss is not finite at the evaluation point")
        out.backward()
        grads = [
            leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
            for leaf in leaves
        ]
        _REPLAY["mode"] = "replay"

        sizes = [p.size for p in params]
        total = sum(sizes)
        rng = np.random.default_rng(seed)
        n = min(max(num_coords, 64), total) if total >= 64 else total
        coords = rng.choice(total, size=n, replace=False)

        def eval_at(flat: np.ndarray) -> float:
            _REPLAY["cursor"] = 0
            split, vals = 0, []
            for p in params:
                vals.append(flat[split : split + p.size].reshape(p.shape))
                split += p.size
            v = loss_fn([Var(v) for v in vals]).value
            if not np.isfinite(v):
                raise NonFiniteLoss("loss is not finite at a probe point")
            return float(v)

        flat = np.concatenate([p.ravel() for p in params])
        flat_grad = np.concatenate([g.ravel() for g in grads])
        worst = 0.0
        for c in coords:
            bumped = flat.copy()
            bumped[c] = flat[c] + step
            hi = eval_at(bumped)
            bumped[c] = flat[c] - step
            lo = eval_at(bumped)
            fd = (hi - lo) / (2.0 * step)
            analytic = flat_grad[c]
            err = abs(analytic - fd) / max(1.0, abs(analytic))
            worst = max(worst, err)
        return worst
    finally:
        _REPLAY = None
