"""Dense float64 tensors with a reverse-mode tape and a finite-difference checker.

Every differentiable quantity in the package is built from the ops registered
in :data:`OPS`. A :class:`Tape` records each op applied to tensors that live on
it; tensors without a tape are constants and record nothing.

Shape rule for the binary elementwise ops (add, sub, mul, div, maximum,
minimum): the second operand's shape must equal the first operand's shape or
one of its suffixes (``()`` included). That is the only broadcasting allowed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        where = "const" if self.tape is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {where})"

    # operator sugar; everything routes through forward_op
    def __add__(self, other):
        return forward_op("add", [self, as_tensor(other)])

    def __radd__(self, other):
        return forward_op("add", [as_tensor(other, like=self), self])

    def __sub__(self, other):
        return forward_op("sub", [self, as_tensor(other)])

    def __rsub__(self, other):
        return forward_op("sub", [as_tensor(other, like=self), self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return forward_op("scale", [self], c=float(other))
        return forward_op("mul", [self, as_tensor(other)])

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return forward_op("scale", [self], c=float(other))
        return forward_op("mul", [as_tensor(other, like=self), self])

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return forward_op("scale", [self], c=1.0 / float(other))
        return forward_op("div", [self, as_tensor(other)])

    def __neg__(self):
        return forward_op("scale", [self], c=-1.0)

    def __matmul__(self, other):
        return forward_op("matmul", [self, as_tensor(other)])

    def __getitem__(self, index):
        return forward_op("index", [self], index=index)

    @property
    def T(self):
        return forward_op("transpose", [self])

    def sum(self, axis=None, keepdims=False):
        return forward_op("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return forward_op("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_op("reshape", [self], shape=shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if like is not None and arr.ndim == 0 and like.data.ndim > 0:
        arr = np.full(like.shape, float(arr))
    return Tensor(arr)


def constant(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64))


class Tape:
    """Append-only record of ops; one per training step.

    ``kink_margin`` tracks the smallest distance from any non-smooth op's input
    to its kink during the forward pass, which lets finite-difference checks
    reject evaluation points sitting on a hinge corner.
    """

    def __init__(self):
        # (op-kind, input node-ids, vjp, output shape)
        self.nodes: list[tuple[str, tuple[int, ...], Callable | None, tuple]] = []
        self.kink_margin = math.inf

    def __len__(self):
        return len(self.nodes)

    def leaf(self, data) -> Tensor:
        arr = np.array(data, dtype=np.float64)
        self.nodes.append(("leaf", (), None, arr.shape))
        return Tensor(arr, self, len(self.nodes) - 1)

    def clear(self):
        self.nodes.clear()
        self.kink_margin = math.inf

    def _record(self, kind, input_nodes, vjp, out) -> Tensor:
        self.nodes.append((kind, tuple(input_nodes), vjp, out.shape))
        return Tensor(out, self, len(self.nodes) - 1)

    def _note_kink(self, dist):
        if dist.size:
            self.kink_margin = min(self.kink_margin, float(np.min(dist)))

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        if root.tape is not self:
            raise ValueError("root does not live on this tape")
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.node: np.ones(root.shape)}
        for i in range(root.node, -1, -1):
            g = grads.get(i)
            _, inputs, vjp, _ = self.nodes[i]
            if g is None or vjp is None:
                continue
            for j, gj in zip(inputs, vjp(g)):
                if j is None or gj is None:  # constant input
                    continue
                grads[j] = grads[j] + gj if j in grads else gj
        for i, (kind, _, _, shape) in enumerate(self.nodes):
            if kind == "leaf" and i not in grads:
                grads[i] = np.zeros(shape)
        return grads


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Gradient map node-id -> array for the scalar ``root``.

    Constants have no tape and yield an empty map. Leaves the root does not
    depend on map to zeros of their own shape.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root.tape is None:
        return {}
    return root.tape.backward(root)


def grad_of(grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
    g = grads.get(t.node) if t.node is not None else None
    return np.zeros(t.shape) if g is None else g


# ---------------------------------------------------------------------------
# op catalog


@dataclass(frozen=True)
class Op:
    arity: int  # -1 means variadic
    fn: Callable  # (*arrays, **attrs) -> (out, vjp_factory(grad) -> grads)


OPS: dict[str, Op] = {}


def register(kind: str, arity: int):
    def deco(fn):
        OPS[kind] = Op(arity, fn)
        return fn

    return deco


def forward_op(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    op = OPS.get(kind)
    if op is None:
        raise KeyError(f"unknown op kind {kind!r}")
    if op.arity >= 0 and len(inputs) != op.arity:
        raise ShapeError(f"{kind} takes {op.arity} inputs, got {len(inputs)}")
    inputs = [as_tensor(x) for x in inputs]
    tape = None
    for x in inputs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("inputs live on different tapes")
            tape = x.tape
    out, vjp, kink = op.fn(*[x.data for x in inputs], **attrs)
    if tape is None:
        return Tensor(out)
    if kink is not None:
        tape._note_kink(kink)
    return tape._record(kind, [x.node for x in inputs], vjp, out)


def _suffix_check(kind, a, b):
    if b.shape != a.shape[a.ndim - b.ndim:] or b.ndim > a.ndim:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


@register("add", 2)
def _add(a, b):
    _suffix_check("add", a, b)
    return a + b, lambda g: (g, _unbroadcast(g, b.shape)), None


@register("sub", 2)
def _sub(a, b):
    _suffix_check("sub", a, b)
    return a - b, lambda g: (g, -_unbroadcast(g, b.shape)), None


@register("mul", 2)
def _mul(a, b):
    _suffix_check("mul", a, b)
    return a * b, lambda g: (g * b, _unbroadcast(g * a, b.shape)), None


@register("div", 2)
def _div(a, b):
    _suffix_check("div", a, b)
    out = a / b
    return out, lambda g: (g / b, _unbroadcast(-g * out / b, b.shape)), None


@register("scale", 1)
def _scale(a, c):
    return a * c, lambda g: (g * c,), None


@register("matmul", 2)
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}")
    if b.ndim > 2 and a.ndim != b.ndim:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a @ b

    def vjp(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return out, vjp, None


@register("transpose", 1)
def _transpose(a):
    if a.ndim < 2:
        raise ShapeError(f"transpose needs ndim >= 2, got {a.shape}")
    return np.swapaxes(a, -1, -2), lambda g: (np.swapaxes(g, -1, -2),), None


@register("reshape", 1)
def _reshape(a, shape):
    out = a.reshape(shape)
    return out, lambda g: (g.reshape(a.shape),), None


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@register("sum", 1)
def _sum(a, axis=None, keepdims=False):
    out = a.sum(axis=axis, keepdims=keepdims)
    return out, lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),), None


@register("mean", 1)
def _mean(a, axis=None, keepdims=False):
    out = a.mean(axis=axis, keepdims=keepdims)
    n = a.size / max(out.size, 1)
    return out, lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / n,), None


@register("sigmoid", 1)
def _sigmoid(a):
    # two-branch form keeps exp from overflowing
    e = np.exp(-np.abs(a))
    out = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out, lambda g: (g * out * (1.0 - out),), None


@register("tanh", 1)
def _tanh(a):
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),), None


@register("softplus", 1)
def _softplus(a):
    out = np.logaddexp(0.0, a)
    e = np.exp(-np.abs(a))
    sig = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out, lambda g: (g * sig,), None


@register("exp", 1)
def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,), None


@register("log", 1)
def _log(a):
    if np.any(a <= 0):
        raise ValueError("log of non-positive value")
    return np.log(a), lambda g: (g / a,), None


@register("relu", 1)
def _relu(a):
    # subgradient at 0 is 0
    out = np.maximum(a, 0.0)
    return out, lambda g: (g * (a > 0),), np.abs(a)


@register("clamp", 1)
def _clamp(a, lo=-np.inf, hi=np.inf):
    out = np.clip(a, lo, hi)
    inside = (a > lo) & (a < hi)
    return out, lambda g: (g * inside,), np.minimum(np.abs(a - lo), np.abs(a - hi))


@register("maximum", 2)
def _maximum(a, b):
    _suffix_check("maximum", a, b)
    pick_a = a > b
    return (
        np.maximum(a, b),
        lambda g: (g * pick_a, _unbroadcast(g * ~pick_a, b.shape)),
        np.abs(a - b),
    )


@register("minimum", 2)
def _minimum(a, b):
    _suffix_check("minimum", a, b)
    pick_a = a < b
    return (
        np.minimum(a, b),
        lambda g: (g * pick_a, _unbroadcast(g * ~pick_a, b.shape)),
        np.abs(a - b),
    )


@register("smooth_l1", 1)
def _smooth_l1(a, beta=1.0):
    ab = np.abs(a)
    quad = ab < beta
    out = np.where(quad, 0.5 * a * a / beta, ab - 0.5 * beta)
    return out, lambda g: (g * np.where(quad, a / beta, np.sign(a)),), None


@register("softmax", 1)
def _softmax(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return out, vjp, None


@register("logsumexp", 1)
def _logsumexp(a, mask=None):
    """Log-sum-exp over the last axis, restricted to entries where ``mask``."""
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("logsumexp: a row has an empty mask")
    x = np.where(mask, a, -np.inf)
    mx = x.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(x - mx), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + mx)[..., 0]
    w = e / s
    return out, lambda g: (g[..., None] * w,), None


@register("l2_normalize", 1)
def _l2_normalize(a):
    n = np.sqrt((a * a).sum(axis=-1, keepdims=True)) + EPS_NORM
    u = a / n

    def vjp(g):
        # d(a/n) with n = |a| + eps
        r = np.sqrt((a * a).sum(axis=-1, keepdims=True))
        dot = (g * a).sum(axis=-1, keepdims=True)
        safe_r = np.where(r > 0, r, 1.0)
        return (g / n - a * dot / (n * n * safe_r) * (r > 0),)

    return u, vjp, None


@register("cosine", 2)
def _cosine(a, b):
    """Cosine similarity along the last axis, norms padded by 1e-12."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine: shapes {a.shape} and {b.shape} do not conform")
    ra = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    rb = np.sqrt((b * b).sum(axis=-1, keepdims=True))
    na, nb = ra + EPS_NORM, rb + EPS_NORM
    dot = (a * b).sum(axis=-1, keepdims=True)
    out = dot / (na * nb)

    def vjp(g):
        g = g[..., None]
        sa = np.where(ra > 0, ra, 1.0)
        sb = np.where(rb > 0, rb, 1.0)
        ga = g * (b / (na * nb) - out * a / (na * sa) * (ra > 0))
        gb = g * (a / (na * nb) - out * b / (nb * sb) * (rb > 0))
        return ga, gb

    return out[..., 0], vjp, None


@register("concat", -1)
def _concat(*arrays, axis=0):
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis)), None


@register("stack", -1)
def _stack(*arrays, axis=0):
    out = np.stack(arrays, axis=axis)
    n = len(arrays)
    return out, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), None


@register("index", 1)
def _index(a, index):
    out = np.array(a[index])

    def vjp(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, index, g)
        return (ga,)

    return out, vjp, None


# functional aliases -----------------------------------------------------------


def sigmoid(x):
    return forward_op("sigmoid", [x])


def tanh(x):
    return forward_op("tanh", [x])


def softplus(x):
    return forward_op("softplus", [x])


def exp(x):
    return forward_op("exp", [x])


def log(x):
    return forward_op("log", [x])


def relu(x):
    return forward_op("relu", [x])


def clamp(x, lo=-np.inf, hi=np.inf):
    return forward_op("clamp", [x], lo=lo, hi=hi)


def maximum(a, b):
    return forward_op("maximum", [a, b])


def minimum(a, b):
    return forward_op("minimum", [a, b])


def smooth_l1(x, beta=1.0):
    return forward_op("smooth_l1", [x], beta=beta)


def softmax(x):
    return forward_op("softmax", [x])


def logsumexp(x, mask=None):
    return forward_op("logsumexp", [x], mask=mask)


def l2_normalize(x):
    return forward_op("l2_normalize", [x])


def cosine(a, b):
    return forward_op("cosine", [a, b])


def concat(xs, axis=0):
    return forward_op("concat", list(xs), axis=axis)


def stack(xs, axis=0):
    return forward_op("stack", list(xs), axis=axis)


def matmul(a, b):
    return forward_op("matmul", [a, b])


# ---------------------------------------------------------------------------
# finite-difference verification


class KinkError(RuntimeError):
    """The evaluation point sits within the guard distance of a hinge kink."""


def _evaluate(fn, arrays):
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = fn(*leaves)
    return tape, leaves, out


def grad_check(fn: Callable[..., Tensor], params: Sequence[np.ndarray], h: float = 1e-4,
               seed: int | None = None, max_coords: int | None = None,
               kink_guard: float = 10.0) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps leaf tensors (one per entry of ``params``) to a scalar tensor.
    The error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. Raises
    :class:`KinkError` when any non-smooth op is within ``kink_guard * h`` of
    its kink at ``params``; callers resample. ``max_coords`` checks a random
    subset of coordinates (chosen with ``seed``) instead of all of them.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    tape, leaves, out = _evaluate(fn, params)
    if tape.kink_margin < kink_guard * h:
        raise KinkError(f"kink margin {tape.kink_margin:.3g} < {kink_guard * h:.3g}")
    if out.tape is None:
        return 0.0
    grads = tape.backward(out)
    analytic = [grad_of(grads, leaf) for leaf in leaves]

    coords = [(k, idx) for k, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for k, idx in coords:
        orig = params[k][idx]
        params[k][idx] = orig + h
        fp = _evaluate(fn, params)[2].item()
        params[k][idx] = orig - h
        fm = _evaluate(fn, params)[2].item()
        params[k][idx] = orig
        num = (fp - fm) / (2 * h)
        a = float(analytic[k][idx])
        denom = max(abs(a), abs(num), 1e-8)
        worst = max(worst, abs(a - num) / denom)
    return worst


def kink_margin(fn: Callable[..., Tensor], params: Sequence[np.ndarray]) -> float:
    """Smallest distance to a hinge kink seen while evaluating ``fn`` at ``params``."""
    tape, _, _ = _evaluate(fn, [np.array(p, dtype=np.float64) for p in params])
    return tape.kink_margin
