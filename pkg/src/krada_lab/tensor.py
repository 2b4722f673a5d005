"""Dense float64 tensors with a define-by-run tape for reverse-mode gradients.

Only the handful of operations the segmentation networks need are provided.
Operations record themselves on the innermost active :class:`Tape` when any
input requires a gradient; outside a ``with Tape():`` block they run as plain
numpy computations.

Example::

    w = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(conv2d(x, w, b))
    tape.backward(loss)
    sgd_step([w], lr=0.1)
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, UsageError

LOG_EPS = 1e-12
_LOG_CAP = -np.log(LOG_EPS)

_active_tapes: list["Tape"] = []


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        """Return a tensor sharing no history (and no storage) with this one."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    A tape can be replayed backward exactly once; build a new one for every
    forward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _record(out: Tensor, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    if not _active_tapes or not any(t.requires_grad for t in inputs):
        return out
    tape = _active_tapes[-1]
    if tape.consumed:
        raise UsageError("cannot record on a tape that has already been run backward")
    out.requires_grad = True
    out.grad = np.zeros_like(out.data)
    tape.nodes.append(_Node(out, inputs, fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor ``t``.

    Tensors not reachable from ``loss`` keep their gradient buffers untouched.
    """
    if tape.consumed:
        raise UsageError("tape already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring grad")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.out))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                touched[key] = inp
    for key, t in touched.items():
        t.grad += grads[key]


# ---------------------------------------------------------------------------
# elementwise and reduction helpers


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _record(Tensor(a.data + b.data), (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return _record(Tensor(a.data - b.data), (a, b), lambda g: (g, -g))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(Tensor(x.data * c), (x,), lambda g: (g * c,))


def tsum(x: Tensor) -> Tensor:
    return _record(Tensor(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mul_const(x: Tensor, c) -> Tensor:
    """Elementwise product with a constant array of the same shape."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != x.shape:
        raise ShapeError(f"mul_const: {c.shape} vs {x.shape}")
    return _record(Tensor(x.data * c), (x,), lambda g: (g * c,))


def mul_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply an NCHW tensor by a constant N1HW (or HW) mask, channel-wise."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[None, None]
    if x.data.ndim != 4 or m.shape != (x.shape[0], 1) + x.shape[2:]:
        raise ShapeError(f"mask {np.shape(mask)} does not fit features {x.shape}")
    return _record(Tensor(x.data * m), (x,), lambda g: (g * m,))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    pos = x.data > 0
    return _record(Tensor(np.where(pos, x.data, 0.0)), (x,), lambda g: (g * pos,))


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Same-size 2-D cross-correlation for 1x1 and 3x3 kernels (NCHW / OIkk)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: only 1x1 and 3x3 kernels are supported, got {kh}x{kw}")
    if stride != 1 or padding != (kh - 1) // 2:
        raise ShapeError(f"conv2d: stride={stride}, padding={padding} does not preserve size")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")

    wd = weight.data
    if kh == 1:
        w2 = wd[:, :, 0, 0]
        out = np.einsum("nchw,oc->nohw", x.data, w2) + bias.data[None, :, None, None]

        def fn(g):
            gx = np.einsum("nohw,oc->nchw", g, w2)
            gw = np.einsum("nohw,nchw->oc", g, x.data)[:, :, None, None]
            return gx, gw, g.sum(axis=(0, 2, 3))

        return _record(Tensor(out), (x, weight, bias), fn)

    p = padding
    xpad = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = sliding_window_view(xpad, (kh, kw), axis=(2, 3))  # n c h w i j
    out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def fn(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, wd, axes=([1], [0]))  # n h w c i j
        gpad = np.zeros_like(xpad)
        for i in range(kh):
            for j in range(kw):
                gpad[:, :, i:i + h, j:j + w] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gpad[:, :, p:p + h, p:p + w], gw, g.sum(axis=(0, 2, 3))

    return _record(Tensor(np.ascontiguousarray(out)), (x, weight, bias), fn)


# ---------------------------------------------------------------------------
# probabilities and losses


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over axis 1 of an NCHW tensor, stabilised by max-subtraction."""
    if logits.data.ndim != 4:
        raise ShapeError(f"softmax_channels expects NCHW, got {logits.shape}")
    p = _softmax(logits.data)

    def fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(Tensor(p), (logits,), fn)


def masked_cross_entropy(logits: Tensor, target_onehot, pixel_weights=None) -> Tensor:
    """Cross-entropy of channel-softmax logits against one-hot targets.

    Pixels whose target vector is all zero, or whose weight is zero, are
    unlabeled and contribute nothing. The summed loss is divided by the number
    of labeled pixels (at least 1), so an all-zero target map gives exactly 0.
    ``log`` is clamped below at ``LOG_EPS``.
    """
    z = logits.data
    t = np.asarray(target_onehot, dtype=np.float64)
    if z.ndim != 4 or t.shape != z.shape:
        raise ShapeError(f"target {t.shape} does not match logits {z.shape}")
    if pixel_weights is None:
        w = np.ones((z.shape[0], 1) + z.shape[2:])
    else:
        w = np.asarray(pixel_weights, dtype=np.float64)
        if w.shape != (z.shape[0], 1) + z.shape[2:]:
            raise ShapeError(f"pixel weights {w.shape} do not match logits {z.shape}")

    p = _softmax(z)
    safe = p > LOG_EPS
    logp = np.log(np.maximum(p, LOG_EPS))
    labeled = (w > 0) & (t.sum(axis=1, keepdims=True) > 0)
    denom = max(1, int(labeled.sum()))
    loss = -(w * t * logp).sum() / denom

    def fn(g):
        gp = np.where(safe, -g * w * t / (denom * np.maximum(p, LOG_EPS)), 0.0)
        return (p * (gp - (gp * p).sum(axis=1, keepdims=True)),)

    return _record(Tensor(loss), (logits,), fn)


def bce_logits(logits: Tensor, label: int, weights=None) -> Tensor:
    """Mean binary cross-entropy of ``logits`` against a constant 0/1 label.

    Uses the softplus form ``max(x,0) - x*y + log1p(exp(-|x|))``; per-element
    losses are capped at ``-log(LOG_EPS)``. With ``weights`` (broadcastable to
    the logits) the weighted sum is divided by the count of positive weights.
    """
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    x = logits.data
    y = float(label)
    raw = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    capped = raw > _LOG_CAP
    per = np.where(capped, _LOG_CAP, raw)
    if weights is None:
        w = None
        denom = per.size
        loss = per.mean()
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), x.shape)
        denom = max(1, int((w > 0).sum()))
        loss = (w * per).sum() / denom

    def fn(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        d = np.where(capped, 0.0, sig - y) * (g / denom)
        return (d if w is None else d * w,)

    return _record(Tensor(loss), (logits,), fn)


# ---------------------------------------------------------------------------
# parameters


GROUPS = ("F", "C", "D", "C_star")


class ParamSet:
    """Named parameters partitioned into the four disjoint update groups."""

    def __init__(self, groups: dict[str, dict[str, Tensor]] | None = None):
        self.groups: dict[str, dict[str, Tensor]] = {g: {} for g in GROUPS}
        seen: set[int] = set()
        for gname, params in (groups or {}).items():
            if gname not in self.groups:
                raise KeyError(f"unknown parameter group {gname!r}")
            for name, t in params.items():
                if id(t) in seen:
                    raise ValueError(f"parameter {name!r} appears in more than one group")
                if not t.requires_grad:
                    raise ValueError(f"parameter {name!r} does not require grad")
                seen.add(id(t))
                self.groups[gname][name] = t

    def group(self, name: str) -> list[Tensor]:
        return list(self.groups[name].values())

    def named(self):
        for gname in GROUPS:
            for name, t in self.groups[gname].items():
                yield gname, name, t

    def zero_grad(self) -> None:
        for _, _, t in self.named():
            t.zero_grad()


def sgd_step(params: Iterable[Tensor], lr: float, sign: int = 1) -> None:
    """In-place ``theta -= lr * sign * grad`` followed by zeroing the grads."""
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign!r}")
    step = float(lr) * sign
    for p in params:
        if p.grad is None:
            raise UsageError("sgd_step on a tensor without a gradient buffer")
        if step != 0.0:
            p.data -= step * p.grad
        p.grad[...] = 0.0
