"""A small reverse-mode differentiation engine over float64 numpy arrays.

Every op returns a new :class:`Tensor`.  When any input requires a gradient,
the result remembers its parents and a closure that maps the upstream
gradient to the parents' gradients.  :func:`backward` walks the reachable
graph in reverse creation order, which is a topological order of the forward
pass because a tensor is always created after its inputs.

Broadcasting is limited to scalar-tensor and matching-shape elementwise ops;
the explicit :func:`add_bias` covers per-feature and per-channel biases.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_counter)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_counter)
    out.op = op
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar broadcasting is admitted
    if g.shape == shape:
        return g
    return np.full(shape, g.sum(), dtype=DTYPE)


def detach(t: Tensor) -> Tensor:
    """Same values, no lineage: gradients never cross this point."""
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out._seq = next(_counter)
    out.op = "detach"
    return out


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


# ---------------------------------------------------------------------------
# shape and reductions


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def take(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[start:stop]`` along the leading axis."""
    src = a.shape

    def bw(g):
        full = np.zeros(src, dtype=DTYPE)
        full[start:stop] = g
        return (full,)

    return _record(a.data[start:stop], (a,), bw, "take")


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.full(src, g, dtype=DTYPE),), "sum")


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    src = a.shape
    if axis is None:
        n = a.size
        return _record(np.asarray(a.data.mean()), (a,),
                       lambda g: (np.full(src, g / n, dtype=DTYPE),), "mean")
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(src) for ax in axes)
    n = int(np.prod([src[ax] for ax in axes]))

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), src) / n,)

    return _record(a.data.mean(axis=axes), (a,), bw, "mean")


def max_reduce(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    out = ad.max(axis=axis)

    def bw(g):
        # ties split evenly
        mask = ad == np.expand_dims(out, axis)
        mask = mask / mask.sum(axis=axis, keepdims=True)
        return (mask * np.expand_dims(g, axis),)

    return _record(out, (a,), bw, "max")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def add_bias(x: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Add a 1-D bias along ``axis`` (features of a matrix, channels of a map)."""
    if b.data.ndim != 1 or x.shape[axis] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    view = [1] * x.data.ndim
    view[axis] = -1
    other = tuple(i for i in range(x.data.ndim) if i != axis)
    return _record(x.data + b.data.reshape(view), (x, b),
                   lambda g: (g, g.sum(axis=other)), "add_bias")


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    s = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (n, oh, ow, c, kh, kw), (s[0], s[2], s[3], s[1], s[2], s[3]), writeable=False)
    return win.reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of ``x[N,C,H,W]`` with ``w[O,C,kh,kw]``."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    oh, ow = hp - kh + 1, wp - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    cols = _im2col(np.ascontiguousarray(xp), kh, kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gmat.T @ cols).reshape(w.shape)
        if not x.requires_grad:
            return None, gw
        # input gradient = full correlation of g with the flipped kernel
        fp = kh - 1 - padding
        gp = np.pad(g, ((0, 0), (0, 0), (fp, fp), (fp, fp))) if fp > 0 else g
        if fp < 0:
            gp = gp[:, :, -fp:fp or None, -fp:fp or None]
        gcols = _im2col(np.ascontiguousarray(gp), kh, kw)
        wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
        gx = (gcols @ wflip.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        return gx, gw

    return _record(np.ascontiguousarray(out), (x, w), bw, "conv2d")


def conv2d_direct(x: np.ndarray, w: np.ndarray, padding: int = 0) -> np.ndarray:
    """Loop-form reference convolution on raw arrays (no tape)."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, wd = xp.shape
    o, _, kh, kw = w.shape
    out = np.zeros((n, o, h - kh + 1, wd - kw + 1), dtype=DTYPE)
    for b in range(n):
        for k in range(o):
            for i in range(h - kh + 1):
                for j in range(wd - kw + 1):
                    out[b, k, i, j] = np.sum(xp[b, :, i:i + kh, j:j + kw] * w[k])
    return out


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2; odd trailing rows/cols are dropped."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"avg_pool2: input {x.shape} too small")
    src = x.shape
    core = x.data[:, :, :2 * h2, :2 * w2]
    out = core.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))

    def bw(g):
        full = np.zeros(src, dtype=DTYPE)
        full[:, :, :2 * h2, :2 * w2] = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
        return (full,)

    return _record(out, (x,), bw, "avg_pool2")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the trailing spatial axes of ``[N,C,H,W]``; 2-D input passes through."""
    if x.data.ndim == 2:
        return x
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# probability


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row softmax of ``x / temperature`` along the last axis, max-shifted."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / temperature,)

    return _record(p, (x,), bw, "softmax")


def log_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _record(out, (x,), bw, "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    onehot = np.zeros(logits.shape, dtype=DTYPE)
    onehot[np.arange(labels.size), labels] = 1.0
    lp = log_softmax(logits)
    return scale(sum_all(mul(lp, Tensor(onehot))), -1.0 / labels.size)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=DTYPE)
