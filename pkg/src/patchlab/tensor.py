"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

A `Tensor` wraps a contiguous float64 array plus an optional gradient. Ops
record parent links and a backward closure; `Tensor.backward()` topologically
sorts the recorded graph and visits each node exactly once, accumulating
gradients into every `requires_grad` participant. The graph is append-only
and confined to one thread; tensors are value-like once created (only
`grad` mutates, via accumulation).

Broadcasting is deliberately restricted to scalar-vs-tensor and equal
shapes. Everything is double precision so finite-difference checks have
headroom.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import kernels

Scalar = Union[int, float]


class Tensor:
    """Dense float64 array with optional participation in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Constant copy, off the tape."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requires_grad ancestor.

        Repeated calls keep accumulating until grads are zeroed.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss is not on the tape (no requires_grad inputs)")

        # iterative postorder DFS; every op appears after all its inputs
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ---- operator sugar -------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def sqrt(self):
        return sqrt(self)

    def log(self):
        return log(self)

    def clamp(self, lo: float, hi: float):
        return clamp(self, lo, hi)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def max(self):
        return reduce_max(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def take(self, flat_indices):
        return take_flat(self, flat_indices)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_shapes(a: Tensor, b: Tensor):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(
        f"shapes {a.shape} and {b.shape} are not combinable "
        f"(only scalar and equal-shape broadcasting is supported)"
    )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else np.broadcast_to(g, shape).copy()


# ---- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_shapes(a, b)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_shapes(a, b)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_shapes(a, b)

    def bw(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0

    def bw(g):
        a._accumulate(g * mask)

    return _node(a.data * mask, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    # branch on sign to avoid exp overflow
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        a._accumulate(g * s * (1.0 - s))

    return _node(s, (a,), bw)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    r = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * 0.5 / r)

    return _node(r, (a,), bw)


def log(a) -> Tensor:
    a = _coerce(a)

    def bw(g):
        a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), bw)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is identity inside the bounds, zero outside."""
    a = _coerce(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        a._accumulate(g * mask)

    return _node(np.clip(a.data, lo, hi), (a,), bw)


# ---- reductions -----------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).copy()


def reduce_sum(a, axis=None) -> Tensor:
    a = _coerce(a)
    if a.size == 0:
        raise ValueError("sum over an empty tensor")

    def bw(g):
        a._accumulate(_expand_reduced(g, a.shape, axis))

    return _node(np.sum(a.data, axis=axis), (a,), bw)


def reduce_mean(a, axis=None) -> Tensor:
    a = _coerce(a)
    if a.size == 0:
        raise ValueError("mean over an empty tensor")
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]))

    def bw(g):
        a._accumulate(_expand_reduced(g, a.shape, axis) / n)

    return _node(np.mean(a.data, axis=axis), (a,), bw)


def reduce_max(a) -> Tensor:
    """Full max reduction; ties route the gradient to the lowest flat index."""
    a = _coerce(a)
    if a.size == 0:
        raise ValueError("max over an empty tensor")
    flat_idx = int(np.argmax(a.data))

    def bw(g):
        z = np.zeros_like(a.data)
        z.reshape(-1)[flat_idx] = float(np.asarray(g).reshape(-1)[0])
        a._accumulate(z)

    return _node(np.asarray(a.data.reshape(-1)[flat_idx]), (a,), bw)


# ---- shape plumbing --------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), bw)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        a._accumulate(np.transpose(g, inv))

    return _node(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bw)


def getitem(a, idx) -> Tensor:
    """Basic indexing (ints, slices, ellipsis) with gradient scatter-back."""
    a = _coerce(a)

    def bw(g):
        z = np.zeros_like(a.data)
        z[idx] = g
        a._accumulate(z)

    return _node(a.data[idx].copy(), (a,), bw)


def take_flat(a, flat_indices) -> Tensor:
    """Gather from the raveled tensor; repeated indices accumulate on backward."""
    a = _coerce(a)
    flat_indices = np.asarray(flat_indices, dtype=np.int64)

    def bw(g):
        z = np.zeros(a.size)
        np.add.at(z, flat_indices, g.reshape(-1))
        a._accumulate(z.reshape(a.shape))

    return _node(a.data.reshape(-1)[flat_indices].copy(), (a,), bw)


def embed(a, out_hw: tuple, y0: int, x0: int) -> Tensor:
    """Paste a [C,h,w] tensor into a zero [C,H,W] canvas at (y0, x0)."""
    a = _coerce(a)
    c, h, w = a.shape
    big_h, big_w = out_hw
    if y0 < 0 or x0 < 0 or y0 + h > big_h or x0 + w > big_w:
        raise ValueError(f"embed region [{y0}:{y0 + h}, {x0}:{x0 + w}] outside canvas {out_hw}")
    canvas = np.zeros((c, big_h, big_w))
    canvas[:, y0 : y0 + h, x0 : x0 + w] = a.data

    def bw(g):
        a._accumulate(g[:, y0 : y0 + h, x0 : x0 + w].copy())

    return _node(canvas, (a,), bw)


# ---- conv / sampling -------------------------------------------------------


def conv2d(x, weight, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [N,C,H,W] with [K,C,kh,kw]; differentiable in
    input, kernel, and bias."""
    x, weight = _coerce(x), _coerce(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input/kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, ck, kh, kw = weight.shape
    if ck != c:
        raise ValueError(f"kernel channels {ck} != input channels {c}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"bias shape {bias.shape} != ({k},)")

    y = kernels.conv2d_forward(x.data, weight.data, stride, pad)
    parents = [x, weight]
    if bias is not None:
        y = y + bias.data.reshape(1, k, 1, 1)
        parents.append(bias)

    def bw(g):
        g = np.ascontiguousarray(g)
        x._accumulate(kernels.conv2d_grad_input(g, weight.data, stride, pad, h, w))
        weight._accumulate(kernels.conv2d_grad_kernel(g, x.data, stride, pad, kh, kw))
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return _node(y, parents, bw)


def bilinear_sample(img, grid) -> Tensor:
    """Sample [C,H,W] at grid [H',W',2] of normalized (x, y) in [-1, 1].

    Grid corners map to texel centers (align-corners); reads outside the
    image are zero. Differentiable w.r.t. the image only; the grid is a
    constant.
    """
    img = _coerce(img)
    grid = np.ascontiguousarray(np.asarray(grid, dtype=np.float64))
    if img.ndim != 3 or grid.ndim != 3 or grid.shape[-1] != 2:
        raise ValueError(f"bilinear_sample expects [C,H,W] and [H',W',2], got {img.shape} and {grid.shape}")
    c, h, w = img.shape

    def bw(g):
        img._accumulate(kernels.bilinear_grad_input(grid, np.ascontiguousarray(g), h, w))

    return _node(kernels.bilinear_forward(img.data, grid), (img,), bw)
