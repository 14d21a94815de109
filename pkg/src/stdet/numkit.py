"""Minimal differentiable tensor kernel.

A :class:`Tensor` wraps a numpy array and, when it was produced by one of the
ops below, remembers its parents plus a closure that pushes the output
gradient back to them. :meth:`Tensor.backward` walks that graph once in
reverse topological order. Leaf :class:`Parameter` gradients *accumulate*
across calls; clear them with :func:`zero_grad`.

All spatial ops use NCHW layout.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as K

DEFAULT_DTYPE = np.float64 if os.environ.get("STDET_FLOAT64", "") == "1" else np.float32


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where it must not."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.size == 0:
            raise ShapeError(f"zero-extent tensor of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this tensor (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # interior gradients are per-call; leaves keep accumulating
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A named leaf tensor whose gradient is allocated (as zeros) up front."""

    __slots__ = ()

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.grad = np.zeros_like(self.data)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1,) * like.ndim, x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad.fill(0.0)


def _need(t: Tensor) -> bool:
    return t.requires_grad


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {wcin}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    xd = x.data
    if weight.dtype != xd.dtype:
        xd = xd.astype(weight.dtype)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    xp = np.ascontiguousarray(xp)
    ho, wo = conv_out_size(h, kh, stride, padding), conv_out_size(w, kw, stride, padding)
    cols = K.im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(cout, -1)
    out2 = cols @ wmat.T
    if bias is not None:
        out2 += bias.data
    out = out2.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    padded_shape = xp.shape

    def backward(g: np.ndarray) -> None:
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if _need(weight):
            weight._accumulate((g2.T @ cols).reshape(weight.shape))
        if bias is not None and _need(bias):
            bias._accumulate(g2.sum(axis=0))
        if _need(x):
            dxp = K.col2im(g2 @ wmat, padded_shape, kh, kw, stride)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _make(out, parents, backward)


def pool2d(x: Tensor, mode: str = "max", window: int = 2, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects NCHW input, got {x.shape}")
    b, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ShapeError("window and stride must be positive")
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds spatial extent {h}x{w}")
    shape = x.shape
    if mode == "max":
        out, arg = K.maxpool_forward(np.ascontiguousarray(x.data), window, stride)

        def backward(g):
            x._accumulate(K.maxpool_backward(g, arg, shape, window, stride))

    elif mode == "avg":
        cols = K.im2col(np.ascontiguousarray(x.data.reshape(b * c, 1, h, w)), window, window, stride)
        ho, wo = conv_out_size(h, window, stride, 0), conv_out_size(w, window, stride, 0)
        out = cols.mean(axis=1).reshape(b, c, ho, wo)
        inv = 1.0 / (window * window)

        def backward(g):
            gcols = np.repeat(g.reshape(-1, 1) * inv, window * window, axis=1)
            x._accumulate(K.col2im(gcols, (b * c, 1, h, w), window, window, stride).reshape(shape))

    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return _make(out, [x], backward)


def _first_argmax_mask(a: np.ndarray, axis) -> np.ndarray:
    """One-hot mask of the first maximum along ``axis`` (tuple of axes allowed)."""
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    moved = np.moveaxis(a, axes, tuple(range(a.ndim - len(axes), a.ndim)))
    lead = moved.shape[: a.ndim - len(axes)]
    flat = moved.reshape(*lead, -1)
    idx = flat.argmax(axis=-1)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    mask = mask.reshape(moved.shape)
    return np.moveaxis(mask, tuple(range(a.ndim - len(axes), a.ndim)), axes)


def global_pool(x: Tensor, mode: str = "avg") -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_pool expects NCHW input, got {x.shape}")
    b, c, h, w = x.shape
    if mode == "avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def backward(g):
            x._accumulate(np.broadcast_to(g / (h * w), x.shape))

    elif mode == "max":
        out = x.data.max(axis=(2, 3), keepdims=True)

        def backward(g):
            x._accumulate(_first_argmax_mask(x.data, (2, 3)) * g)

    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return _make(out, [x], backward)


def channel_reduce(x: Tensor, mode: str = "avg") -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"channel_reduce expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if mode == "avg":
        out = x.data.mean(axis=1, keepdims=True)

        def backward(g):
            x._accumulate(np.broadcast_to(g / c, x.shape))

    elif mode == "max":
        out = x.data.max(axis=1, keepdims=True)

        def backward(g):
            x._accumulate(_first_argmax_mask(x.data, 1) * g)

    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return _make(out, [x], backward)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(z))
    r = 1.0 / (1.0 + e)
    return np.where(z >= 0, r, e * r)


sigmoid_np = _sigmoid

ACTIVATIONS = ("sigmoid", "tanh", "silu", "relu", "leaky_relu")


def activation(x: Tensor, kind: str) -> Tensor:
    z = x.data
    if kind == "sigmoid":
        y = _sigmoid(z)
        d = lambda: y * (1.0 - y)  # noqa: E731
    elif kind == "tanh":
        y = np.tanh(z)
        d = lambda: 1.0 - y * y  # noqa: E731
    elif kind == "silu":
        s = _sigmoid(z)
        y = z * s
        d = lambda: s * (1.0 + z * (1.0 - s))  # noqa: E731
    elif kind == "relu":
        y = np.maximum(z, 0.0)
        d = lambda: (z > 0).astype(z.dtype)  # noqa: E731
    elif kind == "leaky_relu":
        y = np.where(z > 0, z, 0.1 * z)
        d = lambda: np.where(z > 0, 1.0, 0.1).astype(z.dtype)  # noqa: E731
    else:
        raise ValueError(f"unknown activation {kind!r}")

    def backward(g):
        x._accumulate(g * d())

    return _make(y, [x], backward)


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        if _need(a):
            a._accumulate(_unbroadcast(g, a.shape))
        if _need(b):
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, [a, b], backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        if _need(a):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if _need(b):
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, [a, b], backward)


def scale(a: Tensor, k: float) -> Tensor:
    def backward(g):
        a._accumulate(g * k)

    return _make(a.data * k, [a], backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias ``(C,)`` to an NCHW tensor."""
    if bias.shape != (x.shape[1],):
        raise ShapeError(f"bias {bias.shape} does not match {x.shape[1]} channels")
    out = x.data + bias.data[None, :, None, None]

    def backward(g):
        if _need(x):
            x._accumulate(g)
        if _need(bias):
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return _make(out, [x, bias], backward)


def group_norm(x: Tensor, weight: Tensor, bias: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over channel groups of an NCHW tensor, then a per-channel affine."""
    b, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"{c} channels do not split into {groups} groups")
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"affine params {weight.shape}/{bias.shape} do not match {c} channels")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    out = xhat * weight.data[None, :, None, None] + bias.data[None, :, None, None]

    def backward(g):
        if _need(weight):
            weight._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if _need(bias):
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if _need(x):
            d = (g * weight.data[None, :, None, None]).reshape(b, groups, -1)
            xh = xhat.reshape(b, groups, -1)
            dx = inv * (d - d.mean(axis=2, keepdims=True) - xh * (d * xh).mean(axis=2, keepdims=True))
            x._accumulate(dx.reshape(x.shape).astype(x.dtype, copy=False))

    return _make(out.astype(x.dtype, copy=False), [x, weight, bias], backward)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear inner dimension mismatch: {x.shape[1]} vs {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if _need(x):
            x._accumulate(g @ weight.data)
        if _need(weight):
            weight._accumulate(g.T @ x.data)
        if bias is not None and _need(bias):
            bias._accumulate(g.sum(axis=0))

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape

    def backward(g):
        x._accumulate(g.reshape(src))

    return _make(x.data.reshape(shape), [x], backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample expects NCHW input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = x.shape

    def backward(g):
        x._accumulate(g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out, [x], backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if _need(t):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out, list(tensors), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels needs matching B,H,W: {a.shape} vs {b.shape}")
    return concat([a, b], axis=1)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to extent {x.shape[axis]}")
    outs = []
    lo = 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(lo, lo + n)
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros_like(x.data)
            full[idx] = g
            x._accumulate(full)

        outs.append(_make(np.ascontiguousarray(x.data[idx]), [x], backward))
        lo += n
    return outs


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g.reshape(()), x.shape))

    return _make(np.asarray(x.data.sum()).reshape(()), [x], backward)


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               max_elements: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` may return any tensor; it is reduced with a sum. Inputs
    must be float64. The error per element is
    ``|a - n| / max(1, |a|, |n|)``. With ``max_elements`` set, only that
    many coordinates, drawn uniformly over all inputs, are probed.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")
        if not t.is_finite():
            raise NonFiniteError(f"non-finite input {t!r}")
        t.requires_grad = True
        t.grad = None

    def value() -> float:
        v = float(np.sum(fn(*inputs).data))
        if not np.isfinite(v):
            raise NonFiniteError("closure produced a non-finite value")
        return v

    out = fn(*inputs)
    if not out.is_finite():
        raise NonFiniteError("closure produced non-finite output")
    sum_all(out).backward()
    analytic = []
    for t in inputs:
        a = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if not np.isfinite(a).all():
            raise NonFiniteError(f"non-finite analytic gradient for {t!r}")
        analytic.append(a.reshape(-1))
    coords = [(k, i) for k, t in enumerate(inputs) for i in range(t.data.size)]
    if max_elements is not None and len(coords) > max_elements:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = [coords[j] for j in sorted(rng.choice(len(coords), max_elements, replace=False))]
    worst = 0.0
    for k, i in coords:
        flat = inputs[k].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        up = value()
        flat[i] = orig - step
        down = value()
        flat[i] = orig
        num = (up - down) / (2.0 * step)
        a = analytic[k][i]
        worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
