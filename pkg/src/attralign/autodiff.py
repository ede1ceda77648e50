"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors wrap numpy arrays and record the operations that produced them;
``backward()`` on a scalar result fills ``.grad`` on every reachable tensor
that requires gradients.  All math is float64.  Feature maps use two public
layouts:

* channels-first ``(C, H, W)`` / ``(B, C, H, W)`` -- the layout of the
  documented operations (`conv2d`, `global_pool`, `channel_pool`, ...);
* channels-last ``(B, H, W, C)`` -- the layout of the ``*_cl`` kernels the
  training engine uses, which keep im2col and pooling cache-friendly.

The channels-first operations are thin transpose wrappers around the same
kernels, so both layouts share one backward implementation.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

try:  # MKL gemm (via torch) beats OpenBLAS on large contractions here
    import torch as _torch

    _HAVE_TORCH = True
except ImportError:  # pragma: no cover - env without torch
    _torch = None
    _HAVE_TORCH = False

__all__ = [
    "Tensor",
    "no_grad",
    "scratch_buffers",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "softplus",
    "log",
    "absval",
    "powc",
    "sum_axes",
    "mean_all",
    "reshape",
    "moveaxis",
    "concat",
    "take_range",
    "matmul",
    "log_softmax",
    "conv2d",
    "conv2d_cl",
    "global_pool",
    "global_pool_cl",
    "channel_pool",
    "channel_pool_cl",
    "maxpool2x2_cl",
    "batchnorm_cl",
    "concat_channels",
    "broadcast_mul",
    "finite_diff_check",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure-numpy forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


# ---------------------------------------------------------------------------
# scratch arena: the training loop runs the same op sequence every episode,
# so large intermediates (im2col buffers, padded maps) are recycled by call
# order instead of hitting mmap/page-fault churn on every allocation.

class _Arena:
    def __init__(self):
        self.active = False
        self.bufs: list[np.ndarray] = []
        self.cursor = 0

    def reset(self):
        self.cursor = 0

    def get(self, shape) -> np.ndarray:
        if not self.active:
            return np.empty(shape)
        if self.cursor < len(self.bufs) and self.bufs[self.cursor].shape == tuple(shape):
            buf = self.bufs[self.cursor]
        else:
            buf = np.empty(shape)
            if self.cursor < len(self.bufs):
                self.bufs[self.cursor] = buf
            else:
                self.bufs.append(buf)
        self.cursor += 1
        return buf


_arena = _Arena()


@contextlib.contextmanager
def scratch_buffers():
    """Recycle large scratch arrays across iterations of a fixed op sequence.

    Only safe when each iteration's graph is discarded before the next one
    starts (the engine's per-episode loop).  Nest-free.
    """
    _arena.active = True
    try:
        yield _arena
    finally:
        _arena.active = False
        _arena.bufs.clear()
        _arena.cursor = 0


def _scratch(shape) -> np.ndarray:
    return _arena.get(shape)


# ---------------------------------------------------------------------------
# gemm dispatch: MKL (torch) wins when the contracted dimension is large,
# OpenBLAS (numpy) when it is small.  Threshold measured, not theoretical.

_GEMM_TORCH_MIN_K = 64


def _gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _HAVE_TORCH and a.shape[1] >= _GEMM_TORCH_MIN_K and a.size > 16384:
        return (_torch.from_numpy(a) @ _torch.from_numpy(b)).numpy()
    return a @ b


# ---------------------------------------------------------------------------


class Tensor:
    """Dense float64 array plus the graph edge that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction used by ops (no copy) ------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ---------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    # -- autodiff ----------------------------------------------------------
    def backward(self):
        """Reverse accumulation from a scalar-valued tensor."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar root, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------
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
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, powc(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return sum_axes(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (covers broadcast_mul)."""
    if isinstance(b, (int, float)):  # scalar fast path, no constant node
        a = _as_tensor(a)
        c = float(b)

        def backward_scalar(g):
            if a.requires_grad:
                a._accumulate(g * c)

        return Tensor._result(a.data * c, (a,), backward_scalar)

    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(data, (a, b), backward)


def broadcast_mul(a, b) -> Tensor:
    """Alias of `mul` for the attention-gating use ``map (x) features``.

    ``b`` must have extent 1 along every axis where the shapes differ.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == b.ndim:
        for ea, eb in zip(a.shape, b.shape):
            if ea != eb and 1 not in (ea, eb):
                raise ShapeError(
                    f"broadcast_mul: shapes {a.shape} and {b.shape} incompatible"
                )
    return mul(a, b)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (data > 0.0))

    return Tensor._result(data, (a,), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = _sigmoid(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return Tensor._result(data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    a = _as_tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * _sigmoid(x))

    return Tensor._result(data, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return Tensor._result(data, (a,), backward)


def absval(a) -> Tensor:
    a = _as_tensor(a)
    data = np.abs(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    return Tensor._result(data, (a,), backward)


def powc(a, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _as_tensor(a)
    p = float(p)
    data = a.data**p

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return Tensor._result(data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions / movement


def sum_axes(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        data = np.array(a.data.sum())

        def backward_all(g):
            if a.requires_grad:
                a._accumulate(np.broadcast_to(g, a.data.shape))

        return Tensor._result(data, (a,), backward_all)

    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if not keepdims:
                g = np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(g, a.data.shape))

    return Tensor._result(data, (a,), backward)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    return mul(sum_axes(a), 1.0 / a.size)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return Tensor._result(data, (a,), backward)


def moveaxis(a, src, dst) -> Tensor:
    a = _as_tensor(a)
    data = np.ascontiguousarray(np.moveaxis(a.data, src, dst))

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.moveaxis(g, dst, src))

    return Tensor._result(data, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._result(data, tuple(tensors), backward)


def take_range(a, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice along one axis (gradient scattered back)."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = np.ascontiguousarray(a.data[idx])

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[idx] += g

    return Tensor._result(data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    data = _gemm(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_gemm(g, b.data.T.copy()))
        if b.requires_grad:
            b._accumulate(_gemm(a.data.T.copy(), g))

    return Tensor._result(data, (a, b), backward)


# ---------------------------------------------------------------------------
# softmax


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis, max-subtracted for stability."""
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    data = z - lse

    def backward(g):
        if a.requires_grad:
            a._accumulate(g - np.exp(data) * g.sum(axis=-1, keepdims=True))

    return Tensor._result(data, (a,), backward)


# ---------------------------------------------------------------------------
# convolution (channels-last kernel + channels-first wrapper)


def _im2col_cl(x: np.ndarray, k: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Patch matrix of a (B,H,W,C) array: rows (b,y,x), columns (i,j,c)."""
    B, H, W, C = x.shape
    if pad:
        xp = _scratch((B, H + 2 * pad, W + 2 * pad, C))
        xp[:, :pad, :, :] = 0.0
        xp[:, H + pad :, :, :] = 0.0
        xp[:, pad : H + pad, :pad, :] = 0.0
        xp[:, pad : H + pad, W + pad :, :] = 0.0
        xp[:, pad : H + pad, pad : W + pad, :] = x
    else:
        xp = x
    Ho = H + 2 * pad - k + 1
    Wo = W + 2 * pad - k + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {k} with pad {pad} exceeds input {H}x{W}")
    cols = _scratch((B, Ho, Wo, k, k, C))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + Ho, j : j + Wo, :]
    return cols.reshape(B * Ho * Wo, k * k * C), Ho, Wo


def _conv_fwd_cl(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, pad: int):
    B = x.shape[0]
    O, C, k, _ = w.shape
    cols, Ho, Wo = _im2col_cl(x, k, pad)
    wmat = w.transpose(2, 3, 1, 0).reshape(k * k * C, O)
    out = _gemm(cols, np.ascontiguousarray(wmat))
    if b is not None:
        out += b
    return out.reshape(B, Ho, Wo, O), cols


def conv2d_cl(x, w, b=None, pad: int = 0) -> Tensor:
    """2-D cross-correlation, zero padded: (B,H,W,C) -> (B,Ho,Wo,O).

    ``w`` is (O, C, k, k) with k odd; ``b`` is (O,) or None.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    b = _as_tensor(b) if b is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input/weight, got {x.shape}, {w.shape}")
    O, Cw, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if x.shape[3] != Cw:
        raise ShapeError(
            f"conv2d: input has {x.shape[3]} channels but weight expects {Cw}"
        )
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({O},)")
    data, cols = _conv_fwd_cl(x.data, w.data, None if b is None else b.data, pad)
    B, Ho, Wo, _ = data.shape

    def backward(g):
        gmat = g.reshape(-1, O)
        if w.requires_grad:
            gw = _gemm(cols.T, gmat)  # (k*k*C, O)
            w._accumulate(gw.reshape(k, k, Cw, O).transpose(3, 2, 0, 1))
        if b is not None and b.requires_grad:
            b._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            # input gradient = convolution of g with the flipped, in/out-swapped
            # kernel at complementary padding (stride is always 1 here)
            wswap = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _conv_fwd_cl(np.ascontiguousarray(g), wswap, None, k - 1 - pad)
            x._accumulate(gx)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(data, parents, backward)


def conv2d(x, w, b=None, pad: int = 0) -> Tensor:
    """Channels-first convolution: (C,H,W) or (B,C,H,W) input, (O,C,k,k) weight."""
    x = _as_tensor(x)
    if x.ndim == 3:
        y = conv2d_cl(moveaxis(reshape(x, (1, *x.shape)), 1, 3), w, b, pad)
        y = moveaxis(y, 3, 1)
        return reshape(y, y.shape[1:])
    if x.ndim == 4:
        return moveaxis(conv2d_cl(moveaxis(x, 1, 3), w, b, pad), 3, 1)
    raise ShapeError(f"conv2d: expected 3-d or 4-d input, got {x.shape}")


# ---------------------------------------------------------------------------
# pooling


def global_pool_cl(x, mode: str) -> Tensor:
    """(B,H,W,C) -> (B,1,1,C); max ties go to the first position row-major."""
    x = _as_tensor(x)
    B, H, W, C = x.shape
    flat = x.data.reshape(B, H * W, C)
    if mode == "avg":
        data = flat.mean(axis=1).reshape(B, 1, 1, C)

        def backward_avg(g):
            if x.requires_grad:
                x._accumulate(
                    np.broadcast_to(g / (H * W), (B, H, W, C)).reshape(x.data.shape)
                )

        return Tensor._result(data, (x,), backward_avg)
    if mode == "max":
        arg = flat.argmax(axis=1)  # first max, row-major over (H, W)
        data = np.take_along_axis(flat, arg[:, None, :], axis=1).reshape(B, 1, 1, C)

        def backward_max(g):
            if x.requires_grad:
                gx = np.zeros((B, H * W, C))
                np.put_along_axis(gx, arg[:, None, :], g.reshape(B, 1, C), axis=1)
                x._accumulate(gx.reshape(B, H, W, C))

        return Tensor._result(data, (x,), backward_max)
    raise ValueError(f"global_pool: unknown mode {mode!r}")


def global_pool(x, mode: str) -> Tensor:
    """(C,H,W) or (B,C,H,W) -> per-channel max/avg over the spatial grid."""
    x = _as_tensor(x)
    if x.ndim == 3:
        y = global_pool_cl(moveaxis(reshape(x, (1, *x.shape)), 1, 3), mode)
        return reshape(y, (x.shape[0], 1, 1))
    if x.ndim == 4:
        return moveaxis(global_pool_cl(moveaxis(x, 1, 3), mode), 3, 1)
    raise ShapeError(f"global_pool: expected 3-d or 4-d input, got {x.shape}")


def channel_pool_cl(x, mode: str) -> Tensor:
    """(B,H,W,C) -> (B,H,W,1); max ties go to the lowest channel index."""
    x = _as_tensor(x)
    if mode == "avg":
        data = x.data.mean(axis=3, keepdims=True)
        C = x.shape[3]

        def backward_avg(g):
            if x.requires_grad:
                x._accumulate(np.broadcast_to(g / C, x.data.shape))

        return Tensor._result(data, (x,), backward_avg)
    if mode == "max":
        arg = x.data.argmax(axis=3)
        data = np.take_along_axis(x.data, arg[..., None], axis=3)

        def backward_max(g):
            if x.requires_grad:
                gx = np.zeros_like(x.data)
                np.put_along_axis(gx, arg[..., None], g, axis=3)
                x._accumulate(gx)

        return Tensor._result(data, (x,), backward_max)
    raise ValueError(f"channel_pool: unknown mode {mode!r}")


def channel_pool(x, mode: str) -> Tensor:
    """(C,H,W) or (B,C,H,W) -> per-position max/avg across channels."""
    x = _as_tensor(x)
    if x.ndim == 3:
        y = channel_pool_cl(moveaxis(reshape(x, (1, *x.shape)), 1, 3), mode)
        return reshape(y, (1, x.shape[1], x.shape[2]))
    if x.ndim == 4:
        return moveaxis(channel_pool_cl(moveaxis(x, 1, 3), mode), 3, 1)
    raise ShapeError(f"channel_pool: expected 3-d or 4-d input, got {x.shape}")


def maxpool2x2_cl(x) -> Tensor:
    """2x2 max pooling with stride 2 on (B,H,W,C); H and W must be even."""
    x = _as_tensor(x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2x2: spatial extents must be even, got {H}x{W}")
    win = x.data.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
    win = win.reshape(B, H // 2, W // 2, 4, C)
    arg = win.argmax(axis=3)  # first max in (di, dj) row-major order
    data = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(g):
        if x.requires_grad:
            gw = np.zeros((B, H // 2, W // 2, 4, C))
            np.put_along_axis(gw, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
            gx = gw.reshape(B, H // 2, W // 2, 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
            x._accumulate(np.ascontiguousarray(gx).reshape(B, H, W, C))

    return Tensor._result(np.ascontiguousarray(data), (x,), backward)


# ---------------------------------------------------------------------------
# batch normalization (fused: composite-of-primitives would cost ~5x the
# memory traffic, which dominates on this workload)


def batchnorm_cl(
    x,
    gamma,
    beta,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm on (B,H,W,C).

    Training mode normalizes with batch statistics (and updates the running
    buffers in place when given); eval mode uses the running buffers.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    B, H, W, C = x.shape
    n = B * H * W
    if training:
        mu = x.data.mean(axis=(0, 1, 2))
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 1, 2))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            unbiased = var * (n / max(n - 1, 1))
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        data = xhat * gamma.data + beta.data

        def backward_train(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 1, 2)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 1, 2)))
            if x.requires_grad:
                gxh = g * gamma.data
                m1 = gxh.mean(axis=(0, 1, 2))
                m2 = (gxh * xhat).mean(axis=(0, 1, 2))
                x._accumulate(inv * (gxh - m1 - xhat * m2))

        return Tensor._result(data, (x, gamma, beta), backward_train)

    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * inv
    data = xhat * gamma.data + beta.data

    def backward_eval(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 1, 2)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            x._accumulate(g * (gamma.data * inv))

    return Tensor._result(data, (x, gamma, beta), backward_eval)


# ---------------------------------------------------------------------------
# channel concatenation (channels-first public name)


def concat_channels(a, b) -> Tensor:
    """Stack (C1,H,W) and (C2,H,W) -> (C1+C2,H,W); spatial extents must match."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(
            f"concat_channels: spatial extents differ, {a.shape} vs {b.shape}"
        )
    return concat([a, b], axis=0)


# ---------------------------------------------------------------------------
# finite-difference gradient verification


def finite_diff_check(
    f: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    eps: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backward() gradients and central differences.

    ``f`` must be a pure scalar-valued function of the given tensors.  The
    relative error denominator is max(|analytic|, |numeric|, 1e-8) per
    element.  ``max_elements`` caps how many coordinates are probed per input
    (random subset) to keep large checks affordable.

    Central differences are invalid when the +/-eps probes straddle a
    piecewise-linear kink (ReLU zero, max-pool argmax switch), so elements
    whose first estimate disagrees are re-probed at smaller steps; a wrong
    analytic gradient disagrees at every step size and still fails.
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
        t.requires_grad = True
    out = f(*inputs)
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(*inputs).item()
        flat[i] = orig - step
        fm = f(*inputs).item()
        flat[i] = orig
        return (fp - fm) / (2.0 * step)

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(flat.size, size=max_elements, replace=False)
        for i in idxs:
            a = ga.reshape(-1)[i]
            err = np.inf
            for step in (eps, eps / 8.0, eps / 64.0):
                numeric = central(flat, i, step)
                err = min(err, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
                if err < 1e-6:
                    break
            worst = max(worst, err)
    return worst
