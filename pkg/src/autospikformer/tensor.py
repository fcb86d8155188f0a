"""Minimal numpy tensor with reverse-mode autodiff.

Only the primitives the spiking transformer needs are provided: broadcasting
arithmetic, (batched) matmul, linear, conv2d (cross-correlation), max-pool,
batch normalization, reductions, reshapes, parameter slicing and a softmax
cross-entropy.  The fused LIF primitive lives in :mod:`autospikformer.neuron`
and plugs into the same graph through :func:`make_node`.

Tensors hold float32 data by default.  Every op output is checked for
non-finite values and raises :class:`NonFiniteError` instead of propagating
NaN/Inf.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Rng:
    """Seeded random stream backed by numpy's PCG64 bit generator.

    PCG64 (O'Neill's permuted congruential generator, 128-bit state, XSL-RR
    output) seeded through ``numpy.random.SeedSequence`` is specified
    bit-for-bit by numpy, so a seed yields the same stream on every platform.
    Child streams are derived with :meth:`child`, which extends the seed
    sequence's spawn key; they never overlap the parent stream.
    """

    algorithm = "numpy.PCG64/SeedSequence"

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def choice(self, seq):
        """Uniform pick from a non-empty sequence."""
        return seq[int(self.gen.integers(len(seq)))]

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)


class Tensor:
    """Dense array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name!r}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_node(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    """Wrap an op result; record the graph edge when any parent needs grad."""
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    out.data = data
    out.grad = None
    out.name = ""
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from a scalar ``loss``.

    Gradients accumulate into leaves; interior nodes are released afterwards so
    the graph can be garbage collected.
    """
    if loss.data.size != 1:
        raise ShapeError("backward requires a scalar loss")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(node.data.dtype) if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x[..., in] @ w[out, in].T + b[out]``."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear expects last dim {w.shape[1]}, got {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[1])
    out = x2 @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w.data).reshape(x.shape)
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_node(out.reshape(*lead, w.shape[0]), parents, bw)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.data.dtype),)

    return make_node(np.asarray(out, dtype=x.data.dtype), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return make_node(out, (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return make_node(np.transpose(x.data, axes), (x,), bw)


def take(p: Tensor, sizes: Sequence[int], mask: np.ndarray | None = None) -> Tensor:
    """Leading slice ``p[:s0, :s1, ...]`` of a parameter.

    When ``mask`` (same shape as ``p``) is given, the sliced region is flagged
    in it during backward so an optimizer can restrict its update to elements
    that were actually used.
    """
    if len(sizes) != p.ndim or any(s > n for s, n in zip(sizes, p.shape)):
        raise ShapeError(f"slice {tuple(sizes)} exceeds parameter {p.shape}")
    region = tuple(slice(0, s) for s in sizes)
    out = p.data[region]

    def bw(g):
        full = np.zeros_like(p.data)
        full[region] = g
        if mask is not None:
            mask[region] = True
        return (full,)

    return make_node(out, (p,), bw)


def _pad_hw(x: np.ndarray, padding: int, value=0.0) -> np.ndarray:
    if padding == 0:
        return x
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    return np.pad(x, pad, constant_values=value)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integer conv output size for input {size}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    return span // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[B, C, Hp, Wp] -> view [B, C, Ho, Wo, kh, kw]."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding, no bias."""
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = w.shape
    if Cin != C:
        raise ShapeError(f"conv2d expects {Cin} input channels, got {C}")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    xp = _pad_hw(x.data, padding)
    cols = _windows(xp, kh, kw, stride).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(B * Ho * Wo, C * kh * kw)
    wm = w.data.reshape(Cout, -1)
    out = (cols @ wm.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wm).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw

    return make_node(np.ascontiguousarray(out), (x, w), bw)


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    B, C, H, W = x.shape
    Ho = (H + 2 * padding - kernel) // stride + 1
    Wo = (W + 2 * padding - kernel) // stride + 1
    xp = _pad_hw(x.data, padding, value=-np.inf)
    win = _windows(xp, kernel, kernel, stride)[:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.data.dtype)
        di, dj = np.divmod(idx, kernel)
        bi, ci, hi, wi = np.indices(idx.shape)
        np.add.at(gxp, (bi, ci, hi * stride + di, wi * stride + dj), g)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return (gx,)

    return make_node(np.ascontiguousarray(out), (x,), bw)


class BatchNormState:
    """Running statistics for one BN layer.

    ``mean``/``var``/``count`` may be views into a larger (supernet) store, in
    which case updates land in the store.
    """

    def __init__(self, mean: np.ndarray, var: np.ndarray, count: np.ndarray):
        self.mean = mean
        self.var = var
        self.count = count

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels, DTYPE), np.ones(channels, DTYPE), np.zeros(channels, np.int64))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.mean.copy(), self.var.copy(), self.count.copy())

    def reset(self):
        self.mean[...] = 0.0
        self.var[...] = 1.0
        self.count[...] = 0


def batchnorm(
    x: Tensor,
    state: BatchNormState,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "train",
    axis: int = 1,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over every axis except ``axis``.

    mode ``train``: batch statistics, running stats updated with ``momentum``.
    mode ``eval``: running statistics.
    mode ``calibrate``: batch statistics, running stats replaced by the
    cumulative average over calibration batches; no graph is recorded.
    """
    if mode not in ("train", "eval", "calibrate"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    axis = axis % x.ndim
    C = x.shape[axis]
    if state.mean.shape != (C,) or gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm statistics do not match {C} channels")
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = C
    n = x.data.size // C

    if mode == "eval":
        mu = state.mean.astype(x.data.dtype)
        var = state.var.astype(x.data.dtype)
    else:
        mu = x.data.mean(axis=red)
        var = x.data.var(axis=red)
        unbiased = var * (n / max(n - 1, 1))
        if mode == "train":
            state.mean[...] = (1 - momentum) * state.mean + momentum * mu
            state.var[...] = (1 - momentum) * state.var + momentum * unbiased
        else:
            k = state.count.astype(np.float64)
            state.mean[...] = (state.mean * k + mu) / (k + 1)
            state.var[...] = (state.var * k + unbiased) / (k + 1)
            state.count[...] += 1

    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    if mode == "calibrate":
        return Tensor(out, dtype=x.data.dtype)

    def bw(g):
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gxhat = g * gamma.data.reshape(bshape)
        if mode == "eval":
            gx = gxhat * inv.reshape(bshape)
        else:
            gx = (inv.reshape(bshape) / n) * (
                n * gxhat
                - gxhat.sum(axis=red, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=red, keepdims=True)
            )
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits[B, K]`` against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    B = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(B), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return ((g / B) * p).astype(logits.data.dtype),

    return make_node(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def repeat_leading(x: Tensor, times: int) -> Tensor:
    """Stack ``times`` copies of ``x[B, ...]`` into ``[times * B, ...]``."""
    shape = x.shape
    out = np.broadcast_to(x.data[None], (times,) + shape).reshape((times * shape[0],) + shape[1:])

    def bw(g):
        return (g.reshape((times,) + shape).sum(axis=0),)

    return make_node(np.ascontiguousarray(out), (x,), bw)
