"""Spiking transformer, its weight-entangled supernet, and subnet slicing.

Layout of one network (``e`` = embed dim, ``T`` = time-steps)::

    SPS    conv3x3-BN-LIF x4 (widths e//8, e//4, e//2, e; max-pool after the
           2nd and 4th stage), then a conv3x3-BN relative position stage whose
           output adds the stage input before its LIF.
    block  SSA:  q,k,v = LIF(BN(Linear(x)));  a = LIF(s * (q k^T) v) per head
                 x' = LIF(BN(Linear(a)) + x)
           MLP:  h = LIF(BN(Linear(x')));  out = LIF(BN(Linear(h)) + x')
    head   Linear on spikes averaged over tokens, then over time-steps.

Residual branches add into the pre-activation current of the next LIF, so
every inter-layer activation stays in {0, 1}.  Linear layers inside blocks
have no bias (BN follows each one); the head has one.

Supernet tensors are allocated at the largest dims of a search space.  A
candidate's layer ``k`` reads the leading slice ``[:out, :in]`` of block
``k``'s tensors; blocks at or past its depth are unused.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .neuron import FiringStats, LifParams, lif
from .space import CandidateArch, SearchSpace, validate
from .tensor import BatchNormState, Rng, Tensor

ATTN_SCALE = 0.125
SPS_LIF = LifParams(u_th=1.0, tau=2.0)
DOWNSAMPLE = 4


class InvalidCandidateError(ValueError):
    pass


def sps_widths(embed_dim: int) -> list[int]:
    return [embed_dim // 8, embed_dim // 4, embed_dim // 2, embed_dim]


def token_count(height: int, width: int) -> int:
    """Tokens produced by SPS for an input of the given spatial size."""
    if height % DOWNSAMPLE or width % DOWNSAMPLE:
        raise tc.ShapeError(f"input {height}x{width} not divisible by {DOWNSAMPLE}")
    return (height // DOWNSAMPLE) * (width // DOWNSAMPLE)


def param_shapes(embed: int, hidden: int, depth: int, in_channels: int, num_classes: int) -> dict:
    """Name -> shape of every weight tensor at the given (maximal) dims."""
    shapes = {}
    w = sps_widths(embed)
    cin = in_channels
    for i, c in enumerate(w):
        shapes[f"sps.conv{i}.w"] = (c, cin, 3, 3)
        cin = c
    shapes["sps.rpe.w"] = (embed, embed, 3, 3)
    for k in range(depth):
        for n in ("q", "k", "v", "proj"):
            shapes[f"block{k}.{n}.w"] = (embed, embed)
        shapes[f"block{k}.fc1.w"] = (hidden, embed)
        shapes[f"block{k}.fc2.w"] = (embed, hidden)
    shapes["head.w"] = (num_classes, embed)
    shapes["head.b"] = (num_classes,)
    return shapes


def bn_channels(embed: int, hidden: int, depth: int) -> dict:
    out = {f"sps.bn{i}": c for i, c in enumerate(sps_widths(embed))}
    out["sps.rpe.bn"] = embed
    for k in range(depth):
        for n in ("q", "k", "v", "proj", "fc2"):
            out[f"block{k}.{n}.bn"] = embed
        out[f"block{k}.fc1.bn"] = hidden
    return out


def _init_weight(rng: Rng, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(tc.DTYPE)


class Supernet:
    """Weight store at the maximal dims of ``space``."""

    def __init__(self, space: SearchSpace, in_channels: int = 3, num_classes: int = 10, seed: int = 0):
        self.space = space
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.seed = seed
        rng = Rng(seed, (0x5EED,))
        embed, hidden, depth = space.max_embed, space.max_hidden, space.max_depth
        self.params: dict[str, Tensor] = {}
        for name, shape in param_shapes(embed, hidden, depth, in_channels, num_classes).items():
            data = np.zeros(shape, tc.DTYPE) if name == "head.b" else _init_weight(rng, shape)
            self.params[name] = tc.parameter(data, name)
        self.bn: dict[str, BatchNormState] = {}
        for name, c in bn_channels(embed, hidden, depth).items():
            self.params[f"{name}.gamma"] = tc.parameter(np.ones(c, tc.DTYPE), f"{name}.gamma")
            self.params[f"{name}.beta"] = tc.parameter(np.zeros(c, tc.DTYPE), f"{name}.beta")
            self.bn[name] = BatchNormState.fresh(c)
        self.masks = {n: np.zeros(p.shape, bool) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
        for m in self.masks.values():
            m[...] = False

    def bn_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.mean
            out[f"{name}.running_var"] = st.var
            out[f"{name}.count"] = st.count
        return out


@dataclass
class LayerTrace:
    """Input spike statistics per layer id, accumulated over forward passes."""

    stats: dict

    @classmethod
    def empty(cls) -> "LayerTrace":
        return cls({})

    def add(self, layer_id: str, spikes: np.ndarray):
        self.stats[layer_id] = self.stats.get(layer_id, FiringStats()) + FiringStats.of(spikes)

    def merge(self, other: "LayerTrace"):
        for k, v in other.stats.items():
            self.stats[k] = self.stats.get(k, FiringStats()) + v

    def fr(self) -> dict[str, float]:
        return {k: v.fr for k, v in self.stats.items()}

    def overall(self) -> float:
        """Firing rate pooled over every recorded layer."""
        total = FiringStats()
        for v in self.stats.values():
            total = total + v
        return total.fr


class SpikingTransformer:
    """Executable network for one architecture.

    Subclasses decide where weights come from; the forward pass is shared.
    ``mode`` selects BN behaviour (train/eval/calibrate).  ``smooth`` swaps
    hard spikes for the surrogate ramp (gradient checks only).
    """

    def __init__(self, arch: CandidateArch, in_channels: int, num_classes: int):
        self.arch = arch
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.mode = "eval"
        self.smooth = False
        self._block_lif = [
            LifParams(u_th=float(u), tau=float(t))
            for u, t in zip(arch.u_th_per_layer, arch.tau_per_layer)
        ]

    # weight access -------------------------------------------------------
    def weight(self, name: str, sizes) -> Tensor:
        raise NotImplementedError

    def bn_state(self, name: str, channels: int) -> BatchNormState:
        raise NotImplementedError

    def _bn(self, x: Tensor, name: str, axis: int) -> Tensor:
        c = x.shape[axis]
        return tc.batchnorm(
            x,
            self.bn_state(name, c),
            self.weight(f"{name}.gamma", (c,)),
            self.weight(f"{name}.beta", (c,)),
            mode=self.mode,
            axis=axis,
        )

    def _lif(self, x: Tensor, T: int, params: LifParams) -> Tensor:
        shape = x.shape
        y = lif(x.reshape((T, shape[0] // T) + shape[1:]), params, smooth=self.smooth)
        return y.reshape(shape)

    def block_lif(self, k: int) -> LifParams:
        return self._block_lif[k]

    # forward --------------------------------------------------------------
    def forward(self, images, time_step: int | None = None, trace: LayerTrace | None = None) -> Tensor:
        T = int(time_step if time_step is not None else self.arch.time_step)
        x = images if isinstance(images, Tensor) else Tensor(images)
        tokens = sps_forward(x, self, T, trace)
        for k in range(self.arch.depth):
            tokens = block_forward(tokens, self, k, T, trace)
        feats = rate_decode(tokens, T)
        if trace is not None:
            trace.add("head", tokens.data)
        e = self.arch.embed_dim
        return tc.linear(
            feats,
            self.weight("head.w", (self.num_classes, e)),
            self.weight("head.b", (self.num_classes,)),
        )

    __call__ = forward


def rate_decode(tokens: Tensor, T: int) -> Tensor:
    """``[T*B, N, E]`` spikes -> ``[B, E]``: mean over tokens, then time."""
    TB, N, E = tokens.shape
    per_step = tokens.mean(axis=1)
    return per_step.reshape(T, TB // T, E).mean(axis=0)


def sps_forward(images: Tensor, model: SpikingTransformer, T: int, trace: LayerTrace | None = None) -> Tensor:
    """Static images ``[B, C, H, W]`` -> spike tokens ``[T*B, N, E]``.

    The image is presented unchanged at every time-step; the first conv is
    evaluated once and its output replicated over time, which is identical to
    convolving each replicated frame.
    """
    B, C, H, W = images.shape
    token_count(H, W)
    e = model.arch.embed_dim
    widths = sps_widths(e)
    x = images
    cin = C
    for i, c in enumerate(widths):
        if i > 0 and trace is not None:
            trace.add(f"sps.conv{i}", x.data)
        x = tc.conv2d(x, model.weight(f"sps.conv{i}.w", (c, cin, 3, 3)), stride=1, padding=1)
        if i == 0:
            x = tc.repeat_leading(x, T)
        x = model._bn(x, f"sps.bn{i}", axis=1)
        x = model._lif(x, T, SPS_LIF)
        if i in (1, 3):
            x = tc.maxpool2d(x, 3, 2, 1)
        cin = c
    if trace is not None:
        trace.add("sps.rpe", x.data)
    r = tc.conv2d(x, model.weight("sps.rpe.w", (e, e, 3, 3)), stride=1, padding=1)
    r = model._bn(r, "sps.rpe.bn", axis=1) + x
    x = model._lif(r, T, SPS_LIF)
    TB, E, h, w = x.shape
    return x.reshape(TB, E, h * w).transpose(0, 2, 1)


def ssa_forward(x: Tensor, model: SpikingTransformer, k: int, T: int, trace: LayerTrace | None = None) -> Tensor:
    """Spiking self-attention of block ``k`` on ``x[T*B, N, E]`` spikes."""
    arch = model.arch
    e = arch.embed_dim
    heads = int(arch.head_num_per_layer[k])
    if e % heads:
        raise tc.ShapeError(f"embed_dim {e} not divisible by head_num {heads}")
    dh = e // heads
    p = model.block_lif(k)
    TB, N, _ = x.shape
    if trace is not None:
        for n in ("q", "k", "v"):
            trace.add(f"block{k}.{n}", x.data)

    def proj(name):
        y = tc.linear(x, model.weight(f"block{k}.{name}.w", (e, e)))
        y = model._bn(y, f"block{k}.{name}.bn", axis=-1)
        return model._lif(y, T, p)

    q, kk, v = proj("q"), proj("k"), proj("v")
    if trace is not None:
        for s in (q, kk, v):
            trace.add(f"block{k}.attn", s.data)

    def split(t):
        return t.reshape(TB, N, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(kk), split(v)
    att = tc.matmul(tc.matmul(qh, kh.transpose(0, 1, 3, 2)), vh) * ATTN_SCALE
    att = att.transpose(0, 2, 1, 3).reshape(TB, N, e)
    a = model._lif(att, T, p)
    if trace is not None:
        trace.add(f"block{k}.proj", a.data)
    o = tc.linear(a, model.weight(f"block{k}.proj.w", (e, e)))
    o = model._bn(o, f"block{k}.proj.bn", axis=-1) + x
    return model._lif(o, T, p)


def mlp_forward(x: Tensor, model: SpikingTransformer, k: int, T: int, trace: LayerTrace | None = None) -> Tensor:
    e = model.arch.embed_dim
    hd = model.arch.hidden_dims()[k]
    p = model.block_lif(k)
    if trace is not None:
        trace.add(f"block{k}.fc1", x.data)
    h = tc.linear(x, model.weight(f"block{k}.fc1.w", (hd, e)))
    h = model._lif(model._bn(h, f"block{k}.fc1.bn", axis=-1), T, p)
    if trace is not None:
        trace.add(f"block{k}.fc2", h.data)
    o = tc.linear(h, model.weight(f"block{k}.fc2.w", (e, hd)))
    o = model._bn(o, f"block{k}.fc2.bn", axis=-1) + x
    return model._lif(o, T, p)


def block_forward(x: Tensor, model: SpikingTransformer, k: int, T: int, trace: LayerTrace | None = None) -> Tensor:
    return mlp_forward(ssa_forward(x, model, k, T, trace), model, k, T, trace)


class Subnet(SpikingTransformer):
    """Candidate view over a supernet: every weight is a leading slice.

    BN running statistics are views into the supernet store unless the subnet
    owns private copies (after :meth:`detach_bn`).
    """

    def __init__(self, supernet: Supernet, arch: CandidateArch):
        super().__init__(arch, supernet.in_channels, supernet.num_classes)
        self.supernet = supernet
        self._private_bn: dict[str, BatchNormState] | None = None

    def weight(self, name, sizes):
        return tc.take(self.supernet.params[name], tuple(sizes), self.supernet.masks[name])

    def bn_state(self, name, channels):
        if self._private_bn is not None:
            return self._private_bn[name]
        st = self.supernet.bn[name]
        return BatchNormState(st.mean[:channels], st.var[:channels], st.count[:channels])

    def bn_sizes(self) -> dict[str, int]:
        a = self.arch
        sizes = {f"sps.bn{i}": c for i, c in enumerate(sps_widths(a.embed_dim))}
        sizes["sps.rpe.bn"] = a.embed_dim
        for k, hd in enumerate(a.hidden_dims()):
            for n in ("q", "k", "v", "proj", "fc2"):
                sizes[f"block{k}.{n}.bn"] = a.embed_dim
            sizes[f"block{k}.fc1.bn"] = hd
        return sizes

    def detach_bn(self) -> "Subnet":
        """Copy of this subnet owning private BN statistics (weights shared)."""
        other = Subnet(self.supernet, self.arch)
        other._private_bn = {
            name: BatchNormState(
                self.bn_state(name, c).mean.copy(),
                self.bn_state(name, c).var.copy(),
                self.bn_state(name, c).count.copy(),
            )
            for name, c in self.bn_sizes().items()
        }
        return other

    def bn_snapshot(self) -> dict[str, np.ndarray]:
        out = {}
        for name, c in self.bn_sizes().items():
            st = self.bn_state(name, c)
            out[f"{name}.mean"] = st.mean.copy()
            out[f"{name}.var"] = st.var.copy()
        return out


class StandaloneNet(SpikingTransformer):
    """Self-contained network with weights at exactly the candidate dims."""

    def __init__(self, arch: CandidateArch, params: dict[str, np.ndarray], bn: dict[str, BatchNormState],
                 in_channels: int, num_classes: int):
        super().__init__(arch, in_channels, num_classes)
        self.params = {n: tc.parameter(v.copy(), n) for n, v in params.items()}
        self.bn = {n: s.copy() for n, s in bn.items()}

    def weight(self, name, sizes):
        p = self.params[name]
        if p.shape != tuple(sizes):
            raise tc.ShapeError(f"{name}: stored {p.shape}, requested {tuple(sizes)}")
        return p

    def bn_state(self, name, channels):
        st = self.bn[name]
        if st.mean.shape != (channels,):
            raise tc.ShapeError(f"{name}: stored {st.mean.shape[0]} channels, requested {channels}")
        return st


def subnet_param_shapes(arch: CandidateArch, in_channels: int, num_classes: int) -> dict:
    e = arch.embed_dim
    shapes = {}
    cin = in_channels
    for i, c in enumerate(sps_widths(e)):
        shapes[f"sps.conv{i}.w"] = (c, cin, 3, 3)
        shapes[f"sps.bn{i}.gamma"] = (c,)
        shapes[f"sps.bn{i}.beta"] = (c,)
        cin = c
    shapes["sps.rpe.w"] = (e, e, 3, 3)
    shapes["sps.rpe.bn.gamma"] = (e,)
    shapes["sps.rpe.bn.beta"] = (e,)
    for k, hd in enumerate(arch.hidden_dims()):
        for n in ("q", "k", "v", "proj"):
            shapes[f"block{k}.{n}.w"] = (e, e)
        shapes[f"block{k}.fc1.w"] = (hd, e)
        shapes[f"block{k}.fc2.w"] = (e, hd)
        for n in ("q", "k", "v", "proj", "fc2"):
            shapes[f"block{k}.{n}.bn.gamma"] = (e,)
            shapes[f"block{k}.{n}.bn.beta"] = (e,)
        shapes[f"block{k}.fc1.bn.gamma"] = (hd,)
        shapes[f"block{k}.fc1.bn.beta"] = (hd,)
    shapes["head.w"] = (num_classes, e)
    shapes["head.b"] = (num_classes,)
    return shapes


def build_subnet(supernet: Supernet, candidate) -> Subnet:
    """Materialize ``candidate`` as a slice view of ``supernet``."""
    problems = validate(candidate, supernet.space)
    if problems:
        raise InvalidCandidateError("; ".join(problems))
    return Subnet(supernet, supernet.space.to_arch(candidate))


def extract_standalone(supernet: Supernet, candidate) -> StandaloneNet:
    """Copy a candidate's slices out of the supernet into a fresh network."""
    sub = build_subnet(supernet, candidate)
    arch = sub.arch
    params = {}
    for name, shape in subnet_param_shapes(arch, supernet.in_channels, supernet.num_classes).items():
        region = tuple(slice(0, s) for s in shape)
        params[name] = supernet.params[name].data[region].copy()
    bn = {name: sub.bn_state(name, c).copy() for name, c in sub.bn_sizes().items()}
    return StandaloneNet(arch, params, bn, supernet.in_channels, supernet.num_classes)


def forward_classify(model: SpikingTransformer, images, time_step: int | None = None) -> Tensor:
    """Logits ``[B, num_classes]`` from rate-decoded spikes."""
    with tc.no_grad():
        return model.forward(images, time_step)
