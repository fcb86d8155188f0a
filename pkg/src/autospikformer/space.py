"""Search spaces, candidate genomes and their tuple text encoding.

Three spaces are defined on (lower, upper, step) grids:

* ``s_ts`` / ``s_tl`` - transformer spaces.  A candidate fixes depth, embed
  dim and time-step, plus MLP ratio, head count, threshold and decay for each
  block.  Text form ``(d, mlp x d, heads x d, u_th x d, tau x d, t, embed)``.
* ``s_s`` - neuron space over a fixed 4-block architecture.  Text form
  ``(u_th x 4, tau x 4, t)``.

Desk-scale variants (``toy_t`` and ``toy_s``) keep the same structure with
narrow embeddings so supernets train on one CPU core.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Union

from .tensor import Rng

_ROUND = 10


@dataclass(frozen=True)
class SearchDim:
    lower: float
    upper: float
    step: float

    def choices(self) -> list:
        return enumerate_choices(self)


def enumerate_choices(dim: SearchDim) -> list:
    """All grid values ``lower, lower+step, ..., upper`` (inclusive)."""
    if dim.step <= 0:
        raise ValueError(f"step must be positive, got {dim.step}")
    if dim.upper < dim.lower:
        raise ValueError(f"upper {dim.upper} below lower {dim.lower}")
    span = (dim.upper - dim.lower) / dim.step
    n = round(span)
    if abs(span - n) > 1e-9:
        raise ValueError(f"upper {dim.upper} not reachable from {dim.lower} in steps of {dim.step}")
    integral = all(float(v).is_integer() for v in (dim.lower, dim.upper, dim.step))
    if integral:
        lo, st = int(dim.lower), int(dim.step)
        return [lo + i * st for i in range(n + 1)]
    return [round(dim.lower + i * dim.step, _ROUND) for i in range(n + 1)]


def on_grid(value, choices) -> bool:
    try:
        v = round(float(value), _ROUND)
    except (TypeError, ValueError):
        return False
    return any(v == round(float(c), _ROUND) for c in choices)


@dataclass(frozen=True)
class BaseArch:
    """Fixed transformer shape searched over by the neuron space."""

    depth: int = 4
    embed_dim: int = 384
    mlp_ratio: float = 4.0
    head_num: int = 12


SPIKFORMER_4_384 = BaseArch(4, 384, 4.0, 12)
TOY_BASE = BaseArch(4, 48, 4.0, 12)

SNN_BLOCKS = 4


@dataclass(frozen=True)
class CandidateSnn:
    u_th_per_block: tuple
    tau_per_block: tuple
    time_step: int

    def to_tuple(self) -> tuple:
        return (*self.u_th_per_block, *self.tau_per_block, self.time_step)


@dataclass(frozen=True)
class CandidateArch:
    depth: int
    mlp_ratio_per_layer: tuple
    head_num_per_layer: tuple
    u_th_per_layer: tuple
    tau_per_layer: tuple
    time_step: int
    embed_dim: int

    def to_tuple(self) -> tuple:
        return (
            self.depth,
            *self.mlp_ratio_per_layer,
            *self.head_num_per_layer,
            *self.u_th_per_layer,
            *self.tau_per_layer,
            self.time_step,
            self.embed_dim,
        )

    def hidden_dims(self) -> list[int]:
        return [mlp_hidden(r, self.embed_dim) for r in self.mlp_ratio_per_layer]


Candidate = Union[CandidateArch, CandidateSnn]


def mlp_hidden(ratio: float, embed_dim: int) -> int:
    """MLP width: ratio x embed rounded to the nearest integer."""
    return int(round(ratio * embed_dim))


@dataclass(frozen=True)
class SearchSpace:
    kind: str
    dims: dict = field(hash=False)
    base: BaseArch = SPIKFORMER_4_384

    @property
    def is_snn(self) -> bool:
        return "depth" not in self.dims

    def choices(self, name: str) -> list:
        return enumerate_choices(self.dims[name])

    @property
    def max_depth(self) -> int:
        return SNN_BLOCKS if self.is_snn else max(self.choices("depth"))

    @property
    def max_embed(self) -> int:
        return self.base.embed_dim if self.is_snn else max(self.choices("embed_dim"))

    @property
    def max_hidden(self) -> int:
        if self.is_snn:
            return mlp_hidden(self.base.mlp_ratio, self.base.embed_dim)
        return mlp_hidden(max(self.choices("mlp_ratio")), self.max_embed)

    def to_arch(self, cand: Candidate) -> CandidateArch:
        """Full architecture view; neuron candidates sit on the fixed base."""
        if isinstance(cand, CandidateArch):
            return cand
        b = self.base
        return CandidateArch(
            depth=b.depth,
            mlp_ratio_per_layer=(b.mlp_ratio,) * b.depth,
            head_num_per_layer=(b.head_num,) * b.depth,
            u_th_per_layer=tuple(cand.u_th_per_block),
            tau_per_layer=tuple(cand.tau_per_block),
            time_step=cand.time_step,
            embed_dim=b.embed_dim,
        )

    def largest(self) -> CandidateArch:
        """Candidate at maximal transformer dims (neuron genes at their lowest)."""
        uth = min(self.choices("u_th"))
        tau = min(self.choices("tau"))
        t = max(self.choices("time_step"))
        if self.is_snn:
            return self.to_arch(CandidateSnn((uth,) * SNN_BLOCKS, (tau,) * SNN_BLOCKS, t))
        d = self.max_depth
        return CandidateArch(
            d,
            (max(self.choices("mlp_ratio")),) * d,
            (max(self.choices("head_num")),) * d,
            (uth,) * d,
            (tau,) * d,
            t,
            self.max_embed,
        )


_SNN_DIMS = {
    "u_th": SearchDim(0.6, 2.0, 0.2),
    "tau": SearchDim(1.25, 10.0, 0.25),
    "time_step": SearchDim(2, 4, 1),
}


def make_space(kind: str, base: BaseArch | None = None) -> SearchSpace:
    """Build one of ``s_ts``, ``s_tl``, ``s_s``, ``toy_t``, ``toy_s``."""
    kind = kind.lower()
    if kind == "s_ts":
        dims = {
            "embed_dim": SearchDim(336, 384, 12),
            "mlp_ratio": SearchDim(3, 4, 0.2),
            "head_num": SearchDim(6, 12, 6),
            "depth": SearchDim(2, 4, 1),
        }
    elif kind == "s_tl":
        dims = {
            "embed_dim": SearchDim(336, 480, 48),
            "mlp_ratio": SearchDim(3, 5, 0.2),
            "head_num": SearchDim(6, 12, 6),
            "depth": SearchDim(2, 6, 1),
        }
    elif kind == "toy_t":
        dims = {
            "embed_dim": SearchDim(24, 48, 12),
            "mlp_ratio": SearchDim(3, 4, 0.2),
            "head_num": SearchDim(6, 12, 6),
            "depth": SearchDim(2, 4, 1),
        }
    elif kind == "s_s":
        return SearchSpace("s_s", dict(_SNN_DIMS), base or SPIKFORMER_4_384)
    elif kind == "toy_s":
        return SearchSpace("toy_s", dict(_SNN_DIMS), base or TOY_BASE)
    else:
        raise ValueError(f"unknown search space {kind!r}")
    dims.update(_SNN_DIMS)
    return SearchSpace(kind, dims, base or (TOY_BASE if kind == "toy_t" else SPIKFORMER_4_384))


SPACE_KINDS = ("s_ts", "s_tl", "s_s", "toy_t", "toy_s")


def baseline_candidate(space: SearchSpace, u_th: float = 1.0, tau: float = 2.0, time_step: int = 4) -> Candidate:
    """The unsearched reference network of ``space``: its base architecture
    with every block at ``(u_th, tau)``."""
    b = space.base
    if space.is_snn:
        return CandidateSnn((u_th,) * SNN_BLOCKS, (tau,) * SNN_BLOCKS, time_step)
    return CandidateArch(b.depth, (b.mlp_ratio,) * b.depth, (b.head_num,) * b.depth,
                         (u_th,) * b.depth, (tau,) * b.depth, time_step, b.embed_dim)


def validate(cand: Candidate, space: SearchSpace) -> list[str]:
    """Return human-readable violations; an empty list means valid."""
    out: list[str] = []
    ch = space.choices
    if space.is_snn:
        if not isinstance(cand, CandidateSnn):
            return [f"expected an SNN-parameter candidate for space {space.kind}"]
        if len(cand.u_th_per_block) != SNN_BLOCKS:
            out.append(f"u_th: expected {SNN_BLOCKS} values, got {len(cand.u_th_per_block)}")
        if len(cand.tau_per_block) != SNN_BLOCKS:
            out.append(f"tau: expected {SNN_BLOCKS} values, got {len(cand.tau_per_block)}")
        for i, v in enumerate(cand.u_th_per_block):
            if not on_grid(v, ch("u_th")):
                out.append(f"u_th[{i}]={v} not in {ch('u_th')}")
        for i, v in enumerate(cand.tau_per_block):
            if not on_grid(v, ch("tau")):
                out.append(f"tau[{i}]={v} not in {ch('tau')}")
        if not on_grid(cand.time_step, ch("time_step")):
            out.append(f"time_step={cand.time_step} not in {ch('time_step')}")
        return out

    if not isinstance(cand, CandidateArch):
        return [f"expected an architecture candidate for space {space.kind}"]
    if not on_grid(cand.depth, ch("depth")):
        out.append(f"depth={cand.depth} not in {ch('depth')}")
    for name, values in (
        ("mlp_ratio", cand.mlp_ratio_per_layer),
        ("head_num", cand.head_num_per_layer),
        ("u_th", cand.u_th_per_layer),
        ("tau", cand.tau_per_layer),
    ):
        if len(values) != cand.depth:
            out.append(f"{name}: expected {cand.depth} values, got {len(values)}")
        for i, v in enumerate(values):
            if not on_grid(v, ch(name)):
                out.append(f"{name}[{i}]={v} not in {ch(name)}")
    if not on_grid(cand.time_step, ch("time_step")):
        out.append(f"time_step={cand.time_step} not in {ch('time_step')}")
    if not on_grid(cand.embed_dim, ch("embed_dim")):
        out.append(f"embed_dim={cand.embed_dim} not in {ch('embed_dim')}")
    for i, h in enumerate(cand.head_num_per_layer):
        if isinstance(h, (int, float)) and h and cand.embed_dim % int(h):
            out.append(f"embed_dim={cand.embed_dim} not divisible by head_num[{i}]={h}")
    return out


def is_valid(cand: Candidate, space: SearchSpace) -> bool:
    return not validate(cand, space)


def sample_candidate(space: SearchSpace, rng: Rng) -> Candidate:
    """Uniform draw: depth first, then every other gene from its grid."""
    ch = space.choices
    if space.is_snn:
        uth = tuple(rng.choice(ch("u_th")) for _ in range(SNN_BLOCKS))
        tau = tuple(rng.choice(ch("tau")) for _ in range(SNN_BLOCKS))
        return CandidateSnn(uth, tau, rng.choice(ch("time_step")))
    d = rng.choice(ch("depth"))
    layers = [sample_layer_genes(space, rng) for _ in range(d)]
    mlp, heads, uth, tau = (tuple(col) for col in zip(*layers))
    return CandidateArch(
        d, mlp, heads, uth, tau, rng.choice(ch("time_step")), rng.choice(ch("embed_dim"))
    )


def sample_layer_genes(space: SearchSpace, rng: Rng) -> tuple:
    """(mlp_ratio, head_num, u_th, tau) for one freshly drawn block."""
    ch = space.choices
    return (
        rng.choice(ch("mlp_ratio")),
        rng.choice(ch("head_num")),
        rng.choice(ch("u_th")),
        rng.choice(ch("tau")),
    )


# ---------------------------------------------------------------- text form


class CandidateParseError(ValueError):
    """Malformed candidate tuple; ``field`` names the offending gene."""

    def __init__(self, msg: str, field: str | None = None):
        super().__init__(msg)
        self.field = field


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _fmt_short(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def format_candidate(cand: Candidate) -> str:
    """Tuple text in table order; thresholds and MLP ratios keep a decimal
    point, decays are printed in shortest form, counts as integers."""
    if isinstance(cand, CandidateSnn):
        parts = [_fmt_float(v) for v in cand.u_th_per_block]
        parts += [_fmt_short(v) for v in cand.tau_per_block]
        parts.append(str(int(cand.time_step)))
    else:
        parts = [str(int(cand.depth))]
        parts += [_fmt_float(v) for v in cand.mlp_ratio_per_layer]
        parts += [str(int(v)) for v in cand.head_num_per_layer]
        parts += [_fmt_float(v) for v in cand.u_th_per_layer]
        parts += [_fmt_short(v) for v in cand.tau_per_layer]
        parts += [str(int(cand.time_step)), str(int(cand.embed_dim))]
    return "(" + ", ".join(parts) + ")"


_NUM = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


def _parse_numbers(text: str) -> list[str]:
    s = text.strip()
    if not (s.startswith("(") and s.endswith(")")):
        raise CandidateParseError("candidate must be a parenthesized tuple")
    body = s[1:-1].strip()
    if not body:
        raise CandidateParseError("empty candidate tuple")
    return [tok.strip() for tok in body.split(",")]


def _num(tok: str, field: str, integer: bool = False):
    if not _NUM.match(tok):
        raise CandidateParseError(f"{field}: {tok!r} is not a number", field)
    v = float(tok)
    if integer:
        if not v.is_integer():
            raise CandidateParseError(f"{field}: {tok!r} must be an integer", field)
        return int(v)
    return v


def parse_candidate(text: str, space: SearchSpace | None = None) -> Candidate:
    """Parse the tuple text.  Without a space the shape is inferred:
    9 numbers -> neuron candidate, otherwise the leading depth decides."""
    toks = _parse_numbers(text)
    snn = space.is_snn if space is not None else len(toks) == 2 * SNN_BLOCKS + 1
    if snn:
        if len(toks) != 2 * SNN_BLOCKS + 1:
            raise CandidateParseError(
                f"expected {2 * SNN_BLOCKS + 1} values (u_th x4, tau x4, time_step), got {len(toks)}"
            )
        uth = tuple(_num(t, f"u_th[{i}]") for i, t in enumerate(toks[:4]))
        tau = tuple(_num(t, f"tau[{i}]") for i, t in enumerate(toks[4:8]))
        cand: Candidate = CandidateSnn(uth, tau, _num(toks[8], "time_step", True))
    else:
        d = _num(toks[0], "depth", True)
        if d < 1:
            raise CandidateParseError(f"depth: {d} must be positive", "depth")
        if len(toks) != 4 * d + 3:
            raise CandidateParseError(
                f"depth {d} implies {4 * d + 3} values, got {len(toks)}", "depth"
            )
        mlp = tuple(_num(t, f"mlp_ratio[{i}]") for i, t in enumerate(toks[1:1 + d]))
        heads = tuple(_num(t, f"head_num[{i}]", True) for i, t in enumerate(toks[1 + d:1 + 2 * d]))
        uth = tuple(_num(t, f"u_th[{i}]") for i, t in enumerate(toks[1 + 2 * d:1 + 3 * d]))
        tau = tuple(_num(t, f"tau[{i}]") for i, t in enumerate(toks[1 + 3 * d:1 + 4 * d]))
        cand = CandidateArch(
            d, mlp, heads, uth, tau,
            _num(toks[-2], "time_step", True),
            _num(toks[-1], "embed_dim", True),
        )
    if space is not None:
        problems = validate(cand, space)
        if problems:
            first = problems[0]
            raise CandidateParseError("; ".join(problems), first.split("=")[0].split(":")[0])
    return cand


def normalize(cand: Candidate) -> Candidate:
    """Snap float genes to the rounded grid representation."""
    r = lambda xs: tuple(round(float(x), _ROUND) for x in xs)  # noqa: E731
    if isinstance(cand, CandidateSnn):
        return CandidateSnn(r(cand.u_th_per_block), r(cand.tau_per_block), int(cand.time_step))
    return replace(
        cand,
        mlp_ratio_per_layer=r(cand.mlp_ratio_per_layer),
        head_num_per_layer=tuple(int(h) for h in cand.head_num_per_layer),
        u_th_per_layer=r(cand.u_th_per_layer),
        tau_per_layer=r(cand.tau_per_layer),
    )
