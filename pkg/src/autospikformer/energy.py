"""FLOPs catalog, synaptic operations and theoretical inference energy.

Conventions:

* FLOPs count multiply-accumulates (1 MAC = 1 FLOP), per sample and per
  time-step.  BN and pooling are not counted.
* ``SOPs = fr * t * FLOPs`` where ``fr`` is the firing rate of the layer's
  input spike train.
* Model energy bills the first (image-encoding) conv at ``E_MAC`` on its
  FLOPs and every later conv / FC / attention layer at ``E_AC`` on its SOPs.
* ANN energy of a block bills ``E_MAC`` on FLOPs.

Energies are joules.  ``PAPER_UNIT`` is the scale (1e-3 J) at which the
published energy columns line up with these formulas, even though they are
labelled microjoules there.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping

from .model import sps_widths, token_count
from .space import Candidate, CandidateArch, SearchSpace

E_MAC = 4.6e-12
E_AC = 0.9e-12
PAPER_UNIT = 1e-3

LAYER_KINDS = ("snn_conv", "snn_fc", "ssa", "ann")
FIRST_LAYER = "sps.conv0"


class EnergyError(ValueError):
    """Missing/extra firing-rate entries or out-of-range inputs."""


@dataclass(frozen=True)
class LayerSpec:
    layer_id: str
    kind: str
    flops: int


@dataclass(frozen=True)
class LayerCost:
    layer_id: str
    layer_kind: str
    flops: int
    fr_in: float
    sops: float


@dataclass
class EnergyReport:
    first_layer_flops: int
    layer_costs: list
    time_step: int
    e_mac: float = E_MAC
    e_ac: float = E_AC
    total_energy: float = field(init=False)

    def __post_init__(self):
        self.total_energy = self.e_mac * self.first_layer_flops + self.e_ac * self.total_sops

    @property
    def total_sops(self) -> float:
        return sum(c.sops for c in self.layer_costs)

    @property
    def first_layer_energy(self) -> float:
        return self.e_mac * self.first_layer_flops

    def to_csv(self) -> str:
        """Rows ``layer_id,kind,flops,fr,sops,joules``; the first row is the
        dense encoding conv (fr 1, no SOPs, billed per MAC)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_id", "kind", "flops", "fr", "sops", "joules"])
        w.writerow([FIRST_LAYER, "ann", self.first_layer_flops, 1.0, 0, repr(self.first_layer_energy)])
        for c in self.layer_costs:
            w.writerow([c.layer_id, c.layer_kind, c.flops, repr(c.fr_in), repr(c.sops), repr(self.e_ac * c.sops)])
        w.writerow(["total", "", self.first_layer_flops + sum(c.flops for c in self.layer_costs), "",
                    repr(self.total_sops), repr(self.total_energy)])
        return buf.getvalue()


def flops_of_layer(kind: str, **shape) -> int:
    """MAC count of one layer for one sample and one time-step.

    ``conv``: kh, kw, cin, cout, hout, wout.
    ``linear``: tokens, din, dout.
    ``ssa``: heads, tokens, head_dim  (Q K^T plus (.) V).
    """
    if kind == "conv":
        return int(shape["kh"] * shape["kw"] * shape["cin"] * shape["cout"] * shape["hout"] * shape["wout"])
    if kind == "linear":
        return int(shape["tokens"] * shape["din"] * shape["dout"])
    if kind == "ssa":
        n = shape["tokens"]
        return int(2 * shape["heads"] * n * n * shape["head_dim"])
    raise EnergyError(f"unknown layer kind {kind!r}")


def layer_catalog(
    arch: CandidateArch,
    image_size: tuple[int, int] = (32, 32),
    in_channels: int = 3,
    num_classes: int = 10,
) -> list[LayerSpec]:
    """Every compute layer of ``arch`` in forward order, first layer included."""
    H, W = image_size
    N = token_count(H, W)
    e = arch.embed_dim
    widths = sps_widths(e)
    out = []
    cin, h, w = in_channels, H, W
    for i, c in enumerate(widths):
        flops = flops_of_layer("conv", kh=3, kw=3, cin=cin, cout=c, hout=h, wout=w)
        out.append(LayerSpec(f"sps.conv{i}", "ann" if i == 0 else "snn_conv", flops))
        if i in (1, 3):
            h, w = h // 2, w // 2
        cin = c
    out.append(LayerSpec("sps.rpe", "snn_conv", flops_of_layer("conv", kh=3, kw=3, cin=e, cout=e, hout=h, wout=w)))
    for k in range(arch.depth):
        heads = int(arch.head_num_per_layer[k])
        hd = arch.hidden_dims()[k]
        for n in ("q", "k", "v"):
            out.append(LayerSpec(f"block{k}.{n}", "snn_fc", flops_of_layer("linear", tokens=N, din=e, dout=e)))
        out.append(LayerSpec(f"block{k}.attn", "ssa", flops_of_layer("ssa", heads=heads, tokens=N, head_dim=e // heads)))
        out.append(LayerSpec(f"block{k}.proj", "snn_fc", flops_of_layer("linear", tokens=N, din=e, dout=e)))
        out.append(LayerSpec(f"block{k}.fc1", "snn_fc", flops_of_layer("linear", tokens=N, din=e, dout=hd)))
        out.append(LayerSpec(f"block{k}.fc2", "snn_fc", flops_of_layer("linear", tokens=N, din=hd, dout=e)))
    out.append(LayerSpec("head", "snn_fc", flops_of_layer("linear", tokens=1, din=e, dout=num_classes)))
    return out


def sops(flops: float, fr: float, time_step: int) -> float:
    """Synaptic operations ``fr * t * flops``."""
    if not 0.0 <= fr <= 1.0:
        raise EnergyError(f"firing rate {fr} outside [0, 1]")
    if time_step < 1:
        raise EnergyError(f"time_step must be >= 1, got {time_step}")
    return fr * time_step * flops


def ann_block_power(flops: float) -> float:
    return E_MAC * flops


def snn_block_power(sop_count: float) -> float:
    return E_AC * sop_count


def _as_arch(arch: Candidate, space: SearchSpace | None) -> CandidateArch:
    if isinstance(arch, CandidateArch):
        return arch
    if space is None:
        raise EnergyError("an SNN-parameter candidate needs its search space for the base architecture")
    return space.to_arch(arch)


def model_energy(
    arch: Candidate,
    fr_trace: Mapping[str, float],
    time_step: int | None = None,
    *,
    space: SearchSpace | None = None,
    image_size: tuple[int, int] = (32, 32),
    in_channels: int = 3,
    num_classes: int = 10,
    strict: bool = False,
) -> EnergyReport:
    """Energy of one inference from per-layer input firing rates.

    ``fr_trace`` must name every spike-consuming layer of the catalog.  With
    ``strict`` it may not name anything else (except the first layer).
    """
    a = _as_arch(arch, space)
    t = int(time_step if time_step is not None else a.time_step)
    catalog = layer_catalog(a, image_size, in_channels, num_classes)
    ids = {s.layer_id for s in catalog}
    missing = [s.layer_id for s in catalog[1:] if s.layer_id not in fr_trace]
    if missing:
        raise EnergyError(f"firing-rate trace is missing layers: {', '.join(missing)}")
    if strict:
        extra = sorted(set(fr_trace) - ids)
        if extra:
            raise EnergyError(f"firing-rate trace has unknown layers: {', '.join(extra)}")
    costs = []
    for s in catalog[1:]:
        fr = float(fr_trace[s.layer_id])
        costs.append(LayerCost(s.layer_id, s.kind, s.flops, fr, sops(s.flops, fr, t)))
    return EnergyReport(catalog[0].flops, costs, t)


def ann_energy(arch: Candidate, *, space: SearchSpace | None = None, image_size=(32, 32),
               in_channels: int = 3, num_classes: int = 10) -> float:
    """Dense (ANN) counterpart: every layer billed at ``E_MAC`` on FLOPs."""
    a = _as_arch(arch, space)
    return sum(ann_block_power(s.flops) for s in layer_catalog(a, image_size, in_channels, num_classes))


def uniform_trace(arch: Candidate, fr: float, *, space: SearchSpace | None = None, image_size=(32, 32),
                  in_channels: int = 3, num_classes: int = 10) -> dict[str, float]:
    a = _as_arch(arch, space)
    return {s.layer_id: fr for s in layer_catalog(a, image_size, in_channels, num_classes)[1:]}


# ------------------------------------------------------------------ trace I/O


def write_fr_trace(path, arch: CandidateArch, fr_trace: Mapping[str, float], image_size=(32, 32),
                   in_channels: int = 3, num_classes: int = 10):
    """Text lines ``layer_id,kind,flops,fr`` in catalog order."""
    with open(path, "w") as f:
        for s in layer_catalog(arch, image_size, in_channels, num_classes)[1:]:
            f.write(f"{s.layer_id},{s.kind},{s.flops},{float(fr_trace[s.layer_id])!r}\n")


def read_fr_trace(path) -> dict[str, float]:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise EnergyError(f"{path}:{lineno}: expected 'layer_id,kind,flops,fr'")
            layer_id, kind, _flops, fr = parts
            if kind not in LAYER_KINDS:
                raise EnergyError(f"{path}:{lineno}: unknown layer kind {kind!r}")
            if layer_id in out:
                raise EnergyError(f"{path}:{lineno}: duplicate layer {layer_id!r}")
            try:
                out[layer_id] = float(fr)
            except ValueError:
                raise EnergyError(f"{path}:{lineno}: bad firing rate {fr!r}") from None
    return out


def measure_fr(model, calibration_batches) -> dict[str, float]:
    """Input firing rate of every spike-consuming layer of ``model``.

    Spike and neuron-step counts are pooled over all batches, so the result
    is the sample-weighted mean of per-batch rates.
    """
    from .model import LayerTrace
    from .tensor import no_grad

    trace = LayerTrace.empty()
    seen = 0
    with no_grad():
        for batch in calibration_batches:
            images = batch[0] if isinstance(batch, tuple) else batch
            model.forward(images, trace=trace)
            seen += 1
    if not seen:
        raise EnergyError("measure_fr needs at least one batch")
    return trace.fr()
