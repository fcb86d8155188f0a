"""Supernet training, BN recalibration, candidate evaluation, checkpoints.

Each optimizer step samples one candidate uniformly from the search space,
runs its subnet for ``t`` time-steps, and backpropagates cross-entropy on the
rate-decoded logits through the surrogate spike gradient.  Only the weight
slices the candidate actually read are updated (optimizer moments included).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tc
from .data import Dataset, batches
from .energy import model_energy
from .model import Subnet, Supernet, build_subnet
from .space import BaseArch, Candidate, format_candidate, make_space, sample_candidate

CHECKPOINT_FORMAT = "autospikformer-checkpoint/1"
MANIFEST = "manifest.json"
BLOB = "weights.bin"
LOSS_CSV = "loss_history.csv"


class TrainingDivergedError(FloatingPointError):
    """Loss or an activation became non-finite."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    min_lr: float = 0.0
    weight_decay: float = 1e-2
    seed: int = 0
    space: str = "toy_s"
    flip: bool = False
    calib_batches: int = 20
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.calib_batches < 1:
            raise ValueError("calib_batches must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or null")

    def lr_at(self, epoch: int) -> float:
        """Cosine decay from ``lr`` to ``min_lr`` over ``epochs``."""
        c = 0.5 * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.min_lr + (self.lr - self.min_lr) * c

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class AdamW:
    """AdamW restricted to elements flagged in the supernet's slice masks.

    Each element keeps its own step counter, so bias correction is exact for
    weights that are only sometimes sampled.  Weight decay applies to weight
    matrices and kernels (names ending in ``.w``).
    """

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros(p.shape, tc.DTYPE) for n, p in params.items()}
        self.v = {n: np.zeros(p.shape, tc.DTYPE) for n, p in params.items()}
        self.t = {n: np.zeros(p.shape, np.int64) for n, p in params.items()}

    def step(self, masks: dict, lr: float | None = None):
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            mask = masks[name]
            if p.grad is None or not mask.any():
                continue
            g = p.grad[mask]
            t = self.t[name][mask] + 1
            self.t[name][mask] = t
            m = self.b1 * self.m[name][mask] + (1 - self.b1) * g
            v = self.b2 * self.v[name][mask] + (1 - self.b2) * g * g
            self.m[name][mask] = m
            self.v[name][mask] = v
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            w = p.data[mask]
            if self.weight_decay and name.endswith(".w"):
                w = w - lr * self.weight_decay * w
            p.data[mask] = (w - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(tc.DTYPE)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
            out[f"adam.t.{n}"] = self.t[n]
        return out


def sample_step_candidate(supernet: Supernet, seed: int, epoch: int, step: int) -> Candidate:
    """The candidate trained at ``(epoch, step)``; a pure function of the seed."""
    return sample_candidate(supernet.space, tc.Rng(seed, (0xCA4D, epoch, step)))


def clip_grad_norm(params: dict, masks: dict, max_norm: float) -> float:
    """Rescale in-slice gradients so their global L2 norm is at most
    ``max_norm``; returns the norm before clipping."""
    sq = 0.0
    for name, p in params.items():
        if p.grad is not None:
            sq += float(np.sum(np.square(p.grad[masks[name]], dtype=np.float64)))
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def train_step(
    supernet: Supernet,
    optimizer: AdamW,
    images,
    labels,
    cand: Candidate,
    lr: float,
    clip_norm: float | None = None,
) -> float:
    sub = build_subnet(supernet, cand)
    sub.mode = "train"
    supernet.zero_grad()
    logits = sub.forward(images)
    loss = tc.cross_entropy(logits, labels)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss for {format_candidate(cand)}")
    loss.backward()
    if clip_norm is not None:
        clip_grad_norm(supernet.params, supernet.masks, clip_norm)
    optimizer.step(supernet.masks, lr)
    return value


def train_supernet(
    supernet: Supernet,
    dataset: Dataset,
    config: TrainConfig,
    optimizer: AdamW | None = None,
    start_epoch: int = 0,
    stop_after: int | None = None,
    history: list | None = None,
    on_epoch=None,
):
    """Train from ``start_epoch`` up to ``config.epochs`` (or ``stop_after``).

    Returns ``(supernet, optimizer, history)`` where history holds the mean
    training loss of every completed epoch.
    """
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    if optimizer is None:
        optimizer = AdamW(supernet.params, config.lr, weight_decay=config.weight_decay)
    history = list(history or [])
    end = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(start_epoch, end):
        lr = config.lr_at(epoch)
        losses = []
        for step, (x, y) in enumerate(batches(dataset, config.batch_size, config.seed, epoch, config.flip)):
            cand = sample_step_candidate(supernet, config.seed, epoch, step)
            try:
                losses.append(train_step(supernet, optimizer, x, y, cand, lr, config.clip_norm))
            except tc.NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"epoch {epoch} step {step} candidate {format_candidate(cand)}: {exc}"
                ) from exc
        history.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, history)
    return supernet, optimizer, history


def recalibrate_bn(subnet: Subnet, calibration_batches) -> Subnet:
    """Fresh BN running statistics for ``subnet`` from calibration data.

    The result owns private statistics (the supernet store is untouched) equal
    to the exact average of per-batch statistics, so recalibrating again on
    the same batches reproduces them.
    """
    sub = subnet.detach_bn()
    for st in sub._private_bn.values():
        st.reset()
    sub.mode = "calibrate"
    n = 0
    with tc.no_grad():
        for batch in calibration_batches:
            images = batch[0] if isinstance(batch, tuple) else batch
            sub.forward(images)
            n += 1
    if n == 0:
        raise ValueError("recalibrate_bn needs at least one batch")
    sub.mode = "eval"
    return sub


@dataclass
class EvalResult:
    candidate: Candidate
    accuracy: float
    fr_trace: dict
    energy: float
    correct: int = 0
    total: int = 0
    mean_fr: float = 0.0

    def to_json(self) -> dict:
        return {
            "candidate": format_candidate(self.candidate),
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "energy_joules": self.energy,
            "mean_fr": self.mean_fr,
            "fr_trace": dict(sorted(self.fr_trace.items())),
        }


def evaluate(subnet: Subnet, dataset: Dataset, time_step: int | None = None, batch_size: int = 64,
             candidate: Candidate | None = None) -> EvalResult:
    """Top-1 accuracy and input firing rates over the whole split in one pass."""
    from .model import LayerTrace

    if len(dataset) == 0:
        raise ValueError("empty evaluation dataset")
    subnet.mode = "eval"
    T = int(time_step if time_step is not None else subnet.arch.time_step)
    trace = LayerTrace.empty()
    correct = 0
    with tc.no_grad():
        for x, y in batches(dataset, batch_size, shuffle_seed=None):
            logits = subnet.forward(x, T, trace)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    fr = trace.fr()
    _, _, H, W = dataset.images.shape
    report = model_energy(subnet.arch, fr, T, image_size=(H, W),
                          in_channels=subnet.in_channels, num_classes=subnet.num_classes)
    return EvalResult(candidate if candidate is not None else subnet.arch, correct / len(dataset),
                      fr, report.total_energy, correct, len(dataset), trace.overall())


def calibration_batches(dataset: Dataset, config: TrainConfig, batch_size: int | None = None) -> list:
    """First ``config.calib_batches`` training batches in a fixed order."""
    out = []
    for x, _ in batches(dataset, batch_size or config.batch_size, shuffle_seed=config.seed, epoch=0xCA11):
        out.append(x)
        if len(out) >= config.calib_batches:
            break
    return out


class SupernetEvaluator:
    """Candidate -> (accuracy, energy) with per-candidate BN recalibration."""

    def __init__(self, supernet: Supernet, calib: list, eval_set: Dataset, batch_size: int = 64):
        self.supernet = supernet
        self.calib = calib
        self.eval_set = eval_set
        self.batch_size = batch_size
        self.results: dict = {}

    def evaluate(self, cand: Candidate) -> EvalResult:
        sub = recalibrate_bn(build_subnet(self.supernet, cand), self.calib)
        res = evaluate(sub, self.eval_set, batch_size=self.batch_size, candidate=cand)
        self.results[cand] = res
        return res

    def __call__(self, cand: Candidate) -> tuple[float, float, float]:
        r = self.evaluate(cand)
        return r.accuracy, r.energy, r.mean_fr


# -------------------------------------------------------------- checkpoints


def _checkpoint_arrays(supernet: Supernet, optimizer: AdamW | None) -> dict[str, np.ndarray]:
    arrays = {n: p.data for n, p in supernet.params.items()}
    arrays.update(supernet.bn_arrays())
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    return arrays


def save_checkpoint(directory, supernet: Supernet, optimizer: AdamW | None, config: TrainConfig,
                    epoch: int, history: list, extra: dict | None = None):
    """Write ``manifest.json``, ``weights.bin`` and ``loss_history.csv``.

    The blob is every tensor as little-endian float32, concatenated in
    manifest order.  Integer counters are stored as exact float32 values.
    """
    os.makedirs(directory, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in _checkpoint_arrays(supernet, optimizer).items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32-le",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    space = supernet.space
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "space": space.kind,
        "base": asdict(space.base),
        "in_channels": supernet.in_channels,
        "num_classes": supernet.num_classes,
        "seed": config.seed,
        "init_seed": supernet.seed,
        "epoch": epoch,
        "config": asdict(config),
        "loss_history": history,
        "tensors": entries,
        "blob": BLOB,
    }
    manifest.update(extra or {})
    _atomic_write(os.path.join(directory, BLOB), b"".join(chunks))
    _atomic_write(os.path.join(directory, MANIFEST),
                  (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for i, v in enumerate(history):
        w.writerow([i, repr(v)])
    _atomic_write(os.path.join(directory, LOSS_CSV), buf.getvalue().encode())


def _atomic_write(path, data: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(directory, expect_space: str | None = None):
    """Rebuild ``(supernet, optimizer, manifest)``; shapes are checked
    against the supernet the declared search space implies."""
    path = os.path.join(directory, MANIFEST)
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {path}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported format {manifest.get('format')!r}")
    if expect_space is not None and manifest["space"] != expect_space:
        raise CheckpointError(
            f"checkpoint was trained on space {manifest['space']!r}, not {expect_space!r}"
        )
    space = make_space(manifest["space"], BaseArch(**manifest["base"]))
    supernet = Supernet(space, manifest["in_channels"], manifest["num_classes"], manifest.get("init_seed", 0))
    config = TrainConfig.from_dict(manifest["config"])
    optimizer = AdamW(supernet.params, config.lr, weight_decay=config.weight_decay)
    targets = _checkpoint_arrays(supernet, optimizer)
    with open(os.path.join(directory, manifest["blob"]), "rb") as f:
        blob = f.read()
    names = [e["name"] for e in manifest["tensors"]]
    if set(names) != set(targets):
        missing = sorted(set(targets) - set(names))
        extra = sorted(set(names) - set(targets))
        raise CheckpointError(f"checkpoint tensors do not match space: missing {missing[:5]}, extra {extra[:5]}")
    for e in manifest["tensors"]:
        dst = targets[e["name"]]
        if tuple(e["shape"]) != dst.shape:
            raise CheckpointError(f"{e['name']}: shape {e['shape']} != expected {list(dst.shape)}")
        if e["offset"] + e["nbytes"] > len(blob):
            raise CheckpointError(f"{e['name']}: blob truncated")
        arr = np.frombuffer(blob, "<f4", count=dst.size, offset=e["offset"]).reshape(dst.shape)
        dst[...] = arr.astype(dst.dtype)
    return supernet, optimizer, manifest
