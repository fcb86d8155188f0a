"""Evolutionary search over candidates with accuracy/energy balanced fitness.

Fitness of a record is ``alpha * (1 - E) + (1 - alpha) * A`` where ``A`` and
``E`` are accuracy and energy min-max scaled over every record evaluated so
far in the run.  Energy enters inverted so that cheaper candidates score
higher; the weighted sum as usually written (``alpha * E + ...``) would
reward expensive networks.

Also here: Pareto fronts, Kendall's tau-b, 2-D hypervolume, coverage, the
random-search baseline and an analytic evaluator for network-free runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .energy import layer_catalog, model_energy
from .space import (
    Candidate,
    CandidateArch,
    CandidateSnn,
    SearchSpace,
    format_candidate,
    normalize,
    sample_candidate,
    sample_layer_genes,
    validate,
)
from .tensor import Rng

Evaluator = Callable[[Candidate], tuple]


class SearchError(RuntimeError):
    """An evaluator call failed; ``candidate`` names the culprit."""

    def __init__(self, msg: str, candidate: Candidate | None = None):
        super().__init__(msg)
        self.candidate = candidate


@dataclass
class EvoConfig:
    population_size: int = 50
    generations: int = 20
    parent_count: int = 10
    mutation_prob: float = 0.2
    crossover_prob: float = 0.5
    alpha: float = 0.5
    seed: int = 0
    total_sample_budget: int | None = None
    elitist: bool = True

    def __post_init__(self):
        if self.population_size < 1:
            raise ValueError("population_size must be >= 1")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if not 1 <= self.parent_count <= self.population_size:
            raise ValueError("parent_count must lie in [1, population_size]")
        for name in ("mutation_prob", "crossover_prob", "alpha"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.total_sample_budget is not None and self.total_sample_budget < 1:
            raise ValueError("total_sample_budget must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "EvoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown search config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class FitnessRecord:
    candidate: Candidate
    accuracy: float
    energy: float
    scaled_acc: float = 0.5
    scaled_energy: float = 0.5
    fitness: float = 0.5
    generation: int = 0
    fr: float | None = None

    def to_json(self, seed: int) -> str:
        d = {
            "candidate": format_candidate(self.candidate),
            "accuracy": self.accuracy,
            "energy_joules": self.energy,
            "scaled_acc": self.scaled_acc,
            "scaled_energy": self.scaled_energy,
            "fitness": self.fitness,
            "generation": self.generation,
            "seed": seed,
        }
        if self.fr is not None:
            d["fr"] = self.fr
        return json.dumps(d, sort_keys=True)


@dataclass
class EvolutionResult:
    records: list
    best_per_generation: list
    config: EvoConfig

    def top(self, k: int) -> list:
        return top_by_fitness(self.records, k)


# ----------------------------------------------------------------- scaling


def minmax_scale(values: Sequence[float]) -> list[float]:
    """``(v - min) / (max - min)``; an all-equal input maps to 0.5."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("minmax_scale needs at least one value")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return [0.5] * v.size
    return [float(x) for x in np.clip((v - lo) / (hi - lo), 0.0, 1.0)]


def f_aeb(scaled_accuracy: float, scaled_energy: float, alpha: float = 0.5) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * (1.0 - scaled_energy) + (1.0 - alpha) * scaled_accuracy


def rescale(records: Sequence[FitnessRecord], alpha: float) -> list[FitnessRecord]:
    """Recompute scaled values and fitness over ``records`` jointly."""
    if not records:
        return []
    sa = minmax_scale([r.accuracy for r in records])
    se = minmax_scale([r.energy for r in records])
    return [
        replace(r, scaled_acc=a, scaled_energy=e, fitness=f_aeb(a, e, alpha))
        for r, a, e in zip(records, sa, se)
    ]


def fitness_order(records: Sequence[FitnessRecord]) -> list[int]:
    """Indices by descending fitness; ties keep evaluation order."""
    return sorted(range(len(records)), key=lambda i: (-records[i].fitness, i))


def top_by_fitness(records: Sequence[FitnessRecord], k: int) -> list[FitnessRecord]:
    return [records[i] for i in fitness_order(records)[:k]]


# ----------------------------------------------------------------- operators


def candidate_key(cand: Candidate) -> tuple:
    return (type(cand).__name__,) + tuple(normalize(cand).to_tuple())


def random_candidate(space: SearchSpace, rng: Rng) -> Candidate:
    return sample_candidate(space, rng)


def _other(choices: list, current, rng: Rng):
    rest = [c for c in choices if round(float(c), 10) != round(float(current), 10)]
    return rng.choice(rest) if rest else current


def _layer_columns(c: CandidateArch) -> list[list]:
    return [list(c.mlp_ratio_per_layer), list(c.head_num_per_layer),
            list(c.u_th_per_layer), list(c.tau_per_layer)]


_LAYER_GENES = ("mlp_ratio", "head_num", "u_th", "tau")


def _arch(depth, cols, time_step, embed) -> CandidateArch:
    return CandidateArch(depth, *(tuple(c[:depth]) for c in cols), time_step, embed)


def mutate(cand: Candidate, space: SearchSpace, rng: Rng, mutation_prob: float) -> Candidate:
    """With probability ``mutation_prob`` resample one uniformly chosen gene
    to a different grid value.  A depth change appends freshly drawn blocks
    or truncates trailing ones."""
    if rng.random() >= mutation_prob:
        return cand
    ch = space.choices
    if isinstance(cand, CandidateSnn):
        genes = [("u_th", i) for i in range(len(cand.u_th_per_block))]
        genes += [("tau", i) for i in range(len(cand.tau_per_block))]
        genes.append(("time_step", 0))
        name, i = genes[int(rng.integers(len(genes)))]
        if name == "time_step":
            return replace(cand, time_step=_other(ch("time_step"), cand.time_step, rng))
        vals = list(cand.u_th_per_block if name == "u_th" else cand.tau_per_block)
        vals[i] = _other(ch(name), vals[i], rng)
        field = "u_th_per_block" if name == "u_th" else "tau_per_block"
        return replace(cand, **{field: tuple(vals)})

    d = cand.depth
    genes = [("depth", 0)]
    genes += [(g, i) for g in _LAYER_GENES for i in range(d)]
    genes += [("time_step", 0), ("embed_dim", 0)]
    name, i = genes[int(rng.integers(len(genes)))]
    cols = _layer_columns(cand)
    if name == "depth":
        nd = _other(ch("depth"), d, rng)
        for _ in range(d, nd):
            for col, v in zip(cols, sample_layer_genes(space, rng)):
                col.append(v)
        return _arch(nd, cols, cand.time_step, cand.embed_dim)
    if name == "time_step":
        return replace(cand, time_step=_other(ch("time_step"), cand.time_step, rng))
    if name == "embed_dim":
        return replace(cand, embed_dim=_other(ch("embed_dim"), cand.embed_dim, rng))
    g = _LAYER_GENES.index(name)
    cols[g][i] = _other(ch(name), cols[g][i], rng)
    return _arch(d, cols, cand.time_step, cand.embed_dim)


def crossover(a: Candidate, b: Candidate, rng: Rng) -> Candidate:
    """Uniform gene-wise crossover.  Architecture genomes are aligned block by
    block up to the deeper parent; where only one parent has a block the
    child takes that parent's genes."""
    if type(a) is not type(b):
        raise TypeError("crossover parents come from different spaces")
    pick = lambda x, y: x if rng.random() < 0.5 else y  # noqa: E731
    if isinstance(a, CandidateSnn):
        if len(a.u_th_per_block) != len(b.u_th_per_block):
            raise TypeError("crossover parents have different block counts")
        return CandidateSnn(
            tuple(pick(x, y) for x, y in zip(a.u_th_per_block, b.u_th_per_block)),
            tuple(pick(x, y) for x, y in zip(a.tau_per_block, b.tau_per_block)),
            pick(a.time_step, b.time_step),
        )
    ca, cb = _layer_columns(a), _layer_columns(b)
    n = max(a.depth, b.depth)
    cols = [[] for _ in _LAYER_GENES]
    for g in range(len(_LAYER_GENES)):
        for i in range(n):
            if i < a.depth and i < b.depth:
                cols[g].append(pick(ca[g][i], cb[g][i]))
            else:
                cols[g].append(ca[g][i] if i < a.depth else cb[g][i])
    depth = pick(a.depth, b.depth)
    return _arch(depth, cols, pick(a.time_step, b.time_step), pick(a.embed_dim, b.embed_dim))


# ----------------------------------------------------------------- search


class _Cache:
    def __init__(self, evaluator: Evaluator):
        self.evaluator = evaluator
        self.results: dict = {}

    def __contains__(self, cand) -> bool:
        return candidate_key(cand) in self.results

    def __call__(self, cand: Candidate) -> tuple[float, float, float | None]:
        """``(accuracy, energy, fr)``; evaluators may omit the firing rate."""
        key = candidate_key(cand)
        if key not in self.results:
            try:
                out = tuple(self.evaluator(cand))
            except Exception as exc:
                raise SearchError(f"evaluating {format_candidate(cand)}: {exc}", cand) from exc
            acc, energy = float(out[0]), float(out[1])
            fr = float(out[2]) if len(out) > 2 and out[2] is not None else None
            if not (math.isfinite(acc) and math.isfinite(energy)):
                raise SearchError(f"non-finite result for {format_candidate(cand)}", cand)
            self.results[key] = (acc, energy, fr)
        return self.results[key]


def _check(cand: Candidate, space: SearchSpace) -> Candidate:
    problems = validate(cand, space)
    if problems:
        raise SearchError(f"operator produced invalid candidate: {problems[0]}", cand)
    return cand


def _fresh_random(space, rng, seen, max_tries=1000):
    for _ in range(max_tries):
        c = random_candidate(space, rng)
        if candidate_key(c) not in seen:
            return c
    return None


def evolve(space: SearchSpace, evaluator: Evaluator, config: EvoConfig | None = None,
           on_generation=None) -> EvolutionResult:
    """Elitist genetic search.

    Generation 0 is random.  Each later generation breeds offspring from the
    ``parent_count`` fittest records (all records so far when ``elitist``,
    else the last generation), via crossover with probability
    ``crossover_prob`` followed by mutation.  Offspring that were already
    evaluated are rejected; after repeated rejections a forced mutation and
    then a fresh random draw fill the slot.  The run stops after
    ``generations`` or once ``total_sample_budget`` distinct candidates have
    been evaluated.
    """
    cfg = config or EvoConfig()
    rng = Rng(cfg.seed, (0xE5, 0))
    cache = _Cache(evaluator)
    budget = cfg.total_sample_budget
    records: list[FitnessRecord] = []
    bests: list[FitnessRecord] = []
    seen: set = set()
    last_gen: list[FitnessRecord] = []

    def remaining():
        return None if budget is None else budget - len(records)

    for gen in range(cfg.generations):
        room = remaining()
        if room is not None and room <= 0:
            break
        target = cfg.population_size if room is None else min(cfg.population_size, room)
        grng = rng.child(gen)
        population: list[Candidate] = []
        if gen == 0:
            while len(population) < target:
                c = _fresh_random(space, grng, seen)
                if c is None:
                    break
                seen.add(candidate_key(c))
                population.append(c)
        else:
            pool = records if cfg.elitist else last_gen
            parents = [r.candidate for r in top_by_fitness(pool, cfg.parent_count)]
            attempts = 0
            while len(population) < target:
                a = parents[int(grng.integers(len(parents)))]
                if grng.random() < cfg.crossover_prob and len(parents) > 1:
                    b = parents[int(grng.integers(len(parents)))]
                    child = crossover(a, b, grng)
                else:
                    child = a
                child = mutate(child, space, grng, cfg.mutation_prob)
                attempts += 1
                if candidate_key(child) in seen and attempts > 20:
                    child = mutate(child, space, grng, 1.0)
                if candidate_key(child) in seen and attempts > 200:
                    child = _fresh_random(space, grng, seen)
                    if child is None:
                        break
                if candidate_key(child) in seen:
                    continue
                attempts = 0
                seen.add(candidate_key(_check(child, space)))
                population.append(child)
        if not population:
            break
        new = []
        for c in population:
            acc, energy, fr = cache(c)
            new.append(FitnessRecord(c, acc, energy, generation=gen, fr=fr))
        records = rescale(records + new, cfg.alpha)
        last_gen = records[-len(new):]
        best = top_by_fitness(records, 1)[0]
        bests.append(best)
        if on_generation is not None:
            on_generation(gen, records)
    return EvolutionResult(records, bests, cfg)


def random_search(space: SearchSpace, evaluator: Evaluator, n: int, rng: Rng,
                  alpha: float = 0.5) -> list[FitnessRecord]:
    """``n`` distinct uniformly drawn candidates, scaled among themselves."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cache = _Cache(evaluator)
    seen: set = set()
    out = []
    while len(out) < n:
        c = _fresh_random(space, rng, seen)
        if c is None:
            break
        seen.add(candidate_key(c))
        acc, energy, fr = cache(c)
        out.append(FitnessRecord(c, acc, energy, fr=fr))
    return rescale(out, alpha)


# ------------------------------------------------------------ multi-objective


def dominates(p, q) -> bool:
    """``p`` strictly dominates ``q``; points are ``(energy, accuracy)``."""
    return p[0] <= q[0] and p[1] >= q[1] and (p[0] < q[0] or p[1] > q[1])


def weakly_dominates(p, q) -> bool:
    return p[0] <= q[0] and p[1] >= q[1]


def _point(r):
    return (r.energy, r.accuracy) if isinstance(r, FitnessRecord) else (float(r[0]), float(r[1]))


def pareto_front(records: Sequence) -> list:
    """Non-dominated subset (minimize energy, maximize accuracy), ordered by
    energy ascending.  Accepts FitnessRecords or ``(energy, accuracy)`` pairs.
    Exact duplicates of a front point are all kept."""
    pts = [_point(r) for r in records]
    order = sorted(range(len(pts)), key=lambda i: (pts[i][0], -pts[i][1], i))
    front = []
    best_acc = -math.inf
    best_e = None
    for i in order:
        e, a = pts[i]
        if a > best_acc:
            best_acc, best_e = a, e
            front.append(records[i])
        elif a == best_acc and e == best_e:
            front.append(records[i])
    return front


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> float:
    """Kendall's tau-b over all pairs (ties corrected); nan if either input is
    constant."""
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 2:
        raise ValueError("kendall_tau needs at least two points")
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    iu = np.triu_indices(n, 1)
    sx = np.sign(xa[:, None] - xa[None, :])[iu].astype(np.int64)
    sy = np.sign(ya[:, None] - ya[None, :])[iu].astype(np.int64)
    s = int(np.sum(sx * sy))
    n0 = n * (n - 1) // 2
    n1 = int(np.count_nonzero(sx == 0))
    n2 = int(np.count_nonzero(sy == 0))
    denom = math.sqrt((n0 - n1) * (n0 - n2))
    if denom == 0:
        return math.nan
    return s / denom


def hypervolume(points: Iterable, reference: tuple[float, float]) -> float:
    """Area dominated by ``points`` (minimize energy, maximize accuracy) and
    bounded by ``reference = (max_energy, min_accuracy)``."""
    e_ref, a_ref = reference
    pts = sorted((_point(p) for p in points), key=lambda p: (p[0], -p[1]))
    pts = [p for p in pts if p[0] < e_ref and p[1] > a_ref]
    area = 0.0
    best = a_ref
    for i, (e, a) in enumerate(pts):
        best = max(best, a)
        nxt = pts[i + 1][0] if i + 1 < len(pts) else e_ref
        area += (nxt - e) * (best - a_ref)
    return area


def coverage(a: Sequence, b: Sequence) -> float:
    """Fraction of ``b`` weakly dominated by at least one member of ``a``."""
    pa = [_point(p) for p in a]
    pb = [_point(p) for p in b]
    if not pb:
        raise ValueError("coverage of an empty set")
    hit = sum(any(weakly_dominates(p, q) for p in pa) for q in pb)
    return hit / len(pb)


# ------------------------------------------------------------ I/O


def write_records(path, records: Sequence[FitnessRecord], seed: int):
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json(seed) + "\n")


def read_records(path, space: SearchSpace | None = None) -> list[FitnessRecord]:
    from .space import parse_candidate

    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(FitnessRecord(
                    parse_candidate(d["candidate"], space),
                    float(d["accuracy"]),
                    float(d["energy_joules"]),
                    float(d["scaled_acc"]),
                    float(d["scaled_energy"]),
                    float(d["fitness"]),
                    int(d["generation"]),
                    float(d["fr"]) if d.get("fr") is not None else None,
                ))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record: {exc}") from exc
    return out


# ------------------------------------------------------------ analytic toy


@dataclass(frozen=True)
class AnalyticEvaluator:
    """Closed-form stand-in for a trained supernet.

    Per-block firing rate falls with threshold and rises with decay.  The
    accuracy proxy peaks when every block fires at a moderate rate
    (``best_fr``), gains a little from capacity (embed x MLP ratio summed
    over blocks) and from longer time windows.  Energy is the real energy
    model fed with those firing rates, so cheaper firing trades against
    accuracy.
    """

    space: SearchSpace
    image_size: tuple = (32, 32)
    in_channels: int = 3
    num_classes: int = 10
    sps_fr: float = 0.3
    best_fr: float = 0.18
    detune_weight: float = 0.06

    def firing_rates(self, arch: CandidateArch) -> list[float]:
        return [
            float(np.clip(0.45 * (1.0 - 1.0 / tau) / u_th, 0.02, 0.9))
            for u_th, tau in zip(arch.u_th_per_layer, arch.tau_per_layer)
        ]

    def fr_trace(self, arch: CandidateArch) -> dict[str, float]:
        frs = self.firing_rates(arch)
        trace = {}
        for s in layer_catalog(arch, self.image_size, self.in_channels, self.num_classes)[1:]:
            if s.layer_id.startswith("block"):
                trace[s.layer_id] = frs[int(s.layer_id[5:].split(".")[0])]
            elif s.layer_id == "head":
                trace[s.layer_id] = frs[-1]
            else:
                trace[s.layer_id] = self.sps_fr
        return trace

    def accuracy(self, arch: CandidateArch) -> float:
        frs = self.firing_rates(arch)
        capacity = sum(arch.embed_dim * r for r in arch.mlp_ratio_per_layer) / 384.0
        size_gain = 0.03 * (1.0 - math.exp(-capacity / 6.0))
        time_gain = 0.015 * (arch.time_step - 2)
        detune = self.detune_weight * sum(math.log(fr / self.best_fr) ** 2 for fr in frs) / len(frs)
        return float(np.clip(0.8 + size_gain + time_gain - detune, 0.0, 1.0))

    def __call__(self, cand: Candidate) -> tuple[float, float]:
        arch = self.space.to_arch(cand)
        report = model_energy(arch, self.fr_trace(arch), arch.time_step,
                              image_size=self.image_size, in_channels=self.in_channels,
                              num_classes=self.num_classes)
        return self.accuracy(arch), report.total_energy
