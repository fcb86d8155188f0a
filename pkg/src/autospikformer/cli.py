"""Command-line entry point: ``autospikformer {train,search,evaluate,energy,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable or malformed files, checkpoint mismatch), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields

from . import data as data_io
from .energy import EnergyError, model_energy, read_fr_trace
from .evolution import EvoConfig, SearchError, evolve, random_search, read_records, top_by_fitness
from .evolution import pareto_front, write_records
from .model import Supernet
from .report import front_csv, scatter_svg, tau_summary
from .space import (
    SPACE_KINDS,
    CandidateParseError,
    baseline_candidate,
    make_space,
    parse_candidate,
)
from .tensor import Rng
from .training import (
    AdamW,
    CheckpointError,
    SupernetEvaluator,
    TrainConfig,
    calibration_batches,
    load_checkpoint,
    save_checkpoint,
    train_supernet,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOCK_NAME = ".lock"


class ConfigError(ValueError):
    """Invalid run configuration (exit code 1)."""


class LockError(RuntimeError):
    """Another live process holds the checkpoint directory."""


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    """Everything a command needs.  JSON schema (all keys optional)::

        {"space": "toy_s", "data": "synthetic", "seed": 0,
         "ckpt": "checkpoints", "out": "results", "top": null,
         "baseline": false, "eval_batch_size": 64,
         "train": {TrainConfig fields except seed/space},
         "search": {EvoConfig fields except seed}}

    ``seed`` drives supernet init, batch order, step sampling and search.
    """

    space: str = "toy_s"
    data: str = "synthetic"
    seed: int = 0
    ckpt: str = "checkpoints"
    out: str = "results"
    top: int | None = None
    baseline: bool = False
    eval_batch_size: int = 64
    train: TrainConfig = field(default_factory=TrainConfig)
    search: EvoConfig = field(default_factory=EvoConfig)

    def validate(self):
        if self.space not in SPACE_KINDS:
            raise ConfigError(f"space must be one of {', '.join(SPACE_KINDS)}, got {self.space!r}")
        parse_data_spec(self.data)
        if not 0 <= self.seed < 2**32:
            raise ConfigError("seed must lie in [0, 2**32)")
        if self.top is not None and self.top < 1:
            raise ConfigError("top must be >= 1")
        if self.eval_batch_size < 1:
            raise ConfigError("eval_batch_size must be >= 1")
        self.train.seed = self.seed
        self.train.space = self.space
        self.search.seed = self.seed
        return self


def _build(cls, d: dict, where: str, forbid=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)} - set(forbid)
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_run_config(path: str | None) -> tuple[RunConfig, set]:
    """Parse a JSON config file; returns the config and the keys it set."""
    if path is None:
        return RunConfig(), set()
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {', '.join(unknown)}")
    raw = dict(raw)
    train_d, search_d = raw.pop("train", {}), raw.pop("search", {})
    train = _build(TrainConfig, train_d, "train", forbid=("seed", "space"))
    search = _build(EvoConfig, search_d, "search", forbid=("seed",))
    cfg = _build(RunConfig, raw, path)
    cfg.train, cfg.search = train, search
    return cfg, set(raw) | {f"search.{k}" for k in search_d}


# ------------------------------------------------------------------- data


def parse_data_spec(spec: str) -> tuple[str, list]:
    """``synthetic[:classes[:size[:train_per_class[:val_per_class]]]]``,
    ``mnist:DIR`` or ``cifar10:DIR``."""
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        parts = rest.split(":") if rest else []
        if len(parts) > 4:
            raise ConfigError(f"bad data spec {spec!r}")
        try:
            nums = [int(p) for p in parts]
        except ValueError:
            raise ConfigError(f"bad data spec {spec!r}: expected integers") from None
        defaults = [3, 16, 32, 16]
        nums = nums + defaults[len(nums):]
        if not 2 <= nums[0] <= data_io.MAX_SYNTHETIC_CLASSES:
            raise ConfigError(f"bad data spec {spec!r}: classes must lie in [2, {data_io.MAX_SYNTHETIC_CLASSES}]")
        if nums[1] < data_io.MIN_SYNTHETIC_SIZE or nums[1] % 4:
            raise ConfigError(f"bad data spec {spec!r}: size must be a multiple of 4, at least "
                              f"{data_io.MIN_SYNTHETIC_SIZE}")
        if nums[2] < 1 or nums[3] < 1:
            raise ConfigError(f"bad data spec {spec!r}: sample counts must be >= 1")
        return kind, nums
    if kind in ("mnist", "cifar10"):
        if not rest:
            raise ConfigError(f"data spec {spec!r} needs a directory, e.g. {kind}:/path")
        return kind, [rest]
    raise ConfigError(f"unknown dataset kind {kind!r} (synthetic, mnist, cifar10)")


def load_data(spec: str) -> tuple[data_io.Dataset, data_io.Dataset]:
    """``(train, eval)`` splits, normalized."""
    kind, args = parse_data_spec(spec)
    if kind == "synthetic":
        c, size, ntr, nva = args
        tr = data_io.synthetic_patterns(0, c, size, ntr, split="train")
        va = data_io.synthetic_patterns(0, c, size, nva, split="val")
    elif kind == "mnist":
        tr, va = data_io.load_mnist(args[0], "train"), data_io.load_mnist(args[0], "test")
    else:
        tr, va = data_io.load_cifar10_bin(args[0], "train"), data_io.load_cifar10_bin(args[0], "test")
    return data_io.normalize(tr), data_io.normalize(va)


# ------------------------------------------------------------------- lock


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextmanager
def directory_lock(directory: str):
    """Exclusive writer lock; a lock left by a dead process is taken over."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, LOCK_NAME)
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                with open(path) as f:
                    pid = int(f.read().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _pid_alive(pid) and pid != os.getpid():
                raise LockError(f"{directory} is locked by running process {pid}") from None
            os.unlink(path)
    else:
        raise LockError(f"could not acquire {path}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        try:
            os.unlink(path)
        except FileNotFoundError:
            pass


# --------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, stop_after: int | None = None, log=print) -> dict:
    """Train (or resume) the supernet; checkpoints after every epoch."""
    train_set, _ = load_data(cfg.data)
    space = make_space(cfg.space)
    with directory_lock(cfg.ckpt):
        manifest_path = os.path.join(cfg.ckpt, "manifest.json")
        if os.path.exists(manifest_path):
            supernet, opt, manifest = load_checkpoint(cfg.ckpt, expect_space=cfg.space)
            saved = TrainConfig.from_dict(manifest["config"])
            if asdict(saved) != asdict(cfg.train) or manifest.get("data") != cfg.data:
                raise CheckpointError(
                    f"{cfg.ckpt} holds a run with a different configuration; use a fresh --ckpt"
                )
            start, history = manifest["epoch"], manifest["loss_history"]
            log(f"resuming from epoch {start}")
        else:
            supernet = Supernet(space, train_set.shape[0], train_set.num_classes, cfg.seed)
            opt = AdamW(supernet.params, cfg.train.lr, weight_decay=cfg.train.weight_decay)
            start, history = 0, []

        def on_epoch(epoch, hist):
            save_checkpoint(cfg.ckpt, supernet, opt, cfg.train, epoch + 1, hist, {"data": cfg.data})
            log(f"epoch {epoch + 1}/{cfg.train.epochs} loss {hist[-1]:.6f}")

        _, _, history = train_supernet(supernet, train_set, cfg.train, opt, start,
                                       stop_after, history, on_epoch)
    return {"epochs_done": len(history), "final_loss": history[-1] if history else None}


def _search_setup(cfg: RunConfig):
    supernet, _, manifest = load_checkpoint(cfg.ckpt, expect_space=cfg.space)
    data_spec = manifest.get("data", cfg.data)
    train_set, eval_set = load_data(data_spec)
    tcfg = TrainConfig.from_dict(manifest["config"])
    calib = calibration_batches(train_set, tcfg)
    return supernet, SupernetEvaluator(supernet, calib, eval_set, cfg.eval_batch_size), eval_set


def cmd_search(cfg: RunConfig, log=print) -> dict:
    """Evolutionary (or ``baseline`` random) search on inherited weights."""
    supernet, evaluator, _ = _search_setup(cfg)
    space = supernet.space
    ev = cfg.search
    if cfg.baseline:
        n = ev.total_sample_budget or ev.population_size * ev.generations
        records = random_search(space, evaluator, n, Rng(cfg.seed, (0x5A,)), ev.alpha)
    else:
        def progress(gen, recs):
            best = top_by_fitness(recs, 1)[0]
            log(f"generation {gen}: {len(recs)} evaluated, best fitness {best.fitness:.4f} "
                f"acc {best.accuracy:.4f} energy {best.energy:.4g} J")

        records = evolve(space, evaluator, ev, progress).records
    os.makedirs(cfg.out, exist_ok=True)
    write_records(os.path.join(cfg.out, "results.jsonl"), records, cfg.seed)
    selected = records
    if cfg.top is not None:
        selected = top_by_fitness(records, cfg.top)
        write_records(os.path.join(cfg.out, "top.jsonl"), selected, cfg.seed)
    front = pareto_front(selected)
    with open(os.path.join(cfg.out, "front.csv"), "w") as f:
        f.write(front_csv(front))
    base = evaluator.evaluate(baseline_candidate(space))
    summary = {
        "space": space.kind,
        "seed": cfg.seed,
        "mode": "random" if cfg.baseline else "evolution",
        "evaluated": len(records),
        "mean_accuracy": sum(r.accuracy for r in records) / len(records),
        "best": json.loads(top_by_fitness(records, 1)[0].to_json(cfg.seed)),
        "baseline": base.to_json(),
        "front_size": len(front),
    }
    with open(os.path.join(cfg.out, "summary.json"), "w") as f:
        f.write(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def cmd_evaluate(cfg: RunConfig, candidate_text: str) -> dict:
    supernet, evaluator, _ = _search_setup(cfg)
    cand = parse_candidate(candidate_text, supernet.space)
    return evaluator.evaluate(cand).to_json()


def cmd_energy(arch_text: str, trace_path: str, time_step: int | None, space_kind: str | None,
               image_size: int, in_channels: int, num_classes: int) -> str:
    space = make_space(space_kind) if space_kind else None
    cand = parse_candidate(arch_text, space)
    if space is None:
        space = make_space("s_s" if not hasattr(cand, "depth") else "s_ts")
    t = cand.time_step if time_step is None else time_step
    grid = space.choices("time_step")
    if t not in grid:
        raise ConfigError(f"time_step {t} not in {grid}")
    trace = read_fr_trace(trace_path)
    report = model_energy(cand, trace, t, space=space, image_size=(image_size, image_size),
                          in_channels=in_channels, num_classes=num_classes, strict=True)
    return report.to_csv()


def cmd_report(results_path: str, out_dir: str) -> dict:
    records = read_records(results_path)
    if len(records) < 2:
        raise data_io.DataFormatError(f"{results_path}: a report needs at least two records")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "scatter.svg"), "w") as f:
        f.write(scatter_svg(records))
    front = pareto_front(records)
    with open(os.path.join(out_dir, "front.csv"), "w") as f:
        f.write(front_csv(front))
    tau = tau_summary(records)
    return {"records": len(records), "front_size": len(front), "kendall_tau": tau}


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="autospikformer", description="Spiking transformer search toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration; flags override its values")
        sp.add_argument("--space", choices=SPACE_KINDS)
        sp.add_argument("--data", help="synthetic[:C[:SIZE[:NTRAIN[:NVAL]]]] | mnist:DIR | cifar10:DIR")
        sp.add_argument("--ckpt", help="checkpoint directory")
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train the weight-sharing supernet")
    common(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--stop-after", type=int, help="stop once this many epochs are done (resumable)")

    s = sub.add_parser(
        "search",
        help="evolutionary search with fitness alpha*(1-E) + (1-alpha)*A",
        description="Fitness rewards LOW energy: alpha*(1 - scaled energy) + (1 - alpha)*scaled accuracy. "
                    "The weighted sum is often written with +alpha*E, which would favour costly networks.",
    )
    common(s)
    s.add_argument("--out", help="output directory for results.jsonl, front.csv, summary.json")
    s.add_argument("--budget", type=int, help="total distinct candidates to evaluate")
    s.add_argument("--top", type=int, help="keep the top-K by fitness for the front")
    s.add_argument("--alpha", type=float, help="energy weight in [0, 1]")
    s.add_argument("--baseline", action="store_true", help="random search instead of evolution")
    s.add_argument("--generations", type=int)
    s.add_argument("--population", type=int)

    e = sub.add_parser("evaluate", help="inherited-weight evaluation of one candidate")
    common(e)
    e.add_argument("--candidate", required=True, help='tuple text, e.g. "(1.0, 1.0, 1.0, 1.0, 2, 2, 2, 2, 4)"')
    e.add_argument("--out", help="write the JSON result here as well")

    g = sub.add_parser("energy", help="energy audit from a firing-rate trace (no model run)")
    g.add_argument("--arch", required=True, help="candidate tuple text")
    g.add_argument("--trace", required=True, help="lines layer_id,kind,flops,fr")
    g.add_argument("--time-step", type=int)
    g.add_argument("--space", choices=SPACE_KINDS)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--in-channels", type=int, default=3)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--out", help="write the CSV here instead of stdout")

    r = sub.add_parser("report", help="scatter SVG, Pareto CSV and Kendall tau from results")
    r.add_argument("--results", required=True)
    r.add_argument("--out", required=True)
    return p


def _config_from_args(args) -> RunConfig:
    cfg, set_keys = load_run_config(getattr(args, "config", None))
    for name in ("space", "data", "ckpt", "seed", "out", "top"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "baseline", False):
        cfg.baseline = True
    tr = {}
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size")):
        v = getattr(args, flag, None)
        if v is not None:
            tr[key] = v
    ev = {}
    for flag, key in (("budget", "total_sample_budget"), ("alpha", "alpha"),
                      ("generations", "generations"), ("population", "population_size")):
        v = getattr(args, flag, None)
        if v is not None:
            ev[key] = v
    try:
        if tr:
            cfg.train = TrainConfig(**{**asdict(cfg.train), **tr})
        if ev:
            merged = {**asdict(cfg.search), **ev}
            if "population_size" in ev and "search.parent_count" not in set_keys:
                merged["parent_count"] = min(merged["parent_count"], merged["population_size"])
            cfg.search = EvoConfig(**merged)
        budget = cfg.search.total_sample_budget
        explicit_gens = "generations" in ev or "search.generations" in set_keys
        if budget is not None and not explicit_gens:
            gens = max(1, math.ceil(budget / cfg.search.population_size))
            cfg.search = EvoConfig(**{**asdict(cfg.search), "generations": gens})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = _config_from_args(args)
            if args.stop_after is not None and args.stop_after < 1:
                raise ConfigError("--stop-after must be >= 1")
            res = cmd_train(cfg, args.stop_after)
            print(json.dumps(res, sort_keys=True))
        elif args.command == "search":
            cfg = _config_from_args(args)
            res = cmd_search(cfg)
            print(json.dumps({k: res[k] for k in ("evaluated", "mean_accuracy", "front_size")}, sort_keys=True))
        elif args.command == "evaluate":
            cfg = _config_from_args(args)
            res = cmd_evaluate(cfg, args.candidate)
            text = json.dumps(res, indent=1, sort_keys=True)
            print(f"candidate {res['candidate']}")
            print(f"accuracy {res['accuracy']:.4f} ({res['correct']}/{res['total']})")
            print(f"energy {res['energy_joules']:.6g} J")
            for k, v in res["fr_trace"].items():
                print(f"  fr {k} {v:.4f}")
            if args.out:
                with open(args.out, "w") as f:
                    f.write(text + "\n")
            else:
                print(text)
        elif args.command == "energy":
            csv_text = cmd_energy(args.arch, args.trace, args.time_step, args.space,
                                  args.image_size, args.in_channels, args.classes)
            if args.out:
                with open(args.out, "w") as f:
                    f.write(csv_text)
            else:
                sys.stdout.write(csv_text)
        elif args.command == "report":
            res = cmd_report(args.results, args.out)
            print(f"records {res['records']} front {res['front_size']} "
                  f"kendall_tau(accuracy, energy) {res['kendall_tau']:.4f}")
    except (ConfigError, CandidateParseError, LockError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SearchError as exc:
        print(f"search failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.__cause__, FloatingPointError) else EXIT_DATA
    except (data_io.DataFormatError, CheckpointError, EnergyError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
