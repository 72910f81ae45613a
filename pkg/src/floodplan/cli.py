"""Command-line interface: ``floodplan <command> [flags]``.

All artefacts of one study live in a run directory (``--out``, else
``$FLOODPLAN_RUN_DIR``, else ``./floodplan-run``)::

    config.json       flags, seeds and input hashes of every command run so far
    dataset.csv       hourly frame
    checkpoints/      evaluator.npz, manager-<arch>.npz
    reports/          metrics, schedules, timings and attention CSV/JSON
    traces/           training manifests and GA fitness traces

Exit codes: 0 success, 1 validation or contract failure, 2 IO, missing input
or missing capability.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .baselines import GaConfig
from .data import DEFAULT_CLASS_COUNTS, load_csv, write_csv
from .errors import CapabilityError, FloodplanError, IngestionError
from .losses import Thresholds
from .models import ARCHITECTURES, EvaluatorModel, ManagerModel, extract_attention, load_checkpoint
from .sim import default_topology, generate_dataset

RUN_DIR_ENV = "FLOODPLAN_RUN_DIR"
DEFAULT_RUN_DIR = "floodplan-run"


class InputError(Exception):
    """Missing or unusable input: exit code 2."""


class RunDir:
    def __init__(self, path: str | Path):
        self.path = Path(path)

    @property
    def dataset(self) -> Path:
        return self.path / "dataset.csv"

    @property
    def checkpoints(self) -> Path:
        return self.path / "checkpoints"

    @property
    def reports(self) -> Path:
        return self.path / "reports"

    @property
    def traces(self) -> Path:
        return self.path / "traces"

    @property
    def evaluator(self) -> Path:
        return self.checkpoints / "evaluator.npz"

    def manager(self, arch: str) -> Path:
        return self.checkpoints / f"manager-{arch}.npz"

    def managers(self) -> list[Path]:
        return sorted(self.checkpoints.glob("manager-*.npz"))

    def create(self) -> "RunDir":
        for d in (self.path, self.checkpoints, self.reports, self.traces):
            d.mkdir(parents=True, exist_ok=True)
        return self

    def record(self, command: str, entry: dict) -> None:
        """Merge one command's manifest into config.json."""
        path = self.path / "config.json"
        config = json.loads(path.read_text()) if path.exists() else {}
        config[command] = entry
        path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    print(f"wrote {path}")


def _arguments(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k != "handler"}


# ---------------------------------------------------------------- inputs


def _data_path(args, run: RunDir) -> Path:
    return Path(args.data) if args.data else run.dataset


def _frame(args, run: RunDir):
    path = _data_path(args, run)
    if not path.exists():
        raise InputError(f"dataset not found: {path} (run 'floodplan simulate' or pass --data)")
    return load_csv(path, DEFAULT_CLASS_COUNTS), path


def _checkpoint(path: Path, role: str):
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    model = load_checkpoint(path)
    if model.role != role:
        raise InputError(f"{path} holds a {model.role}, expected a {role}")
    # loaded models are only ever read downstream
    return model.freeze()


def _manager_paths(args, run: RunDir) -> list[Path]:
    if getattr(args, "manager", None):
        return [Path(p) for p in args.manager]
    found = run.managers()
    if not found:
        raise InputError(f"no manager checkpoints in {run.checkpoints} (run 'floodplan train-manager')")
    return found


def _prepared(frame, evaluator: EvaluatorModel) -> pipeline.Prepared:
    return pipeline.prepare(frame, evaluator.io.w, evaluator.io.k, normalizer=evaluator.normalizer)


def _thresholds(args, n: int) -> Thresholds:
    return Thresholds.parse(args.thresholds, n)


def _ga_config(args) -> GaConfig:
    return GaConfig(population=args.population, generations=args.generations, seed=args.seed)


def _train_config(args, base):
    overrides = {"seed": args.seed}
    for name in ("learning_rate", "batch_size", "max_epochs", "patience", "epoch_samples", "alpha", "beta"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return replace(base, **overrides)


# ---------------------------------------------------------------- commands


def cmd_simulate(args, run: RunDir) -> None:
    if args.hours < args.w + args.k:
        raise InputError(f"--hours must be at least w + k = {args.w + args.k} (got {args.hours})")
    run.create()
    topo = default_topology()
    frame = generate_dataset(args.seed, args.hours, topo, args.w, args.k)
    path = _data_path(args, run)
    write_csv(frame, path)
    print(f"wrote {path} ({len(frame)} rows, {len(frame.columns)} columns)")
    # same frame with gate openings in ft and pump rates in ft3/s; not read back by the pipeline
    physical = path.with_name(path.stem + "-physical.csv")
    write_csv(frame, physical, topo.physical_scale())
    print(f"wrote {physical}")
    run.record("simulate", {"arguments": _arguments(args), "dataset_sha256": file_hash(path)})


def cmd_train_evaluator(args, run: RunDir) -> None:
    frame, data = _frame(args, run)
    run.create()
    topo = default_topology()
    p = pipeline.prepare(frame, args.w, args.k)
    config = _train_config(args, pipeline.EVALUATOR_TRAINING)
    model = EvaluatorModel(args.arch, p.roles, p.normalizer, p.w, p.k, pipeline.model_config(args.arch, {}),
                           topo.adjacency, seed=args.seed)
    model, manifest = pipeline.train_evaluator(p.train, model, config, print, p.dataset_hash)
    model.freeze().save(run.evaluator, {"dataset_sha256": p.dataset_hash})
    manifest.save(run.traces / "evaluator-training.json")
    print(f"wrote {run.evaluator}")
    run.record("train-evaluator", {"arguments": _arguments(args), "dataset_sha256": file_hash(data),
                                   "evaluator_fingerprint": model.fingerprint})


def cmd_train_manager(args, run: RunDir) -> None:
    frame, data = _frame(args, run)
    evaluator = _checkpoint(Path(args.evaluator) if args.evaluator else run.evaluator, "evaluator")
    run.create()
    topo = default_topology()
    p = _prepared(frame, evaluator)
    th = _thresholds(args, len(p.roles.water))
    config = _train_config(args, pipeline.MANAGER_TRAINING)
    model = ManagerModel(args.arch, p.roles, p.normalizer, p.w, p.k, pipeline.model_config(args.arch, {}),
                         topo.adjacency, topo.bounds, seed=args.seed)
    model, manifest = pipeline.train_manager(p.manager_mode(p.train), model, evaluator, th, config, print,
                                             p.dataset_hash)
    path = run.manager(args.arch)
    model.save(path, {"dataset_sha256": p.dataset_hash, "evaluator_fingerprint": evaluator.fingerprint,
                      "thresholds": args.thresholds})
    manifest.save(run.traces / f"manager-{args.arch}-training.json")
    print(f"wrote {path}")
    run.record(f"train-manager-{args.arch}", {"arguments": _arguments(args), "dataset_sha256": file_hash(data),
                                              "manager_fingerprint": model.fingerprint,
                                              "evaluator_fingerprint": evaluator.fingerprint})


def cmd_mitigate(args, run: RunDir) -> None:
    frame, data = _frame(args, run)
    evaluator = _checkpoint(run.evaluator, "evaluator")
    manager = _checkpoint(Path(args.manager) if args.manager else run.manager(args.arch), "manager")
    run.create()
    p = _prepared(frame, evaluator)
    sched = pipeline.manager_schedules(manager, p)
    names = [p.roles.columns[i] for i in p.roles.controls]
    stamps = frame.timestamps
    path = run.reports / f"schedules-{manager.arch}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "timestamp", "step"] + names)
        for i, anchor in enumerate(p.test.anchors):
            for j in range(p.k):
                ts = stamps[anchor + 1 + j].isoformat()
                w.writerow([i, ts, j + 1] + [repr(float(v)) for v in sched[i, j]])
    print(f"wrote {path} ({len(p.test)} windows)")
    run.record(f"mitigate-{manager.arch}", {"arguments": _arguments(args), "dataset_sha256": file_hash(data),
                                            "manager_fingerprint": manager.fingerprint})


def cmd_assess(args, run: RunDir) -> None:
    frame, data = _frame(args, run)
    evaluator = _checkpoint(run.evaluator, "evaluator")
    managers = [_checkpoint(m, "manager") for m in _manager_paths(args, run)]
    run.create()
    topo = default_topology()
    p = _prepared(frame, evaluator)
    th = _thresholds(args, len(p.roles.water))
    reports = pipeline.assess(p, evaluator, managers, th, topo, _ga_config(args), args.ga_windows,
                              args.alpha, args.beta)
    forecast, persistence = pipeline.evaluator_report(evaluator, p, th)
    _write(run.reports / "mitigation.csv", pipeline.mitigation_table(reports))
    _write(run.reports / "mitigation.json",
           json.dumps({k: json.loads(r.to_json()) for k, r in reports.items()}, indent=2, sort_keys=True) + "\n")
    _write(run.reports / "forecast.csv", pipeline.forecast_table([forecast, persistence]))
    run.record("assess", {"arguments": _arguments(args), "dataset_sha256": file_hash(data),
                          "evaluator_fingerprint": evaluator.fingerprint,
                          "manager_fingerprints": {m.arch: m.fingerprint for m in managers}})


def cmd_bench(args, run: RunDir) -> None:
    frame, data = _frame(args, run)
    evaluator = _checkpoint(run.evaluator, "evaluator")
    manager = _checkpoint(Path(args.manager[0]) if args.manager else run.manager(args.arch), "manager")
    run.create()
    p = _prepared(frame, evaluator)
    th = _thresholds(args, len(p.roles.water))
    timings = pipeline.bench(p, evaluator, manager, th, _ga_config(args), args.ga_windows, args.repeats)
    _write(run.reports / "bench.csv", pipeline.timing_table(timings))
    print(f"GA / manager per-window speedup: {pipeline.speedup(timings):.0f}x")
    run.record("bench", {"arguments": _arguments(args), "dataset_sha256": file_hash(data),
                         "evaluator_fingerprint": evaluator.fingerprint,
                         "manager_fingerprint": manager.fingerprint})


def cmd_explain(args, run: RunDir) -> None:
    frame, data = _frame(args, run)
    evaluator = _checkpoint(Path(args.evaluator) if args.evaluator else run.evaluator, "evaluator")
    run.create()
    p = _prepared(frame, evaluator)
    if not 0 <= args.window < len(p.test):
        raise InputError(f"--window must be in [0, {len(p.test) - 1}]")
    covariates = evaluator.io.covariate_names
    if args.covariate not in covariates:
        raise InputError(f"--covariate must be one of {', '.join(covariates)}")
    idx = [args.window]
    matrix = extract_attention(evaluator, p.test.past_batch(idx)[0], p.test.future_batch(idx)[0], args.covariate)
    path = run.reports / f"attention-{args.covariate}-window{args.window}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        # column j is hour anchor - w + 1 + j, so column w is the first future hour
        w.writerow([f"t{j}" for j in range(matrix.shape[1])])
        w.writerows([[repr(float(v)) for v in row] for row in matrix])
    print(f"wrote {path} ({matrix.shape[0]}x{matrix.shape[1]}, column {p.w} = first future hour)")
    run.record("explain", {"arguments": _arguments(args), "dataset_sha256": file_hash(data),
                           "evaluator_fingerprint": evaluator.fingerprint})


def cmd_run(args, run: RunDir) -> None:
    """simulate (unless the dataset exists), train both phases and assess."""
    if not _data_path(args, run).exists():
        cmd_simulate(args, run)
    cmd_train_evaluator(args, run)
    cmd_train_manager(args, run)
    args.manager = None
    cmd_assess(args, run)


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help=f"run directory (default ${RUN_DIR_ENV} or ./{DEFAULT_RUN_DIR})")
    p.add_argument("--data", help="dataset CSV (default <out>/dataset.csv)")
    p.add_argument("--seed", type=int, default=0)


def _add_windows(p) -> None:
    p.add_argument("--w", type=int, default=72, help="look-back hours")
    p.add_argument("--k", type=int, default=24, help="horizon hours")


def _add_thresholds(p) -> None:
    p.add_argument("--thresholds", default="3.5,0.0", help="flood,wastage levels in ft")
    p.add_argument("--alpha", type=float, default=None, help="flood-loss weight")
    p.add_argument("--beta", type=float, default=None, help="wastage-loss weight")


def _add_training(p) -> None:
    p.add_argument("--arch", choices=ARCHITECTURES, default="gtn")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--epoch-samples", dest="epoch_samples", type=int, help="training windows drawn per epoch")


def _add_ga(p) -> None:
    p.add_argument("--population", type=int, default=GaConfig.population)
    p.add_argument("--generations", type=int, default=GaConfig.generations)
    p.add_argument("--ga-windows", dest="ga_windows", type=int, default=3,
                   help="test windows with the most replay overflow to optimise with the GA")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodplan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic hourly dataset")
    _add_common(p)
    _add_windows(p)
    p.add_argument("--hours", type=int, default=pipeline.BENCHMARK_HOURS)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("train-evaluator", help="phase 1: fit the water-level surrogate")
    _add_common(p)
    _add_windows(p)
    _add_training(p)
    p.set_defaults(handler=cmd_train_evaluator)

    p = sub.add_parser("train-manager", help="phase 2: fit the scheduler through the frozen surrogate")
    _add_common(p)
    _add_training(p)
    _add_thresholds(p)
    p.add_argument("--evaluator", help="evaluator checkpoint (default <out>/checkpoints/evaluator.npz)")
    p.set_defaults(handler=cmd_train_manager)

    p = sub.add_parser("mitigate", help="write manager schedules for every test window")
    _add_common(p)
    p.add_argument("--arch", choices=ARCHITECTURES, default="gtn")
    p.add_argument("--manager", help="manager checkpoint (default <out>/checkpoints/manager-<arch>.npz)")
    p.set_defaults(handler=cmd_mitigate)

    p = sub.add_parser("assess", help="simulator-verified threshold metrics per method plus forecast skill")
    _add_common(p)
    _add_thresholds(p)
    _add_ga(p)
    p.add_argument("--manager", action="append", help="manager checkpoint(s) (default: all in <out>)")
    p.set_defaults(handler=cmd_assess)

    p = sub.add_parser("bench", help="wall-clock of evaluator inference, manager and GA scheduling")
    _add_common(p)
    _add_thresholds(p)
    _add_ga(p)
    p.add_argument("--arch", choices=ARCHITECTURES, default="gtn")
    p.add_argument("--manager", action="append", help="manager checkpoint")
    p.add_argument("--repeats", type=int, default=50, help="manager timing repeats")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("explain", help="cross-attention map of one test window as a CSV matrix")
    _add_common(p)
    p.add_argument("--evaluator", help="evaluator checkpoint (default <out>/checkpoints/evaluator.npz)")
    p.add_argument("--window", type=int, default=0, help="test-split window index")
    p.add_argument("--covariate", default="TIDE_S4")
    p.set_defaults(handler=cmd_explain)

    p = sub.add_parser("run", help="simulate, train both phases and assess")
    _add_common(p)
    _add_windows(p)
    _add_training(p)
    _add_thresholds(p)
    _add_ga(p)
    p.add_argument("--hours", type=int, default=pipeline.BENCHMARK_HOURS)
    p.add_argument("--evaluator", default=None)
    p.set_defaults(handler=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    run = RunDir(args.out or os.environ.get(RUN_DIR_ENV) or DEFAULT_RUN_DIR)
    if getattr(args, "alpha", 0) is None:
        args.alpha = 1.0
    if getattr(args, "beta", 0) is None:
        args.beta = 1.0
    try:
        args.handler(args, run)
    except (InputError, CapabilityError, IngestionError, FileNotFoundError) as exc:
        print(f"floodplan {args.command}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"floodplan {args.command}: {exc}", file=sys.stderr)
        return 2
    except FloodplanError as exc:
        print(f"floodplan {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
