"""``m3h`` command-line runner.

Subcommands: synth, train, cv, eval, tim, select, gradcheck.  Each reads an
optional JSON config (``--config``) and lets flags override it.  Exit
status: 0 success, 1 runtime/domain error, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from m3h import tim as tim_mod
from m3h import training
from m3h.data import SynthConfig, atomic_write_text, fmt, load_dataset, split_by_patient, synth_generate, write_dataset
from m3h.errors import ConfigError, ContractError, DomainError, M3HError
from m3h.evaluation import ScoreReport, auroc
from m3h.model import ModelConfig, load_model, save_model

log = logging.getLogger("m3h")


# ---------------------------------------------------------------------------
# bootstrap


def bootstrap_compare(
    scores_a,
    scores_b,
    n_boot: int = 1000,
    seed: int = 0,
    labels=None,
    metric: Callable | None = None,
) -> tuple[float, float, float]:
    """Paired percentile bootstrap of ``metric(a) - metric(b)``.

    With no ``metric`` the per-sample scores are averaged.  Resamples on
    which the metric is undefined (e.g. one class only) are redrawn.
    Returns (observed difference, 2.5th percentile, 97.5th percentile).
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or (labels is not None and len(labels) != len(a)):
        raise ContractError(f"paired inputs must have equal length ({len(a)} vs {len(b)})")
    if n_boot < 100:
        raise DomainError(f"n_boot must be >= 100, got {n_boot}")
    y = None if labels is None else np.asarray(labels)
    if metric is None:
        stat = lambda s, idx: float(np.mean(s[idx]))
    else:
        stat = lambda s, idx: float(metric(s[idx], y[idx]))
    full = np.arange(len(a))
    observed = stat(a, full) - stat(b, full)
    rng = np.random.default_rng(seed)
    deltas = []
    attempts = 0
    while len(deltas) < n_boot:
        attempts += 1
        if attempts > 20 * n_boot:
            raise DomainError("too many degenerate bootstrap resamples")
        idx = rng.integers(0, len(a), len(a))
        try:
            deltas.append(stat(a, idx) - stat(b, idx))
        except DomainError:
            continue
    lo, hi = np.percentile(deltas, [2.5, 97.5])
    return observed, float(lo), float(hi)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    manifest: Path | None = None
    tasks: tuple[str, ...] = ()
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    cv: bool = False
    tim_mode: str = "pairwise"
    tim_samples: int = 64
    tim_cv: bool = False
    beam: int = 3
    source: str | None = None
    test_fraction: float = 0.2
    boot: int = 1000
    workers: int = 1
    out: Path = Path("m3h_out")
    seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "seed": self.seed})

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig.from_dict({**self.train, "tasks": self.tasks, "seed": self.seed})


def _read_json(path: str | None) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    try:
        return json.loads(p.read_text()), p.parent
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from None


def experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    raw, base = _read_json(args.config)
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    cfg = ExperimentConfig(**raw)
    if cfg.manifest is not None:
        cfg.manifest = base / cfg.manifest
    cfg.out = Path(cfg.out) if args.config is None or Path(cfg.out).is_absolute() else base / cfg.out
    overrides = {
        "manifest": Path(args.manifest) if getattr(args, "manifest", None) else None,
        "out": Path(args.out) if args.out else None,
        "seed": args.seed,
        "tasks": tuple(t for t in args.tasks.split(",") if t) if args.tasks else None,
        "tim_mode": args.mode,
        "beam": args.beam,
        "boot": args.boot,
        "source": getattr(args, "source", None),
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg.tasks = tuple(cfg.tasks)
    if args.alpha is not None:
        cfg.model = {**cfg.model, "alpha": args.alpha}
    if cfg.tim_mode not in ("pairwise", "exact", "sampled"):
        raise ConfigError(f"unknown TIM mode {cfg.tim_mode!r}")
    return cfg


def _dataset(cfg: ExperimentConfig):
    if cfg.manifest is None:
        raise ConfigError("no dataset manifest given (config key 'manifest' or --manifest)")
    ds = load_dataset(cfg.manifest)
    training.select_tasks(ds, cfg.tasks)
    return ds


def _split(cfg: ExperimentConfig, ds):
    return split_by_patient(ds, cfg.test_fraction, cfg.seed)


def metrics_csv(reports: Sequence[ScoreReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "metric", "raw", "normalized", "n"])
    for r in reports:
        w.writerow([r.task, r.metric, fmt(r.raw), fmt(r.normalized), r.n_evaluated])
    return buf.getvalue()


def read_metrics_csv(path: Path) -> list[ScoreReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [ScoreReport(r["task"], r["metric"], float(r["raw"]), float(r["normalized"]), int(r["n"])) for r in rows]


def _print_reports(reports: Sequence[ScoreReport]) -> None:
    for r in reports:
        print(f"{r.task:<20} {r.metric:<10} raw={r.raw:.6f} normalized={r.normalized:.6f} n={r.n_evaluated}")


def _write_run_outputs(cfg: ExperimentConfig, fitted: training.TrainedModel, test_ds) -> list[ScoreReport]:
    reports = training.score_model(fitted.model, test_ds)
    save_model(fitted.model, cfg.out / "model.m3h")
    atomic_write_text(cfg.out / "metrics.csv", metrics_csv(reports))
    atomic_write_text(cfg.out / "train_log.csv", training.log_csv(fitted.log))
    run = {
        "format": 1,
        "manifest": str(cfg.manifest),
        "tasks": [t.name for t in fitted.model.tasks],
        "seed": cfg.seed,
        "test_fraction": cfg.test_fraction,
        "batch_size": fitted.config.batch_size,
        "learning_rate": fitted.config.learning_rate,
        "imbalance_bias": fitted.biases,
    }
    atomic_write_text(cfg.out / "run.json", json.dumps(run, indent=2, sort_keys=True) + "\n")
    return reports


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    raw, _ = _read_json(args.config)
    if not raw:
        raise ConfigError("synth needs --config with a synthetic cohort description")
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = SynthConfig.from_dict(raw)
    out = Path(args.out or "data")
    path = write_dataset(synth_generate(cfg), out)
    atomic_write_text(out / "synth_config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = experiment_config(args)
    if cfg.cv:
        # grid-selected hyperparameters instead of the configured ones
        return cmd_cv(args)
    ds = _dataset(cfg)
    train_ds, test_ds = _split(cfg, ds)
    fitted = training.train(cfg.train_config(), train_ds, cfg.seed, cfg.model_config())
    _print_reports(_write_run_outputs(cfg, fitted, test_ds))
    return 0


def cmd_cv(args) -> int:
    cfg = experiment_config(args)
    ds = _dataset(cfg)
    train_ds, test_ds = _split(cfg, ds)
    tcfg = cfg.train_config()
    result = training.cross_validate(train_ds, tcfg, cfg.model_config(), cfg.seed, workers=cfg.workers)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["batch_size", "learning_rate", "mean_score"] + [f"fold_{k}" for k in range(tcfg.folds)] + ["selected"])
    for row in result.table:
        chosen = int((row.batch_size, row.learning_rate) == result.best)
        w.writerow([row.batch_size, fmt(row.learning_rate), fmt(row.mean_score)] + [fmt(s) for s in row.fold_scores] + [chosen])
    atomic_write_text(cfg.out / "selection.csv", buf.getvalue())
    print(f"selected batch_size={result.best[0]} learning_rate={result.best[1]}")
    fitted = training.fit_final(train_ds, tcfg, result.best, cfg.model_config(), cfg.seed)
    _print_reports(_write_run_outputs(cfg, fitted, test_ds))
    return 0


def cmd_eval(args) -> int:
    cfg = experiment_config(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.out / "model.m3h"
    model = load_model(ckpt)
    ds = _dataset(cfg)
    target = ds if args.split == "all" else _split(cfg, ds)[1 if args.split == "test" else 0]
    reports = training.score_model(model, target)
    atomic_write_text(cfg.out / "eval_metrics.csv", metrics_csv(reports))
    _print_reports(reports)
    if args.baseline:
        baseline = load_model(Path(args.baseline))
        task = cfg.source or next(t.name for t in model.tasks if t.problem.value == "binary")
        batch = training.Batch.from_dataset(target)
        values, present = batch.labels[task]
        pa = model.predict(batch.embeddings)[task][present]
        pb = baseline.predict(batch.embeddings)[task][present]
        delta, lo, hi = bootstrap_compare(pa, pb, cfg.boot, cfg.seed, labels=values[present], metric=auroc)
        text = "task,metric,delta,lower,upper,n_boot,seed\n" + f"{task},auroc,{fmt(delta)},{fmt(lo)},{fmt(hi)},{cfg.boot},{cfg.seed}\n"
        atomic_write_text(cfg.out / "bootstrap.csv", text)
        print(f"bootstrap {task}: delta={delta:.6f} 95% CI [{lo:.6f}, {hi:.6f}]")
    return 0


def _oracle(cfg: ExperimentConfig):
    ds = _dataset(cfg)
    train_ds, test_ds = _split(cfg, ds)
    tasks = [t.name for t in training.select_tasks(ds, cfg.tasks)]
    oracle = tim_mod.PipelineOracle(
        train_ds, test_ds, cfg.train_config(), cfg.model_config(), cfg.seed, cross_validate=cfg.tim_cv
    )
    return tasks, oracle


def cmd_tim(args) -> int:
    cfg = experiment_config(args)
    tasks, oracle = _oracle(cfg)
    matrix, results = tim_mod.tim_matrix(oracle, tasks, cfg.tim_mode, cfg.tim_samples, cfg.seed, cfg.workers)
    atomic_write_text(cfg.out / "tim.csv", tim_mod.tim_csv(results))
    atomic_write_text(cfg.out / "tim_heatmap.csv", tim_mod.heatmap_csv(matrix, tasks))
    print(tim_mod.heatmap_csv(matrix, tasks), end="")
    return 0


def cmd_select(args) -> int:
    cfg = experiment_config(args)
    tasks, oracle = _oracle(cfg)
    source = cfg.source or tasks[0]
    if source not in tasks:
        raise ConfigError(f"source task {source!r} not in the task set")
    best, trace = tim_mod.greedy_select(oracle, source, [t for t in tasks if t != source], cfg.beam)
    atomic_write_text(cfg.out / "select_trace.csv", tim_mod.trace_csv(trace))
    chosen = "+".join(t for t in tasks if t in best)
    atomic_write_text(cfg.out / "select_best.txt", chosen + "\n")
    print(chosen)
    return 0


def cmd_gradcheck(args) -> int:
    from m3h.gradcheck import run_suite

    errors = run_suite(args.points, args.seed or 0, args.eps)
    for k, e in enumerate(errors):
        print(f"point {k}: max relative error {e:.3e}")
    worst = max(errors)
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else 1


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "cv": cmd_cv,
    "eval": cmd_eval,
    "tim": cmd_tim,
    "select": cmd_select,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--tasks", help="comma-separated task subset")
    common.add_argument("--alpha", type=float, help="cross-task exploration strength")
    common.add_argument("--mode", choices=["pairwise", "exact", "sampled"], help="TIM estimation mode")
    common.add_argument("--beam", type=int, help="beam width for task selection")
    common.add_argument("--boot", type=int, help="bootstrap resamples")
    common.add_argument("--manifest", help="dataset manifest (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="m3h", description="Multimodal multitask training and task-interaction analysis.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("synth", parents=[common], help="write a synthetic cohort")
    sub.add_parser("train", parents=[common], help="fit one task set")
    sub.add_parser("cv", parents=[common], help="k-fold grid search, then fit the winner")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", help="second checkpoint for a paired bootstrap comparison")
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--source")
    p = sub.add_parser("tim", parents=[common], help="task interaction matrix")
    p = sub.add_parser("select", parents=[common], help="greedy task-set search")
    p.add_argument("--source")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--eps", type=float, default=3e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def run(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"m3h {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (M3HError, OSError) as exc:
        print(f"m3h {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
