"""Task interaction measurement and greedy task-set search.

Everything here talks to a *performance oracle*: a callable
``oracle(task_set, measured_task) -> score`` giving the score of
``measured_task`` when the tasks in ``task_set`` are learned jointly.  Tests
use lookup tables; production uses :class:`PipelineOracle`, which trains
the full model.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from m3h.errors import CapacityError, ContractError, DomainError, M3HError

Oracle = Callable[[frozenset, Hashable], float]

MAX_EXACT_TASKS = 12


class CachedOracle:
    """Memoizing wrapper; counts how many distinct queries reached the inner oracle."""

    def __init__(self, oracle: Oracle):
        self.inner = oracle
        self.cache: dict[tuple[frozenset, Hashable], float] = {}
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, task_set, measured) -> float:
        key = (frozenset(task_set), measured)
        if measured not in key[0]:
            raise ContractError(f"measured task {measured!r} not in task set {sorted(map(str, key[0]))}")
        with self._lock:
            if key in self.cache:
                return self.cache[key]
        value = float(self.inner(key[0], measured))
        with self._lock:
            if key not in self.cache:
                self.calls += 1
                self.cache[key] = value
        return value


class LookupOracle:
    """Oracle backed by a table keyed by (task set, measured task)."""

    def __init__(self, table: Mapping[tuple[Iterable, Hashable], float]):
        self.table = {(frozenset(s), t): float(v) for (s, t), v in table.items()}

    def __call__(self, task_set, measured) -> float:
        try:
            return self.table[(frozenset(task_set), measured)]
        except KeyError:
            raise DomainError(f"no score for {sorted(map(str, task_set))} measuring {measured!r}") from None


def _cached(oracle) -> CachedOracle:
    return oracle if isinstance(oracle, CachedOracle) else CachedOracle(oracle)


@dataclass(frozen=True)
class TIMResult:
    source: Hashable
    added: Hashable
    delta: float
    mode: str
    n_subsets: int
    seed: int | None = None


def _gain(oracle, i, j, subset) -> float:
    base = frozenset(subset) | {i}
    return oracle(base | {j}, i) - oracle(base, i)


def _mean_gain(oracle, i, j, subsets: Iterable) -> tuple[float, int]:
    total, count = 0.0, 0
    for s in subsets:
        total += _gain(oracle, i, j, s)
        count += 1
    return total / count, count


def _others(i, j, all_tasks) -> list:
    all_tasks = list(all_tasks)
    if i == j:
        raise DomainError("source and added task must differ")
    for t in (i, j):
        if t not in all_tasks:
            raise DomainError(f"task {t!r} not among the candidate tasks")
    return [t for t in all_tasks if t not in (i, j)]


def tim_exact(oracle: Oracle, i, j, all_tasks: Sequence, max_tasks: int = MAX_EXACT_TASKS) -> TIMResult:
    """Average gain in task ``i`` from adding ``j``, over every subset of the other tasks."""
    rest = _others(i, j, all_tasks)
    if len(rest) + 2 > max_tasks:
        raise CapacityError(
            f"exact enumeration over {len(rest) + 2} tasks exceeds the limit of {max_tasks}; use sampled mode"
        )
    subsets = itertools.chain.from_iterable(itertools.combinations(rest, r) for r in range(len(rest) + 1))
    delta, count = _mean_gain(oracle, i, j, subsets)
    return TIMResult(i, j, delta, "exact", count)


def tim_pairwise(oracle: Oracle, i, j) -> TIMResult:
    if i == j:
        raise DomainError("source and added task must differ")
    return TIMResult(i, j, _gain(oracle, i, j, ()), "pairwise", 1)


def tim_sampled(oracle: Oracle, i, j, all_tasks: Sequence, n_samples: int, seed: int = 0) -> TIMResult:
    """Unbiased estimate of :func:`tim_exact` from subsets drawn uniformly with replacement."""
    if n_samples < 1:
        raise DomainError(f"n_samples must be >= 1, got {n_samples}")
    rest = _others(i, j, all_tasks)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, 2, size=(n_samples, len(rest))).astype(bool)
    subsets = ([t for t, keep in zip(rest, row) if keep] for row in draws)
    delta, count = _mean_gain(oracle, i, j, subsets)
    return TIMResult(i, j, delta, "sampled", count, seed)


def tim_matrix(
    oracle: Oracle,
    tasks: Sequence,
    mode: str = "pairwise",
    n_samples: int = 64,
    seed: int = 0,
    workers: int = 1,
) -> tuple[np.ndarray, list[TIMResult]]:
    """All-pairs deltas; entry (r, c) is the effect of adding task c on task r."""
    if mode not in ("pairwise", "exact", "sampled"):
        raise DomainError(f"unknown TIM mode {mode!r}")
    oracle = _cached(oracle)
    tasks = list(tasks)
    pairs = [(r, c) for r in range(len(tasks)) for c in range(len(tasks)) if r != c]

    def one(rc):
        i, j = tasks[rc[0]], tasks[rc[1]]
        try:
            if mode == "pairwise":
                return tim_pairwise(oracle, i, j)
            if mode == "exact":
                return tim_exact(oracle, i, j, tasks)
            return tim_sampled(oracle, i, j, tasks, n_samples, seed)
        except M3HError as exc:
            raise type(exc)(f"pair ({i}, {j}): {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]
    matrix = np.zeros((len(tasks), len(tasks)))
    for (r, c), res in zip(pairs, results):
        matrix[r, c] = res.delta
    return matrix, results


# ---------------------------------------------------------------------------
# greedy beam search


@dataclass
class SearchRound:
    index: int
    scored: list[tuple[tuple, float]]
    kept: list[tuple[tuple, float]]
    improved: bool


def _key(task_set) -> tuple:
    return tuple(sorted(task_set, key=str))


def greedy_select(
    oracle: Oracle,
    source,
    candidates: Sequence,
    beam_width: int = 3,
) -> tuple[frozenset, list[SearchRound]]:
    """Grow task sets around ``source`` keeping the global top ``beam_width`` per round.

    Stops when a round's best score does not beat the incumbent.  Score ties
    go to the lexicographically smallest set of task names.
    """
    if source in candidates:
        raise DomainError(f"source task {source!r} must not be among the candidates")
    if beam_width < 1:
        raise DomainError("beam_width must be >= 1")
    oracle = _cached(oracle)
    best_set = frozenset([source])
    best_score = oracle(best_set, source)
    beam = [best_set]
    trace: list[SearchRound] = []
    round_no = 0
    while True:
        expansions = {b | {j} for b in beam for j in candidates if j not in b}
        if not expansions:
            break
        round_no += 1
        scored = sorted(
            ((s, oracle(s, source)) for s in expansions),
            key=lambda item: (-item[1], tuple(map(str, _key(item[0])))),
        )
        kept = scored[:beam_width]
        top_set, top_score = kept[0]
        improved = top_score > best_score
        trace.append(
            SearchRound(
                round_no,
                [(_key(s), v) for s, v in scored],
                [(_key(s), v) for s, v in kept],
                improved,
            )
        )
        if not improved:
            break
        best_set, best_score = top_set, top_score
        beam = [s for s, _ in kept]
    return best_set, trace


# ---------------------------------------------------------------------------
# production oracle


def task_set_seed(task_set: Iterable[str], experiment_seed: int) -> int:
    digest = zlib.crc32("\x1f".join(sorted(task_set)).encode())
    return int(np.random.SeedSequence([experiment_seed, digest]).generate_state(1)[0])


class PipelineOracle:
    """Train on ``task_set`` with the full pipeline and score on the held-out split.

    Each distinct task set is trained once (all of its tasks are scored from
    that single model).  With ``cross_validate`` the grid protocol selects
    hyperparameters per task set first.
    """

    def __init__(self, train_ds, test_ds, train_config, model_config=None, seed: int = 0, cross_validate: bool = False):
        self.train_ds, self.test_ds = train_ds, test_ds
        self.train_config, self.model_config = train_config, model_config
        self.seed = seed
        self.cross_validate = cross_validate
        self._scores: dict[frozenset, dict[str, float]] = {}
        self._lock = threading.Lock()

    def _fit(self, task_set: frozenset) -> dict[str, float]:
        from m3h import training

        seed = task_set_seed(task_set, self.seed)
        cfg = replace(self.train_config, tasks=tuple(sorted(task_set)), seed=seed)
        mcfg = replace(self.model_config or training.ModelConfig(), seed=seed)
        if self.cross_validate:
            best = training.cross_validate(self.train_ds, cfg, mcfg, seed).best
            fitted = training.fit_final(self.train_ds, cfg, best, mcfg, seed)
        else:
            fitted = training.train(cfg, self.train_ds, seed, mcfg)
        return {r.task: r.normalized for r in training.score_model(fitted.model, self.test_ds)}

    def __call__(self, task_set, measured) -> float:
        task_set = frozenset(task_set)
        with self._lock:
            scores = self._scores.get(task_set)
        if scores is None:
            scores = self._fit(task_set)
            with self._lock:
                self._scores.setdefault(task_set, scores)
        value = scores[measured]
        if math.isnan(value):
            raise DomainError(f"task {measured!r} is not scorable on the test split")
        return value


# ---------------------------------------------------------------------------
# export


def _fmt(x: float) -> str:
    return repr(float(x))


def tim_csv(results: Sequence[TIMResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "added", "delta", "mode", "n_subsets", "seed"])
    for r in results:
        w.writerow([r.source, r.added, _fmt(r.delta), r.mode, r.n_subsets, "" if r.seed is None else r.seed])
    return buf.getvalue()


def heatmap_csv(matrix: np.ndarray, tasks: Sequence) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task"] + [str(t) for t in tasks])
    for t, row in zip(tasks, matrix):
        w.writerow([str(t)] + [_fmt(v) for v in row])
    return buf.getvalue()


def read_heatmap_csv(text: str) -> tuple[list[str], np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    tasks = rows[0][1:]
    return tasks, np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def trace_csv(trace: Sequence[SearchRound]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "task_set", "score", "kept", "improved"])
    for rnd in trace:
        kept = {s for s, _ in rnd.kept}
        for s, v in rnd.scored:
            w.writerow([rnd.index, "+".join(map(str, s)), _fmt(v), int(s in kept), int(rnd.improved)])
    return buf.getvalue()
