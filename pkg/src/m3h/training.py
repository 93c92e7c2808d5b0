"""Training loop, imbalance-aware bias init, and the k-fold grid protocol."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from m3h import numerics as nx
from m3h.clustering import assign, kmeans
from m3h.data import Dataset, TaskSpec, kfold_by_patient
from m3h.errors import ConfigError, DomainError, M3HError, NumericError
from m3h.evaluation import ScoreReport, auroc, averaged_auroc, normalize_score, r_squared, silhouette
from m3h.model import Model, ModelConfig, contrastive_loss
from m3h.numerics import ProblemClass, Tensor

log = logging.getLogger(__name__)

IMBALANCE_THRESHOLD = 0.10
CONTRASTIVE = "contrastive"


@dataclass
class TrainConfig:
    tasks: tuple[str, ...] = ()
    epochs: int = 15
    batch_size: int = 256
    learning_rate: float = 0.001
    batch_sizes: tuple[int, ...] = (256, 512)
    learning_rates: tuple[float, ...] = (0.0005, 0.001)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    contrastive_weight: float = 1.0
    task_weights: Mapping[str, float] = field(default_factory=dict)
    schedule: str = "sequential"
    clip_norm: float | None = None
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self.batch_sizes = tuple(int(b) for b in self.batch_sizes)
        self.learning_rates = tuple(float(r) for r in self.learning_rates)
        self.task_weights = dict(self.task_weights)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or any(b < 1 for b in self.batch_sizes):
            raise ConfigError("batch sizes must be >= 1")
        if self.contrastive_weight < 0 or any(w < 0 for w in self.task_weights.values()):
            raise ConfigError("loss weights must be >= 0")
        if self.schedule not in ("sequential", "summed"):
            raise ConfigError(f"schedule must be 'sequential' or 'summed', got {self.schedule!r}")

    def weight(self, task: str) -> float:
        return float(self.task_weights.get(task, 1.0))

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LogEntry:
    epoch: int
    batch: int
    term: str
    task: str
    value: float | None


@dataclass
class TrainedModel:
    model: Model
    config: TrainConfig
    scores: dict[str, list[ScoreReport]] = field(default_factory=dict)
    log: list[LogEntry] = field(default_factory=list)
    biases: dict[str, float] = field(default_factory=dict)


class Adam:
    """Adam with per-parameter step counts; parameters without a gradient are skipped."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, clip_norm: float | None = None) -> None:
        live = {k: p for k, p in self.params.items() if p.grad is not None}
        if clip_norm is not None:
            norm = math.sqrt(sum(float((p.grad**2).sum()) for p in live.values()))
            if norm > clip_norm:
                for p in live.values():
                    p.grad = p.grad * (clip_norm / norm)
        for k, p in live.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
                self.t[k] = 0
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * p.grad
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * p.grad**2
            m_hat = self.m[k] / (1 - self.beta1**t)
            v_hat = self.v[k] / (1 - self.beta2**t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# batches and loss terms


@dataclass
class Batch:
    embeddings: dict[str, np.ndarray]
    labels: dict[str, tuple[np.ndarray, np.ndarray]]

    @property
    def size(self) -> int:
        return len(next(iter(self.embeddings.values())))

    @classmethod
    def from_dataset(cls, ds: Dataset, index: Sequence[int] | None = None) -> "Batch":
        sel = slice(None) if index is None else np.asarray(index, dtype=np.intp)
        emb = {m.name: ds.embedding_matrix(m.name)[sel] for m in ds.schemas}
        labels = {}
        for t in ds.tasks:
            if t.supervised:
                values, present = ds.label_array(t.name)
                labels[t.name] = (values[sel], present[sel])
        return cls(emb, labels)


def loss_terms(model: Model) -> list[tuple[str, str]]:
    """Fixed term order: contrastive, supervised tasks in declaration order, cluster."""
    terms = [(CONTRASTIVE, "")]
    terms += [(t.problem.value, t.name) for t in model.supervised]
    if model.cluster_task is not None:
        terms.append((ProblemClass.CLUSTER.value, model.cluster_task.name))
    return terms


def term_loss(model: Model, batch: Batch, term: tuple[str, str]) -> Tensor | None:
    """Unweighted loss of one term, or None when the batch cannot score it."""
    kind, task = term
    if kind == CONTRASTIVE:
        if len(model.schemas) < 2 or batch.size < 2:
            return None
        hidden = model.encode(batch.embeddings)
        return contrastive_loss(model.project(hidden), model.config.contrastive_temperature)
    spec = model.task(task)
    if spec.problem is ProblemClass.CLUSTER:
        x = model.concat_embeddings(batch.embeddings)
        _, recon = model.autoencoder_forward(x)
        return nx.task_loss(ProblemClass.CLUSTER, recon, x)
    values, present = batch.labels[task]
    if not present.any():
        return None
    preds = model.forward(batch.embeddings).predictions[task]
    rows = np.flatnonzero(present)
    target = values[rows]
    if spec.problem is ProblemClass.MULTICLASS:
        target = target.astype(int)
    return nx.task_loss(spec.problem, nx.take_rows(preds, rows), target)


def _weight(config: TrainConfig, term: tuple[str, str]) -> float:
    return config.contrastive_weight if term[0] == CONTRASTIVE else config.weight(term[1])


def train_step(
    model: Model,
    batch: Batch,
    config: TrainConfig,
    optimizer: Adam,
) -> dict[tuple[str, str], float | None]:
    """One optimization pass over a batch; returns each term's pre-step loss."""
    values: dict[tuple[str, str], float | None] = {}
    terms = loss_terms(model)
    if config.schedule == "summed":
        total = None
        for term in terms:
            loss = term_loss(model, batch, term)
            values[term] = _checked(loss, term)
            w = _weight(config, term)
            if loss is not None and w != 0.0:
                part = nx.mul(loss, w)
                total = part if total is None else nx.add(total, part)
        if total is not None and total.requires_grad:
            optimizer.zero_grad()
            total.backward()
            optimizer.step(config.clip_norm)
        optimizer.zero_grad()
        return values
    for term in terms:
        w = _weight(config, term)
        if w == 0.0:
            with nx.no_grad():
                values[term] = _checked(term_loss(model, batch, term), term)
            continue
        loss = term_loss(model, batch, term)
        values[term] = _checked(loss, term)
        if loss is None or not loss.requires_grad:
            continue
        optimizer.zero_grad()
        nx.mul(loss, w).backward()
        optimizer.step(config.clip_norm)
        optimizer.zero_grad()
    return values


def _checked(loss: Tensor | None, term: tuple[str, str]) -> float | None:
    if loss is None:
        return None
    value = loss.item()
    if not math.isfinite(value):
        label = term[0] if not term[1] else f"{term[0]} ({term[1]})"
        raise NumericError(f"non-finite loss in term {label}")
    return value


# ---------------------------------------------------------------------------
# imbalance bias


def init_output_bias(n_positive: int, n_negative: int) -> float:
    if n_positive < 1 or n_negative < 1:
        raise DomainError(f"degenerate binary task: {n_positive} positives, {n_negative} negatives")
    return math.log(n_positive / n_negative)


def apply_imbalance_bias(model: Model, ds: Dataset) -> dict[str, float]:
    """Set rare binary tasks' output bias to ln(pos/neg); returns the tasks touched."""
    applied = {}
    for t in model.supervised:
        if t.problem is not ProblemClass.BINARY:
            continue
        pos, neg = ds.positive_counts(t.name)
        if pos + neg == 0:
            continue
        if pos / (pos + neg) < IMBALANCE_THRESHOLD:
            bias = init_output_bias(pos, neg)
            model.params[f"output.{t.name}.b"].data[...] = bias
            applied[t.name] = bias
    return applied


# ---------------------------------------------------------------------------
# training


def select_tasks(ds: Dataset, names: Sequence[str]) -> tuple[TaskSpec, ...]:
    if not names:
        return ds.tasks
    known = {t.name: t for t in ds.tasks}
    unknown = [n for n in names if n not in known]
    if unknown:
        raise ConfigError(f"unknown task(s): {unknown}")
    # declaration order, not request order
    return tuple(t for t in ds.tasks if t.name in set(names))


def build_model(ds: Dataset, config: TrainConfig, model_config: ModelConfig | None = None) -> Model:
    tasks = select_tasks(ds, config.tasks)
    if not tasks:
        raise ConfigError("task set is empty")
    return Model(ds.schemas, tasks, model_config)


def train(
    config: TrainConfig,
    train_ds: Dataset,
    seed: int | None = None,
    model_config: ModelConfig | None = None,
    model: Model | None = None,
) -> TrainedModel:
    """Fit a model for ``config.epochs`` epochs of seeded shuffled batches."""
    if len(train_ds) == 0:
        raise DomainError("empty training set")
    seed = config.seed if seed is None else seed
    model = model or build_model(train_ds, config, model_config)
    biases = apply_imbalance_bias(model, train_ds)
    optimizer = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(seed)
    full = Batch.from_dataset(train_ds)
    n = len(train_ds)
    entries: list[LogEntry] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            batch = Batch(
                {k: v[idx] for k, v in full.embeddings.items()},
                {k: (v[idx], m[idx]) for k, (v, m) in full.labels.items()},
            )
            for (term, task), value in train_step(model, batch, config, optimizer).items():
                entries.append(LogEntry(epoch, b, term, task, value))
    fit_cluster_centroids(model, train_ds, seed)
    return TrainedModel(model, config, {}, entries, biases)


def fit_cluster_centroids(model: Model, ds: Dataset, seed: int) -> None:
    task = model.cluster_task
    if task is None:
        return
    latents = model.predict(Batch.from_dataset(ds).embeddings)[task.name]
    model.buffers["cluster.centroids"] = kmeans(latents, task.cluster_k, seed=seed).centroids


def score_model(model: Model, ds: Dataset) -> list[ScoreReport]:
    """Score every task of ``model`` on ``ds`` with its class metric.

    A task whose metric is undefined on ``ds`` (one class only, constant
    target) is reported with NaN values.
    """
    batch = Batch.from_dataset(ds)
    preds = model.predict(batch.embeddings)
    reports = []
    for t in model.tasks:
        kind = t.metric
        try:
            if t.problem is ProblemClass.CLUSTER:
                latents = preds[t.name]
                centroids = model.buffers.get("cluster.centroids")
                labels = assign(latents, centroids) if centroids is not None else kmeans(latents, t.cluster_k).assignments
                n_eval = len(latents)
                raw = silhouette(latents, labels)
            else:
                values, present = batch.labels[t.name]
                p, y = preds[t.name][present], values[present]
                n_eval = int(present.sum())
                if t.problem is ProblemClass.BINARY:
                    raw = auroc(p, y)
                elif t.problem is ProblemClass.MULTICLASS:
                    raw = averaged_auroc(p, y.astype(int))
                else:
                    raw = r_squared(p, y)
            reports.append(ScoreReport(t.name, kind, raw, normalize_score(kind, raw), n_eval))
        except DomainError as exc:
            log.debug("task %s not scorable: %s", t.name, exc)
            n_eval = len(ds) if t.problem is ProblemClass.CLUSTER else int(batch.labels[t.name][1].sum())
            reports.append(ScoreReport(t.name, kind, math.nan, math.nan, n_eval))
    return reports


def mean_normalized(reports: Sequence[ScoreReport]) -> float:
    vals = [r.normalized for r in reports if not math.isnan(r.normalized)]
    return float(np.mean(vals)) if vals else math.nan


# ---------------------------------------------------------------------------
# k-fold grid protocol


@dataclass
class GridRow:
    batch_size: int
    learning_rate: float
    mean_score: float
    fold_scores: list[float]


@dataclass
class CVResult:
    best: tuple[int, float]
    table: list[GridRow]


def cross_validate(
    train_ds: Dataset,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    seed: int | None = None,
    fit_and_score: Callable[[TrainConfig, Dataset, Dataset], float] | None = None,
    workers: int = 1,
) -> CVResult:
    """Pick (batch_size, learning_rate) by mean normalized validation score.

    Ties go to the lexicographically smaller (batch_size, learning_rate).
    """
    seed = config.seed if seed is None else seed
    grid = sorted(itertools.product(config.batch_sizes, config.learning_rates))
    if not grid:
        raise ConfigError("empty hyperparameter grid")
    folds = kfold_by_patient(train_ds, config.folds, seed)

    def default_fit(cfg: TrainConfig, tr: Dataset, va: Dataset) -> float:
        return mean_normalized(score_model(train(cfg, tr, seed, model_config).model, va))

    fit = fit_and_score or default_fit
    jobs = [(g, f) for g in range(len(grid)) for f in range(len(folds))]

    def run(job):
        g, f = job
        bs, lr = grid[g]
        cfg = replace(config, batch_size=bs, learning_rate=lr)
        try:
            return fit(cfg, *folds[f])
        except M3HError as exc:
            raise type(exc)(f"grid point batch_size={bs}, learning_rate={lr}, fold {f}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    table = []
    for g, (bs, lr) in enumerate(grid):
        scores = results[g * len(folds) : (g + 1) * len(folds)]
        finite = [s for s in scores if not math.isnan(s)]
        table.append(GridRow(bs, lr, float(np.mean(finite)) if finite else math.nan, list(scores)))
    best_row = None
    for row in table:
        if math.isnan(row.mean_score):
            continue
        if best_row is None or row.mean_score > best_row.mean_score:
            best_row = row
    best_row = best_row or table[0]
    return CVResult((best_row.batch_size, best_row.learning_rate), table)


def fit_final(
    train_ds: Dataset,
    config: TrainConfig,
    best: tuple[int, float],
    model_config: ModelConfig | None = None,
    seed: int | None = None,
) -> TrainedModel:
    cfg = replace(config, batch_size=best[0], learning_rate=best[1])
    return train(cfg, train_ds, seed, model_config)


# ---------------------------------------------------------------------------
# export


def log_csv(entries: Sequence[LogEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "batch", "term", "task", "value"])
    for e in entries:
        w.writerow([e.epoch, e.batch, e.term, e.task, "" if e.value is None else repr(e.value)])
    return buf.getvalue()
