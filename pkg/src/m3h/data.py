"""Dataset model, manifest/CSV ingestion, patient-level splits and the synthetic cohort."""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from m3h.errors import ConfigError, DomainError, FormatError
from m3h.numerics import ProblemClass

MANIFEST_VERSION = 1
DEFAULT_CLUSTER_K = 15


@dataclass(frozen=True)
class ModalitySchema:
    name: str
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"modality {self.name!r}: dim must be >= 1")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    problem: ProblemClass
    num_classes: int | None = None
    cluster_k: int | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "problem", ProblemClass(self.problem))
        except ValueError:
            raise FormatError(f"task {self.name!r}: unknown problem class {self.problem!r}") from None
        if self.problem is ProblemClass.MULTICLASS and (self.num_classes is None or self.num_classes < 3):
            raise ConfigError(f"multiclass task {self.name!r} needs num_classes >= 3")
        if self.problem is ProblemClass.CLUSTER:
            if self.cluster_k is None:
                object.__setattr__(self, "cluster_k", DEFAULT_CLUSTER_K)
            if self.cluster_k < 2:
                raise ConfigError(f"cluster task {self.name!r} needs cluster_k >= 2")

    @property
    def supervised(self) -> bool:
        return self.problem is not ProblemClass.CLUSTER

    @property
    def metric(self) -> str:
        return {
            ProblemClass.BINARY: "auroc",
            ProblemClass.MULTICLASS: "avg_auroc",
            ProblemClass.REGRESSION: "r2",
            ProblemClass.CLUSTER: "silhouette",
        }[self.problem]

    def to_dict(self) -> dict:
        out = {"name": self.name, "class": self.problem.value}
        if self.num_classes is not None:
            out["num_classes"] = self.num_classes
        if self.cluster_k is not None:
            out["cluster_k"] = self.cluster_k
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskSpec":
        return cls(d["name"], d["class"], d.get("num_classes"), d.get("cluster_k"))


@dataclass(frozen=True)
class Sample:
    sample_id: str
    patient_id: str
    embeddings: Mapping[str, np.ndarray]
    labels: Mapping[str, float | int]


@dataclass(frozen=True)
class Dataset:
    schemas: tuple[ModalitySchema, ...]
    tasks: tuple[TaskSpec, ...]
    samples: tuple[Sample, ...]
    _arrays: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        validate(self)

    def __len__(self) -> int:
        return len(self.samples)

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigError(f"unknown task {name!r}")

    @property
    def patients(self) -> list[str]:
        return sorted({s.patient_id for s in self.samples})

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(self.schemas, self.tasks, tuple(self.samples[i] for i in indices))

    def embedding_matrix(self, modality: str) -> np.ndarray:
        key = ("emb", modality)
        if key not in self._arrays:
            dim = next(m.dim for m in self.schemas if m.name == modality)
            mat = np.array([s.embeddings[modality] for s in self.samples], dtype=np.float64)
            self._arrays[key] = mat.reshape(len(self.samples), dim)
        return self._arrays[key]

    def label_array(self, task: str) -> tuple[np.ndarray, np.ndarray]:
        """Return (values, present-mask); absent labels hold 0."""
        key = ("lab", task)
        if key not in self._arrays:
            present = np.array([task in s.labels for s in self.samples], dtype=bool)
            values = np.array([float(s.labels.get(task, 0.0)) for s in self.samples], dtype=np.float64)
            self._arrays[key] = (values, present)
        return self._arrays[key]

    def positive_counts(self, task: str) -> tuple[int, int]:
        values, present = self.label_array(task)
        pos = int(np.sum(values[present] == 1.0))
        return pos, int(present.sum()) - pos


def validate(ds: Dataset) -> None:
    names = [m.name for m in ds.schemas]
    if len(set(names)) != len(names):
        raise FormatError("modality names must be unique")
    task_names = [t.name for t in ds.tasks]
    if len(set(task_names)) != len(task_names):
        raise FormatError("task names must be unique")
    if sum(t.problem is ProblemClass.CLUSTER for t in ds.tasks) > 1:
        raise ConfigError("at most one cluster task per experiment")
    known = {t.name: t for t in ds.tasks}
    seen: set[str] = set()
    supervised_any = any(t.supervised for t in ds.tasks)
    for s in ds.samples:
        if s.sample_id in seen:
            raise FormatError(f"duplicate sample_id {s.sample_id!r}")
        seen.add(s.sample_id)
        for m in ds.schemas:
            emb = s.embeddings.get(m.name)
            if emb is None or np.shape(emb) != (m.dim,):
                raise FormatError(f"sample {s.sample_id!r}: modality {m.name!r} must have dim {m.dim}")
        for t, v in s.labels.items():
            if t not in known:
                raise FormatError(f"sample {s.sample_id!r} references undeclared task {t!r}")
            if not known[t].supervised:
                raise FormatError(f"sample {s.sample_id!r} carries a label for cluster task {t!r}")
            _check_label(known[t], v, s.sample_id)
        if supervised_any and not s.labels:
            raise FormatError(f"sample {s.sample_id!r} has no supervised label")


def _check_label(task: TaskSpec, v, sid: str) -> None:
    if task.problem is ProblemClass.BINARY and v not in (0, 1):
        raise FormatError(f"sample {sid!r}: binary label for {task.name!r} must be 0 or 1, got {v!r}")
    if task.problem is ProblemClass.MULTICLASS and not (0 <= v < task.num_classes):
        raise FormatError(f"sample {sid!r}: class index {v!r} out of range for {task.name!r}")
    if task.problem is ProblemClass.REGRESSION and not math.isfinite(v):
        raise FormatError(f"sample {sid!r}: non-finite regression label for {task.name!r}")


# ---------------------------------------------------------------------------
# manifest + CSV I/O


def _parse_float(cell: str, path: Path, row: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise FormatError(f"{path}: row {row}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(value):
        raise FormatError(f"{path}: row {row}: non-finite value {cell!r}")
    return value


def _parse_label(task: TaskSpec, cell: str, path: Path, row: int):
    value = _parse_float(cell, path, row)
    if task.problem is ProblemClass.REGRESSION:
        return value
    if value != int(value):
        raise FormatError(f"{path}: row {row}: label {cell!r} for {task.name!r} is not an integer")
    return int(value)


def _read_embeddings(path: Path, schema: ModalitySchema, sid_col: str) -> dict[str, np.ndarray]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FormatError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or sid_col not in header:
            raise FormatError(f"{path}: missing header with column {sid_col!r}")
        sid_at = header.index(sid_col)
        feature_cols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
        if len(feature_cols) != schema.dim:
            raise FormatError(
                f"{path}: row 0: header has {len(feature_cols)} feature columns, manifest dim is {schema.dim}"
            )
        out: dict[str, np.ndarray] = {}
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(header):
                n_values = len(row) - (len(header) - len(feature_cols))
                raise FormatError(
                    f"{path}: row {row_no}: {n_values} embedding values, manifest dim is {schema.dim}"
                )
            sid = row[sid_at]
            if sid in out:
                raise FormatError(f"{path}: row {row_no}: duplicate sample_id {sid!r}")
            out[sid] = np.array([_parse_float(row[i], path, row_no) for i in feature_cols])
        return out


def load_dataset(manifest_path: str | os.PathLike) -> Dataset:
    """Load and validate a dataset described by a JSON manifest."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise FormatError(f"{manifest_path}: cannot read manifest ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid manifest ({exc})") from None
    base = manifest_path.parent
    try:
        sid_col = manifest.get("sample_id_column", "sample_id")
        pid_col = manifest.get("patient_id_column", "patient_id")
        schemas = tuple(ModalitySchema(m["name"], int(m["dim"])) for m in manifest["modalities"])
        files = {m["name"]: base / m["file"] for m in manifest["modalities"]}
        tasks = tuple(TaskSpec.from_dict(t) for t in manifest["tasks"])
        labels_path = base / manifest["labels_file"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{manifest_path}: malformed manifest ({exc})") from None

    embeddings = {m.name: _read_embeddings(files[m.name], m, sid_col) for m in schemas}
    supervised = [t for t in tasks if t.supervised]
    samples = []
    try:
        fh = open(labels_path, newline="")
    except OSError as exc:
        raise FormatError(f"{labels_path}: cannot open ({exc.strerror})") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or sid_col not in header or pid_col not in header:
            raise FormatError(f"{labels_path}: header must contain {sid_col!r} and {pid_col!r}")
        known = {t.name for t in tasks}
        for h in header:
            if h not in (sid_col, pid_col) and h not in known:
                raise FormatError(f"{labels_path}: column {h!r} is not a declared task")
        cols = {t.name: header.index(t.name) for t in supervised if t.name in header}
        seen: set[str] = set()
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise FormatError(f"{labels_path}: row {row_no}: expected {len(header)} cells, got {len(row)}")
            sid, pid = row[header.index(sid_col)], row[header.index(pid_col)]
            if sid in seen:
                raise FormatError(f"{labels_path}: row {row_no}: duplicate sample_id {sid!r}")
            seen.add(sid)
            labels = {}
            for t in supervised:
                if t.name in cols and row[cols[t.name]].strip() != "":
                    labels[t.name] = _parse_label(t, row[cols[t.name]], labels_path, row_no)
            emb = {}
            for m in schemas:
                if sid not in embeddings[m.name]:
                    raise FormatError(f"{files[m.name]}: no row for sample_id {sid!r}")
                emb[m.name] = embeddings[m.name][sid]
            samples.append(Sample(sid, pid, emb, labels))
    for m in schemas:
        extra = set(embeddings[m.name]) - seen
        if extra:
            raise FormatError(f"{files[m.name]}: sample_id {sorted(extra)[0]!r} absent from labels file")
    return Dataset(schemas, tasks, tuple(samples))


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(rows: Sequence[Sequence]) -> str:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def fmt(value) -> str:
    """Shortest round-tripping text for a number."""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def write_dataset(ds: Dataset, out_dir: str | os.PathLike, name: str = "dataset") -> Path:
    """Write manifest + CSVs into ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    manifest = {
        "version": MANIFEST_VERSION,
        "modalities": [],
        "tasks": [t.to_dict() for t in ds.tasks],
        "labels_file": f"{name}_labels.csv",
        "sample_id_column": "sample_id",
        "patient_id_column": "patient_id",
    }
    for m in ds.schemas:
        fname = f"{name}_{m.name}.csv"
        manifest["modalities"].append({"name": m.name, "dim": m.dim, "file": fname})
        rows = [["sample_id"] + [f"f{i}" for i in range(m.dim)]]
        rows += [[s.sample_id] + [fmt(v) for v in s.embeddings[m.name]] for s in ds.samples]
        atomic_write_text(out_dir / fname, _csv_text(rows))
    supervised = [t for t in ds.tasks if t.supervised]
    rows = [["sample_id", "patient_id"] + [t.name for t in supervised]]
    for s in ds.samples:
        rows.append([s.sample_id, s.patient_id] + [fmt(s.labels[t.name]) if t.name in s.labels else "" for t in supervised])
    atomic_write_text(out_dir / manifest["labels_file"], _csv_text(rows))
    path = out_dir / f"{name}.json"
    atomic_write_text(path, json.dumps(manifest, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# splitting


def _shuffled_patients(ds: Dataset, seed: int) -> list[str]:
    patients = ds.patients
    order = np.random.default_rng(seed).permutation(len(patients))
    return [patients[i] for i in order]


def _by_patients(ds: Dataset, keep: set[str]) -> Dataset:
    return ds.subset([i for i, s in enumerate(ds.samples) if s.patient_id in keep])


def split_by_patient(ds: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Grouped shuffle split: every patient lands wholly in train or test."""
    if not 0.0 < test_fraction < 1.0:
        raise DomainError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    patients = _shuffled_patients(ds, seed)
    if len(patients) < 2:
        raise DomainError("need at least 2 patients to split")
    n_test = int(round(test_fraction * len(patients)))
    n_test = min(max(n_test, 1), len(patients) - 1)
    test = set(patients[:n_test])
    return _by_patients(ds, set(patients) - test), _by_patients(ds, test)


def kfold_by_patient(ds: Dataset, k: int = 5, seed: int = 0) -> list[tuple[Dataset, Dataset]]:
    if k < 2:
        raise DomainError(f"k must be >= 2, got {k}")
    patients = _shuffled_patients(ds, seed)
    if len(patients) < k:
        raise DomainError(f"{len(patients)} patients cannot fill {k} folds")
    folds = [set(chunk) for chunk in np.array_split(np.array(patients, dtype=object), k)]
    everyone = set(patients)
    return [(_by_patients(ds, everyone - fold), _by_patients(ds, fold)) for fold in folds]


# ---------------------------------------------------------------------------
# synthetic cohort


@dataclass
class SynthConfig:
    n_patients: int
    schemas: tuple[ModalitySchema, ...]
    tasks: tuple[TaskSpec, ...]
    samples_per_patient: int = 1
    latent_dim: int = 16
    task_correlation: float = 0.5
    prevalence: Mapping[str, float] = field(default_factory=dict)
    noise_scale: float = 0.5
    label_noise: float = 0.5
    sample_jitter: float = 0.1
    latent_clusters: int = 0
    cluster_spread: float = 0.15
    seed: int = 0

    def __post_init__(self):
        self.schemas = tuple(self.schemas)
        self.tasks = tuple(self.tasks)
        if self.n_patients < 1 or self.samples_per_patient < 1 or self.latent_dim < 1:
            raise ConfigError("n_patients, samples_per_patient and latent_dim must be >= 1")
        if not 0.0 <= self.task_correlation <= 1.0:
            raise ConfigError(f"task_correlation must lie in [0, 1], got {self.task_correlation}")
        for name, p in self.prevalence.items():
            if not 0.0 < p < 1.0:
                raise ConfigError(f"prevalence for {name!r} must lie in (0, 1), got {p}")
        if self.noise_scale < 0 or self.label_noise < 0 or self.sample_jitter < 0:
            raise ConfigError("noise scales must be >= 0")
        if self.latent_clusters == 1 or self.latent_clusters < 0:
            raise ConfigError("latent_clusters must be 0 (gaussian latents) or >= 2")

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "samples_per_patient": self.samples_per_patient,
            "modalities": [{"name": m.name, "dim": m.dim} for m in self.schemas],
            "tasks": [t.to_dict() for t in self.tasks],
            "latent_dim": self.latent_dim,
            "task_correlation": self.task_correlation,
            "prevalence": dict(self.prevalence),
            "noise_scale": self.noise_scale,
            "label_noise": self.label_noise,
            "sample_jitter": self.sample_jitter,
            "latent_clusters": self.latent_clusters,
            "cluster_spread": self.cluster_spread,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        d = dict(d)
        try:
            schemas = tuple(ModalitySchema(m["name"], int(m["dim"])) for m in d.pop("modalities"))
            tasks = tuple(TaskSpec.from_dict(t) for t in d.pop("tasks"))
            return cls(schemas=schemas, tasks=tasks, **d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad synth config: {exc}") from None


def _directions(rng: np.random.Generator, latent_dim: int, count: int) -> np.ndarray:
    """``count`` unit vectors; mutually orthogonal whenever the latent space allows it."""
    raw = rng.normal(size=(latent_dim, count))
    if count <= latent_dim:
        q, r = np.linalg.qr(raw)
        return (q * np.sign(np.diag(r))).T
    return (raw / np.linalg.norm(raw, axis=0)).T


@dataclass(frozen=True)
class SynthTruth:
    latent: np.ndarray
    cluster: np.ndarray | None


def synth_generate(cfg: SynthConfig) -> Dataset:
    return synth_generate_with_truth(cfg)[0]


def synth_generate_with_truth(cfg: SynthConfig) -> tuple[Dataset, SynthTruth]:
    """Patients share a latent factor; modalities are noisy linear views of it.

    Each supervised task reads the latent along ``sqrt(rho)*shared +
    sqrt(1-rho)*own`` where ``shared`` and every ``own`` are orthonormal, so
    task directions have cosine similarity ``rho``.
    """
    rng = np.random.default_rng(cfg.seed)
    rho = cfg.task_correlation
    supervised = [t for t in cfg.tasks if t.supervised]
    widths = [t.num_classes if t.problem is ProblemClass.MULTICLASS else 1 for t in supervised]
    basis = _directions(rng, cfg.latent_dim, 1 + sum(widths))
    shared, own = basis[0], basis[1:]

    if cfg.latent_clusters:
        centers = rng.normal(size=(cfg.latent_clusters, cfg.latent_dim))
        centers *= 3.0 / np.sqrt(cfg.latent_dim)
        member = rng.integers(cfg.latent_clusters, size=cfg.n_patients)
        z = centers[member] + cfg.cluster_spread * rng.normal(size=(cfg.n_patients, cfg.latent_dim))
    else:
        z = rng.normal(size=(cfg.n_patients, cfg.latent_dim))
    n = cfg.n_patients * cfg.samples_per_patient
    patient_of = np.repeat(np.arange(cfg.n_patients), cfg.samples_per_patient)
    zs = z[patient_of] + cfg.sample_jitter * rng.normal(size=(n, cfg.latent_dim))

    views = {}
    for m in cfg.schemas:
        mix = rng.normal(size=(cfg.latent_dim, m.dim)) / np.sqrt(cfg.latent_dim)
        views[m.name] = zs @ mix + cfg.noise_scale * rng.normal(size=(n, m.dim))

    labels: dict[str, np.ndarray] = {}
    col = 0
    for t, w in zip(supervised, widths):
        dirs = np.sqrt(rho) * shared[None, :] + np.sqrt(1.0 - rho) * own[col : col + w]
        col += w
        scores = zs @ dirs.T + cfg.label_noise * rng.normal(size=(n, w))
        if t.problem is ProblemClass.BINARY:
            prev = cfg.prevalence.get(t.name, 0.5)
            cut = np.quantile(scores[:, 0], 1.0 - prev)
            labels[t.name] = (scores[:, 0] > cut).astype(int)
        elif t.problem is ProblemClass.MULTICLASS:
            labels[t.name] = scores.argmax(axis=1)
        else:
            labels[t.name] = scores[:, 0]

    samples = []
    for i in range(n):
        p = patient_of[i]
        sid = f"s{i:06d}"
        samples.append(
            Sample(
                sid,
                f"p{p:05d}",
                {name: views[name][i].copy() for name in views},
                {name: (int(v[i]) if v.dtype.kind == "i" else float(v[i])) for name, v in labels.items()},
            )
        )
    ds = Dataset(tuple(cfg.schemas), tuple(cfg.tasks), tuple(samples))
    truth = SynthTruth(zs, member[patient_of] if cfg.latent_clusters else None)
    return ds, truth
