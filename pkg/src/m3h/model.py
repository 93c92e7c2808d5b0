"""The multimodal multitask network.

Data flow for one batch::

    modality embeddings --modality nets--> h_m --concat--> shared net --> z
    h_m --projection--> unit vectors (contrastive alignment)
    z --task heads--> x_s (batch, tasks, features) --cross-task attention--> O_s
    O_s[:, t] --output layer t--> prediction for task t
    raw concatenated embeddings --autoencoder--> latent, reconstruction

Parameters live in one ordered name -> Tensor table so the optimizer,
gradient checker and checkpoint code can treat the model generically.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from m3h import numerics as nx
from m3h.data import ModalitySchema, TaskSpec, atomic_write_text
from m3h.errors import ConfigError, ContractError, DimensionError, DomainError, FormatError
from m3h.numerics import ProblemClass, Tensor

CHECKPOINT_MAGIC = b"M3H1"


@dataclass
class ModelConfig:
    modality_hidden: tuple[int, ...] = (256, 128)
    shared_hidden: tuple[int, ...] = (256, 128)
    task_embed_dim: int = 64
    contrastive_proj_dim: int = 64
    contrastive_temperature: float = 0.1
    alpha: float = 0.1
    autoencoder_hidden: int = 512
    autoencoder_latent: int = 128
    seed: int = 0

    def __post_init__(self):
        self.modality_hidden = tuple(int(w) for w in self.modality_hidden)
        self.shared_hidden = tuple(int(w) for w in self.shared_hidden)
        widths = (
            self.modality_hidden
            + self.shared_hidden
            + (self.task_embed_dim, self.contrastive_proj_dim, self.autoencoder_hidden, self.autoencoder_latent)
        )
        if not self.modality_hidden or not self.shared_hidden or any(w < 1 for w in widths):
            raise ConfigError("all layer widths must be >= 1")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.contrastive_temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.contrastive_temperature}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model option(s): {sorted(unknown)}")
        return cls(**d)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def param_rng(seed: int, name: str) -> np.random.Generator:
    # Keyed by name so a parameter's initial value does not depend on which
    # other tasks or modalities the model happens to contain.
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def feedforward(x, layers: Sequence[tuple[Tensor, Tensor]], final_relu: bool = True) -> Tensor:
    h = nx.as_tensor(x)
    for k, (W, b) in enumerate(layers):
        h = nx.affine(h, W, b)
        if final_relu or k < len(layers) - 1:
            h = nx.relu(h)
    return h


# ---------------------------------------------------------------------------
# cross-task attention


@dataclass
class AttentionParams:
    """Projections shared by every task in the jointly learned set.

    ``W_T`` has one row per task token (a one-hot token times ``W_T`` is
    that row); ``W_Q``, ``W_K`` and ``W_V`` are square and act on row
    vectors from the right.
    """

    W_T: Tensor
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    alpha: float = 0.1


class AttentionTrace(NamedTuple):
    output: Tensor
    query: Tensor
    keys: Tensor
    values: Tensor
    scores: Tensor
    weights: Tensor


def cross_task_attention(x_s, params: AttentionParams, guard: float = 1e-8) -> AttentionTrace:
    """Route each task's embedding through every task's value vector.

    ``x_s`` has shape (batch, n_tasks, n_feature).  Queries come from the
    task tokens only, so they do not depend on the batch.  Row weights are
    ``softmax(I + alpha * M / max(M))`` with ``M = Q K^T`` computed per batch
    element; the max is guarded against non-positive matrices.
    """
    x_s = nx.as_tensor(x_s)
    if x_s.data.ndim != 3:
        raise DimensionError(f"x_s must be (batch, tasks, features), got {x_s.shape}")
    n_tasks = x_s.shape[1]
    if params.W_T.shape[0] != n_tasks:
        raise DimensionError(f"W_T has {params.W_T.shape[0]} task rows, x_s has {n_tasks} tasks")
    nx.check_finite(x_s, "task embeddings")
    tokens = np.arange(n_tasks)
    task_emb = nx.take_rows(params.W_T, tokens)
    query = nx.matmul(task_emb, params.W_Q)
    keys = nx.matmul(x_s, params.W_K)
    values = nx.matmul(x_s, params.W_V)
    nx.check_finite(query, "query")
    nx.check_finite(keys, "key")
    nx.check_finite(values, "value")
    scores = nx.matmul(query, nx.swap_last(keys))
    nx.check_finite(scores, "attention scores")
    scaled = nx.mul(nx.div(scores, nx.guarded_max(scores, guard)), params.alpha)
    weights = nx.softmax(nx.add(np.eye(n_tasks), scaled), axis=-1)
    nx.check_finite(weights, "attention weights")
    output = nx.matmul(weights, values)
    nx.check_finite(output, "attention output")
    return AttentionTrace(output, query, keys, values, scores, weights)


# ---------------------------------------------------------------------------
# contrastive alignment


def contrastive_loss(projections: Sequence, temperature: float = 0.1) -> Tensor:
    """Symmetric temperature-scaled matching loss averaged over modality pairs.

    Row ``r`` of one modality should match row ``r`` of the other; each pair
    contributes half the row-wise plus half the column-wise cross-entropy.
    Rows must have unit length or be exactly zero.
    """
    projections = [nx.as_tensor(p) for p in projections]
    if len(projections) < 2:
        return Tensor(0.0)
    n = projections[0].shape[0]
    if n < 2:
        raise DomainError("contrastive loss needs at least 2 rows (no negatives otherwise)")
    for p in projections:
        if p.shape[0] != n:
            raise DimensionError("all projections must have the same number of rows")
        norms = np.linalg.norm(p.data, axis=1)
        # an all-zero row (every unit of a narrow layer inactive) is let
        # through: it is equally similar to every row, so it carries no signal
        if not np.all((np.abs(norms - 1.0) <= 1e-6) | (norms == 0.0)):
            raise ContractError("contrastive projections must be row-normalized")
    diag = np.arange(n)
    total = None
    pairs = 0
    for a in range(len(projections)):
        for b in range(a + 1, len(projections)):
            sim = nx.mul(nx.matmul(projections[a], nx.swap_last(projections[b])), 1.0 / temperature)
            rows = nx.mean(nx.pick(nx.log_softmax(sim, axis=1), diag))
            cols = nx.mean(nx.pick(nx.log_softmax(nx.swap_last(sim), axis=1), diag))
            pair = nx.mul(nx.add(rows, cols), -0.5)
            total = pair if total is None else nx.add(total, pair)
            pairs += 1
    return nx.mul(total, 1.0 / pairs)


# ---------------------------------------------------------------------------
# the model


class ForwardResult(NamedTuple):
    hidden: dict
    shared: Tensor
    attention: AttentionTrace
    predictions: dict


class Model:
    def __init__(
        self,
        schemas: Sequence[ModalitySchema],
        tasks: Sequence[TaskSpec],
        config: ModelConfig | None = None,
    ):
        self.config = config or ModelConfig()
        self.schemas = tuple(schemas)
        self.tasks = tuple(tasks)
        if not self.schemas:
            raise ConfigError("a model needs at least one modality")
        if sum(not t.supervised for t in self.tasks) > 1:
            raise ConfigError("at most one cluster task per experiment")
        self.supervised = tuple(t for t in self.tasks if t.supervised)
        self.cluster_task = next((t for t in self.tasks if not t.supervised), None)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._build()

    # construction --------------------------------------------------------

    def _linear(self, prefix: str, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
        W = Tensor(glorot(param_rng(self.config.seed, prefix + ".W"), fan_in, fan_out), True, prefix + ".W")
        b = Tensor(np.zeros(fan_out), True, prefix + ".b")
        self.params[W.name] = W
        self.params[b.name] = b
        return W, b

    def _stack(self, prefix: str, widths: Sequence[int]) -> list[tuple[Tensor, Tensor]]:
        return [self._linear(f"{prefix}.{k}", widths[k], widths[k + 1]) for k in range(len(widths) - 1)]

    def _build(self) -> None:
        cfg = self.config
        self.modality_nets = {
            m.name: self._stack(f"modality.{m.name}", (m.dim,) + cfg.modality_hidden) for m in self.schemas
        }
        h_dim = cfg.modality_hidden[-1]
        self.projections = {
            m.name: self._linear(f"contrastive.{m.name}", h_dim, cfg.contrastive_proj_dim) for m in self.schemas
        }
        self.shared_net = self._stack("shared", (h_dim * len(self.schemas),) + cfg.shared_hidden)
        z_dim = cfg.shared_hidden[-1]
        f = cfg.task_embed_dim
        self.heads = {t.name: self._stack(f"head.{t.name}", (z_dim, f)) for t in self.supervised}
        if self.supervised:
            n = len(self.supervised)
            names = ("W_T", "W_Q", "W_K", "W_V")
            shapes = ((n, f), (f, f), (f, f), (f, f))
            for name, shape in zip(names, shapes):
                key = f"attention.{name}"
                self.params[key] = Tensor(glorot(param_rng(cfg.seed, key), *shape), True, key)
            self.attention = AttentionParams(*(self.params[f"attention.{n}"] for n in names), alpha=cfg.alpha)
        else:
            self.attention = None
        self.outputs = {}
        for t in self.supervised:
            width = t.num_classes if t.problem is ProblemClass.MULTICLASS else 1
            self.outputs[t.name] = self._linear(f"output.{t.name}", f, width)
        if self.cluster_task is not None:
            D = self.input_dim
            hid, lat = cfg.autoencoder_hidden, cfg.autoencoder_latent
            self.encoder = self._stack("autoencoder.encoder", (D, hid, lat))
            self.decoder = self._stack("autoencoder.decoder", (lat, hid, D))
        else:
            self.encoder = self.decoder = None

    @property
    def input_dim(self) -> int:
        return sum(m.dim for m in self.schemas)

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigError(f"model has no task {name!r}")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        out = {k: p.data.copy() for k, p in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    # forward pieces ------------------------------------------------------

    def modality_forward(self, name: str, x) -> Tensor:
        x = nx.as_tensor(x)
        dim = next((m.dim for m in self.schemas if m.name == name), None)
        if dim is None:
            raise ContractError(f"unknown modality {name!r}")
        if x.data.ndim == 1:
            x = nx.reshape(x, (1, -1))
        if x.shape[-1] != dim:
            raise DimensionError(f"modality {name!r} expects dim {dim}, got {x.shape[-1]}")
        return feedforward(x, self.modality_nets[name])

    def fuse_and_share(self, hidden: Mapping[str, Tensor] | Sequence[Tensor]) -> Tensor:
        if isinstance(hidden, Mapping):
            missing = [m.name for m in self.schemas if m.name not in hidden]
            if missing:
                raise ContractError(f"missing modality output(s): {missing}")
            hidden = [hidden[m.name] for m in self.schemas]
        if len(hidden) != len(self.schemas):
            raise ContractError(f"expected {len(self.schemas)} modality outputs, got {len(hidden)}")
        return feedforward(nx.concat(list(hidden), axis=-1), self.shared_net)

    def project(self, hidden: Mapping[str, Tensor]) -> list[Tensor]:
        return [nx.l2_normalize(nx.affine(hidden[m.name], *self.projections[m.name])) for m in self.schemas]

    def task_heads_forward(self, z: Tensor) -> Tensor:
        outs = [feedforward(z, self.heads[t.name]) for t in self.supervised]
        return nx.stack(outs, axis=1)

    def task_output(self, O_t: Tensor, task: TaskSpec) -> Tensor:
        if not task.supervised:
            raise ContractError(f"cluster task {task.name!r} does not flow through attention")
        logits = nx.affine(O_t, *self.outputs[task.name])
        if task.problem is ProblemClass.BINARY:
            return nx.reshape(nx.sigmoid(logits), (-1,))
        if task.problem is ProblemClass.MULTICLASS:
            return nx.log_softmax(logits, axis=-1)
        return nx.reshape(logits, (-1,))

    def autoencoder_forward(self, concat_emb) -> tuple[Tensor, Tensor]:
        if self.encoder is None:
            raise ContractError("model has no cluster task")
        x = nx.as_tensor(concat_emb)
        if x.data.ndim == 1:
            x = nx.reshape(x, (1, -1))
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"autoencoder expects dim {self.input_dim}, got {x.shape[-1]}")
        latent = feedforward(x, self.encoder, final_relu=False)
        recon = feedforward(latent, self.decoder, final_relu=False)
        return latent, recon

    # composed passes -----------------------------------------------------

    def encode(self, embeddings: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {m.name: self.modality_forward(m.name, embeddings[m.name]) for m in self.schemas}

    def forward(self, embeddings: Mapping[str, np.ndarray]) -> ForwardResult:
        """Supervised path: modality nets through attention to every task output."""
        if not self.supervised:
            raise ContractError("model has no supervised tasks")
        hidden = self.encode(embeddings)
        z = self.fuse_and_share(hidden)
        trace = cross_task_attention(self.task_heads_forward(z), self.attention)
        preds = {}
        for k, t in enumerate(self.supervised):
            preds[t.name] = self.task_output(nx.index_axis(trace.output, k, axis=1), t)
        return ForwardResult(hidden, z, trace, preds)

    def concat_embeddings(self, embeddings: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(embeddings[m.name], dtype=np.float64) for m in self.schemas], axis=-1)

    def predict(self, embeddings: Mapping[str, np.ndarray], batch_size: int = 1024) -> dict[str, np.ndarray]:
        """Numpy predictions for every task; cluster tasks yield latent vectors."""
        n = len(next(iter(embeddings.values())))
        chunks: dict[str, list] = {}
        with nx.no_grad():
            for lo in range(0, n, batch_size):
                part = {k: np.asarray(v)[lo : lo + batch_size] for k, v in embeddings.items()}
                if self.supervised:
                    for name, p in self.forward(part).predictions.items():
                        chunks.setdefault(name, []).append(p.data)
                if self.cluster_task is not None:
                    latent, _ = self.autoencoder_forward(self.concat_embeddings(part))
                    chunks.setdefault(self.cluster_task.name, []).append(latent.data)
        return {k: np.concatenate(v, axis=0) for k, v in chunks.items()}


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: Model, path: str | Path) -> None:
    """Binary dump: magic, JSON header, then (name, shape, float64 LE) entries."""
    header = json.dumps(
        {
            "format": 1,
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(model.config).items()},
            "modalities": [{"name": m.name, "dim": m.dim} for m in model.schemas],
            "tasks": [t.to_dict() for t in model.tasks],
        },
        sort_keys=True,
    ).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header]
    table = model.state()
    parts.append(struct.pack("<I", len(table)))
    for name, arr in table.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_model(path: str | Path) -> Model:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an M3H1 checkpoint")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen))
    schemas = [ModalitySchema(m["name"], m["dim"]) for m in header["modalities"]]
    tasks = [TaskSpec.from_dict(t) for t in header["tasks"]]
    model = Model(schemas, tasks, ModelConfig.from_dict(header["config"]))
    (count,) = struct.unpack("<I", take(4))
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        if name in model.params:
            if model.params[name].shape != arr.shape:
                raise FormatError(f"{path}: parameter {name!r} has shape {arr.shape}, expected {model.params[name].shape}")
            model.params[name].data[...] = arr
        else:
            model.buffers[name] = arr
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise FormatError(f"{path}: missing parameter(s) {sorted(missing)[:3]}")
    if pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after parameter table")
    return model
