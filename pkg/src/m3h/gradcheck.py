"""Finite-difference verification of the full pipeline on a miniature model."""

from __future__ import annotations

import numpy as np

from m3h import numerics as nx
from m3h.data import ModalitySchema, TaskSpec
from m3h.errors import DomainError, NumericError
from m3h.model import Model, ModelConfig
from m3h.training import Batch, loss_terms, term_loss

TINY = dict(
    modality_hidden=(5, 4),
    shared_hidden=(5, 4),
    task_embed_dim=3,
    contrastive_proj_dim=3,
    contrastive_temperature=0.5,
    autoencoder_hidden=5,
    autoencoder_latent=2,
)


def tiny_problem(seed: int, alpha: float = 0.1, n: int = 7) -> tuple[Model, Batch]:
    """A model touching every loss class, with random parameters and data."""
    rng = np.random.default_rng(seed)
    schemas = (ModalitySchema("a", 3), ModalitySchema("b", 4))
    tasks = (
        TaskSpec("bin", "binary"),
        TaskSpec("multi", "multiclass", num_classes=3),
        TaskSpec("reg", "regression"),
        TaskSpec("clu", "cluster", cluster_k=2),
    )
    model = Model(schemas, tasks, ModelConfig(alpha=alpha, seed=seed, **TINY))
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.data[...] = rng.normal(scale=0.3, size=p.shape)
    emb = {m.name: rng.normal(size=(n, m.dim)) for m in schemas}
    labels = {
        "bin": (rng.integers(0, 2, n).astype(float), np.ones(n, bool)),
        "multi": (rng.integers(0, 3, n).astype(float), np.ones(n, bool)),
        "reg": (rng.normal(size=n), np.ones(n, bool)),
    }
    return model, Batch(emb, labels)


def term_values(model: Model, batch: Batch) -> dict[tuple[str, str], float]:
    """Every term's loss from a single forward pass (no graph is built)."""
    with nx.no_grad():
        # one pass through the network serves every supervised term
        cache = {}

        def forward(embeddings):
            if "fwd" not in cache:
                cache["fwd"] = Model.forward(model, embeddings)
            return cache["fwd"]

        model.forward = forward
        try:
            return {term: term_loss(model, batch, term).item() for term in loss_terms(model)}
        finally:
            del model.forward


def check_point(seed: int, eps: float = 3e-5) -> dict[tuple[str, str], float]:
    """Max relative error of each loss term at one random parameter point."""
    if not 0.0 < eps <= 1e-2:
        raise DomainError(f"eps must lie in (0, 1e-2], got {eps}")
    model, batch = tiny_problem(seed)
    terms = loss_terms(model)
    grads = {t: nx.analytic_gradients(lambda t=t: term_loss(model, batch, t), model.params) for t in terms}
    worst = dict.fromkeys(terms, 0.0)
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = term_values(model, batch)
            flat[k] = orig - eps
            down = term_values(model, batch)
            flat[k] = orig
            for t in terms:
                if not (np.isfinite(up[t]) and np.isfinite(down[t])):
                    raise NumericError(f"non-finite loss in term {t} while perturbing {name}[{k}]")
                num = (up[t] - down[t]) / (2.0 * eps)
                worst[t] = max(worst[t], nx.relative_error(grads[t][name].reshape(-1)[k], num))
    return worst


def run_suite(points: int = 10, seed: int = 0, eps: float = 3e-5) -> list[float]:
    return [max(check_point(seed + k, eps).values()) for k in range(points)]
