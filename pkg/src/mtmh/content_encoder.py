"""Toy content/concept contrastive encoder that produces the frozen teacher table.

The content tower is an MLP over an item's raw content vector; the concept
tower is a lookup table indexed by concept id (the item's L2 topic). Both
towers end in a fixed-norm projection ``x / |x| / sqrt(temperature)``, so a dot
product between two outputs is a cosine divided by the temperature. Training
uses in-batch InfoNCE over batches of items with pairwise distinct concepts,
so every off-diagonal concept in a batch is a true negative.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .artifacts import read_tables, write_tables
from .config import EncoderConfig, section_dict
from .model import init_mlp, mlp_backward, mlp_forward, mlp_sizes
from .training import adagrad_step, log_softmax


class EncoderError(RuntimeError):
    pass


def _project(x: np.ndarray, scale: float) -> np.ndarray:
    return scale * x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def _project_backward(x: np.ndarray, y: np.ndarray, dy: np.ndarray, scale: float) -> np.ndarray:
    norm = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
    u = y / scale
    return scale / norm * (dy - u * (dy * u).sum(axis=-1, keepdims=True))


@dataclass
class EncoderParams:
    arrays: dict[str, np.ndarray]
    d_c: int
    temperature: float
    final_loss: float = float("nan")
    steps: int = 0

    @property
    def scale(self) -> float:
        return float(1.0 / np.sqrt(self.temperature))

    @property
    def concept_table(self) -> np.ndarray:
        return _project(self.arrays["concept"], self.scale)

    def content(self, raw: np.ndarray) -> np.ndarray:
        out, _ = mlp_forward(self.arrays, "content", raw.astype(np.float64))
        return _project(out, self.scale)


@dataclass(frozen=True)
class ContentEmbeddingTable:
    vectors: np.ndarray
    normalized: bool = False
    frozen: bool = True

    def __post_init__(self):
        self.vectors.setflags(write=False)

    def __len__(self) -> int:
        return len(self.vectors)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.vectors).tobytes()).hexdigest()


def init_encoder(raw_dim: int, n_concepts: int, cfg: EncoderConfig, seed: int) -> EncoderParams:
    rng = np.random.default_rng(seed)
    arrays = init_mlp(rng, "content", mlp_sizes(raw_dim, (cfg.hidden,), cfg.dim), np.float64)
    limit = 1.0 / np.sqrt(cfg.dim)
    arrays["concept"] = rng.uniform(-limit, limit, size=(n_concepts, cfg.dim))
    return EncoderParams(arrays, cfg.dim, cfg.temperature)


def infonce_step(params: EncoderParams, raw: np.ndarray, concepts: np.ndarray
                 ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean in-batch InfoNCE of content rows against the batch's concept vectors.

    ``concepts`` must be pairwise distinct; row ``i``'s positive is column ``i``.
    """
    s = params.scale
    h, acts = mlp_forward(params.arrays, "content", raw)
    f = _project(h, s)
    c_raw = params.arrays["concept"][concepts]
    c = _project(c_raw, s)
    logp = log_softmax(f @ c.T)
    b = len(concepts)
    loss = float(-np.trace(logp) / b)
    g = np.exp(logp)
    g[np.arange(b), np.arange(b)] -= 1.0
    g /= b
    grads: dict[str, np.ndarray] = {}
    dh = _project_backward(h, f, g @ c, s)
    mlp_backward(params.arrays, "content", acts, dh, grads, need_dx=False)
    dconcept = np.zeros_like(params.arrays["concept"])
    dconcept[concepts] = _project_backward(c_raw, c, g.T @ f, s)
    grads["concept"] = dconcept
    return loss, grads


def _concept_batches(labels: np.ndarray, n_concepts: int, batch_size: int,
                     rng: np.random.Generator):
    """One epoch of batches with distinct concepts, one item per concept."""
    by_concept = [rng.permutation(np.flatnonzero(labels == t)) for t in range(n_concepts)]
    cursor = np.zeros(n_concepts, dtype=np.int64)
    b = min(batch_size, n_concepts)
    for _ in range(max(1, len(labels) // b)):
        live = np.flatnonzero([len(x) > 0 for x in by_concept])
        chosen = np.sort(rng.choice(live, size=min(b, len(live)), replace=False))
        items = []
        for t in chosen:
            pool = by_concept[t]
            items.append(pool[cursor[t] % len(pool)])
            cursor[t] += 1
        yield np.asarray(items), chosen


def train_content_encoder(raw_content: np.ndarray, concept_labels: np.ndarray, n_concepts: int,
                          cfg: EncoderConfig, seed: int) -> EncoderParams:
    """Fit the content MLP and concept table with Adagrad on in-batch InfoNCE."""
    cfg.validate()
    if len(raw_content) != len(concept_labels):
        raise EncoderError("every item needs a concept label")
    if min(n_concepts, cfg.batch_size) < 2:
        raise EncoderError("in-batch InfoNCE needs at least two concepts")
    rng = np.random.default_rng(seed)
    params = init_encoder(raw_content.shape[1], n_concepts, cfg, int(rng.integers(2**31)))
    accum = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    raw = raw_content.astype(np.float64)
    loss = float("nan")
    for epoch in range(cfg.epochs):
        for items, concepts in _concept_batches(concept_labels, n_concepts, cfg.batch_size, rng):
            loss, grads = infonce_step(params, raw[items], concepts)
            if not np.isfinite(loss):
                raise EncoderError(f"non-finite loss at epoch {epoch}, step {params.steps}")
            adagrad_step(params.arrays, accum, grads, cfg.learning_rate)
            params.steps += 1
    params.final_loss = loss
    return params


def encode_items(params: EncoderParams, raw_content: np.ndarray, normalize: bool = False
                 ) -> ContentEmbeddingTable:
    if not all(np.isfinite(v).all() for v in params.arrays.values()):
        raise EncoderError("encoder parameters are not finite")
    expected = params.arrays["content.W0"].shape[0]
    if raw_content.ndim != 2 or raw_content.shape[1] != expected:
        raise EncoderError(f"raw_content has shape {raw_content.shape}; expected (n, {expected})")
    F = params.content(raw_content)
    if normalize:
        F = F / np.maximum(np.linalg.norm(F, axis=1, keepdims=True), 1e-12)
    return ContentEmbeddingTable(F.astype(np.float32), normalized=normalize)


def knn_topic_purity(vectors: np.ndarray, labels: np.ndarray, k: int = 10,
                     sample: int | None = 2000, seed: int = 0) -> float:
    """Mean fraction of each item's ``k`` cosine nearest neighbours sharing its label."""
    X = vectors.astype(np.float64)
    X = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
    n = len(X)
    rows = np.arange(n)
    if sample is not None and sample < n:
        rows = np.sort(np.random.default_rng(seed).choice(n, size=sample, replace=False))
    hits = []
    for start in range(0, len(rows), 512):
        r = rows[start:start + 512]
        sims = X[r] @ X.T
        sims[np.arange(len(r)), r] = -np.inf
        nn = np.argpartition(-sims, k, axis=1)[:, :k]
        hits.append((labels[nn] == labels[r][:, None]).mean(axis=1))
    return float(np.concatenate(hits).mean())


# ---------------------------------------------------------------------------
# persistence


def save_encoder(directory: str | os.PathLike, params: EncoderParams, table: ContentEmbeddingTable,
                 cfg: EncoderConfig, seed: int, extra: dict | None = None) -> Path:
    tables = {f"param.{k}": v for k, v in params.arrays.items()}
    tables["content_embeddings"] = table.vectors
    meta = {
        "kind": "content_encoder",
        "d_c": params.d_c,
        "temperature": params.temperature,
        "seed": seed,
        "final_loss": params.final_loss,
        "steps": params.steps,
        "normalized": table.normalized,
        "content_checksum": table.checksum(),
        "config": section_dict(cfg),
    } | (extra or {})
    return write_tables(directory, tables, meta)


def load_encoder(directory: str | os.PathLike) -> tuple[EncoderParams, ContentEmbeddingTable, dict]:
    tables, manifest = read_tables(directory)
    arrays = {k[len("param."):]: v for k, v in tables.items() if k.startswith("param.")}
    params = EncoderParams(arrays, int(manifest["d_c"]), float(manifest["temperature"]),
                           float(manifest["final_loss"]), int(manifest["steps"]))
    table = ContentEmbeddingTable(tables["content_embeddings"], bool(manifest["normalized"]))
    if table.checksum() != manifest["content_checksum"]:
        raise EncoderError(f"{directory}: content table checksum mismatch")
    return params, table, manifest
