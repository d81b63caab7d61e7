"""Shared-bottom multi-head item tower.

A sparse id table and a dense-feature MLP form the shared bottom; their
outputs are concatenated and fed to one MLP per head. Parameters live in a
flat ``dict`` of arrays so that optimizers and gradient checks can treat every
group uniformly.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .artifacts import read_tables, write_tables
from .config import ModelConfig, section_dict


class HeadSelector(enum.IntEnum):
    ENGAGEMENT = 0
    RELEVANCE = 1


@dataclass
class ModelParams:
    arrays: dict[str, np.ndarray]
    accum: dict[str, np.ndarray]
    n_heads: int
    cfg: ModelConfig
    steps: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return self.arrays["sparse"].shape[0]

    @property
    def dtype(self) -> np.dtype:
        return self.arrays["sparse"].dtype

    def copy(self) -> ModelParams:
        return ModelParams({k: v.copy() for k, v in self.arrays.items()},
                           {k: v.copy() for k, v in self.accum.items()},
                           self.n_heads, self.cfg, self.steps, dict(self.meta))

    def head_param_count(self) -> int:
        return sum(v.size for k, v in self.arrays.items() if k.startswith("head"))

    def group(self, prefix: str) -> list[str]:
        return [k for k in self.arrays if k.split(".")[0] == prefix]


# ---------------------------------------------------------------------------
# MLP primitives (tanh hidden layers, linear output)


def mlp_sizes(n_in: int, hidden: tuple[int, ...] | list[int], n_out: int) -> list[tuple[int, int]]:
    dims = [n_in, *hidden, n_out]
    return list(zip(dims[:-1], dims[1:]))


def init_mlp(rng: np.random.Generator, prefix: str, sizes: list[tuple[int, int]],
             dtype: np.dtype, out_scale: float = 1.0) -> dict[str, np.ndarray]:
    out = {}
    for i, (fan_in, fan_out) in enumerate(sizes):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        if i == len(sizes) - 1:
            limit *= out_scale
        out[f"{prefix}.W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
        out[f"{prefix}.b{i}"] = np.zeros(fan_out, dtype=dtype)
    return out


def mlp_forward(arrays: dict[str, np.ndarray], prefix: str, x: np.ndarray
                ) -> tuple[np.ndarray, list[np.ndarray]]:
    n_layers = sum(1 for k in arrays if k.startswith(prefix + ".W"))
    acts = [x]
    h = x
    for i in range(n_layers):
        h = h @ arrays[f"{prefix}.W{i}"] + arrays[f"{prefix}.b{i}"]
        if i < n_layers - 1:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def mlp_backward(arrays: dict[str, np.ndarray], prefix: str, acts: list[np.ndarray],
                 dout: np.ndarray, grads: dict[str, np.ndarray], need_dx: bool = True
                 ) -> np.ndarray | None:
    """Accumulate parameter gradients into ``grads``; return d(loss)/d(input)."""
    n_layers = len(acts) - 1
    d = dout
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            d = d * (1.0 - acts[i + 1] ** 2)
        _accumulate(grads, f"{prefix}.W{i}", acts[i].T @ d)
        _accumulate(grads, f"{prefix}.b{i}", d.sum(axis=0))
        if i > 0 or need_dx:
            d = d @ arrays[f"{prefix}.W{i}"].T
    return d if need_dx else None


def _accumulate(grads: dict[str, np.ndarray], key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


# ---------------------------------------------------------------------------
# model


def init_params(catalog_size: int, dense_dim: int, cfg: ModelConfig, seed: int,
                n_heads: int = 2) -> ModelParams:
    cfg.validate()
    if catalog_size < 1 or dense_dim < 1:
        raise ValueError("catalog_size and dense_dim must be positive")
    if n_heads not in (1, 2):
        raise ValueError("n_heads must be 1 or 2")
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    limit = 1.0 / np.sqrt(cfg.d_s)
    arrays["sparse"] = rng.uniform(-limit, limit, size=(catalog_size, cfg.d_s)).astype(dtype)
    arrays |= init_mlp(rng, "dense", mlp_sizes(dense_dim, (cfg.dense_hidden,), cfg.d_d), dtype)
    for h in range(n_heads):
        arrays |= init_mlp(rng, f"head{h}", mlp_sizes(cfg.d_s + cfg.d_d, cfg.head_hidden, cfg.d_e),
                           dtype, out_scale=0.5)
    accum = {k: np.zeros_like(v) for k, v in arrays.items()}
    return ModelParams(arrays, accum, n_heads, cfg)


def _check_head(params: ModelParams, head: HeadSelector | int) -> int:
    h = int(head)
    if not 0 <= h < params.n_heads:
        raise ValueError(f"model has {params.n_heads} head(s); head {HeadSelector(h).name} unavailable")
    return h


def forward_bottom(params: ModelParams, item_ids: np.ndarray, dense_features: np.ndarray
                   ) -> tuple[np.ndarray, list[np.ndarray]]:
    d, acts = mlp_forward(params.arrays, "dense", dense_features.astype(params.dtype, copy=False))
    z = np.concatenate([params.arrays["sparse"][item_ids], d], axis=1)
    return z, acts


def embed(params: ModelParams, item_ids, dense_features: np.ndarray,
          head: HeadSelector | int) -> np.ndarray:
    """Row k is ``head_mlp(concat(sparse[id_k], dense_tower(features_k)))``."""
    h = _check_head(params, head)
    ids = np.asarray(item_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= params.n_items):
        raise IndexError(f"item id out of range [0, {params.n_items})")
    if len(dense_features) != len(ids):
        raise ValueError("dense_features must have one row per id")
    z, _ = forward_bottom(params, ids, dense_features)
    out, _ = mlp_forward(params.arrays, f"head{h}", z)
    return out


def embed_catalog(params: ModelParams, dense_features: np.ndarray, head: HeadSelector | int,
                  chunk: int = 4096) -> np.ndarray:
    n = params.n_items
    out = [embed(params, np.arange(s, min(n, s + chunk)), dense_features[s:s + chunk], head)
           for s in range(0, n, chunk)]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# persistence


def dump_embeddings(params: ModelParams, dense_features: np.ndarray, head: HeadSelector | int,
                    directory: str | os.PathLike, extra: dict | None = None) -> Path:
    h = _check_head(params, head)
    emb = embed_catalog(params, dense_features, h).astype(np.float32)
    meta = {
        "kind": "embeddings",
        "head": HeadSelector(h).name.lower(),
        "normalized": False,
        "shape": list(emb.shape),
    } | (extra or {})
    return write_tables(directory, {"embeddings": emb}, meta)


def load_embeddings(directory: str | os.PathLike) -> tuple[np.ndarray, dict]:
    tables, manifest = read_tables(directory)
    return tables["embeddings"], manifest


def save_checkpoint(params: ModelParams, directory: str | os.PathLike,
                    extra: dict | None = None) -> Path:
    tables = {f"param.{k}": v for k, v in params.arrays.items()}
    tables |= {f"accum.{k}": v for k, v in params.accum.items()}
    meta = {
        "kind": "checkpoint",
        "n_heads": params.n_heads,
        "dims": section_dict(params.cfg),
        "steps": params.steps,
    } | params.meta | (extra or {})
    return write_tables(directory, tables, meta)


def load_checkpoint(directory: str | os.PathLike) -> ModelParams:
    tables, manifest = read_tables(directory)
    dims = dict(manifest["dims"])
    dims["head_hidden"] = tuple(dims["head_hidden"])
    cfg = ModelConfig(**dims)
    arrays = {k[len("param."):]: v for k, v in tables.items() if k.startswith("param.")}
    accum = {k[len("accum."):]: v for k, v in tables.items() if k.startswith("accum.")}
    meta = {k: v for k, v in manifest.items() if k not in ("tables", "n_heads", "dims", "steps")}
    return ModelParams(arrays, accum, int(manifest["n_heads"]), cfg, int(manifest["steps"]), meta)
