"""Serving pipeline: per-head IVF (k-means) ANN, per-head preranking, quota merge."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .artifacts import ArtifactError, array_checksum, read_tables, write_tables

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankedCandidates:
    items: np.ndarray
    scores: np.ndarray
    head: str = ""

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(zip(self.items.tolist(), self.scores.tolist()))


def rank_order(items: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Indices sorting by descending score, ties broken by ascending item id."""
    return np.lexsort((items, -scores))


def top_k(items: np.ndarray, scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    if len(items) > k:
        kth = np.partition(scores, len(scores) - k)[len(scores) - k]
        keep = scores >= kth
        items, scores = items[keep], scores[keep]
    order = rank_order(items, scores)[:k]
    return items[order], scores[order]


def l2_normalize(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def row_scores(vectors: np.ndarray, rows: np.ndarray, query: np.ndarray) -> np.ndarray:
    # einsum keeps each row's reduction independent of which other rows are present
    return np.einsum("ij,j->i", vectors[rows], query)


# ---------------------------------------------------------------------------
# k-means


@dataclass(frozen=True)
class KMeansIndex:
    centroids: np.ndarray
    assignments: np.ndarray
    inverted_lists: list[np.ndarray]
    vectors: np.ndarray
    normalized: bool
    inertia_history: tuple[float, ...] = ()

    @property
    def k(self) -> int:
        return len(self.centroids)

    def __len__(self) -> int:
        return len(self.vectors)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] + (C * C).sum(1)[None, :] - 2.0 * X @ C.T
    return np.maximum(d, 0.0)


def kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [int(rng.integers(n))]
    closest = _sq_dists(X, X[centers[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a center; take the lowest unused index
            unused = np.setdiff1d(np.arange(n), centers)
            nxt = int(unused[0])
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        centers.append(nxt)
        closest = np.minimum(closest, _sq_dists(X, X[nxt][None, :])[:, 0])
    return X[centers].copy()


def kmeans_fit(embeddings: np.ndarray, k: int, iters: int = 20, seed: int = 0,
               normalize: bool = True) -> KMeansIndex:
    """k-means++ seeding followed by ``iters`` Lloyd iterations.

    Assignment ties go to the lowest centroid id; an empty cluster is reseeded
    with the point farthest from its current centroid.
    """
    n = len(embeddings)
    if k < 1 or k > n:
        raise ValueError(f"k={k} must satisfy 1 <= k <= n={n}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    vectors = embeddings.astype(np.float64)
    if normalize:
        vectors = l2_normalize(vectors)
    rng = np.random.default_rng(seed)
    C = kmeans_plus_plus(vectors, k, rng)
    history = []
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        d = _sq_dists(vectors, C)
        assign = np.argmin(d, axis=1)
        point_d = d[np.arange(n), assign]
        counts = np.bincount(assign, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            # steal the farthest point whose cluster keeps at least one member
            donors = np.where(counts[assign] > 1, point_d, -1.0)
            far = int(np.argmax(donors))
            counts[assign[far]] -= 1
            assign[far] = empty
            counts[empty] = 1
            point_d[far] = 0.0
        history.append(float(point_d.sum()))
        sums = np.zeros_like(C)
        np.add.at(sums, assign, vectors)
        C = sums / counts[:, None]
    lists = [np.flatnonzero(assign == c) for c in range(k)]
    return KMeansIndex(C, assign, lists, vectors, normalize, tuple(history))


def inertia(index: KMeansIndex) -> float:
    diff = index.vectors - index.centroids[index.assignments]
    return float((diff * diff).sum())


# ---------------------------------------------------------------------------
# search


def _prepare_query(query: np.ndarray, normalized: bool) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    return l2_normalize(q) if normalized else q


def ann_search(index: KMeansIndex, query_emb: np.ndarray, C: int, K_ann: int,
               head: str = "") -> RankedCandidates:
    """Probe the ``C`` most similar centroids and rank their members exactly."""
    if not 1 <= C <= index.k:
        raise ValueError(f"C={C} must satisfy 1 <= C <= k={index.k}")
    q = _prepare_query(query_emb, index.normalized)
    sims = index.centroids @ q
    if index.normalized:
        sims = sims / np.maximum(np.linalg.norm(index.centroids, axis=1), 1e-12)
    probe = rank_order(np.arange(index.k), sims)[:C]
    rows = np.concatenate([index.inverted_lists[c] for c in probe])
    items, scores = top_k(rows, row_scores(index.vectors, rows, q), K_ann)
    return RankedCandidates(items, scores, head)


def exhaustive_search(embeddings: np.ndarray, query: np.ndarray, K_ann: int,
                      normalized: bool = False, head: str = "") -> RankedCandidates:
    """Exact top-``K_ann`` over every row (the ANN oracle).

    ``embeddings`` are used as given; pass ``index.vectors`` to compare with an
    index built on normalized vectors.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    q = _prepare_query(query, normalized)
    rows = np.arange(len(X))
    items, scores = top_k(rows, row_scores(X, rows, q), K_ann)
    return RankedCandidates(items, scores, head)


# ---------------------------------------------------------------------------
# preranking and merging


@dataclass(frozen=True)
class Preranker:
    """Mean-of-history dot-product scorer with a log-popularity prior."""

    item_emb: np.ndarray
    log_popularity: np.ndarray
    beta: float = 0.1
    history_len: int = 10

    def user_vector(self, history: np.ndarray) -> np.ndarray | None:
        recent = np.asarray(history, dtype=np.int64)[-self.history_len:]
        if len(recent) == 0:
            return None
        return self.item_emb[recent].astype(np.float64).mean(axis=0)

    def score(self, user_vec: np.ndarray | None, items: np.ndarray) -> np.ndarray:
        prior = self.beta * self.log_popularity[items]
        if user_vec is None:
            return prior.astype(np.float64)
        return row_scores(self.item_emb, items, user_vec) + prior


def prerank(candidates_per_head: list[RankedCandidates], preranker: Preranker,
            user_history: np.ndarray, K: int) -> list[RankedCandidates]:
    """Rescore each head's candidates and keep its own top ``K`` (never pooled)."""
    u = preranker.user_vector(user_history)
    if u is None:
        log.debug("empty user history: popularity-only preranking")
    out = []
    for cands in candidates_per_head:
        scores = preranker.score(u, cands.items)
        items, scores = top_k(cands.items, scores, K)
        out.append(RankedCandidates(items, scores, cands.head))
    return out


def quota_count(alpha: float, K: int) -> int:
    """Number of engagement-head slots: ``alpha/100 * K`` rounded half up."""
    return int(math.floor(alpha / 100.0 * K + 0.5))


def quota_merge(head1_topk: RankedCandidates, head2_topk: RankedCandidates, alpha: float, K: int
                ) -> tuple[RankedCandidates, bool]:
    """Merge per-head top-K lists by quota; returns (merged, short_flag).

    Takes ``n1`` leading head-1 items and ``K - n1`` leading head-2 items,
    counts shared items once, then backfills alternately from the heads'
    next unused candidates starting with head 2.
    """
    n1 = quota_count(alpha, K)
    chosen: dict[int, float] = {}
    for items, scores, n in ((head1_topk.items, head1_topk.scores, n1),
                             (head2_topk.items, head2_topk.scores, K - n1)):
        for i, s in zip(items[:n].tolist(), scores[:n].tolist()):
            chosen.setdefault(i, s)
    cursors = [K - n1, n1]
    sources = [head2_topk, head1_topk]
    turn = 0
    while len(chosen) < K:
        progressed = False
        for _ in range(2):
            src, c = sources[turn], cursors[turn]
            while c < len(src.items) and int(src.items[c]) in chosen:
                c += 1
            if c < len(src.items):
                chosen[int(src.items[c])] = float(src.scores[c])
                c += 1
                progressed = True
            cursors[turn] = c
            turn = 1 - turn
            if progressed:
                break
        if not progressed:
            break
    items = np.fromiter(chosen.keys(), dtype=np.int64, count=len(chosen))
    scores = np.fromiter(chosen.values(), dtype=np.float64, count=len(chosen))
    order = rank_order(items, scores)
    short = len(chosen) < K
    if short:
        log.debug("quota_merge: union of inputs (%d) smaller than K=%d", len(chosen), K)
    return RankedCandidates(items[order], scores[order], "merged"), short


# ---------------------------------------------------------------------------
# per-user pipeline


@dataclass
class ServeSettings:
    C: int = 8
    K_ann: int = 200
    K: int = 30
    alpha: float = 50.0
    triggers_per_user: int = 10
    final_topk_per_user: int = 100

    @classmethod
    def from_config(cls, cfg) -> ServeSettings:
        return cls(cfg.C, cfg.K_ann, cfg.K, cfg.alpha, cfg.triggers_per_user, cfg.final_topk_per_user)


@dataclass
class UserRetrieval:
    final: RankedCandidates
    per_trigger: list[tuple[int, np.ndarray]]


class RetrievalService:
    """Per-head indexes plus a shared preranker.

    ANN results depend only on the trigger, so they are memoised per
    ``(head, trigger)``; preranking and merging are per user.
    """

    def __init__(self, heads: list[tuple[KMeansIndex, np.ndarray]], preranker: Preranker):
        if not 1 <= len(heads) <= 2:
            raise ValueError("one or two heads supported")
        self.heads = heads
        self.preranker = preranker
        self._ann_cache: dict[tuple[int, int, int, int], RankedCandidates] = {}

    def ann(self, head: int, trigger: int, C: int, K_ann: int) -> RankedCandidates:
        key = (head, trigger, C, K_ann)
        hit = self._ann_cache.get(key)
        if hit is None:
            index, table = self.heads[head]
            hit = ann_search(index, table[trigger], C, K_ann, head=f"h{head + 1}")
            self._ann_cache[key] = hit
        return hit

    def retrieve_for_user(self, t1_history: np.ndarray, cfg: ServeSettings) -> UserRetrieval:
        history = np.asarray(t1_history, dtype=np.int64)
        if len(history) == 0:
            raise ValueError("user has no T1 engagement")
        engaged = np.unique(history)
        u = self.preranker.user_vector(history)
        triggers = history[-cfg.triggers_per_user:]
        merged_lists = []
        per_trigger = []
        for trig in triggers.tolist():
            per_head = []
            for h in range(len(self.heads)):
                cands = self.ann(h, trig, cfg.C, cfg.K_ann)
                keep = ~np.isin(cands.items, engaged, assume_unique=False)
                items = cands.items[keep]
                scores = self.preranker.score(u, items)
                items, scores = top_k(items, scores, cfg.K)
                per_head.append(RankedCandidates(items, scores, cands.head))
            if len(per_head) == 2:
                merged, _ = quota_merge(per_head[0], per_head[1], cfg.alpha, cfg.K)
            else:
                merged = per_head[0]
            merged_lists.append(merged)
            per_trigger.append((trig, merged.items))
        if merged_lists:
            items = np.concatenate([m.items for m in merged_lists])
            scores = np.concatenate([m.scores for m in merged_lists])
        else:
            items, scores = np.zeros(0, np.int64), np.zeros(0)
        # the preranker score is a function of (user, item), so duplicates agree
        items, first = np.unique(items, return_index=True)
        scores = scores[first]
        items, scores = top_k(items, scores, cfg.final_topk_per_user)
        return UserRetrieval(RankedCandidates(items, scores, "final"), per_trigger)


# ---------------------------------------------------------------------------
# persistence: centroid matrix + length-prefixed inverted lists + manifest


def save_index(directory: str | os.PathLike, index: KMeansIndex, source_checksum: str = "",
               extra: dict | None = None) -> Path:
    lengths = np.array([len(x) for x in index.inverted_lists], dtype=np.int64)
    packed = np.concatenate([np.concatenate([[len(x)], x]) for x in index.inverted_lists])
    meta = {
        "kind": "kmeans_index",
        "k": index.k,
        "normalized": index.normalized,
        "embedding_checksum": source_checksum,
        "inertia_history": list(index.inertia_history),
        "n_items": len(index),
        "list_lengths_total": int(lengths.sum()),
    } | (extra or {})
    return write_tables(directory, {
        "centroids": index.centroids,
        "inverted_lists": packed.astype(np.int64),
    }, meta)


def load_index(directory: str | os.PathLike, embeddings: np.ndarray) -> KMeansIndex:
    tables, manifest = read_tables(directory)
    if manifest.get("embedding_checksum") and manifest["embedding_checksum"] != array_checksum(embeddings):
        raise ArtifactError(f"{directory}: index was built from different embeddings")
    packed = tables["inverted_lists"]
    lists, pos = [], 0
    while pos < len(packed):
        n = int(packed[pos])
        lists.append(packed[pos + 1: pos + 1 + n].astype(np.int64))
        pos += 1 + n
    assign = np.empty(int(manifest["n_items"]), dtype=np.int64)
    for c, members in enumerate(lists):
        assign[members] = c
    vectors = embeddings.astype(np.float64)
    if manifest["normalized"]:
        vectors = l2_normalize(vectors)
    return KMeansIndex(tables["centroids"], assign, lists, vectors, bool(manifest["normalized"]),
                       tuple(manifest.get("inertia_history", ())))
