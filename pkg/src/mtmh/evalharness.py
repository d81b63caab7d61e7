"""Offline measurement: recall@K against T2, trigger/candidate topic match, sweeps."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from .config import EvalConfig, ServeConfig
from .retrieval import KMeansIndex, Preranker, RetrievalService, ServeSettings, kmeans_fit
from .synthgen import InteractionLog, ItemCatalog

log = logging.getLogger(__name__)

RELEVANCE_STAGE = "per_trigger_post_merge"

# mode -> (embedding tables used for ANN, table used by the preranker)
MODE_TABLES: dict[str, tuple[tuple[str, ...], str]] = {
    "mtmh": (("mtmh.h1", "mtmh.h2"), "mtmh.h1"),
    "h1": (("mtmh.h1",), "mtmh.h1"),
    "h2": (("mtmh.h2",), "mtmh.h1"),
    "stmh": (("stmh.h1", "stmh.h2"), "stmh.h1"),
    "mtsh": (("mtsh.h1",), "mtsh.h1"),
    "coengage": (("coengage.h1",), "coengage.h1"),
    "content": (("content",), "content"),
}

# mode -> training objective set of the model it reads (None: no trained model)
TRAINING_MODE = {"mtmh": "mtmh", "h1": "mtmh", "h2": "mtmh", "stmh": "stmh",
                 "mtsh": "mtsh", "coengage": "coengage", "content": None}


class MissingArtifactError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0])


@dataclass
class EvalReport:
    mode: str
    seed: int
    recall_at: dict[int, float]
    l1_match: float
    l2_match: float
    alpha: float = float("nan")
    w_r: float = float("nan")
    n_users: int = 0
    n_excluded: int = 0
    n_trigger_pairs: int = 0
    relevance_stage: str = RELEVANCE_STAGE
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def max_k_recall(self) -> float:
        return self.recall_at[max(self.recall_at)]

    def metrics(self) -> dict[str, float]:
        out = {f"recall@{k}": v for k, v in sorted(self.recall_at.items())}
        out["l1_match"] = self.l1_match
        out["l2_match"] = self.l2_match
        return out

    def rows(self) -> list[tuple]:
        return [(self.mode, self.alpha, self.w_r, self.seed, m, v) for m, v in self.metrics().items()]

    def to_json(self) -> dict[str, Any]:
        return {
            "mode": self.mode, "seed": self.seed, "alpha": self.alpha, "w_r": self.w_r,
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "l1_match": self.l1_match, "l2_match": self.l2_match,
            "n_users": self.n_users, "n_excluded": self.n_excluded,
            "n_trigger_pairs": self.n_trigger_pairs,
            "relevance_stage": self.relevance_stage, "config": self.config,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> EvalReport:
        return cls(data["mode"], int(data["seed"]),
                   {int(k): float(v) for k, v in data["recall_at"].items()},
                   float(data["l1_match"]), float(data["l2_match"]),
                   float(data["alpha"]), float(data["w_r"]), int(data["n_users"]),
                   int(data["n_excluded"]), int(data["n_trigger_pairs"]),
                   data.get("relevance_stage", RELEVANCE_STAGE), data.get("config", {}))


@dataclass
class SweepResult:
    knob: str
    points: list[tuple[float, EvalReport]]

    def __post_init__(self):
        values = [v for v, _ in self.points]
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError(f"{self.knob} sweep values must be strictly increasing: {values}")

    @property
    def values(self) -> list[float]:
        return [v for v, _ in self.points]

    def series(self, metric: str) -> np.ndarray:
        return np.array([r.metrics()[metric] for _, r in self.points])


# ---------------------------------------------------------------------------
# metrics


def recall_at_k(retrieved: dict[int, np.ndarray], future: dict[int, np.ndarray], Ks
                ) -> tuple[dict[int, float], int]:
    """Macro-averaged recall@K; returns (recall per K, number of excluded users).

    ``retrieved`` maps user -> ranked item ids, ``future`` maps user -> T2 items.
    Users without T2 items are skipped.
    """
    Ks = sorted(int(k) for k in Ks)
    sums = {k: [] for k in Ks}
    excluded = 0
    for user in sorted(retrieved):
        truth = np.unique(future.get(user, np.zeros(0, np.int64)))
        if len(truth) == 0:
            excluded += 1
            continue
        ranked = np.asarray(retrieved[user])
        for k in Ks:
            hits = np.isin(truth, ranked[:k]).sum()
            sums[k].append(hits / len(truth))
    if excluded:
        log.info("recall: excluded %d user(s) without T2 engagement", excluded)
    return {k: float(np.mean(v)) if v else 0.0 for k, v in sums.items()}, excluded


def topic_match_rate(per_trigger: list[tuple[int, np.ndarray]], topics: np.ndarray) -> float:
    """Mean over (trigger, candidate) pairs of ``topics[trigger] == topics[candidate]``."""
    matches, total = 0, 0
    for trig, cands in per_trigger:
        cands = np.asarray(cands, dtype=np.int64)
        matches += int((topics[cands] == topics[trig]).sum())
        total += len(cands)
    return matches / total if total else 0.0


# ---------------------------------------------------------------------------
# evaluation context


@dataclass
class EvalContext:
    """Everything retrieval needs for one world: the log, catalog and embedding tables.

    Indexes are fitted on first use and reused, so an alpha sweep over one
    model clusters each table only once.
    """

    log: InteractionLog
    catalog: ItemCatalog
    tables: dict[str, np.ndarray]
    index_seed: int = 0
    _indexes: dict[tuple, KMeansIndex] = field(default_factory=dict, repr=False)
    _services: dict[tuple, RetrievalService] = field(default_factory=dict, repr=False)

    def table(self, name: str) -> np.ndarray:
        if name not in self.tables:
            raise MissingArtifactError(f"missing embeddings {name!r} (train the model that produces it)")
        return self.tables[name]

    def add_index(self, name: str, index: KMeansIndex, serve: ServeConfig) -> None:
        self._indexes[(name, serve.k, serve.kmeans_iters, serve.normalize)] = index

    def index(self, name: str, serve: ServeConfig) -> KMeansIndex:
        key = (name, serve.k, serve.kmeans_iters, serve.normalize)
        if key not in self._indexes:
            self._indexes[key] = kmeans_fit(self.table(name), serve.k, serve.kmeans_iters,
                                            self.index_seed, serve.normalize)
        return self._indexes[key]

    def service(self, mode: str, serve: ServeConfig) -> RetrievalService:
        heads, ranker = MODE_TABLES[mode]
        key = (heads, ranker, serve.k, serve.kmeans_iters, serve.normalize, serve.beta,
               serve.history_len)
        if key not in self._services:
            pop = np.log(np.maximum(self.catalog.popularity.astype(np.float64), 1e-12))
            pre = Preranker(self.table(ranker).astype(np.float64), pop, serve.beta, serve.history_len)
            self._services[key] = RetrievalService(
                [(self.index(h, serve), self.table(h)) for h in heads], pre)
        return self._services[key]


def run_mode(mode: str, ctx: EvalContext, serve: ServeConfig, eval_cfg: EvalConfig,
             seed: int = 0, w_r: float = float("nan"), config: dict | None = None) -> EvalReport:
    """Retrieve for every user with T1 history and measure recall and topic match."""
    if mode not in MODE_TABLES:
        raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODE_TABLES)}")
    service = ctx.service(mode, serve)
    settings = ServeSettings.from_config(serve)
    two_heads = len(MODE_TABLES[mode][0]) == 2
    if not two_heads:
        # single-head runs take every slot from the only head
        settings = replace(settings, alpha=100.0)

    t1 = ctx.log.t1_sequences()
    t2 = ctx.log.t2_sequences()
    retrieved: dict[int, np.ndarray] = {}
    pairs: list[tuple[int, np.ndarray]] = []
    for user in sorted(t1):
        res = service.retrieve_for_user(t1[user], settings)
        retrieved[user] = res.final.items
        pairs.extend(res.per_trigger)
    recall, excluded = recall_at_k(retrieved, t2, eval_cfg.ks)
    l1 = topic_match_rate(pairs, ctx.catalog.l1)
    l2 = topic_match_rate(pairs, ctx.catalog.l2)
    return EvalReport(mode, seed, recall, l1, l2,
                      alpha=settings.alpha if two_heads else float("nan"), w_r=w_r,
                      n_users=len(retrieved) - excluded, n_excluded=excluded,
                      n_trigger_pairs=sum(len(c) for _, c in pairs), config=config or {})


def sweep(knob: str, values, evaluate: Callable[[float], EvalReport]) -> SweepResult:
    """Evaluate one report per knob value.

    ``evaluate`` carries the expensive state: for ``alpha`` it closes over a
    single trained model and its indexes, for ``w_r`` it trains per value.
    """
    if knob not in ("alpha", "w_r"):
        raise ValueError(f"knob must be 'alpha' or 'w_r', got {knob!r}")
    values = [float(v) for v in values]
    if not values:
        raise ValueError("sweep needs at least one value")
    if values != sorted(values):
        raise ValueError("sweep values must be sorted")
    points = []
    for v in values:
        t = time.perf_counter()
        points.append((v, evaluate(v)))
        log.info("sweep %s=%g done in %.1fs", knob, v, time.perf_counter() - t)
    return SweepResult(knob, points)


def alpha_sweep(ctx: EvalContext, values, serve: ServeConfig, eval_cfg: EvalConfig, seed: int = 0,
                mode: str = "mtmh", w_r: float = float("nan")) -> SweepResult:
    return sweep("alpha", values,
                 lambda a: run_mode(mode, ctx, replace(serve, alpha=a), eval_cfg, seed, w_r))


# ---------------------------------------------------------------------------
# output


CSV_HEADER = ("mode", "alpha", "w_r", "seed", "metric", "value")


def write_report_csv(path: str | os.PathLike, reports: list[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerows(r.rows())


def write_sweep_csv(path: str | os.PathLike, result: SweepResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("knob", "knob_value", *CSV_HEADER))
        for v, r in result.points:
            for row in r.rows():
                w.writerow((result.knob, v, *row))


def write_report_json(path: str | os.PathLike, report: EvalReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report_json(path: str | os.PathLike) -> EvalReport:
    with open(path) as fh:
        return EvalReport.from_json(json.load(fh))


def format_report(report: EvalReport) -> str:
    parts = [f"mode={report.mode}", f"seed={report.seed}"]
    if not np.isnan(report.alpha):
        parts.append(f"alpha={report.alpha:g}")
    if not np.isnan(report.w_r):
        parts.append(f"w_r={report.w_r:g}")
    parts += [f"{m}={v:.4f}" for m, v in report.metrics().items()]
    return " ".join(parts)
