"""Disk-cached experiment stages: world -> encoder -> pairs -> train -> index -> evaluate.

Each stage writes into ``<out>/stages/<name>-<hash>`` where the hash covers
the config sections the stage depends on plus the global seed. A stage whose
directory already holds a matching ``stage.json`` is loaded instead of rerun,
so alpha sweeps and mode switches reuse everything upstream.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .artifacts import array_checksum, directory_checksums, write_json
from .config import ExperimentConfig, STAGE_SEED_INDEX, section_dict, stable_hash
from .content_encoder import encode_items, load_encoder, save_encoder, train_content_encoder
from .evalharness import (MODE_TABLES, TRAINING_MODE, EvalContext, EvalReport, SweepResult,
                          format_report, run_mode, sweep, write_report_csv, write_report_json,
                          write_sweep_csv)
from .model import init_params, load_embeddings, load_checkpoint, save_checkpoint, dump_embeddings
from .pairgen import ExampleSet, generate_examples, read_examples, write_examples
from .retrieval import kmeans_fit, load_index, save_index
from .synthgen import (InteractionLog, World, check_log, generate_world, load_world, save_world,
                       simulate_engagement)
from .training import (ConvergenceTrace, LossBreakdown, read_history_csv, read_trace_csv, train,
                       write_history_csv, write_trace_csv)

log = logging.getLogger(__name__)

STAGE_FILE = "stage.json"
SEED_RULE = "SeedSequence([seed, stage_index]).generate_state(1)[0]"
FAMILY_HEADS = {"mtmh": 2, "stmh": 2, "mtsh": 1, "coengage": 1}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


@dataclass
class TrainedModel:
    family: str
    w_r: float
    embeddings: dict[str, np.ndarray]
    history: list[tuple[int, LossBreakdown]]
    trace: ConvergenceTrace
    directory: Path


class Experiment:
    """One seeded experiment rooted at an output directory."""

    def __init__(self, cfg: ExperimentConfig, out: str | os.PathLike, force: bool = False):
        self.cfg = cfg.validate()
        self.out = Path(out)
        self.force = force
        self.events: list[dict] = []
        self._world: tuple[World, InteractionLog] | None = None
        self._content: np.ndarray | None = None
        self._examples: ExampleSet | None = None
        self._models: dict[tuple[str, float], TrainedModel] = {}
        self._contexts: dict[tuple[str, float], EvalContext] = {}

    # -- bookkeeping -------------------------------------------------------

    def _hash(self, *sections: str, **extra) -> str:
        payload = {s: section_dict(getattr(self.cfg, s)) for s in sections}
        payload["seed"] = self.cfg.seed
        payload.update(extra)
        return stable_hash(payload)

    def _stage_dir(self, name: str, digest: str) -> Path:
        return self.out / "stages" / f"{name}-{digest}"

    def _cached(self, directory: Path, digest: str) -> bool:
        marker = directory / STAGE_FILE
        if self.force or not marker.exists():
            return False
        try:
            return read_manifest_json(marker).get("hash") == digest
        except ValueError:
            return False

    def _run_stage(self, name: str, directory: Path, digest: str, seed_stage: str | None, fn):
        if self._cached(directory, digest):
            log.info("stage %s: reusing %s", name, directory)
            self.events.append({"stage": name, "dir": str(directory), "hash": digest, "reused": True})
            return
        if directory.exists():
            shutil.rmtree(directory)
        directory.mkdir(parents=True)
        t = time.perf_counter()
        log.info("stage %s: running into %s", name, directory)
        try:
            fn(directory)
        except Exception as exc:  # re-raised with the stage name attached
            raise StageError(name, exc) from exc
        marker = {"stage": name, "hash": digest, "config_hash": self.cfg.config_hash(),
                  "seed": self.cfg.seed}
        if seed_stage is not None:
            marker["stage_seed"] = self.cfg.stage_seed(seed_stage)
            marker["seed_rule"] = SEED_RULE
        write_json(directory / STAGE_FILE, marker)
        log.info("stage %s: done in %.1fs", name, time.perf_counter() - t)
        self.events.append({"stage": name, "dir": str(directory), "hash": digest, "reused": False})

    def _meta(self, stage: str) -> dict:
        return {"config_hash": self.cfg.config_hash(), "seed": self.cfg.seed,
                "stage_seed": self.cfg.stage_seed(stage), "seed_rule": SEED_RULE}

    def write_run_manifest(self, command: str, extra: dict | None = None) -> Path:
        path = self.out / "run.json"
        runs = []
        if path.exists():
            runs = read_manifest_json(path).get("runs", [])
        runs.append({"command": command, "stages": self.events} | (extra or {}))
        self.out.mkdir(parents=True, exist_ok=True)
        write_json(path, {
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.config_hash(),
            "seed": self.cfg.seed,
            "seed_rule": SEED_RULE,
            "stage_seed_index": STAGE_SEED_INDEX,
            "runs": runs,
        })
        self.events = []
        return path

    # -- stages ------------------------------------------------------------

    def world_dir(self) -> Path:
        return self._stage_dir("world", self._hash("world", "sim"))

    def world(self) -> tuple[World, InteractionLog]:
        if self._world is not None:
            return self._world
        directory, digest = self.world_dir(), self._hash("world", "sim")

        def build(d: Path):
            world = generate_world(self.cfg.world, self.cfg.stage_seed("world"))
            log_ = simulate_engagement(world, self.cfg.sim, self.cfg.stage_seed("sim"))
            check_log(log_, len(world.catalog))
            save_world(d, world, log_, self.cfg.world, self.cfg.sim,
                       {"world": self.cfg.stage_seed("world"), "sim": self.cfg.stage_seed("sim")},
                       self._meta("world"))

        self._run_stage("world", directory, digest, "world", build)
        world, log_, _ = load_world(directory)
        self._world = (world, log_)
        return self._world

    def encoder_dir(self) -> Path:
        return self._stage_dir("encoder", self._hash("world", "sim", "encoder"))

    def content(self) -> np.ndarray:
        if self._content is not None:
            return self._content
        world, _ = self.world()
        directory, digest = self.encoder_dir(), self._hash("world", "sim", "encoder")

        def build(d: Path):
            c = world.catalog
            seed = self.cfg.stage_seed("encoder")
            params = train_content_encoder(c.raw_content, c.l2, world.taxonomy.n_l2,
                                           self.cfg.encoder, seed)
            table = encode_items(params, c.raw_content, self.cfg.encoder.normalize)
            save_encoder(d, params, table, self.cfg.encoder, seed, self._meta("encoder"))

        self._run_stage("train-encoder", directory, digest, "encoder", build)
        _, table, _ = load_encoder(directory)
        self._content = table.vectors
        return self._content

    def _pairs_hash(self) -> str:
        return self._hash("world", "sim", "encoder", "pairs", batch_size=self.cfg.train.batch_size)

    def pairs_dir(self) -> Path:
        return self._stage_dir("pairs", self._pairs_hash())

    def examples(self) -> ExampleSet:
        if self._examples is not None:
            return self._examples
        world, log_ = self.world()
        F = self.content()
        directory, digest = self.pairs_dir(), self._pairs_hash()

        def build(d: Path):
            c = world.catalog
            fresh = np.flatnonzero(c.created_at > 0)
            ex = generate_examples(log_, F, c.popularity, self.cfg.pairs, self.cfg.train.batch_size,
                                   self.cfg.stage_seed("pairs"), fresh)
            write_examples(d / "examples.csv", ex, self._meta("pairs") | {
                "n_examples": len(ex), "fresh_items": int(len(fresh))})

        self._run_stage("gen-pairs", directory, digest, "pairs", build)
        self._examples, _ = read_examples(directory / "examples.csv")
        return self._examples

    def _model_hash(self, family: str, w_r: float) -> str:
        train = section_dict(self.cfg.train) | {"w_r": w_r}
        return self._hash("world", "sim", "encoder", "pairs", "model", family=family, train=train)

    @staticmethod
    def _effective_w_r(family: str, w_r: float) -> float:
        # families without a distillation-weighted head ignore w_r
        return float(w_r) if family in ("mtmh", "mtsh") else 0.0

    def model_dir(self, family: str, w_r: float | None = None) -> Path:
        w = self._effective_w_r(family, self.cfg.train.w_r if w_r is None else w_r)
        return self._stage_dir(f"model-{family}", self._model_hash(family, w))

    def model(self, family: str, w_r: float | None = None) -> TrainedModel:
        if family not in FAMILY_HEADS:
            raise ValueError(f"unknown model family {family!r}; choose from {sorted(FAMILY_HEADS)}")
        w = self._effective_w_r(family, self.cfg.train.w_r if w_r is None else w_r)
        key = (family, w)
        if key in self._models:
            return self._models[key]
        world, _ = self.world()
        F = self.content()
        examples = self.examples()
        directory, digest = self.model_dir(family, w), self._model_hash(family, w)
        n_heads = FAMILY_HEADS[family]

        def build(d: Path):
            c = world.catalog
            params = init_params(len(c), c.dense_features.shape[1], self.cfg.model,
                                 self.cfg.stage_seed("model"), n_heads)
            tc = self.cfg.train
            res = train(examples, params, F, c.dense_features, learning_rate=tc.learning_rate,
                        epochs=tc.epochs, w_r=w, seed=self.cfg.stage_seed("train"), mode=family,
                        fresh_set=np.flatnonzero(c.created_at > 0), max_tracked=tc.max_tracked,
                        min_fresh_updates=tc.min_fresh_updates)
            meta = self._meta("train") | {"family": family, "w_r": w}
            save_checkpoint(res.params, d / "checkpoint", meta)
            for h in range(n_heads):
                dump_embeddings(res.params, c.dense_features, h, d / f"h{h + 1}", meta)
            write_history_csv(d / "history.csv", res.history)
            write_trace_csv(d / "trace.csv", res.trace)

        self._run_stage(f"train-{family}", directory, digest, "train", build)
        emb = {f"h{h + 1}": load_embeddings(directory / f"h{h + 1}")[0] for h in range(n_heads)}
        tm = TrainedModel(family, w, emb, read_history_csv(directory / "history.csv"),
                          read_trace_csv(directory / "trace.csv"), directory)
        self._models[key] = tm
        return tm

    def checkpoint(self, family: str, w_r: float | None = None):
        return load_checkpoint(self.model(family, w_r).directory / "checkpoint")

    # -- serving and evaluation ---------------------------------------------

    def _table_source(self, name: str, w_r: float) -> tuple[np.ndarray, str]:
        if name == "content":
            return self.content(), self._hash("world", "sim", "encoder")
        family, head = name.split(".")
        tm = self.model(family, w_r)
        return tm.embeddings[head], self._model_hash(family, tm.w_r)

    def context(self, mode: str, w_r: float | None = None) -> EvalContext:
        """Eval context holding the tables (and built indexes) that ``mode`` reads."""
        if mode not in MODE_TABLES:
            raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODE_TABLES)}")
        family = TRAINING_MODE[mode]
        w = self._effective_w_r(family, self.cfg.train.w_r if w_r is None else w_r) if family else 0.0
        key = (family or "content", w)
        ctx = self._contexts.get(key)
        world, log_ = self.world()
        if ctx is None:
            ctx = EvalContext(log_, world.catalog, {}, index_seed=self.cfg.stage_seed("index"))
            self._contexts[key] = ctx
        heads, ranker = MODE_TABLES[mode]
        for name in (*heads, ranker):
            if name in ctx.tables:
                continue
            ctx.tables[name] = self._table_source(name, w)[0]
        for name in heads:
            self._index(ctx, name, w)
        return ctx

    def _index(self, ctx: EvalContext, name: str, w_r: float) -> None:
        serve = self.cfg.serve
        table, source_hash = self._table_source(name, w_r)
        idx_cfg = {"k": serve.k, "kmeans_iters": serve.kmeans_iters, "normalize": serve.normalize}
        digest = stable_hash({"source": source_hash, "table": name, "index": idx_cfg,
                              "seed": self.cfg.seed})
        directory = self._stage_dir(f"index-{name.replace('.', '-')}", digest)
        checksum = array_checksum(table)

        def build(d: Path):
            index = kmeans_fit(table, serve.k, serve.kmeans_iters, self.cfg.stage_seed("index"),
                               serve.normalize)
            save_index(d, index, checksum, self._meta("index") | {"table": name})

        self._run_stage(f"build-index:{name}", directory, digest, "index", build)
        ctx.add_index(name, load_index(directory, table), serve)

    def evaluate(self, mode: str | None = None, w_r: float | None = None, alpha: float | None = None,
                 write: bool = True) -> EvalReport:
        mode = mode or self.cfg.eval.mode
        serve = self.cfg.serve if alpha is None else dataclasses.replace(self.cfg.serve, alpha=alpha)
        family = TRAINING_MODE.get(mode)
        w = (self._effective_w_r(family, self.cfg.train.w_r if w_r is None else w_r)
             if family else float("nan"))
        ctx = self.context(mode, w_r)
        t = time.perf_counter()
        report = run_mode(mode, ctx, serve, self.cfg.eval, self.cfg.seed, w,
                          config=self.cfg.to_dict() | {"serve": section_dict(serve)})
        log.info("evaluate %s: %.1fs", mode, time.perf_counter() - t)
        if write:
            self.write_report(report)
        return report

    def write_report(self, report: EvalReport) -> Path:
        directory = self.out / "reports"
        directory.mkdir(parents=True, exist_ok=True)
        stem = report_stem(report)
        write_report_json(directory / f"{stem}.json", report)
        write_report_csv(directory / f"{stem}.csv", [report])
        return directory / f"{stem}.json"

    def sweep(self, knob: str, values, mode: str = "mtmh") -> SweepResult:
        if knob == "alpha":
            result = sweep(knob, values, lambda a: self.evaluate(mode, alpha=a))
        elif knob == "w_r":
            result = sweep(knob, values, lambda w: self.evaluate(mode, w_r=w))
        else:
            raise ValueError(f"knob must be 'alpha' or 'w_r', got {knob!r}")
        directory = self.out / "reports"
        directory.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(directory / f"sweep_{knob}_{mode}.csv", result)
        return result

    def pipeline(self, mode: str | None = None) -> EvalReport:
        mode = mode or self.cfg.eval.mode
        self.world()
        self.content()
        self.examples()
        report = self.evaluate(mode)
        log.info(format_report(report))
        return report

    def stage_checksums(self) -> dict[str, dict[str, str]]:
        """Checksums of every artifact file below each stage directory."""
        root = self.out / "stages"
        return {p.name: directory_checksums(p) for p in sorted(root.iterdir()) if p.is_dir()}


def report_stem(report: EvalReport) -> str:
    parts = [report.mode]
    if not np.isnan(report.alpha):
        parts.append(f"alpha{report.alpha:g}")
    if not np.isnan(report.w_r):
        parts.append(f"wr{report.w_r:g}")
    parts.append(f"seed{report.seed}")
    return "_".join(parts)


def read_manifest_json(path: Path) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON") from exc
