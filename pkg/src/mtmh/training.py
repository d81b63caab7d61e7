"""Co-engagement (InfoNCE) and distillation (KL) losses, Adagrad, training loop.

Every example scores its trigger against ``[positive, neg_1 .. neg_L]`` with raw
dot products. The engagement loss is the weighted negative log-probability of
the positive slot; the relevance loss is ``KL(Q || P)`` where ``Q`` is the
softmax over the frozen teacher's dot products for the same slots and ``P`` the
student's. Both reduce to a gradient on the per-example logits, so one
backward pass through the shared bottom serves every head.
"""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from .model import (HeadSelector, ModelParams, embed, forward_bottom, mlp_backward, mlp_forward,
                    save_checkpoint)
from .pairgen import ExampleSet

log = logging.getLogger(__name__)

ADAGRAD_EPS = 1e-10
# batches whose (unique items x batch) scatter matrix is at most this size use a dense one
DENSE_SCATTER_LIMIT = 1 << 16


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# scalar / per-example primitives


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def positive_prob(trigger_emb, pos_emb, neg_embs) -> float:
    """Softmax probability of the positive among ``{positive} ∪ negatives``."""
    t = np.asarray(trigger_emb, dtype=np.float64)
    cands = np.vstack([np.asarray(pos_emb, dtype=np.float64)[None, :],
                       np.asarray(neg_embs, dtype=np.float64).reshape(-1, t.shape[0])])
    if not (np.isfinite(t).all() and np.isfinite(cands).all()):
        raise ValueError("non-finite embedding")
    return float(np.exp(log_softmax(cands @ t)[0]))


def distill_targets(F: np.ndarray, trigger: int, positive: int, negatives) -> np.ndarray:
    """Teacher distribution over ``[positive, negatives...]`` from content dot products."""
    ids = np.concatenate([[positive], np.asarray(negatives, dtype=np.int64)])
    logits = F[ids].astype(np.float64) @ F[trigger].astype(np.float64)
    return np.exp(log_softmax(logits))


def kl_divergence(q_logits: np.ndarray, p_logits: np.ndarray) -> np.ndarray:
    """Row-wise ``KL(softmax(q) || softmax(p))`` computed in log space."""
    log_q = log_softmax(q_logits)
    log_p = log_softmax(p_logits)
    return (np.exp(log_q) * (log_q - log_p)).sum(axis=-1)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    trigger: np.ndarray
    positive: np.ndarray
    negatives: np.ndarray
    weight: np.ndarray
    dense_features: np.ndarray

    @classmethod
    def from_examples(cls, examples: ExampleSet, dense_features: np.ndarray, idx=None) -> Batch:
        ex = examples if idx is None else examples.select(idx)
        return cls(ex.trigger, ex.positive, ex.negatives, ex.weight, dense_features)

    def __len__(self) -> int:
        return len(self.trigger)

    def candidates(self) -> np.ndarray:
        return np.concatenate([self.positive[:, None], self.negatives], axis=1)


@dataclass
class RowGrad:
    """Gradient for a subset of rows of an embedding table (rows unique, sorted)."""

    rows: np.ndarray
    values: np.ndarray

    def dense(self, shape: tuple[int, ...]) -> np.ndarray:
        out = np.zeros(shape, dtype=self.values.dtype)
        out[self.rows] = self.values
        return out


class _BatchIndex:
    """Unique items of a batch plus the index maps that scatter gradients back to them."""

    def __init__(self, batch: Batch):
        cands = batch.candidates()
        self.b, self.width = cands.shape
        flat = np.concatenate([batch.trigger, cands.ravel()])
        self.unique, inverse = np.unique(flat, return_inverse=True)
        self.t_idx = inverse[: self.b]
        self.c_idx = inverse[self.b:].reshape(self.b, self.width)
        self._c_rows = self.c_idx.ravel()
        self._c_cols = np.repeat(np.arange(self.b), self.width)

    def scatter(self, d_trigger: np.ndarray, dlogits: np.ndarray, Et: np.ndarray) -> np.ndarray:
        """Sum per-position gradients into unique rows.

        Candidate rows receive ``sum_b dlogits[b, k] * Et[b]``, expressed as a
        ``(unique x batch)`` weight matrix times ``Et``.
        """
        n = len(self.unique)
        if n * self.b <= DENSE_SCATTER_LIMIT:
            # small batches: a dense (unique x batch) weight matrix avoids sparse setup cost
            out = np.zeros((n, Et.shape[1]), dtype=np.result_type(d_trigger, dlogits, Et))
            np.add.at(out, self.t_idx, d_trigger)
            w = np.bincount(self._c_rows * self.b + self._c_cols, weights=dlogits.ravel(),
                            minlength=n * self.b)
            return out + w.reshape(n, self.b) @ Et
        c_mat = sparse.csr_matrix((dlogits.ravel(), (self._c_rows, self._c_cols)), shape=(n, self.b))
        t_mat = sparse.csr_matrix((np.ones(self.b, dtype=d_trigger.dtype), (self.t_idx, np.arange(self.b))),
                                  shape=(n, self.b))
        return np.asarray(t_mat @ d_trigger + c_mat @ Et)


@dataclass(frozen=True)
class Objective:
    """Per-head loss mix: ``engagement * L_e + relevance * L_r``."""

    engagement: float
    relevance: float


def mode_objectives(mode: str, w_r: float) -> list[Objective]:
    """Head objectives for each trainable model family."""
    table = {
        "mtmh": [Objective(1.0, 0.0), Objective(1.0, w_r)],
        "stmh": [Objective(1.0, 0.0), Objective(0.0, 1.0)],
        "mtsh": [Objective(1.0, w_r)],
        "coengage": [Objective(1.0, 0.0)],
    }
    if mode not in table:
        raise ValueError(f"unknown training family {mode!r}; expected one of {sorted(table)}")
    return table[mode]


@dataclass
class HeadStats:
    l_e: float
    l_r: float


def _batch_pass(batch: Batch, params: ModelParams, teacher: np.ndarray | None,
                objectives: list[Objective | None], with_grads: bool = True
                ) -> tuple[list[HeadStats | None], dict[str, object]]:
    """Forward/backward for the heads whose objective is not ``None``."""
    idx = _BatchIndex(batch)
    feats = batch.dense_features[idx.unique]
    z, bottom_acts = forward_bottom(params, idx.unique, feats)
    w = batch.weight.astype(np.float64)

    q_logp = None
    if teacher is not None:
        Ft = teacher[idx.unique].astype(np.float64)
        t_logits = np.einsum("bd,bkd->bk", Ft[idx.t_idx], Ft[idx.c_idx])
        q_logp = log_softmax(t_logits)

    grads: dict[str, object] = {}
    dz = None
    stats: list[HeadStats | None] = []
    for h, obj in enumerate(objectives):
        if obj is None:
            stats.append(None)
            continue
        E, acts = mlp_forward(params.arrays, f"head{h}", z)
        Et = E[idx.t_idx]
        Ec = E[idx.c_idx]
        logits = np.einsum("bd,bkd->bk", Et, Ec).astype(np.float64)
        logp = log_softmax(logits)
        if not np.isfinite(logp).all():
            raise TrainingError(f"non-finite logits in head {h} (batch of {len(batch)})")
        l_e = float(-(w * logp[:, 0]).sum())
        l_r = float("nan")
        if q_logp is not None:
            kl = (np.exp(q_logp) * (q_logp - logp)).sum(axis=1)
            l_r = float((w * kl).sum())
        stats.append(HeadStats(l_e, l_r))
        if not with_grads:
            continue
        p = np.exp(logp)
        dlogits = np.zeros_like(logits)
        if obj.engagement:
            g = p.copy()
            g[:, 0] -= 1.0
            dlogits += obj.engagement * g
        if obj.relevance:
            if q_logp is None:
                raise TrainingError("relevance objective requires the teacher table")
            dlogits += obj.relevance * (p - np.exp(q_logp))
        dlogits *= w[:, None]
        dlogits = dlogits.astype(E.dtype)
        d_t = np.einsum("bk,bkd->bd", dlogits, Ec)
        dE = idx.scatter(d_t, dlogits, Et)
        dz_h = mlp_backward(params.arrays, f"head{h}", acts, dE, grads)
        dz = dz_h if dz is None else dz + dz_h

    if with_grads and dz is not None:
        d_s = params.cfg.d_s
        grads["sparse"] = RowGrad(idx.unique, dz[:, :d_s])
        mlp_backward(params.arrays, "dense", bottom_acts, dz[:, d_s:], grads, need_dx=False)
    return stats, grads


def _head_index(params: ModelParams, head: HeadSelector | int) -> int:
    h = int(head)
    if not 0 <= h < params.n_heads:
        raise ValueError(f"model has {params.n_heads} head(s); head {HeadSelector(h).name} unavailable")
    return h


def co_engagement_loss(batch: Batch, params: ModelParams, head: HeadSelector | int,
                       with_grads: bool = True) -> tuple[float, dict[str, object]]:
    """Weighted InfoNCE ``-sum_b w_b log p+_b`` through the chosen head.

    With ``with_grads=False`` only the value is computed (gradients come back empty).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    h = _head_index(params, head)
    objectives: list[Objective | None] = [None] * params.n_heads
    objectives[h] = Objective(1.0, 0.0)
    stats, grads = _batch_pass(batch, params, None, objectives, with_grads)
    return stats[h].l_e, grads


def relevance_loss(batch: Batch, params: ModelParams, F: np.ndarray, with_grads: bool = True
                   ) -> tuple[float, dict[str, object]]:
    """Weighted ``sum_b w_b KL(Q_b || P_b)`` through the relevance head."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    h = _head_index(params, HeadSelector.RELEVANCE)
    objectives: list[Objective | None] = [None] * params.n_heads
    objectives[h] = Objective(0.0, 1.0)
    stats, grads = _batch_pass(batch, params, F, objectives, with_grads)
    if not np.isfinite(stats[h].l_r):
        raise TrainingError("non-finite relevance loss")
    return stats[h].l_r, grads


@dataclass
class LossBreakdown:
    l_e_h1: float
    l_e_h2: float
    l_r_h2: float
    l_mt_h2: float
    w_r: float

    def scaled(self, factor: float) -> LossBreakdown:
        return LossBreakdown(self.l_e_h1 * factor, self.l_e_h2 * factor, self.l_r_h2 * factor,
                             self.l_mt_h2 * factor, self.w_r)


def _breakdown(stats: list[HeadStats], w_r: float) -> LossBreakdown:
    # single-head models report their only head in both slots
    h1, h2 = stats[0], stats[-1]
    l_r = h2.l_r if np.isfinite(h2.l_r) else 0.0
    return LossBreakdown(h1.l_e, h2.l_e, l_r, h2.l_e + w_r * l_r, w_r)


def multi_task_loss(batch: Batch, params: ModelParams, F: np.ndarray, w_r: float,
                    objectives: list[Objective] | None = None, with_grads: bool = True
                    ) -> tuple[LossBreakdown, dict[str, object]]:
    """H1 on ``L_e``, H2 on ``L_e + w_r L_r``; shared-bottom gradients are summed."""
    if w_r < 0:
        raise ValueError("w_r must be >= 0")
    if len(batch) == 0:
        raise ValueError("empty batch")
    if objectives is None:
        objectives = mode_objectives("mtmh" if params.n_heads == 2 else "mtsh", w_r)
    stats, grads = _batch_pass(batch, params, F, objectives, with_grads)
    breakdown = _breakdown(stats, w_r)
    if not all(np.isfinite(v) for v in asdict(breakdown).values()):
        raise TrainingError(f"non-finite loss {breakdown}")
    return breakdown, grads


# ---------------------------------------------------------------------------
# optimizer


def adagrad_step(arrays: dict[str, np.ndarray], accum: dict[str, np.ndarray],
                 grads: dict[str, object], lr: float, eps: float = ADAGRAD_EPS) -> None:
    """In-place ``acc += g**2; theta -= lr * g / (sqrt(acc) + eps)``.

    ``RowGrad`` entries only touch their rows, so untouched sparse rows keep
    both their value and their accumulator.
    """
    for key, g in grads.items():
        theta, acc = arrays[key], accum[key]
        if isinstance(g, RowGrad):
            rows, gv = g.rows, g.values.astype(theta.dtype, copy=False)
            a = acc[rows] + gv * gv
            acc[rows] = a
            theta[rows] -= lr * gv / (np.sqrt(a) + eps)
        else:
            g = np.asarray(g, dtype=theta.dtype)
            if g.shape != theta.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {key}")
            acc += g * g
            theta -= lr * g / (np.sqrt(acc) + eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class ConvergenceTrace:
    """Per tracked item: ``(update_count, l2_delta)`` against the final embedding."""

    entries: dict[int, list[tuple[int, float]]] = field(default_factory=dict)

    def rows(self) -> list[tuple[int, int, float]]:
        return [(i, c, d) for i in sorted(self.entries) for c, d in self.entries[i]]


@dataclass
class TrainResult:
    params: ModelParams
    trace: ConvergenceTrace
    history: list[tuple[int, LossBreakdown]]


def batch_schedule(examples: ExampleSet, seed: int, epochs: int = 1) -> list[np.ndarray]:
    """Seeded batch order: batches shuffled within each phase, phases in order."""
    rng = np.random.default_rng(seed)
    order = np.argsort(examples.batch, kind="stable")
    bounds = np.flatnonzero(np.diff(examples.batch[order])) + 1
    batches = np.split(order, bounds)
    phases = np.array([examples.phase[b[0]] for b in batches])
    schedule = []
    for _ in range(epochs):
        for ph in np.unique(phases):
            members = np.flatnonzero(phases == ph)
            schedule.extend(batches[i] for i in rng.permutation(members))
    return schedule


def engagement_rows(trigger: np.ndarray, positive: np.ndarray) -> np.ndarray:
    """Items that receive an engagement update from a batch (as trigger or positive)."""
    return np.unique(np.concatenate([trigger, positive]))


def select_tracked(examples: ExampleSet, fresh_set, max_tracked: int, min_updates: int) -> np.ndarray:
    """Fresh items with at least ``min_updates`` engagement updates (lowest ids first).

    An engagement update is a batch in which the item is a trigger or a
    positive; being drawn as a negative does not count.
    """
    fresh = np.unique(np.asarray(list(fresh_set) if not isinstance(fresh_set, np.ndarray)
                                 else fresh_set, dtype=np.int64))
    if len(fresh) == 0:
        return fresh
    ids = np.concatenate([examples.trigger, examples.positive])
    batch = np.concatenate([examples.batch, examples.batch])
    width = int(ids.max()) + 1
    keys = np.unique(batch * width + ids)
    counts = np.bincount(keys % width, minlength=width)
    fresh = fresh[fresh < len(counts)]
    eligible = fresh[counts[fresh] >= min_updates]
    return eligible[:max_tracked]


def train(examples: ExampleSet, params: ModelParams, F: np.ndarray | None, dense_features: np.ndarray,
          *, learning_rate: float = 0.01, epochs: int = 1, w_r: float = 0.5, seed: int = 0,
          mode: str = "mtmh", fresh_set=(), max_tracked: int = 1000, min_fresh_updates: int = 8,
          checkpoint_dir: str | os.PathLike | None = None) -> TrainResult:
    """Run Adagrad over seeded batches; H1 on L_e, H2 on L_mt (per ``mode``).

    Returns the trained params (a copy), the fresh-item convergence trace
    (measured on the last head) and per-step losses averaged per example.
    Each tracked item is snapshotted just before its first gradient (update
    count 0) and after every engagement update.
    """
    if len(examples) == 0:
        raise ValueError("no training examples")
    objectives = mode_objectives(mode, w_r)
    if len(objectives) != params.n_heads:
        raise ValueError(f"mode {mode!r} needs {len(objectives)} head(s), params have {params.n_heads}")
    needs_teacher = any(o.relevance for o in objectives)
    if needs_teacher and F is None:
        raise ValueError(f"mode {mode!r} requires the content embedding table")
    fresh = np.asarray(sorted(fresh_set), dtype=np.int64) if len(fresh_set) else np.zeros(0, np.int64)
    if len(fresh) and (fresh.min() < 0 or fresh.max() >= params.n_items):
        raise ValueError("fresh_set contains ids outside the catalog")

    params = params.copy()
    track_head = params.n_heads - 1
    tracked = select_tracked(examples, fresh, max_tracked, min_fresh_updates) if len(fresh) else fresh
    tracked_mask = np.zeros(params.n_items, dtype=bool)
    tracked_mask[tracked] = True
    seen = np.zeros(params.n_items, dtype=bool)
    counts = np.zeros(params.n_items, dtype=np.int64)
    snapshots: dict[int, list[tuple[int, np.ndarray]]] = {int(i): [] for i in tracked}

    history: list[tuple[int, LossBreakdown]] = []
    for step, idx in enumerate(batch_schedule(examples, seed, epochs)):
        batch = Batch.from_examples(examples, dense_features, idx)
        try:
            stats, grads = _batch_pass(batch, params, F, objectives)
            breakdown = _breakdown(stats, w_r)
            if not all(np.isfinite(v) for v in asdict(breakdown).values()):
                raise TrainingError(f"non-finite loss {breakdown}")
        except TrainingError as exc:
            if checkpoint_dir is not None:
                save_checkpoint(params, checkpoint_dir, {"diverged_at_step": step})
            raise TrainingError(f"loss diverged at step {step} (batch of {len(batch)}, "
                                f"first trigger {int(batch.trigger[0])}): {exc}") from exc
        history.append((step, breakdown.scaled(1.0 / len(batch))))
        touched = grads["sparse"].rows
        first = touched[tracked_mask[touched] & ~seen[touched]]
        if len(first):
            seen[first] = True
            _snapshot(params, first, dense_features, track_head, counts, snapshots)
        adagrad_step(params.arrays, params.accum, grads, learning_rate)
        params.steps += 1

        engaged = engagement_rows(batch.trigger, batch.positive)
        counts[engaged] += 1
        hit = engaged[tracked_mask[engaged]]
        if len(hit):
            _snapshot(params, hit, dense_features, track_head, counts, snapshots)

    trace = ConvergenceTrace()
    if len(tracked):
        final = embed(params, tracked, dense_features[tracked], track_head).astype(np.float64)
        for i, f in zip(tracked.tolist(), final):
            snaps = snapshots[i]
            entries = [(c, float(np.linalg.norm(e - f))) for c, e in snaps]
            entries.append((int(counts[i]), 0.0))
            trace.entries[i] = entries
    return TrainResult(params, trace, history)


def _snapshot(params: ModelParams, items: np.ndarray, dense_features: np.ndarray, head: int,
              counts: np.ndarray, snapshots: dict[int, list[tuple[int, np.ndarray]]]) -> None:
    emb = embed(params, items, dense_features[items], head)
    for i, e in zip(items.tolist(), emb):
        snapshots[i].append((int(counts[i]), e.astype(np.float64)))


def write_history_csv(path: str | os.PathLike, history: list[tuple[int, LossBreakdown]]) -> None:
    with open(path, "w") as fh:
        fh.write("step,l_e_h1,l_e_h2,l_r_h2,l_mt_h2\n")
        for step, b in history:
            fh.write(f"{step},{b.l_e_h1!r},{b.l_e_h2!r},{b.l_r_h2!r},{b.l_mt_h2!r}\n")


def read_history_csv(path: str | os.PathLike) -> list[tuple[int, LossBreakdown]]:
    out = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            s, a, b, c, d = line.strip().split(",")
            out.append((int(s), LossBreakdown(float(a), float(b), float(c), float(d), float("nan"))))
    return out


def write_trace_csv(path: str | os.PathLike, trace: ConvergenceTrace) -> None:
    with open(path, "w") as fh:
        fh.write("item_id,update_count,l2_delta\n")
        for i, c, d in trace.rows():
            fh.write(f"{i},{c},{d!r}\n")


def read_trace_csv(path: str | os.PathLike) -> ConvergenceTrace:
    trace = ConvergenceTrace()
    with open(path) as fh:
        next(fh)
        for line in fh:
            i, c, d = line.strip().split(",")
            trace.entries.setdefault(int(i), []).append((int(c), float(d)))
    return trace


def convergence_curve(trace: ConvergenceTrace, max_updates: int | None = None) -> np.ndarray:
    """Mean of ``delta(u) / delta(0)`` for ``u = 0..U`` over a fixed cohort.

    The cohort is the items with at least ``U`` engagement updates, so the
    curve never mixes different item sets. ``U`` defaults to the median
    number of updates per tracked item. The first delta recorded at each
    count is used.
    """
    per_item = []
    for entries in trace.entries.values():
        first: dict[int, float] = {}
        for c, d in entries[:-1]:
            first.setdefault(c, d)
        if 0 not in first or first[0] <= 0:
            continue
        per_item.append(first)
    if not per_item:
        return np.zeros(0)
    if max_updates is None:
        max_updates = int(np.median([max(p) for p in per_item]))
    cohort = [p for p in per_item if all(u in p for u in range(max_updates + 1))]
    if not cohort:
        return np.zeros(0)
    rel = np.array([[p[u] / p[0] for u in range(max_updates + 1)] for p in cohort])
    return rel.mean(axis=0)


def smooth_curve(curve: np.ndarray, width: int = 5) -> np.ndarray:
    """Centred moving average with edge padding (same length as ``curve``)."""
    curve = np.asarray(curve, dtype=np.float64)
    if width < 1 or width % 2 == 0:
        raise ValueError("width must be a positive odd number")
    if len(curve) == 0 or width == 1:
        return curve.copy()
    half = width // 2
    padded = np.pad(curve, (half, half), mode="edge")
    return np.convolve(padded, np.ones(width) / width, mode="valid")


def updates_to_half(curve: np.ndarray) -> int | None:
    """First update count at which the curve drops to half its value at count 0."""
    below = np.flatnonzero(curve <= 0.5 * curve[0]) if len(curve) else []
    return int(below[0]) if len(below) else None
