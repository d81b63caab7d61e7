"""Training-pair construction from T1 engagement sequences.

Positive pairs come from a rolling window over each user's chronological
history. Each pair gets a weight made of a relevance boost (teacher cosine
above a threshold) and an inverse-popularity propensity factor. Negatives mix
uniform catalog draws with positives of other examples in the same batch.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .config import PairGenConfig
from .synthgen import InteractionLog

log = logging.getLogger(__name__)


class NegativeSamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingExample:
    trigger_id: int
    positive_id: int
    weight: float
    negative_ids: list[int]


@dataclass(frozen=True)
class PositivePairs:
    user: np.ndarray
    trigger: np.ndarray
    positive: np.ndarray

    def __len__(self) -> int:
        return len(self.user)

    def as_tuples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.user.tolist(), self.trigger.tolist(), self.positive.tolist()))


@dataclass(frozen=True)
class ExampleSet:
    """Examples stored in training-batch order.

    ``batch`` holds the batch index of each example; batches never straddle a
    phase boundary. Phase 1 batches are the only ones that may touch fresh items.
    """

    trigger: np.ndarray
    positive: np.ndarray
    weight: np.ndarray
    negatives: np.ndarray
    batch: np.ndarray
    phase: np.ndarray

    def __len__(self) -> int:
        return len(self.trigger)

    def __getitem__(self, i: int) -> TrainingExample:
        return TrainingExample(int(self.trigger[i]), int(self.positive[i]), float(self.weight[i]),
                               self.negatives[i].tolist())

    @property
    def L(self) -> int:
        return self.negatives.shape[1]

    def select(self, idx) -> ExampleSet:
        return ExampleSet(self.trigger[idx], self.positive[idx], self.weight[idx],
                          self.negatives[idx], self.batch[idx], self.phase[idx])


def build_positive_pairs(log_: InteractionLog, window: int | float | None = 10) -> PositivePairs:
    """Pair every T1 item with each of the ``window`` items preceding it.

    ``window=None`` (or ``math.inf``) uses the whole prefix.
    """
    if window is not None and window < 1:
        raise ValueError("window must be >= 1")
    users, trig, pos = [], [], []
    for user, seq in log_.t1_sequences().items():
        n = len(seq)
        w = n if window is None or math.isinf(window) else int(window)
        for j in range(1, min(w, n - 1) + 1):
            # (item at t - j, item at t) for t = j .. n - 1
            trig.append(seq[:n - j])
            pos.append(seq[j:])
            users.append(np.full(n - j, user, dtype=np.int64))
    if not users:
        empty = np.zeros(0, dtype=np.int64)
        return PositivePairs(empty, empty, empty)
    user_arr = np.concatenate(users)
    trig_arr = np.concatenate(trig)
    pos_arr = np.concatenate(pos)
    return PositivePairs(user_arr, trig_arr, pos_arr)


def cosine_rows(F: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = F[a].astype(np.float64)
    y = F[b].astype(np.float64)
    num = np.einsum("ij,ij->i", x, y)
    den = np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1)
    return num / np.maximum(den, 1e-12)


def sim_factor(cosine: np.ndarray, cfg: PairGenConfig) -> np.ndarray:
    return np.where(cosine >= cfg.sim_threshold, cfg.sim_boost, 1.0)


def propensity_factor(popularity: np.ndarray, cfg: PairGenConfig) -> np.ndarray:
    """``min(clip, pop^-exponent / mean(pop^-exponent))`` over the given positives."""
    pop = np.asarray(popularity, dtype=np.float64)
    if cfg.propensity_exponent == 0:
        return np.ones_like(pop)
    raw = pop ** (-cfg.propensity_exponent)
    return np.minimum(cfg.propensity_clip, raw / raw.mean())


def weight_pairs(pairs: PositivePairs, F: np.ndarray, popularity: np.ndarray,
                 cfg: PairGenConfig) -> np.ndarray:
    if len(pairs) == 0:
        return np.zeros(0)
    cos = cosine_rows(F, pairs.trigger, pairs.positive)
    return sim_factor(cos, cfg) * propensity_factor(popularity[pairs.positive], cfg)


def _engaged_keys(log_: InteractionLog, n_items: int) -> np.ndarray:
    mask = log_.period == 1
    return np.unique(log_.user[mask] * n_items + log_.item[mask])


def _is_engaged(keys: np.ndarray, users: np.ndarray, items: np.ndarray, n_items: int) -> np.ndarray:
    q = users * n_items + items
    pos = np.searchsorted(keys, q).clip(max=len(keys) - 1)
    return keys[pos] == q if len(keys) else np.zeros(q.shape, dtype=bool)


def sample_negatives(users: np.ndarray, positives: np.ndarray, n_items: int,
                     engaged_keys: np.ndarray, cfg: PairGenConfig, rng: np.random.Generator,
                     allowed: np.ndarray | None = None) -> np.ndarray:
    """Draw ``cfg.L`` negatives for every example of one batch.

    ``round(uniform_mix * L)`` come uniformly from the catalog (restricted to
    ``allowed`` items when given); the rest are positives of *other* examples
    in the batch. Items the user engaged in T1 are rejected and redrawn.
    """
    b = len(users)
    n_uniform = int(round(cfg.uniform_mix * cfg.L))
    n_batch = cfg.L - n_uniform
    out = np.empty((b, cfg.L), dtype=np.int64)
    pool = np.arange(n_items) if allowed is None else np.flatnonzero(allowed)
    if n_uniform and len(pool) == 0:
        raise NegativeSamplingError("no items available for uniform negatives")
    if n_batch and b < 2:
        raise NegativeSamplingError(
            f"user {int(users[0])}: in-batch negatives need at least two examples per batch")
    urows = np.repeat(users[:, None], cfg.L, axis=1)

    for cols in (slice(0, n_uniform), slice(n_uniform, cfg.L)):
        width = cols.stop - cols.start
        if width == 0:
            continue
        if cols.start < n_uniform:
            block = pool[rng.integers(len(pool), size=(b, width))]
        else:
            block = positives[(np.arange(b)[:, None] + rng.integers(1, b, size=(b, width))) % b]
        bad = _is_engaged(engaged_keys, urows[:, cols], block, n_items)
        for _ in range(cfg.max_retries):
            if not bad.any():
                break
            r, c = np.nonzero(bad)
            if cols.start < n_uniform:
                block[r, c] = pool[rng.integers(len(pool), size=len(r))]
            else:
                block[r, c] = positives[(r + rng.integers(1, b, size=len(r))) % b]
            bad[r, c] = _is_engaged(engaged_keys, users[r], block[r, c], n_items)
        if bad.any():
            user = int(users[np.nonzero(bad)[0][0]])
            raise NegativeSamplingError(
                f"user {user}: could not draw {cfg.L} valid negatives after {cfg.max_retries} retries")
        out[:, cols] = block
    return out


def generate_examples(log_: InteractionLog, F: np.ndarray, popularity: np.ndarray,
                      cfg: PairGenConfig, batch_size: int, seed: int,
                      fresh_items: np.ndarray | None = None) -> ExampleSet:
    """Build, weight, order and batch pairs, then attach negatives.

    With ``fresh_items``, pairs touching a fresh item are held back so that the
    first half of training never sees them (phase 0).
    """
    cfg.validate()
    n_items = len(popularity)
    pairs = build_positive_pairs(log_, cfg.window)
    if len(pairs) == 0:
        raise NegativeSamplingError("no positive pairs: every T1 sequence is shorter than 2")
    weights = weight_pairs(pairs, F, popularity, cfg)
    rng = np.random.default_rng(seed)

    n = len(pairs)
    fresh_mask = np.zeros(n_items, dtype=bool)
    if fresh_items is not None and len(fresh_items):
        fresh_mask[np.asarray(fresh_items)] = True
    touches = fresh_mask[pairs.trigger] | fresh_mask[pairs.positive]
    if touches.any():
        stale = rng.permutation(np.flatnonzero(~touches))
        n0 = min(len(stale), n // 2)
        phases = [stale[:n0], rng.permutation(np.concatenate([stale[n0:], np.flatnonzero(touches)]))]
    else:
        phases = [rng.permutation(n), np.zeros(0, dtype=np.int64)]

    keys = _engaged_keys(log_, n_items)
    order, negs, batch_ids, phase_ids = [], [], [], []
    next_batch = 0
    for phase, idx in enumerate(phases):
        allowed = ~fresh_mask if phase == 0 and fresh_mask.any() else None
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            if len(chunk) < 2 and cfg.uniform_mix < 1:
                # a lone trailing example has no batch mates; fold it into the previous batch
                if not batch_ids:
                    raise NegativeSamplingError("batch of one example cannot draw in-batch negatives")
                prev = order[-1]
                merged = np.concatenate([prev, chunk])
                negs[-1] = sample_negatives(pairs.user[merged], pairs.positive[merged], n_items,
                                            keys, cfg, rng, allowed)
                order[-1] = merged
                batch_ids[-1] = np.full(len(merged), next_batch - 1)
                phase_ids[-1] = np.full(len(merged), phase)
                continue
            negs.append(sample_negatives(pairs.user[chunk], pairs.positive[chunk], n_items,
                                         keys, cfg, rng, allowed))
            order.append(chunk)
            batch_ids.append(np.full(len(chunk), next_batch))
            phase_ids.append(np.full(len(chunk), phase))
            next_batch += 1
    order_arr = np.concatenate(order)
    return ExampleSet(
        trigger=pairs.trigger[order_arr],
        positive=pairs.positive[order_arr],
        weight=weights[order_arr],
        negatives=np.concatenate(negs),
        batch=np.concatenate(batch_ids),
        phase=np.concatenate(phase_ids),
    )


# ---------------------------------------------------------------------------
# persistence: header line + ``trigger,positive,weight,neg1..negL`` records


def write_examples(path: str | os.PathLike, examples: ExampleSet, header: dict) -> None:
    batch_sizes = np.bincount(examples.batch).tolist()
    phases = [int(examples.phase[examples.batch == b][0]) for b in range(len(batch_sizes))]
    meta = dict(header) | {"L": examples.L, "batch_sizes": batch_sizes, "batch_phases": phases}
    with open(path, "w") as fh:
        fh.write("#" + json.dumps(meta, sort_keys=True) + "\n")
        for t, p, w, ns in zip(examples.trigger.tolist(), examples.positive.tolist(),
                               examples.weight.tolist(), examples.negatives.tolist()):
            fh.write(f"{t},{p},{w!r}," + ",".join(map(str, ns)) + "\n")


def read_examples(path: str | os.PathLike) -> tuple[ExampleSet, dict]:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing header line")
        meta = json.loads(first[1:])
        rows = [line.rstrip("\n").split(",") for line in fh]
    L = int(meta["L"])
    if any(len(r) != 3 + L for r in rows):
        raise ValueError(f"{path}: malformed record (expected {3 + L} fields)")
    trig = np.array([int(r[0]) for r in rows], dtype=np.int64)
    pos = np.array([int(r[1]) for r in rows], dtype=np.int64)
    weight = np.array([float(r[2]) for r in rows], dtype=np.float64)
    negs = np.array([[int(x) for x in r[3:]] for r in rows], dtype=np.int64).reshape(len(rows), L)
    sizes = meta["batch_sizes"]
    batch = np.repeat(np.arange(len(sizes)), sizes)
    phase = np.repeat(np.asarray(meta["batch_phases"], dtype=np.int64), sizes)
    return ExampleSet(trig, pos, weight, negs, batch, phase), meta
