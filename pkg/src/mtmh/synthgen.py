"""Synthetic catalog, user population and engagement logs.

Engagements come from a two-factor model: with probability ``popularity_bias``
a user engages a globally popular item, otherwise an item from one of their
L2 interests (restricted to the current session's L1 with probability
``session_coherence``). Within the chosen L2, a user sticks to items of their
home engagement community with probability ``community_affinity``.

Communities are invisible in raw content but leak into dense features, so
co-engagement carries signal that topical similarity does not, and popular
items get co-engaged across topics.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .artifacts import read_tables, write_tables
from .config import ConfigError, SimConfig, WorldConfig, section_dict

log = logging.getLogger(__name__)

T1, T2 = 1, 2


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TopicTaxonomy:
    l1_topics: list[int]
    l2_children: dict[int, list[int]]

    @classmethod
    def build(cls, n_l1: int, l2_per_l1: int) -> TopicTaxonomy:
        children = {a: [a * l2_per_l1 + j for j in range(l2_per_l1)] for a in range(n_l1)}
        return cls(list(range(n_l1)), children)

    @property
    def n_l2(self) -> int:
        return sum(len(c) for c in self.l2_children.values())

    def l2_parent(self) -> np.ndarray:
        parent = np.empty(self.n_l2, dtype=np.int64)
        for a, kids in self.l2_children.items():
            parent[kids] = a
        return parent


@dataclass(frozen=True)
class Item:
    item_id: int
    l1: int
    l2: int
    popularity: float
    dense_features: np.ndarray
    raw_content: np.ndarray
    created_at: int
    community: int = 0


@dataclass(frozen=True)
class ItemCatalog:
    """Struct-of-arrays catalog; row ``i`` is item ``i``."""

    l1: np.ndarray
    l2: np.ndarray
    popularity: np.ndarray
    dense_features: np.ndarray
    raw_content: np.ndarray
    created_at: np.ndarray
    community: np.ndarray

    def __len__(self) -> int:
        return len(self.l2)

    def item(self, i: int) -> Item:
        return Item(i, int(self.l1[i]), int(self.l2[i]), float(self.popularity[i]),
                    self.dense_features[i], self.raw_content[i], int(self.created_at[i]),
                    int(self.community[i]))


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    interest_weights: np.ndarray
    popularity_bias: float
    session_coherence: float
    community: int = 0
    community_affinity: float = 0.0


@dataclass(frozen=True)
class World:
    taxonomy: TopicTaxonomy
    catalog: ItemCatalog
    users: list[UserProfile]


@dataclass(frozen=True)
class InteractionLog:
    """Engagement records sorted by (user, step)."""

    user: np.ndarray
    item: np.ndarray
    step: np.ndarray
    period: np.ndarray
    session: np.ndarray
    t1_end: int
    dropped_users: int = 0

    def __len__(self) -> int:
        return len(self.user)

    def users(self) -> np.ndarray:
        return np.unique(self.user)

    def _split(self, mask: np.ndarray) -> dict[int, np.ndarray]:
        users, items = self.user[mask], self.item[mask]
        if len(users) == 0:
            return {}
        bounds = np.flatnonzero(np.diff(users)) + 1
        starts = np.concatenate([[0], bounds])
        return {int(users[s]): chunk for s, chunk in zip(starts, np.split(items, bounds))}

    def t1_sequences(self) -> dict[int, np.ndarray]:
        return self._split(self.period == T1)

    def t2_sequences(self) -> dict[int, np.ndarray]:
        return self._split(self.period == T2)


def generate_world(config: WorldConfig, seed: int) -> World:
    config.validate()
    rng = np.random.default_rng(seed)
    taxonomy = TopicTaxonomy.build(config.n_l1, config.l2_per_l1)
    n, n_l2 = config.n_items, taxonomy.n_l2
    parent = taxonomy.l2_parent()

    l2 = rng.permutation(np.arange(n) % n_l2)
    l1 = parent[l2]
    ranks = rng.permutation(n) + 1
    popularity = ranks.astype(np.float64) ** (-config.zipf_exponent)

    topic_proj = rng.normal(size=(n_l2, config.raw_dim))
    raw = topic_proj[l2] + config.content_noise * rng.normal(size=(n, config.raw_dim))

    community = rng.integers(config.n_communities, size=n)
    # dense features: standardized log-popularity plus a noisy mix of topic and community
    l2_proj = rng.normal(size=(n_l2, config.dense_dim - 1))
    comm_proj = rng.normal(size=(config.n_communities, config.dense_dim - 1))
    logpop = np.log(popularity)
    logpop = (logpop - logpop.mean()) / (logpop.std() + 1e-12)
    signal = l2_proj[l2] + comm_proj[community]
    dense = np.column_stack([
        logpop,
        signal + config.dense_noise * rng.normal(size=(n, config.dense_dim - 1)),
    ])

    created_at = np.zeros(n, dtype=np.int64)
    n_fresh = int(round(config.fresh_fraction * n))
    if n_fresh:
        created_at[rng.choice(n, size=n_fresh, replace=False)] = config.fresh_step

    catalog = ItemCatalog(
        l1=l1.astype(np.int64),
        l2=l2.astype(np.int64),
        popularity=popularity.astype(np.float32),
        dense_features=dense.astype(np.float32),
        raw_content=raw.astype(np.float32),
        created_at=created_at,
        community=community.astype(np.int64),
    )
    users = _generate_users(config, taxonomy, rng)
    return World(taxonomy, catalog, users)


def _beta(rng: np.random.Generator, mean: float, size: int, concentration: float = 4.0) -> np.ndarray:
    if mean <= 0.0 or mean >= 1.0:
        return np.full(size, float(mean))
    return rng.beta(mean * concentration, (1 - mean) * concentration, size=size)


def _generate_users(config: WorldConfig, taxonomy: TopicTaxonomy,
                    rng: np.random.Generator) -> list[UserProfile]:
    n_l2 = taxonomy.n_l2
    bias = _beta(rng, config.popularity_bias_mean, config.n_users)
    coherence = _beta(rng, config.session_coherence_mean, config.n_users)
    affinity = _beta(rng, config.community_affinity_mean, config.n_users)
    home_comm = rng.integers(config.n_communities, size=config.n_users)
    users = []
    for u in range(config.n_users):
        k = min(n_l2, 1 + rng.poisson(config.interests_per_user - 1))
        home = taxonomy.l2_children[int(rng.integers(config.n_l1))]
        chosen: list[int] = []
        while len(chosen) < k:
            pool = home if rng.random() < 0.6 else range(n_l2)
            cand = int(rng.choice(list(pool)))
            if cand not in chosen:
                chosen.append(cand)
        weights = np.zeros(n_l2)
        weights[chosen] = rng.dirichlet(np.ones(k))
        weights /= weights.sum()
        users.append(UserProfile(u, weights, float(bias[u]), float(coherence[u]),
                                 int(home_comm[u]), float(affinity[u])))
    return users


class _Sampler:
    """Popularity-proportional draws over all items, one L2, or one (L2, community) cell."""

    def __init__(self, catalog: ItemCatalog, available: np.ndarray, n_l2: int):
        pop = catalog.popularity.astype(np.float64) * available
        self.global_ids = np.flatnonzero(pop > 0)
        self.global_cdf = np.cumsum(pop[self.global_ids])
        self.topic_ids, self.topic_cdf = [], []
        for t in range(n_l2):
            ids = np.flatnonzero((catalog.l2 == t) & (pop > 0))
            self.topic_ids.append(ids)
            self.topic_cdf.append(np.cumsum(pop[ids]))
        self.cells: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        live = np.flatnonzero(pop > 0)
        keys = catalog.l2[live] * (catalog.community.max() + 1) + catalog.community[live]
        order = np.argsort(keys, kind="stable")
        bounds = np.flatnonzero(np.diff(keys[order])) + 1
        n_comm = int(catalog.community.max()) + 1
        for chunk in np.split(order, bounds):
            if len(chunk) == 0:
                continue
            ids = live[chunk]
            k = int(keys[chunk[0]])
            self.cells[(k // n_comm, k % n_comm)] = (ids, np.cumsum(pop[ids]))

    @staticmethod
    def _draw(ids: np.ndarray, cdf: np.ndarray, rng: np.random.Generator) -> int:
        return int(ids[np.searchsorted(cdf, rng.random() * cdf[-1], side="right").clip(max=len(ids) - 1)])

    def popular(self, rng: np.random.Generator) -> int:
        return self._draw(self.global_ids, self.global_cdf, rng)

    def topical(self, topic: int, rng: np.random.Generator, community: int | None = None) -> int | None:
        if community is not None and (topic, community) in self.cells:
            return self._draw(*self.cells[(topic, community)], rng)
        if len(self.topic_ids[topic]) == 0:
            return None
        return self._draw(self.topic_ids[topic], self.topic_cdf[topic], rng)


def simulate_engagement(world: World, sim: SimConfig, seed: int) -> InteractionLog:
    sim.validate()
    catalog, taxonomy = world.catalog, world.taxonomy
    if len(catalog) == 0:
        raise SimulationError("empty catalog")
    rng = np.random.default_rng(seed)
    t1_end = min(max(int(round(sim.t1_fraction * sim.steps)), 1), sim.steps - 1)
    n_l2 = taxonomy.n_l2
    parent = taxonomy.l2_parent()
    fresh_step = int(catalog.created_at.max())
    early = _Sampler(catalog, catalog.created_at <= 0, n_l2)
    late = _Sampler(catalog, np.ones(len(catalog), dtype=bool), n_l2)

    rows: list[tuple[int, int, int, int, int]] = []
    dropped = 0
    session_id = 0
    for profile in world.users:
        steps = _draw_steps(sim, t1_end, rng)
        if steps is None:
            dropped += 1
            continue
        interests = profile.interest_weights
        l1_mass = np.bincount(parent, weights=interests, minlength=len(taxonomy.l1_topics))
        seen: set[int] = set()
        session_l1 = -1
        for idx, step in enumerate(steps):
            if idx == 0 or rng.random() < 1.0 / sim.session_length:
                session_l1 = int(rng.choice(len(l1_mass), p=l1_mass / l1_mass.sum()))
                session_id += 1
            sampler = late if step >= fresh_step else early
            item = _draw_item(profile, session_l1, parent, sampler, seen, rng)
            seen.add(item)
            rows.append((profile.user_id, item, int(step), T1 if step < t1_end else T2, session_id))

    if not rows:
        raise SimulationError(
            f"no user reached min_uih_len={sim.min_uih_len} T1 events plus one T2 event "
            f"after {sim.max_retries} retries (steps={sim.steps}, t1_end={t1_end}, "
            f"events_per_user={sim.events_per_user}, users={len(world.users)})")
    if dropped:
        log.info("dropped %d of %d users with insufficient history", dropped, len(world.users))
    arr = np.array(rows, dtype=np.int64)
    return InteractionLog(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], t1_end, dropped)


def _draw_steps(sim: SimConfig, t1_end: int, rng: np.random.Generator) -> np.ndarray | None:
    for _ in range(sim.max_retries):
        n = int(min(sim.steps, max(2, rng.poisson(sim.events_per_user))))
        steps = np.sort(rng.choice(sim.steps, size=n, replace=False))
        n_t1 = int(np.searchsorted(steps, t1_end))
        if n_t1 >= sim.min_uih_len and n - n_t1 >= 1:
            return steps
    return None


def _draw_item(profile: UserProfile, session_l1: int, parent: np.ndarray, sampler: _Sampler,
               seen: set[int], rng: np.random.Generator, max_tries: int = 50) -> int:
    topic = None
    for _ in range(max_tries):
        if rng.random() < profile.popularity_bias:
            item = sampler.popular(rng)
        else:
            weights = profile.interest_weights
            if rng.random() < profile.session_coherence:
                weights = np.where(parent == session_l1, weights, 0.0)
            topic = int(rng.choice(len(weights), p=weights / weights.sum()))
            community = profile.community if rng.random() < profile.community_affinity else None
            item = sampler.topical(topic, rng, community)
            if item is None:
                item = sampler.popular(rng)
        if item not in seen:
            return item
    # saturated history: widen from the last topic to its L1, then to the whole catalog
    engaged = np.fromiter(seen, dtype=np.int64)
    pools = []
    if topic is not None:
        pools.append(sampler.topic_ids[topic])
        pools.append(np.concatenate([sampler.topic_ids[t]
                                     for t in np.flatnonzero(parent == parent[topic])]))
    pools.append(sampler.global_ids)
    for pool in pools:
        candidates = np.setdiff1d(pool, engaged)
        if len(candidates):
            return int(rng.choice(candidates))
    raise SimulationError(f"user {profile.user_id} has engaged every available item")


# ---------------------------------------------------------------------------
# persistence


def save_world(directory: str | os.PathLike, world: World, log_: InteractionLog,
               world_cfg: WorldConfig, sim_cfg: SimConfig, seeds: dict[str, int],
               extra: dict | None = None) -> Path:
    c = world.catalog
    tables = {
        "item_l1": c.l1,
        "item_l2": c.l2,
        "item_popularity": c.popularity,
        "item_dense_features": c.dense_features,
        "item_raw_content": c.raw_content,
        "item_created_at": c.created_at,
        "item_community": c.community,
        "user_interest_weights": np.stack([u.interest_weights for u in world.users]).astype(np.float32),
        "user_popularity_bias": np.array([u.popularity_bias for u in world.users], dtype=np.float32),
        "user_session_coherence": np.array([u.session_coherence for u in world.users], dtype=np.float32),
        "user_community": np.array([u.community for u in world.users], dtype=np.int64),
        "user_community_affinity": np.array([u.community_affinity for u in world.users],
                                            dtype=np.float32),
        "log_session": log_.session,
    }
    meta = {
        "kind": "world",
        "taxonomy": {
            "l1_topics": world.taxonomy.l1_topics,
            "l2_children": {str(k): v for k, v in world.taxonomy.l2_children.items()},
        },
        "config": {"world": section_dict(world_cfg), "sim": section_dict(sim_cfg)},
        "seeds": seeds,
        "t1_end": log_.t1_end,
        "dropped_users": log_.dropped_users,
        "engagements": "engagements.csv",
    } | (extra or {})
    directory = write_tables(directory, tables, meta)
    write_engagements(Path(directory) / "engagements.csv", log_)
    return directory


def write_engagements(path: str | os.PathLike, log_: InteractionLog) -> None:
    with open(path, "w") as fh:
        for u, i, s, p in zip(log_.user.tolist(), log_.item.tolist(),
                              log_.step.tolist(), log_.period.tolist()):
            fh.write(f"{u},{i},{s},T{p}\n")


def read_engagements(path: str | os.PathLike) -> tuple[np.ndarray, ...]:
    rows = []
    with open(path) as fh:
        for line in fh:
            u, i, s, p = line.rstrip("\n").split(",")
            rows.append((int(u), int(i), int(s), int(p.lstrip("T"))))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def load_world(directory: str | os.PathLike) -> tuple[World, InteractionLog, dict]:
    tables, manifest = read_tables(directory)
    tax = manifest["taxonomy"]
    taxonomy = TopicTaxonomy(list(tax["l1_topics"]),
                             {int(k): list(v) for k, v in tax["l2_children"].items()})
    catalog = ItemCatalog(
        l1=tables["item_l1"],
        l2=tables["item_l2"],
        popularity=tables["item_popularity"],
        dense_features=tables["item_dense_features"],
        raw_content=tables["item_raw_content"],
        created_at=tables["item_created_at"],
        community=tables["item_community"],
    )
    weights = tables["user_interest_weights"].astype(np.float64)
    users = [
        UserProfile(u, weights[u] / weights[u].sum(), float(b), float(c), int(g), float(a))
        for u, (b, c, g, a) in enumerate(zip(tables["user_popularity_bias"],
                                             tables["user_session_coherence"],
                                             tables["user_community"],
                                             tables["user_community_affinity"]))
    ]
    user, item, step, period = read_engagements(Path(directory) / manifest["engagements"])
    log_ = InteractionLog(user, item, step, period, tables["log_session"],
                          int(manifest["t1_end"]), int(manifest["dropped_users"]))
    return World(taxonomy, catalog, users), log_, manifest


def check_log(log_: InteractionLog, n_items: int) -> None:
    """Raise if the log violates ordering, catalog or period invariants."""
    if len(log_) == 0:
        return
    if log_.item.min() < 0 or log_.item.max() >= n_items:
        raise SimulationError("log references items outside the catalog")
    same_user = log_.user[1:] == log_.user[:-1]
    if np.any(log_.user[1:] < log_.user[:-1]):
        raise SimulationError("log not sorted by user")
    if np.any(same_user & (log_.step[1:] <= log_.step[:-1])):
        raise SimulationError("steps not strictly increasing within a user")
    if np.any(same_user & (log_.period[1:] < log_.period[:-1])):
        raise SimulationError("T2 event precedes a T1 event")
    if np.any((log_.period == T1) != (log_.step < log_.t1_end)):
        raise SimulationError("period labels disagree with t1_end")


__all__ = [
    "ConfigError", "InteractionLog", "Item", "ItemCatalog", "SimulationError", "TopicTaxonomy",
    "UserProfile", "World", "check_log", "generate_world", "load_world", "save_world",
    "simulate_engagement",
]
