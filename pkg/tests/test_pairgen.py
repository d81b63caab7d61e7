import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mtmh.config import PairGenConfig, SimConfig, WorldConfig
from mtmh.pairgen import (ExampleSet, NegativeSamplingError, PositivePairs, _engaged_keys,
                          build_positive_pairs, generate_examples, propensity_factor,
                          read_examples, sample_negatives, sim_factor, weight_pairs,
                          write_examples)
from mtmh.synthgen import T1, T2, InteractionLog, generate_world, simulate_engagement


def seq_log(*seqs, t2_item: int = 99) -> InteractionLog:
    user, item, step, period = [], [], [], []
    for u, seq in enumerate(seqs):
        for s, i in enumerate(seq):
            user.append(u), item.append(i), step.append(s), period.append(T1)
        user.append(u), item.append(t2_item), step.append(len(seq)), period.append(T2)
    arr = [np.array(x, dtype=np.int64) for x in (user, item, step, period)]
    return InteractionLog(*arr, session=np.zeros(len(user), dtype=np.int64), t1_end=50)


def pair_set(p: PositivePairs) -> set[tuple[int, int]]:
    return {(t, q) for _, t, q in p.as_tuples()}


def test_window_enumeration():
    a, b, c = 1, 2, 3
    assert pair_set(build_positive_pairs(seq_log([a, b, c]), math.inf)) == {(a, b), (a, c), (b, c)}
    assert pair_set(build_positive_pairs(seq_log([a, b, c]), None)) == {(a, b), (a, c), (b, c)}
    assert pair_set(build_positive_pairs(seq_log([a, b, c]), 1)) == {(a, b), (b, c)}
    assert len(build_positive_pairs(seq_log([a]), 10)) == 0


@given(n=st.integers(1, 12), window=st.integers(1, 15))
def test_pair_count_formula(n, window):
    pairs = build_positive_pairs(seq_log(list(range(n))), window)
    w = min(window, n - 1)
    assert len(pairs) == sum(n - j for j in range(1, w + 1))
    assert np.all(pairs.trigger < pairs.positive)  # ids increase along this sequence


def test_sim_factor_rule():
    cfg = PairGenConfig(sim_threshold=0.5, sim_boost=2.0)
    assert sim_factor(np.array([0.9, 0.5, 0.1]), cfg).tolist() == [2.0, 2.0, 1.0]


def test_propensity_degenerate_and_ratio():
    assert np.all(propensity_factor(np.array([1.0, 7.0, 100.0]),
                                    PairGenConfig(propensity_exponent=0.0)) == 1.0)
    f = propensity_factor(np.array([1.0, 100.0]),
                          PairGenConfig(propensity_exponent=1.0, propensity_clip=math.inf))
    assert f[0] / f[1] == pytest.approx(100.0)
    assert f.mean() == pytest.approx(1.0)
    clipped = propensity_factor(np.array([1.0, 100.0]),
                                PairGenConfig(propensity_exponent=1.0, propensity_clip=1.5))
    assert clipped[0] == 1.5


def test_weights_lower_for_popular_positives():
    rng = np.random.default_rng(0)
    pop = np.exp(rng.normal(size=200))
    F = rng.normal(size=(200, 4))
    pairs = PositivePairs(np.zeros(500, np.int64), rng.integers(200, size=500), rng.integers(200, size=500))
    w = weight_pairs(pairs, F, pop, PairGenConfig(propensity_exponent=0.5))
    w0 = weight_pairs(pairs, F, pop, PairGenConfig(propensity_exponent=0.0))
    high = pop[pairs.positive] > np.median(pop)
    assert w[high].mean() < w0[high].mean()
    assert np.all(np.isfinite(w)) and np.all(w > 0)


def _engaged_setup():
    log_ = seq_log([0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11])
    return log_, _engaged_keys(log_, 40)


def test_uniform_negatives_avoid_user_history():
    log_, keys = _engaged_setup()
    users = np.array([0, 1, 2])
    negs = sample_negatives(users, np.array([1, 5, 9]), 40, keys,
                            PairGenConfig(L=4, uniform_mix=1.0), np.random.default_rng(0))
    assert negs.shape == (3, 4)
    t1 = log_.t1_sequences()
    for u in users:
        assert not set(negs[u].tolist()) & set(t1[int(u)].tolist())


def test_in_batch_negatives_come_from_other_positives():
    _, keys = _engaged_setup()
    positives = np.array([1, 5, 9])
    negs = sample_negatives(np.array([0, 1, 2]), positives, 40, keys,
                            PairGenConfig(L=4, uniform_mix=0.0), np.random.default_rng(0))
    for r in range(3):
        others = set(np.delete(positives, r).tolist())
        assert set(negs[r].tolist()) <= others


def test_negatives_deterministic():
    _, keys = _engaged_setup()
    cfg = PairGenConfig(L=6, uniform_mix=0.5)
    args = (np.array([0, 1, 2]), np.array([1, 5, 9]), 40, keys, cfg)
    assert np.array_equal(sample_negatives(*args, np.random.default_rng(4)),
                          sample_negatives(*args, np.random.default_rng(4)))


def test_impossible_negatives_raise():
    log_ = seq_log([0, 1, 2, 3])
    keys = _engaged_keys(log_, 4)
    with pytest.raises(NegativeSamplingError, match="user 0"):
        sample_negatives(np.array([0]), np.array([1]), 4, keys,
                         PairGenConfig(L=2, uniform_mix=1.0, max_retries=3), np.random.default_rng(0))


@pytest.fixture(scope="module")
def generated():
    w = generate_world(WorldConfig(n_items=400, n_users=80, n_l1=3, l2_per_l1=3, n_communities=4,
                                   fresh_fraction=0.05, fresh_step=60), seed=0)
    log_ = simulate_engagement(w, SimConfig(steps=120, events_per_user=16), seed=1)
    F = np.random.default_rng(0).normal(size=(len(w.catalog), 8))
    fresh = np.flatnonzero(w.catalog.created_at > 0)
    ex = generate_examples(log_, F, w.catalog.popularity, PairGenConfig(L=8), 32, seed=2,
                           fresh_items=fresh)
    return w, log_, F, fresh, ex


def test_examples_no_leakage_and_valid_weights(generated):
    w, log_, _, _, ex = generated
    assert not np.any(ex.negatives == ex.positive[:, None])
    assert np.all(ex.weight > 0) and np.all(np.isfinite(ex.weight))
    assert ex.L == 8 and len(ex) > 100


def test_fresh_items_only_in_second_phase(generated):
    _, _, _, fresh, ex = generated
    early = ex.phase == 0
    assert early.any() and (~early).any()
    assert not np.isin(ex.trigger[early], fresh).any()
    assert not np.isin(ex.positive[early], fresh).any()
    assert not np.isin(ex.negatives[early], fresh).any()
    # batches never straddle phases and are contiguous
    assert np.all(np.diff(ex.batch) >= 0)
    for b in np.unique(ex.batch):
        assert len(np.unique(ex.phase[ex.batch == b])) == 1


def test_examples_deterministic_and_roundtrip(generated, tmp_path):
    w, log_, F, fresh, ex = generated
    again = generate_examples(log_, F, w.catalog.popularity, PairGenConfig(L=8), 32, seed=2,
                              fresh_items=fresh)
    for f in ("trigger", "positive", "weight", "negatives", "batch", "phase"):
        assert np.array_equal(getattr(ex, f), getattr(again, f))
    write_examples(tmp_path / "ex.csv", ex, {"seed": 2})
    back, meta = read_examples(tmp_path / "ex.csv")
    assert meta["seed"] == 2
    for f in ("trigger", "positive", "weight", "negatives", "batch", "phase"):
        assert np.array_equal(getattr(back, f), getattr(ex, f))
    assert isinstance(back.select(np.arange(3)), ExampleSet)
    assert back[0].negative_ids == ex.negatives[0].tolist()
