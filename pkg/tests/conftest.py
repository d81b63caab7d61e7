import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mtmh.config import ExperimentConfig, ModelConfig
from mtmh.model import init_params
from mtmh.training import Batch, RowGrad

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(d_s=4, d_d=3, d_e=5, dense_hidden=4, head_hidden=(4, 3), dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def random_instance(seed: int, n_items: int = 12, batch: int = 3, L: int = 4, dense_dim: int = 3,
                    n_heads: int = 2, d_c: int = 6):
    """A small float64 model, batch and teacher table for gradient checks."""
    rng = np.random.default_rng(seed)
    params = init_params(n_items, dense_dim, tiny_model_config(), seed, n_heads)
    # push weights away from the tiny init so every term has a visible gradient
    for v in params.arrays.values():
        v += 0.3 * rng.normal(size=v.shape)
    feats = rng.normal(size=(n_items, dense_dim))
    ids = rng.choice(n_items, size=(batch, L + 2))
    b = Batch(trigger=ids[:, 0], positive=ids[:, 1], negatives=ids[:, 2:],
              weight=rng.uniform(0.5, 2.0, size=batch), dense_features=feats)
    F = rng.normal(size=(n_items, d_c))
    return params, b, F


def dense_grad(g, shape):
    return g.dense(shape) if isinstance(g, RowGrad) else np.asarray(g)


def finite_difference(params, objective, h=1e-4):
    num = {}
    for key, theta in params.arrays.items():
        g = np.zeros_like(theta)
        it = np.nditer(theta, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = theta[i]
            theta[i] = old + h
            up = objective(params)
            theta[i] = old - h
            down = objective(params)
            theta[i] = old
            g[i] = (up - down) / (2 * h)
        num[key] = g
    return num


def grad_errors(grads, numeric) -> dict[str, float]:
    """Relative error per parameter array (arrays with no gradient on either side are skipped)."""
    out = {}
    for key, num in numeric.items():
        ana = dense_grad(grads[key], num.shape) if key in grads else np.zeros_like(num)
        scale = max(np.linalg.norm(ana), np.linalg.norm(num))
        if scale >= 1e-10:
            out[key] = float(np.linalg.norm(ana - num) / scale)
    return out


def assert_grads_close(params, grads, numeric, tol=1e-4):
    for key, rel in grad_errors(grads, numeric).items():
        assert rel < tol, f"{key}: relative error {rel:.2e}"


SMALL_OVERRIDES = [
    "world.n_items=600", "world.n_users=120", "world.n_l1=3", "world.l2_per_l1=3",
    "world.n_communities=4", "sim.steps=120", "sim.events_per_user=16",
    "encoder.epochs=3", "encoder.dim=16", "encoder.hidden=16",
    "model.d_s=8", "model.d_d=4", "model.d_e=8", "model.dense_hidden=8", "model.head_hidden=[8,8]",
    "pairs.L=8", "train.batch_size=64", "serve.k=8", "serve.C=2", "serve.K_ann=40", "serve.K=10",
    "serve.final_topk_per_user=30", "eval.ks=[5,10,30]",
]


def small_config(*extra: str) -> ExperimentConfig:
    """A world small enough to run every stage in about a second."""
    return ExperimentConfig().with_overrides(SMALL_OVERRIDES + list(extra))


@pytest.fixture
def small_cfg() -> ExperimentConfig:
    return small_config()


@pytest.fixture(scope="session")
def small_experiment(tmp_path_factory):
    """One cached small experiment shared by the evaluation and pipeline tests."""
    from mtmh.pipeline import Experiment
    return Experiment(small_config(), tmp_path_factory.mktemp("small"))


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance suite's one-line verdicts at the end of the run."""
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
