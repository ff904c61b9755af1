import numpy as np
import pytest

from calcheads.corpus import DatasetSpec, Vocabulary, build_dataset
from calcheads.model import ModelConfig, ModelState


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.default()


@pytest.fixture(scope="session")
def small_data():
    return build_dataset(DatasetSpec(ops=("add", "sub"), count=300, seed=3))


def make_state(vocab, n_layers=2, n_heads=4, d_model=32, d_mlp=64, seed=0, act="gelu"):
    cfg = ModelConfig(n_layers=n_layers, n_heads=n_heads, d_model=d_model, d_mlp=d_mlp,
                      vocab_size=len(vocab), max_seq=40, act=act)
    return ModelState.init(cfg, seed=seed)


def jitter(state, scale=0.05, seed=1):
    """Move layernorm/bias parameters off their init values so every gradient path is exercised."""
    rng = np.random.default_rng(seed)
    for name in state.names():
        t = state[name].data
        if "ln" in name or ".b_" in name:
            t += rng.standard_normal(t.shape) * scale
    return state


@pytest.fixture
def state(vocab):
    return jitter(make_state(vocab))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
