import numpy as np
import pytest

from procc.dataio import SyntheticWorldConfig, generate_synthetic_world
from procc.model import ModelConfig, init_model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_world():
    cfg = SyntheticWorldConfig(n_states=4, n_objects=3, feature_dim=8, feasibility_density=0.75,
                               seen_fraction=0.67, samples_per_seen_pair=6, eval_samples_per_pair=3,
                               noise_sigma=0.5, seed=3)
    return generate_synthetic_world(cfg)


@pytest.fixture
def small_model(small_world):
    ds, man, _ = small_world
    return init_model(ModelConfig(raw_dim=8, n_states=man.n_states, n_objects=man.n_objects, d=8), seed=7)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Append ``(criterion, passed, detail)``; the lines are printed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, passed, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
