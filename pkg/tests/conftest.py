import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixture_suite(tmp_path_factory):
    """Small synthetic data suite shared by the CLI tests."""
    from nlivec.synthetic import write_fixture_suite

    out = tmp_path_factory.mktemp("suite")
    cfg = write_fixture_suite(out, seed=0, embed_dim=300, n_pairs=300)
    return out, cfg
