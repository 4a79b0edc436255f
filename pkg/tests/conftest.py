import logging

import numpy as np
import pytest

from tokenroute import random_router, random_weights

# the divergence warning is expected when random-weight models emit
# non-UTF8 bytes; keep test output readable
logging.getLogger("tokenroute.server").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def slm_weights():
    return random_weights(seed=0)


@pytest.fixture(scope="session")
def llm_weights():
    return random_weights(seed=42)


@pytest.fixture(scope="session")
def seeded_router(slm_weights):
    return random_router(slm_weights.d, seed=1)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
