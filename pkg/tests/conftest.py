import os

import numpy as np
import pytest

from ptsam.samarch import build_model, checkpoint, preset
from ptsam.traineng import ensure_base


@pytest.fixture(scope="session")
def base_ckpt(request):
    """Path of pretrained desk base weights, built once and kept in the pytest cache.

    Set PTSAM_CACHE to reuse a cache directory shared with the CLI.
    """
    cache = os.environ.get("PTSAM_CACHE") or str(request.config.cache.mkdir("ptsam-base"))
    return str(ensure_base(preset("desk"), cache))


@pytest.fixture
def base_model(base_ckpt):
    def make():
        m = build_model(preset("desk"), seed=0)
        checkpoint.load(m.reg, base_ckpt)
        return m

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
