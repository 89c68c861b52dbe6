from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from trimeasure import QubitState, identical_detectors_from_eta

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def ideal():
    return identical_detectors_from_eta(1.0)


@pytest.fixture
def north():
    return QubitState((0.0, 0.0, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
