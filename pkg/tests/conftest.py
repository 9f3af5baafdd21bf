import numpy as np
import pytest

from fddmoe import diffcore as dc
from fddmoe import endtoend


@pytest.fixture(autouse=True)
def _strict_constraints():
    # every forward pass in the suite re-checks pilot and precoder power
    prev = endtoend.CHECK_CONSTRAINTS
    endtoend.CHECK_CONSTRAINTS = True
    dc.set_default_dtype("f32")
    yield
    endtoend.CHECK_CONSTRAINTS = prev
    dc.set_default_dtype("f32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
