import numpy as np
import pytest

from hmseg import autodiff as ad


@pytest.fixture(autouse=True)
def clean_graph():
    """Each test starts with an empty tape and standard precision."""
    ad.reset_tape()
    ad.set_precision("standard")
    yield
    ad.reset_tape()
    ad.set_precision("standard")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
