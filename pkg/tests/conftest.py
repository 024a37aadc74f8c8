import numpy as np
import pytest

from cdum.data import SynthSpec, generate_synth, split_811


@pytest.fixture(scope="session")
def small_rct():
    """A 3k-row synthetic RCT with its ground truth and an 8:1:1 split."""
    ds, truth = generate_synth(SynthSpec(user_count=3000, seed=11))
    return ds, truth, split_811(len(ds), 11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
