import numpy as np
import pytest

from semguide.data import SyntheticSpec, Splits, chronological_split, fit_normalizer, synth_generate
from semguide.schedule import make_linear_schedule


class Task:
    """Small normalised synthetic task shared by the model tests."""

    def __init__(self, flip_prob=0.0):
        self.spec = SyntheticSpec(num_series=16, series_length=24 * 30, flip_prob=flip_prob, seed=11)
        self.windows, self.oracle = synth_generate(self.spec)
        raw = chronological_split(self.windows)
        self.norm = fit_normalizer(raw.train)
        self.splits = Splits(*(self.norm.apply(w) for w in (raw.train, raw.val, raw.test)))
        self.schedule = make_linear_schedule(50, 1e-4, 0.15)


@pytest.fixture(scope="session")
def task():
    return Task()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
