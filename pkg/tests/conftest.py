import numpy as np
import pytest

from firecast import data as dt
from firecast.model import Dims


TINY_DIMS = Dims(channels=2, height=6, width=6, state=8, horizon=2)


@pytest.fixture
def tiny_dims():
    return TINY_DIMS


def make_sequence(weeks=40, channels=2, height=6, width=6, seed=0, fire_rate=0.08):
    """Random but valid (obs, fire) sequence for plumbing tests."""
    rng = np.random.default_rng(seed)
    obs = rng.uniform(0.0, 1.0, (weeks, channels, height, width)).astype(np.float32)
    fire = (rng.random((weeks, height, width)) < fire_rate).astype(np.float32)
    return dt.SequenceData(obs=obs, fire=fire)


@pytest.fixture
def tiny_sequence():
    return make_sequence()


def small_sim_dataset(weeks=60, seed=3, height=10, width=10, channels=3):
    cfg = dt.SimConfig(height=height, width=width, channels=channels)
    return dt.generate_dataset(cfg, weeks, seed)
