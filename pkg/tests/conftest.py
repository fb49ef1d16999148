import numpy as np
import pytest

from uwb_dynroles.core import ClockModel
from uwb_dynroles.protocol import NodeTruth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_world(points, clocks=None):
    clocks = clocks or {}
    return {i: NodeTruth(np.array(p, dtype=float), clocks.get(i, ClockModel())) for i, p in enumerate(points)}
