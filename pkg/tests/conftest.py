import numpy as np
import pytest

from efcn.frame import ClassSet, Frame, build_act_list
from efcn.utility import UtilityTable


@pytest.fixture
def frame3():
    return Frame.with_size(3)


@pytest.fixture
def pairs3():
    return [ClassSet.from_indices(pair) for pair in ((0, 1), (0, 2), (1, 2))]


@pytest.fixture
def acts3(frame3, pairs3):
    """Singletons, pairs and Ω of a three-class frame."""
    return build_act_list(frame3, pairs3)


@pytest.fixture
def table3(frame3, acts3):
    return UtilityTable.build(frame3, acts3, 0.8)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
