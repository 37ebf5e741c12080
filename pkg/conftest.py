import numpy as np
import pytest
from _pytest.doctest import DoctestItem

# Not a doctest target; avoids a basename clash with tests/conftest.py.
collect_ignore = ["conftest.py"]


@pytest.fixture(autouse=True)
def _legacy_numpy_repr_for_doctests(request):
    """Doctests were written against NumPy 1.x scalar reprs (``0.5``, not
    ``np.float64(0.5)``); pin that repr style while a doctest runs."""
    if not isinstance(request.node, DoctestItem):
        yield
        return
    saved = np.get_printoptions()
    try:
        np.set_printoptions(legacy="1.25")
    except (TypeError, ValueError):
        pass
    yield
    np.set_printoptions(**saved)
