import numpy as np
import pytest

from treeprox.dataset import FeatureTable


def make_table(cols: dict, y=None, ids=None, outcome_name="outcome") -> FeatureTable:
    n = len(next(iter(cols.values())))
    if ids is None:
        ids = np.arange(n)
    return FeatureTable(ids, {k: np.asarray(v, dtype=float) for k, v in cols.items()},
                        None if y is None else np.asarray(y, dtype=float), outcome_name)


@pytest.fixture
def rng():
    return np.random.default_rng(20260817)
