import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def small_split_dataset(seed=0, classes=4, per_class=40, d=8, spread=0.2):
    """A quick dataset for trainer-level tests."""
    from tshash import data as dmod

    ds = dmod.generate_blobs(classes, per_class, d, spread, seed=seed)
    return dmod.split(ds, labeled_fraction=0.25, queries_per_class=5,
                      rng=np.random.default_rng([seed, 1]))
