import pathlib

import numpy as np
import pytest

from repronum import discretize_gamma

DATA_DIR = pathlib.Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def phi():
    return discretize_gamma()


@pytest.fixture(scope="session")
def data_dir():
    return DATA_DIR


def random_counts(rng, D, T, lam=(2.0, 10.0)):
    """Poisson count matrix with a uniformly drawn mean, as float."""
    return rng.poisson(rng.uniform(*lam), size=(D, T)).astype(float)
