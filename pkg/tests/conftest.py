import pytest

from diffquant.data import gaussian_samples


@pytest.fixture(scope="session")
def gaussian():
    return gaussian_samples(0).samples
