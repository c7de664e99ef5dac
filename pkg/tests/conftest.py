import numpy as np
import pytest

from mad_dg import synthgen as sg


@pytest.fixture(scope="session")
def tiny_ds(tmp_path_factory):
    """Two sources plus a target, 24 train / 12 test images per domain."""
    specs, roles = sg.benchmark_specs()
    return sg.generate_dataset(specs, {"train": 24, "test": 12}, tmp_path_factory.mktemp("tiny"), seed=1,
                               roles=roles)


@pytest.fixture(scope="session")
def single_ds(tmp_path_factory):
    specs = [sg.make_domain_spec(0, "bright"), sg.make_domain_spec(1, "dark")]
    return sg.generate_dataset(specs, {"train": 16, "test": 8}, tmp_path_factory.mktemp("single"), seed=2,
                               roles=["source", "target"])


def two_sample_batch(manifest, seed=0):
    samples = sg.load_split(manifest, "train", manifest.source_ids)
    pick = [samples[0], samples[-1]]
    return sg.collate(pick)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
