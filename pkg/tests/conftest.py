import numpy as np
import pytest

from dvae.data import generate_dataset, generate_sample, load_dataset, sample_scene_params

FIXTURES = __import__("pathlib").Path(__file__).resolve().parent.parent / "fixtures"


def make_samples(n, seed=0, size=32):
    """Fully labelled in-memory samples, deterministic in seed."""
    rng = np.random.default_rng(seed)
    return [generate_sample(sample_scene_params(rng), size) for _ in range(n)]


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    """A 40-record on-disk dataset shared across tests."""
    path = tmp_path_factory.mktemp("data") / "train"
    generate_dataset(path, 40, seed=123, preset="desk32", split="train")
    return path


@pytest.fixture(scope="session")
def small_samples(small_dataset_dir):
    return load_dataset(small_dataset_dir)
