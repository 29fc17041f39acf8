import numpy as np
import pytest

from pgn import tensor as T
from pgn.datasets import gen_balls_split, gen_object_split, write_dataset
from pgn.diagnostics import tiny_spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def debug():
    with T.debug_checks(True):
        yield


@pytest.fixture
def tiny():
    return tiny_spec()


@pytest.fixture(scope="session")
def balls_files(tmp_path_factory):
    """Small balls train/val/test files shared by the training and CLI tests."""
    root = tmp_path_factory.mktemp("balls")
    paths = {}
    for split, (name, n) in enumerate((("train", 12), ("val", 6), ("test", 6))):
        ds = gen_balls_split(n, 16, seed=3, split=split, name=name)
        paths[name] = root / f"{name}.pgnv"
        write_dataset(paths[name], ds)
    return paths


@pytest.fixture(scope="session")
def objects_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("objects")
    paths = {}
    for split, (name, n) in enumerate((("train", 10), ("val", 6), ("test", 6))):
        ds = gen_object_split(n, 6, seed=4, split=split, size=16, name=name)
        paths[name] = root / f"{name}.pgnv"
        write_dataset(paths[name], ds)
    return paths
