import numpy as np
import pytest

from zigcompress import fixtures as F
from zigcompress.data import gen_synthetic
from zigcompress.params import random_params
from zigcompress.shapes import input_shapes_of


def random_inputs(g, n=16, seed=0):
    rng = np.random.default_rng(seed)
    return {vid: rng.standard_normal((n,) + tuple(s[1:])).astype(np.float32) for vid, s in input_shapes_of(g).items()}


def n_classes(g):
    return g.shape(g.predecessors(g.outputs[0])[0])[1]


def dataset_for(g, n=256, seed=0, noise=1.0):
    (_, shape), = input_shapes_of(g).items()
    return gen_synthetic(n_classes(g), n, tuple(shape[1:]), seed, noise=noise)


@pytest.fixture(scope="session")
def demonet():
    """DemoNet at desk scale: one input channel, 16x16, width 8, four classes."""
    return F.demonet(in_channels=1, image_size=16, width=8, classes=4)


@pytest.fixture(scope="session")
def demonet_full():
    return F.demonet()


@pytest.fixture
def demo_params(demonet):
    return random_params(demonet, np.random.default_rng(0), bn_stats=True)


@pytest.fixture(scope="session")
def demo_data(demonet):
    return dataset_for(demonet, n=512)
