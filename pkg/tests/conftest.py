# tests/conftest.py
import os
import sys

import numpy as np
import pytest

SRC = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src')
if SRC not in sys.path:
    sys.path.insert(0, SRC)

from synthetic_digits import make_dataset  # noqa: E402

MNIST_DIR = os.getenv('ADVMETRIC_DATA_DIR')

requires_mnist = pytest.mark.skipif(
    not MNIST_DIR or not os.path.isdir(MNIST_DIR),
    reason="ADVMETRIC_DATA_DIR does not point at the MNIST files",
)


@pytest.fixture(scope='session')
def digits_train():
    return make_dataset(300, seed=0, split='train')


@pytest.fixture(scope='session')
def digits_test():
    return make_dataset(60, seed=1, split='test')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Same layer kinds as the production network, a few hundred parameters
TINY_ARCHITECTURE = (
    {'layer': 'conv2d', 'name': 'conv1', 'in_channels': 1, 'out_channels': 2, 'kernel': 5},
    {'layer': 'relu'},
    {'layer': 'maxpool2d', 'size': 2},
    {'layer': 'conv2d', 'name': 'conv2', 'in_channels': 2, 'out_channels': 2, 'kernel': 5},
    {'layer': 'relu'},
    {'layer': 'maxpool2d', 'size': 2},
    {'layer': 'flatten'},
    {'layer': 'linear', 'name': 'fc1', 'in_features': 32, 'out_features': 4},
    {'layer': 'relu'},
    {'layer': 'linear', 'name': 'fc2', 'in_features': 4, 'out_features': 10},
)


@pytest.fixture
def tiny_model():
    from classifier_model import ClassifierModel
    return ClassifierModel.initialize(np.random.default_rng(1), architecture=TINY_ARCHITECTURE, seed=1)
