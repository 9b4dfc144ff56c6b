import numpy as np
import pytest

from cloudattack import models


@pytest.fixture(scope="session")
def train_set():
    return models.synth_dataset(30, size=64, seed=0)


@pytest.fixture(scope="session")
def holdout_set():
    return models.synth_dataset(15, size=64, seed=999)


@pytest.fixture(scope="session")
def toy_model(train_set):
    return models.toy_train(train_set, seed=0)
