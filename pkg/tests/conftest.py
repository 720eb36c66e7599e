import numpy as np
import pytest

from deferral.base_losses import BinaryPhi, MulticlassFamily, PhiTag
from deferral.synthdata import Dataset
from deferral.training import ModelSpec, OptimizerSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def log_family():
    return MulticlassFamily.logistic()


@pytest.fixture
def exp_phi():
    return BinaryPhi(PhiTag.EXP)


@pytest.fixture
def linear_spec():
    return ModelSpec()


@pytest.fixture
def short_gd():
    return OptimizerSpec(lr=0.5, epochs=50)


@pytest.fixture
def blobs():
    """Two far-apart Gaussian blobs, linearly separable."""
    rng = np.random.default_rng(7)
    X = np.concatenate([rng.normal(-3.0, 0.3, (40, 2)), rng.normal(3.0, 0.3, (40, 2))])
    y = np.repeat([0, 1], 40)
    return Dataset(X=X, y=y, n_classes=2, metadata={"task": "blobs"})
