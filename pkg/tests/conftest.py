import pytest

from orca.hand_model import default_model


@pytest.fixture(scope="session")
def model():
    return default_model()


@pytest.fixture(scope="session")
def zero_pose(model):
    return {j.name: 0.0 for j in model.joints}
