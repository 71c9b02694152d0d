import numpy as np
import pytest

from chiptherm.dataset import build_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Eight 16x16 layouts, 11 frames each; shared by dataset, cli and evaluation tests."""
    from chiptherm.dataset import FrameSchedule
    from chiptherm.fields import GridSpec
    out = tmp_path_factory.mktemp("small_ds")
    return build_dataset(out, 8, seed=7, schedule=FrameSchedule(1e-3, 11), grid=GridSpec(16, 16))
