import numpy as np
import pytest
import torch

from semocc import scenegen as sg
from semocc.camera import Intrinsics


@pytest.fixture(scope="session")
def scene7():
    return sg.build_scene(7)


@pytest.fixture(scope="session")
def views7(scene7):
    return sg.render_rig(scene7)


@pytest.fixture
def small_intrinsics():
    return Intrinsics(fx=100.0, fy=100.0, cx=320.0, cy=96.0, width=640, height=192)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    np.random.seed(0)
    yield
