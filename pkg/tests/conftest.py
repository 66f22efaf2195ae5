import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_bbox():
    from sketchfield.field import AABox

    return AABox(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))


def random_field(rng, res=8, scale=1.0, dtype=torch.float64):
    """Small random field with everything occupied, for gradient work."""
    from sketchfield.field import AABox, OccupancyGrid, RadianceField

    f = RadianceField((res, res, res), AABox([-1, -1, -1], [1, 1, 1]))
    f.density = torch.as_tensor(rng.normal(0.0, scale, (res, res, res))).to(dtype)
    f.color = torch.as_tensor(rng.normal(0.0, scale, (res, res, res, 3))).to(dtype)
    f.occupancy = OccupancyGrid(bits=torch.ones((res, res, res), dtype=torch.bool))
    return f
