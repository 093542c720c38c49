import copy

import pytest
import torch

from kinefit.config import DEFAULTS
from kinefit.geometry import place_cameras
from kinefit.model import load_generic_model, model_from_dict

# root (tx, rz) -> link (knee) -> leaf, three markers per segment
SMALL_MODEL = {
    "name": "small",
    "declared": {"coordinates": 3, "segments": 3, "keypoints": 6, "markers": 9, "free_rotational": 1},
    "coordinates": [
        {"name": "tx", "kind": "translation", "class": "free", "default": 0.0},
        {"name": "rz", "kind": "rotation", "class": "free", "default": 0.0},
        {"name": "knee", "kind": "rotation", "class": "constrained", "range": [-90.0, 90.0], "default": 0.0}
    ],
    "segments": [
        {"name": "root", "parent": None, "offset": [0.0, 0.0, 0.0], "mass_center": [0.0, 0.1, 0.0],
         "coordinates": ["tx", "rz"], "axes": [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]},
        {"name": "link", "parent": "root", "offset": [0.0, -0.5, 0.0], "mass_center": [0.0, -0.25, 0.0],
         "coordinates": ["knee"], "axes": [[0.0, 0.0, 1.0]]},
        {"name": "leaf", "parent": "link", "offset": [0.0, -0.4, 0.0], "mass_center": [0.1, 0.0, 0.0]}
    ],
    "markers": [
        {"name": "R1", "segment": "root", "offset": [0.05, 0.02, 0.03]},
        {"name": "R2", "segment": "root", "offset": [-0.04, 0.06, -0.02]},
        {"name": "R3", "segment": "root", "offset": [0.02, -0.03, 0.05]},
        {"name": "K1", "segment": "link", "offset": [0.04, -0.1, 0.03]},
        {"name": "K2", "segment": "link", "offset": [-0.03, -0.25, 0.05]},
        {"name": "K3", "segment": "link", "offset": [0.02, -0.4, -0.04]},
        {"name": "F1", "segment": "leaf", "offset": [0.06, 0.01, 0.02]},
        {"name": "F2", "segment": "leaf", "offset": [0.12, -0.02, -0.03]},
        {"name": "F3", "segment": "leaf", "offset": [0.0, 0.0, 0.0]}
    ]
}


@pytest.fixture
def small_model_dict():
    return copy.deepcopy(SMALL_MODEL)


@pytest.fixture(scope="session")
def small_model():
    return model_from_dict(copy.deepcopy(SMALL_MODEL))


@pytest.fixture(scope="session")
def model():
    return load_generic_model()


@pytest.fixture(scope="session")
def cameras():
    return place_cameras(DEFAULTS["camera"], 0)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(0)


def random_pose(model, generator, batch=()):
    """Uniform draw inside the constrained ranges, +-pi for free rotations and +-0.5 m for translations"""
    lower, upper = model.bounds
    lo = torch.where(torch.isfinite(lower), lower,
                     torch.where(model.rotational, torch.full_like(lower, -3.), torch.full_like(lower, -0.5)))
    hi = torch.where(torch.isfinite(upper), upper, -lo)
    u = torch.rand(*batch, model.num_coordinates, generator=generator, dtype=torch.float64)
    return lo + (hi - lo) * u


def random_scales(model, generator, batch=()):
    return 0.8 + 0.4 * torch.rand(*batch, model.num_segments, 3, generator=generator, dtype=torch.float64)
