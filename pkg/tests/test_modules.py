import pytest
import torch

from conftest import random_pose, random_scales
from kinefit.losses import total_loss
from kinefit.modules import KinematicsLoss


def test_forward_matches_total_loss(model, generator):
    criterion = KinematicsLoss(model, lambda_pos=10.)
    pm, tm = random_pose(model, generator, (2, 3)), random_pose(model, generator, (2, 3))
    ps, ts = random_scales(model, generator, (2,)), random_scales(model, generator, (2,))

    value = criterion(pm, ps, tm, ts)
    expected, breakdown = total_loss(model, pm, ps, tm, ts, criterion.weights)
    assert value.shape == (2,)
    assert torch.allclose(value, expected)
    assert set(criterion.last_breakdown) == set(breakdown)


def test_backward_reaches_predictions(model, generator):
    criterion = KinematicsLoss(model)
    pm = random_pose(model, generator, (3,)).requires_grad_()
    ps = random_scales(model, generator).requires_grad_()
    criterion(pm, ps, random_pose(model, generator, (3,)), random_scales(model, generator)).backward()
    assert pm.grad is not None and pm.grad.abs().sum() > 0
    assert ps.grad is not None and ps.grad.abs().sum() > 0


def test_buffers_and_repr(small_model):
    criterion = KinematicsLoss(small_model, terms=("angle", "bio"))
    buffers = dict(criterion.named_buffers())
    assert set(buffers) == {"free_index", "constrained_index", "range_min", "range_max"}
    assert buffers["free_index"].tolist() == [1]
    assert buffers["constrained_index"].tolist() == [2]
    assert buffers["range_max"].tolist() == pytest.approx([1.5707963267948966])
    assert "model=small" in repr(criterion)
    assert "terms=('angle', 'bio')" in repr(criterion)


def test_unknown_term(small_model):
    with pytest.raises(ValueError):
        KinematicsLoss(small_model, terms=("angle", "smoothness"))
