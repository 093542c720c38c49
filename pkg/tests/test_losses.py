import math

import pytest
import torch

from conftest import random_pose, random_scales
from kinefit.errors import DimensionError
from kinefit.kinematics import forward_kinematics, root_relative
from kinefit.losses import LOSSES, LossWeights, angle_loss_constrained, angle_loss_free, bio_constraint_loss, \
    evaluate_loss, gradient_check, keypoint_position_loss, loss_gradients, loss_layout, scale_loss, total_loss


def _t(values):
    return torch.tensor(values, dtype=torch.float64)


def _pair(model, generator, frames=3):
    return (random_pose(model, generator, (frames,)), random_scales(model, generator),
            random_pose(model, generator, (frames,)), random_scales(model, generator))


def test_free_angle_loss_examples():
    assert angle_loss_free(_t([[0.]]), _t([[math.pi]])).item() == pytest.approx(2.)
    assert angle_loss_free(_t([[0.3, 1.]]), _t([[0.3, 1.]])).item() == 0.


def test_free_angle_loss_wrap_invariance(generator):
    truth = torch.randn(5, 4, generator=generator, dtype=torch.float64)
    pred = torch.randn(5, 4, generator=generator, dtype=torch.float64)
    assert angle_loss_free(truth + 2 * math.pi, truth).item() == pytest.approx(0., abs=1e-12)
    assert angle_loss_free(pred - 4 * math.pi, truth).item() == pytest.approx(angle_loss_free(pred, truth).item())


def test_constrained_angle_loss(generator):
    assert angle_loss_constrained(_t([[0.1, -0.2]]), _t([[0., 0.]])).item() == pytest.approx(0.3)

    pred = torch.randn(4, 6, generator=generator, dtype=torch.float64)
    truth = torch.randn(4, 6, generator=generator, dtype=torch.float64)
    expected = sum(abs(p - t) for row_p, row_t in zip(pred.tolist(), truth.tolist())
                   for p, t in zip(row_p, row_t)) / 4
    assert angle_loss_constrained(pred, truth).item() == pytest.approx(expected)


def test_angle_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        angle_loss_constrained(torch.zeros(2, 3), torch.zeros(2, 4))


def test_bio_constraint_loss():
    ranges = _t([[-1., 1.], [0., 2.]])
    assert bio_constraint_loss(_t([[0., 1.], [0.5, 0.1]]), ranges).item() == 0.
    # On the bound the indicator fires but the distance vanishes
    assert bio_constraint_loss(_t([[1., 2.]]), ranges).item() == 0.

    delta = 0.05
    pred = _t([[1. + delta, 1.], [0., 1.]])
    expected = (abs(math.cos(1. + delta) - math.cos(1.)) + abs(math.sin(1. + delta) - math.sin(1.))) / 2
    assert bio_constraint_loss(pred, ranges).item() == pytest.approx(expected)

    below = _t([[0., -0.1]])
    expected = abs(math.cos(-0.1) - 1.) + abs(math.sin(-0.1))
    assert bio_constraint_loss(below, ranges).item() == pytest.approx(expected)

    with pytest.raises(DimensionError):
        bio_constraint_loss(pred, _t([[0., 1.]]))


def test_scale_loss():
    assert scale_loss(_t([[1.1, 1.0, 0.9]]), _t([[1., 1., 1.]])).item() == pytest.approx(0.2)
    assert scale_loss(torch.ones(4, 3), torch.ones(4, 3)).item() == 0.
    assert scale_loss(_t([[1., 1., 1.], [2., 1., 1.]]), torch.ones(2, 3)).item() == pytest.approx(0.5)
    with pytest.raises(DimensionError):
        scale_loss(torch.ones(4, 3), torch.ones(5, 3))


def test_keypoint_position_loss_identity_and_root_offset(model, generator):
    motion = random_pose(model, generator, (3,))
    scales = random_scales(model, generator)
    assert keypoint_position_loss(model, motion, scales, motion, scales).item() == 0.

    shifted = motion.clone()
    for name, offset in (("pelvis_tx", 0.5), ("pelvis_ty", -0.2), ("pelvis_tz", 1.)):
        shifted[:, model.coordinate_index(name)] += offset
    assert keypoint_position_loss(model, shifted, scales, motion, scales).item() == pytest.approx(0., abs=1e-12)


def test_keypoint_position_loss_matches_composition(model, generator):
    pm, ps, tm, ts = _pair(model, generator, frames=2)
    pred = root_relative(forward_kinematics(model, pm, ps), model)
    truth = root_relative(forward_kinematics(model, tm, ts), model)
    expected = (pred - truth).abs().sum() / (2 * model.num_keypoints)
    assert keypoint_position_loss(model, pm, ps, tm, ts).item() == pytest.approx(expected.item())

    with pytest.raises(DimensionError):
        keypoint_position_loss(model, pm, ps, tm[:1], ts)


def test_total_loss_recomposition(model, generator):
    pm, ps, tm, ts = _pair(model, generator)
    layout = loss_layout(model)
    total, breakdown = total_loss(model, pm, ps, tm, ts)

    expected = angle_loss_free(pm[:, layout.free], tm[:, layout.free]) + \
        angle_loss_constrained(pm[:, layout.constrained], tm[:, layout.constrained]) + \
        scale_loss(ps, ts) + bio_constraint_loss(pm[:, layout.constrained], model.ranges) + \
        100. * keypoint_position_loss(model, pm, ps, tm, ts)
    assert total.item() == pytest.approx(expected.item())
    assert breakdown["total"] is total
    assert set(breakdown) == {"angle_free", "angle_constrained", "angle", "scale", "bio", "pos", "total"}


def test_total_loss_zero_and_presets(model, generator):
    motion = random_pose(model, generator, (2,))
    scales = random_scales(model, generator)
    assert total_loss(model, motion, scales, motion, scales)[0].item() == 0.

    pm, ps, tm, ts = _pair(model, generator)
    total, breakdown = total_loss(model, pm, ps, tm, ts, LossWeights.preset("angle+scale"))
    assert set(breakdown) == {"angle_free", "angle_constrained", "angle", "scale", "total"}
    assert total.item() == pytest.approx((breakdown["angle"] + breakdown["scale"]).item())

    with pytest.raises(ValueError):
        LossWeights.preset("everything")
    with pytest.raises(ValueError):
        LossWeights(terms=("angle", "velocity"))


def test_batched_losses(model, generator):
    pm = random_pose(model, generator, (4, 3))
    tm = random_pose(model, generator, (4, 3))
    total, _ = total_loss(model, pm, None, tm, None)
    assert total.shape == (4,)
    for i in range(4):
        assert total[i].item() == pytest.approx(total_loss(model, pm[i], None, tm[i], None)[0].item())


def test_scale_gradient_at_tie_is_zero(model, generator):
    motion = random_pose(model, generator, (2,))
    scales = random_scales(model, generator)
    grad = loss_gradients("scale", model, motion, scales, motion, scales, wrt="scales")
    assert torch.equal(grad, torch.zeros_like(scales))


def test_bio_gradient_zero_inside_ranges(model):
    motion = model.default_pose().expand(3, -1).clone()
    grad = loss_gradients("bio", model, motion, None, motion, None)
    assert torch.equal(grad, torch.zeros_like(motion))


def test_position_gradient_uses_kinematics(model, generator):
    pm, ps, tm, ts = _pair(model, generator, frames=1)
    grad = loss_gradients("pos", model, pm, ps, tm, ts)
    # Root translation never changes root-relative keypoints
    for name in ("pelvis_tx", "pelvis_ty", "pelvis_tz"):
        assert grad[0, model.coordinate_index(name)].item() == pytest.approx(0., abs=1e-12)
    assert grad[0, model.coordinate_index("knee_angle_r")].item() != 0.


def test_evaluate_loss_unknown(small_model):
    with pytest.raises(ValueError):
        evaluate_loss("velocity", small_model, torch.zeros(1, 3), None, torch.zeros(1, 3), None)


@pytest.mark.parametrize("loss", LOSSES)
def test_gradient_check(model, loss):
    result = gradient_check(model, loss, seed=0, draws=20)
    assert result.draws == 20
    assert result.pass_rate >= 0.9


@pytest.mark.slow
@pytest.mark.parametrize("loss", LOSSES)
def test_gradient_check_full(model, loss):
    assert gradient_check(model, loss, seed=0, draws=1000).ok
