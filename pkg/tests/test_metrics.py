import math

import pytest
import torch

from conftest import random_pose, random_scales
from kinefit.errors import DimensionError
from kinefit.kinematics import MotionSequence, forward_kinematics
from kinefit.metrics import COLUMNS, EvaluationReport, angle_traces, evaluation_report, mae_angle, mpjve, pa_mpjpe, \
    wrap_angle
from kinefit.model import ScaleSet


def _rotation_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return torch.tensor([[c, -s, 0.], [s, c, 0.], [0., 0., 1.]], dtype=torch.float64)


def _keypoints(model, generator, frames=5):
    return forward_kinematics(model, random_pose(model, generator, (frames,)), random_scales(model, generator))


def test_wrap_angle():
    values = torch.tensor([0., math.pi, -math.pi, 3 * math.pi / 2, 2 * math.pi + 0.1], dtype=torch.float64)
    wrapped = wrap_angle(values)
    assert wrapped.tolist() == pytest.approx([0., math.pi, math.pi, -math.pi / 2, 0.1])


def test_mae_angle_examples(small_model):
    truth = MotionSequence(torch.zeros(4, 3), 60., small_model.coordinate_names)
    assert mae_angle(truth, truth) == 0.

    offset = MotionSequence(torch.full((4, 3), math.radians(5.)), 60., small_model.coordinate_names)
    assert mae_angle(offset, truth, ["rz", "knee"]) == pytest.approx(10.)
    assert mae_angle(offset, truth, ["rz", "knee"], reduction="mean") == pytest.approx(5.)
    assert mae_angle(offset, truth) == pytest.approx(15.)

    wrapped = MotionSequence(truth.values + 2 * math.pi, 60., small_model.coordinate_names)
    assert mae_angle(wrapped, truth) == pytest.approx(0., abs=1e-9)


def test_mae_angle_is_frame_l1_norm(generator):
    pred = torch.rand(6, 3, generator=generator, dtype=torch.float64)
    truth = torch.rand(6, 3, generator=generator, dtype=torch.float64)
    norms = [float((p - t).abs().sum()) for p, t in zip(pred, truth)]
    assert mae_angle(pred, truth) == pytest.approx(math.degrees(sum(norms) / 6))


def test_mae_angle_model_subset(small_model):
    truth = MotionSequence(torch.zeros(2, 3), 60., small_model.coordinate_names)
    pred = MotionSequence(torch.tensor([[1., 0.1, 0.2]] * 2), 60., small_model.coordinate_names)
    # The translation column is skipped
    assert mae_angle(pred, truth, model=small_model) == pytest.approx(math.degrees(0.3))
    assert mae_angle(pred, truth, model=small_model, reduction="mean") == pytest.approx(math.degrees(0.15))
    assert mae_angle(pred, truth, ["knee"]) == pytest.approx(math.degrees(0.2))
    with pytest.raises(DimensionError):
        mae_angle(torch.zeros(2, 3), torch.zeros(3, 3))
    with pytest.raises(ValueError):
        mae_angle(pred, truth, reduction="max")


def test_pa_mpjpe_zero_and_similarity_invariance(model, generator):
    truth = _keypoints(model, generator)
    assert pa_mpjpe(truth, truth) == pytest.approx(0., abs=1e-9)

    moved = 1.3 * truth @ _rotation_z(0.7).t() + torch.tensor([0.2, 0.1, -0.4], dtype=torch.float64)
    assert pa_mpjpe(moved, truth) == pytest.approx(0., abs=1e-6)
    assert pa_mpjpe(moved, truth, per_frame=False) == pytest.approx(0., abs=1e-6)


def test_pa_mpjpe_rotation_grid():
    # Four points on a square; a single perturbed point is spread over the frame after alignment
    square = torch.tensor([[0., 0., 0.], [1., 0., 0.], [1., 1., 0.], [0., 1., 0.]], dtype=torch.float64)
    for angle in torch.linspace(0., 2 * math.pi, 7).tolist():
        truth = (square @ _rotation_z(angle).t())[None]
        assert pa_mpjpe(truth, square[None]) == pytest.approx(0., abs=1e-6)

    bumped = square.clone()
    bumped[2, 2] = 0.1
    error = pa_mpjpe(bumped[None], square[None])
    assert 0. < error < 100.


def test_pa_mpjpe_shape_mismatch(model, generator):
    truth = _keypoints(model, generator)
    with pytest.raises(DimensionError):
        pa_mpjpe(truth[:3], truth)


def test_mpjve(model, generator):
    truth = _keypoints(model, generator, frames=6)
    assert mpjve(truth, truth, 60.) == pytest.approx(0., abs=1e-6)

    # One keypoint drifting at constant velocity v contributes v / K to the mean
    drift = truth.clone()
    velocity = 0.6
    drift[:, 5, 0] += velocity / 60. * torch.arange(6, dtype=torch.float64)
    error = mpjve(drift, truth, 60., align=False)
    assert error == pytest.approx(velocity * 1000 / model.num_keypoints)

    with pytest.raises(ValueError):
        mpjve(truth[:1], truth[:1], 60.)


def test_angle_traces(small_model):
    truth = MotionSequence(torch.zeros(3, 3), 10., small_model.coordinate_names)
    pred = MotionSequence(torch.full((3, 3), math.pi / 2), 10., small_model.coordinate_names)
    traces = angle_traces(pred, truth, ["rz", "knee"])
    assert list(traces.columns) == ["time", "rz_pred", "rz_truth", "knee_pred", "knee_truth"]
    assert traces["time"].tolist() == pytest.approx([0., 0.1, 0.2])
    assert traces["knee_pred"].tolist() == pytest.approx([90.] * 3)


def _clip(model, generator, frames=4):
    motion = MotionSequence(random_pose(model, generator, (frames,)), 60., model.coordinate_names)
    return motion, ScaleSet(random_scales(model, generator), model.segment_names)


def test_evaluation_report(model, generator, tmp_path):
    truths = {"b": _clip(model, generator), "a": _clip(model, generator)}
    predictions = {"a": truths["a"], "b": _clip(model, generator)}
    report = evaluation_report(model, predictions, truths)

    assert [r["clip"] for r in report.rows] == ["a", "b"]
    assert report.rows[0]["MAE_angle_deg"] == 0.
    assert report.rows[1]["MAE_angle_deg"] > 0.
    assert report.mean["PA_MPJPE_mm"] == pytest.approx(report.rows[1]["PA_MPJPE_mm"] / 2)
    assert report.settings == {"align": "frame", "exclude_coords": [], "mae_reduction": "sum"}

    frame = report.to_frame()
    assert list(frame.columns) == ["clip"] + list(COLUMNS)
    assert frame["clip"].tolist() == ["a", "b", "mean"]

    report.to_csv(str(tmp_path / "report.csv"))
    loaded = EvaluationReport.from_csv(str(tmp_path / "report.csv"))
    assert [r["clip"] for r in loaded.rows] == ["a", "b"]
    assert loaded.rows[1]["MPJVE_mm_s"] == pytest.approx(report.rows[1]["MPJVE_mm_s"])
    assert "mean" in report.format()


def test_evaluation_report_excluded_coordinates(model, generator):
    truth = _clip(model, generator)
    values = truth[0].values.clone()
    values[:, model.coordinate_index("knee_angle_r")] += 0.5
    pred = (MotionSequence(values, 60., model.coordinate_names), truth[1])

    full = evaluation_report(model, {"c": pred}, {"c": truth})
    excluded = evaluation_report(model, {"c": pred}, {"c": truth}, exclude_coords=["knee_angle_r"])
    assert full.rows[0]["MAE_angle_deg"] > 0.
    assert excluded.rows[0]["MAE_angle_deg"] == 0.

    with pytest.raises(KeyError):
        evaluation_report(model, {"c": pred}, {"c": truth}, exclude_coords=["tail"])
    with pytest.raises(ValueError):
        evaluation_report(model, {"c": pred}, {"d": truth})
