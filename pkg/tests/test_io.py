import math

import pytest
import torch
from torch.testing import assert_close

from conftest import random_pose
from kinefit import io
from kinefit.errors import DimensionError, MissingDataError
from kinefit.fitting import LabeledPoints
from kinefit.geometry import KeypointTrack
from kinefit.kinematics import MotionSequence
from kinefit.model import ScaleSet


def test_motion_round_trip(tmp_path, model, generator):
    motion = MotionSequence(random_pose(model, generator, (5,)), 50., model.coordinate_names)
    file_name = str(tmp_path / "motion.csv")
    io.write_motion(file_name, motion, model)

    header = open(file_name).readline().strip().split(",")
    assert header[0] == "time" and tuple(header[1:]) == model.coordinate_names

    loaded = io.read_motion(file_name, model)
    assert loaded.frame_rate == pytest.approx(50.)
    assert_close(loaded.values, motion.values)


def test_motion_is_stored_in_degrees(tmp_path, small_model):
    motion = MotionSequence(torch.tensor([[0.25, math.pi / 2, 0.]] * 2), 60., small_model.coordinate_names)
    file_name = str(tmp_path / "motion.csv")
    io.write_motion(file_name, motion, small_model)
    row = open(file_name).readlines()[1].strip().split(",")
    assert [float(v) for v in row[1:]] == pytest.approx([0.25, 90., 0.])


def test_motion_column_mismatch(tmp_path, small_model, model):
    file_name = str(tmp_path / "motion.csv")
    io.write_motion(file_name, MotionSequence.constant(small_model, small_model.default_pose(), 3, 60.), small_model)
    with pytest.raises(DimensionError):
        io.read_motion(file_name, model)


def test_single_frame_motion_needs_frame_rate(tmp_path, small_model):
    file_name = str(tmp_path / "motion.csv")
    io.write_motion(file_name, MotionSequence.constant(small_model, small_model.default_pose(), 1, 60.), small_model)
    with pytest.raises(ValueError):
        io.read_motion(file_name, small_model)
    assert io.read_motion(file_name, small_model, frame_rate=60.).num_frames == 1


def test_scales_round_trip(tmp_path, small_model):
    scales = ScaleSet(torch.tensor([[1., 1.1, 0.9], [1.2, 1., 1.], [0.8, 0.85, 1.]], dtype=torch.float64),
                      small_model.segment_names)
    file_name = str(tmp_path / "scales.csv")
    io.write_scales(file_name, scales)
    assert_close(io.read_scales(file_name, small_model).values, scales.values)

    with open(file_name, "w") as fd:
        fd.write("segment,x,y,z\nroot,1,1,1\n")
    with pytest.raises(KeyError, match="link"):
        io.read_scales(file_name, small_model)


def test_keypoints_2d_round_trip(tmp_path):
    uv = torch.arange(12, dtype=torch.float64).view(2, 3, 2)
    uv[1, 1] = math.nan
    track = KeypointTrack(("a", "b", "c"), uv, torch.tensor([[1., 0.5, 1.], [1., 0., 0.8]]))
    file_name = str(tmp_path / "kp.csv")
    io.write_keypoints_2d(file_name, track)

    loaded = io.read_keypoints_2d(file_name)
    assert loaded.labels == ("a", "b", "c")
    assert torch.equal(torch.isnan(loaded.uv), torch.isnan(uv))
    assert_close(loaded.uv[0], uv[0])
    assert_close(loaded.confidence, track.confidence)


def test_keypoints_2d_missing_rows(tmp_path):
    file_name = tmp_path / "kp.csv"
    file_name.write_text("frame,label,u,v,confidence\n0,a,1,2,1\n0,b,3,4,1\n2,a,5,6,0.9\n")
    track = io.read_keypoints_2d(str(file_name))
    assert track.num_frames == 3
    assert track.confidence.tolist() == [[1., 1.], [0., 0.], [0.9, 0.]]
    assert torch.isnan(track.uv[1]).all()

    file_name.write_text("frame,label,u,v,confidence\n")
    with pytest.raises(MissingDataError):
        io.read_keypoints_2d(str(file_name))


def test_camera_round_trip(tmp_path, cameras):
    file_name = str(tmp_path / "frontal.kcam")
    io.write_camera(file_name, cameras[0])
    loaded = io.read_camera(file_name)
    assert loaded.name == "frontal"
    assert_close(loaded.rotation, cameras[0].rotation)
    assert_close(loaded.translation, cameras[0].translation)
    assert loaded.focal_px == cameras[0].focal_px


def test_markers_round_trip(tmp_path):
    points = LabeledPoints(("LASI", "RASI"), torch.arange(12, dtype=torch.float64).view(2, 2, 3))
    file_name = str(tmp_path / "markers.csv")
    io.write_markers(file_name, points, 100.)
    header = open(file_name).readline().strip().split(",")
    assert header == ["time", "LASI.x", "LASI.y", "LASI.z", "RASI.x", "RASI.y", "RASI.z"]

    loaded = io.read_markers(file_name)
    assert loaded.labels == points.labels
    assert_close(loaded.positions, points.positions)


def test_json_is_stable(tmp_path):
    a, b = str(tmp_path / "a.json"), str(tmp_path / "b.json")
    io.write_json(a, {"b": 1, "a": [1, 2]})
    io.write_json(b, {"a": [1, 2], "b": 1})
    assert open(a).read() == open(b).read()
    assert io.read_json(a) == {"a": [1, 2], "b": 1}
