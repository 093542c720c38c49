"""Readers and writers for the on-disk formats

Motion files are CSV with a `time` column followed by one column per coordinate, rotations in degrees and
translations in meters. Structured records (cameras, reports, manifests) are JSON with sorted keys, so writing the
same content twice produces identical bytes.
"""
import json
import math

import numpy as np
import pandas as pd
import torch

from .errors import DimensionError, MissingDataError
from .fitting import LabeledPoints
from .geometry import Camera, KeypointTrack
from .kinematics import MotionSequence
from .model import ScaleSet

__all__ = ["write_json", "read_json", "write_motion", "read_motion", "write_scales", "read_scales",
           "write_keypoints_2d", "read_keypoints_2d", "write_camera", "read_camera", "write_markers", "read_markers"]

_AXES = ("x", "y", "z")


def write_json(path, data):
    with open(path, "w") as fd:
        json.dump(data, fd, indent=2, sort_keys=True)
        fd.write("\n")


def read_json(path):
    with open(path, "r") as fd:
        return json.load(fd)


def _degrees(model):
    return np.array([180. / math.pi if c.is_rotation else 1. for c in model.coordinates])


def write_motion(path, motion, model):
    motion.check_model(model)
    frame = pd.DataFrame(motion.values.numpy() * _degrees(model), columns=list(motion.coordinate_names))
    frame.insert(0, "time", motion.times().numpy())
    frame.to_csv(path, index=False)


def read_motion(path, model, frame_rate=None):
    """Read a motion CSV written against `model`

    The frame rate is taken from the `time` column unless given explicitly, single-frame files need it explicitly.
    """
    frame = pd.read_csv(path)
    columns = [c for c in frame.columns if c != "time"]
    if tuple(columns) != model.coordinate_names:
        unknown = sorted(set(columns) ^ set(model.coordinate_names))
        raise DimensionError("motion file {} does not match model {}: {} columns, differing: {}".format(
            path, model.name, len(columns), ", ".join(unknown) or "order"))
    if frame_rate is None:
        if "time" not in frame.columns or len(frame) < 2:
            raise ValueError("cannot infer the frame rate of {}, pass it explicitly".format(path))
        frame_rate = 1. / float(np.median(np.diff(frame["time"].to_numpy())))
    values = torch.from_numpy(frame[columns].to_numpy(dtype=np.float64) / _degrees(model))
    return MotionSequence(values, frame_rate, model.coordinate_names)


def write_scales(path, scales):
    frame = pd.DataFrame(scales.values.numpy(), columns=list(_AXES))
    frame.insert(0, "segment", list(scales.segment_names))
    frame.to_csv(path, index=False)


def read_scales(path, model):
    frame = pd.read_csv(path, dtype={"segment": str}).set_index("segment")
    missing = [s for s in model.segment_names if s not in frame.index]
    if missing:
        raise KeyError("scale file {} has no row for segment {}".format(path, missing[0]))
    values = frame.loc[list(model.segment_names), list(_AXES)].to_numpy(dtype=np.float64)
    return ScaleSet(torch.from_numpy(values), model.segment_names)


def write_keypoints_2d(path, track):
    """Long-format 2D track: one `frame, label, u, v, confidence` row per observation"""
    T, P = track.uv.shape[:2]
    frame = pd.DataFrame({
        "frame": np.repeat(np.arange(T), P),
        "label": np.tile(np.array(track.labels, dtype=object), T),
        "u": track.uv[..., 0].reshape(-1).numpy(),
        "v": track.uv[..., 1].reshape(-1).numpy(),
        "confidence": track.confidence.reshape(-1).numpy()
    })
    frame.to_csv(path, index=False)


def read_keypoints_2d(path):
    """Read a long-format 2D track, observations missing from the file get NaN pixels and zero confidence"""
    frame = pd.read_csv(path, dtype={"label": str})
    if frame.empty:
        raise MissingDataError("keypoint file {} holds no observations".format(path))
    labels = tuple(pd.unique(frame["label"]))
    T = int(frame["frame"].max()) + 1

    table = frame.pivot(index="frame", columns="label").reindex(range(T))
    uv = np.stack([table["u"][list(labels)].to_numpy(), table["v"][list(labels)].to_numpy()], axis=-1)
    confidence = table["confidence"][list(labels)].fillna(0.).to_numpy()
    return KeypointTrack(labels, torch.from_numpy(uv.astype(np.float64)),
                         torch.from_numpy(confidence.astype(np.float64)))


def write_camera(path, camera):
    write_json(path, camera.to_dict())


def read_camera(path):
    return Camera.from_dict(read_json(path))


def write_markers(path, points, frame_rate):
    """Wide-format 3D trajectories with `<label>.x`, `<label>.y`, `<label>.z` columns"""
    T = points.positions.size(0)
    columns = ["{}.{}".format(l, a) for l in points.labels for a in _AXES]
    frame = pd.DataFrame(points.positions.reshape(T, -1).numpy(), columns=columns)
    frame.insert(0, "time", np.arange(T) / frame_rate)
    frame.to_csv(path, index=False)


def read_markers(path):
    frame = pd.read_csv(path)
    columns = [c for c in frame.columns if c != "time"]
    if len(columns) % 3 != 0:
        raise DimensionError("marker file {} has {} coordinate columns, expected a multiple of 3".format(
            path, len(columns)))
    labels = tuple(c.rsplit(".", 1)[0] for c in columns[::3])
    positions = torch.from_numpy(frame[columns].to_numpy(dtype=np.float64)).view(len(frame), len(labels), 3)
    return LabeledPoints(labels, positions)
