import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List

import pandas as pd
import torch

from .errors import DimensionError
from .geometry import procrustes_align
from .kinematics import MotionSequence, forward_kinematics
from .model import ScaleSet

__all__ = ["COLUMNS", "mae_angle", "pa_mpjpe", "mpjve", "angle_traces", "EvaluationReport", "evaluation_report"]

logger = logging.getLogger(__name__)

COLUMNS = ("MAE_angle_deg", "PA_MPJPE_mm", "MPJVE_mm_s")
REDUCTIONS = ("sum", "mean")


def _motion_values(motion, coordinates):
    values = motion.values if isinstance(motion, MotionSequence) else torch.as_tensor(motion, dtype=torch.float64)
    if values.dim() != 2:
        raise DimensionError("motion must have shape (T, J), got {}".format(tuple(values.shape)))
    if coordinates is None:
        return values
    index = [motion.coordinate_names.index(c) if isinstance(c, str) else int(c) for c in coordinates]
    return values[:, index]


def wrap_angle(x):
    """Wrap angles into (-pi, pi]"""
    return math.pi - torch.remainder(math.pi - x, 2 * math.pi)


def mae_angle(pred, truth, coordinates=None, model=None, reduction="sum"):
    """Mean absolute joint angle error in degrees

    Differences are wrapped into (-pi, pi] before taking their magnitude. With `reduction="sum"` the result is the L1
    norm of every frame's error over the coordinate subset, averaged over frames; `reduction="mean"` also averages
    over the coordinates.

    Parameters
    ----------
    pred, truth : MotionSequence or torch.Tensor
        Angle sequences `(T, J)` in radians.
    coordinates : list or None
        Coordinate names (for `MotionSequence` inputs) or column indices to compare. When omitted, the rotational
        coordinates of `model`, or all columns if no model is given.
    model : SkeletalModel or None
        Model providing the default rotational subset.
    reduction : str
        `sum` or `mean` over the coordinates of a frame.
    """
    if reduction not in REDUCTIONS:
        raise ValueError("Unknown reduction {}".format(reduction))
    if coordinates is None and model is not None:
        coordinates = [c.name for c in model.coordinates if c.is_rotation]
    p, t = _motion_values(pred, coordinates), _motion_values(truth, coordinates)
    if p.shape != t.shape:
        raise DimensionError("sequences do not match: {} vs {}".format(tuple(p.shape), tuple(t.shape)))
    if p.numel() == 0:
        return 0.
    error = wrap_angle(p - t).abs()
    per_frame = error.sum(dim=-1) if reduction == "sum" else error.mean(dim=-1)
    return math.degrees(float(per_frame.mean()))


def _aligned(pred, truth, per_frame, root, align=True):
    pred = torch.as_tensor(pred, dtype=torch.float64)
    truth = torch.as_tensor(truth, dtype=torch.float64)
    if pred.shape != truth.shape or pred.dim() != 3 or pred.size(-1) != 3:
        raise DimensionError("keypoint sequences must have matching shapes (T, K, 3), got {} and {}".format(
            tuple(pred.shape), tuple(truth.shape)))
    pred = pred - pred[:, root:root + 1]
    truth = truth - truth[:, root:root + 1]
    if not align:
        return pred, truth
    if per_frame:
        return procrustes_align(pred, truth).aligned, truth
    T, K = pred.shape[:2]
    return procrustes_align(pred.reshape(T * K, 3), truth.reshape(T * K, 3)).aligned.view(T, K, 3), truth


def pa_mpjpe(pred_keypoints, truth_keypoints, per_frame=True, root=0):
    """Procrustes-aligned mean per joint position error in millimeters

    Parameters
    ----------
    pred_keypoints, truth_keypoints : torch.Tensor
        Keypoint sequences `(T, K, 3)` in meters.
    per_frame : bool
        Align every frame separately, or the whole sequence with one similarity transform.
    root : int
        Index of the root keypoint.
    """
    pred, truth = _aligned(pred_keypoints, truth_keypoints, per_frame, root)
    return float((pred - truth).norm(dim=-1).mean()) * 1000


def mpjve(pred_keypoints, truth_keypoints, frame_rate, per_frame=True, root=0, align=True):
    """Mean per joint velocity error in mm/s

    Velocities are forward differences of the aligned, root-relative keypoints scaled by the frame rate.
    """
    pred, truth = _aligned(pred_keypoints, truth_keypoints, per_frame, root, align)
    if pred.size(0) < 2:
        raise ValueError("velocity error needs at least 2 frames, got {}".format(pred.size(0)))
    v_pred = (pred[1:] - pred[:-1]) * frame_rate
    v_truth = (truth[1:] - truth[:-1]) * frame_rate
    return float((v_pred - v_truth).norm(dim=-1).mean()) * 1000


def angle_traces(pred, truth, coordinates):
    """Per-coordinate angle traces in degrees, one `<name>_pred` / `<name>_truth` column pair per coordinate"""
    data = {"time": pred.times().numpy()}
    p, t = pred.select(coordinates), truth.select(coordinates)
    for i, name in enumerate(coordinates):
        data[name + "_pred"] = torch.rad2deg(p[:, i]).numpy()
        data[name + "_truth"] = torch.rad2deg(t[:, i]).numpy()
    return pd.DataFrame(data)


@dataclass
class EvaluationReport:
    """Per-clip metrics and their dataset means"""
    rows: List[Dict] = field(default_factory=list)
    settings: Dict = field(default_factory=dict)

    @property
    def mean(self):
        if not self.rows:
            return {c: 0. for c in COLUMNS}
        return {c: sum(r[c] for r in self.rows) / len(self.rows) for c in COLUMNS}

    def to_frame(self):
        frame = pd.DataFrame(self.rows, columns=("clip",) + COLUMNS)
        mean = dict(self.mean, clip="mean")
        return pd.concat([frame, pd.DataFrame([mean], columns=("clip",) + COLUMNS)], ignore_index=True)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path):
        frame = pd.read_csv(path, dtype={"clip": str})
        rows = [{"clip": r["clip"], **{c: float(r[c]) for c in COLUMNS}}
                for r in frame.to_dict("records") if r["clip"] != "mean"]
        return cls(rows)

    def to_dict(self):
        return {"clips": self.rows, "mean": self.mean, "settings": self.settings}

    def to_json(self, path):
        with open(path, "w") as fd:
            json.dump(self.to_dict(), fd, indent=2, sort_keys=True)
            fd.write("\n")

    def format(self):
        return self.to_frame().to_string(index=False, float_format=lambda v: "{:.3f}".format(v))


def evaluation_report(model, predictions, truths, exclude_coords=(), per_frame=True, mae_reduction="sum"):
    """Evaluate predicted clips against ground truth

    Parameters
    ----------
    model : SkeletalModel
        Model used to compute keypoints from motions and scales.
    predictions, truths : dict
        Clip name to `(MotionSequence, ScaleSet)` pairs, both dicts must hold the same clips.
    exclude_coords : list of str
        Rotational coordinates left out of the angle error.
    per_frame : bool
        Procrustes alignment per frame (default) or per sequence.
    mae_reduction : str
        Reduction of the angle error over coordinates, see `mae_angle`.

    Returns
    -------
    report : EvaluationReport
        One row per clip in sorted clip order.
    """
    if set(predictions) != set(truths):
        missing = sorted(set(predictions) ^ set(truths))
        raise ValueError("prediction and ground truth clip sets differ: {}".format(", ".join(missing)))
    for name in exclude_coords:
        model.coordinate_index(name)
    coordinates = [c.name for c in model.coordinates if c.is_rotation and c.name not in set(exclude_coords)]

    rows = []
    for clip in sorted(predictions):
        (pred_motion, pred_scales), (truth_motion, truth_scales) = predictions[clip], truths[clip]
        pred_motion.check_model(model)
        truth_motion.check_model(model)
        pred_kp = forward_kinematics(model, pred_motion.values, _scale_values(pred_scales))
        truth_kp = forward_kinematics(model, truth_motion.values, _scale_values(truth_scales))
        rows.append({
            "clip": clip,
            "MAE_angle_deg": mae_angle(pred_motion, truth_motion, coordinates, reduction=mae_reduction),
            "PA_MPJPE_mm": pa_mpjpe(pred_kp, truth_kp, per_frame, model.root),
            "MPJVE_mm_s": mpjve(pred_kp, truth_kp, truth_motion.frame_rate, per_frame, model.root)
        })
        logger.info("%s: MAE %.3f deg, PA-MPJPE %.3f mm, MPJVE %.3f mm/s", clip, rows[-1]["MAE_angle_deg"],
                    rows[-1]["PA_MPJPE_mm"], rows[-1]["MPJVE_mm_s"])

    settings = {"align": "frame" if per_frame else "sequence", "exclude_coords": sorted(exclude_coords),
                "mae_reduction": mae_reduction}
    return EvaluationReport(rows, settings)


def _scale_values(scales):
    return scales.values if isinstance(scales, ScaleSet) else scales
