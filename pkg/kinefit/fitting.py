import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from scipy import signal

from .config import DEFAULTS
from .errors import ConvergenceError, DimensionError, FilterError, FittingError, InsufficientMarkersError, \
    KinefitError, MissingDataError
from .geometry import triangulate_points
from .kinematics import MotionSequence, evaluate_points
from .model import DEFAULT_SCALE_BOUNDS, ScaleSet
from .utils import AverageMeter

__all__ = [
    "IKSettings", "ReconstructionSettings", "LabeledPoints", "LMResult", "IKResult", "ScaleFitResult",
    "IKSequenceResult", "levenberg_marquardt", "fit_scales", "inverse_kinematics_frame",
    "inverse_kinematics_sequence", "butterworth_lowpass", "fill_gaps", "reconstruct_sequence"
]

logger = logging.getLogger(__name__)

LIMIT_MODES = ("project", "penalty")
_DAMPING_FLOOR = 1e-6
_MAX_DAMPING = 1e16


@dataclass(frozen=True)
class IKSettings:
    """Levenberg-Marquardt settings shared by scale fitting and inverse kinematics

    Parameters
    ----------
    max_iterations : int
        Maximum number of LM iterations.
    damping_init : float
        Initial damping factor.
    convergence_tol : float
        The solve stops when the step norm falls below this value.
    limit_mode : str
        `project` clamps constrained coordinates into their range after every step, `penalty` adds quadratic range
        violation residuals weighted by `penalty_weight`.
    penalty_weight : float
        Weight of the range violation residuals in `penalty` mode.
    """
    max_iterations: int = 100
    damping_init: float = 1e-3
    convergence_tol: float = 1e-8
    limit_mode: str = "project"
    penalty_weight: float = 100.

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1, got {}".format(self.max_iterations))
        if not (self.damping_init > 0 and self.convergence_tol > 0 and self.penalty_weight > 0):
            raise ValueError("damping_init, convergence_tol and penalty_weight must be positive")
        if self.limit_mode not in LIMIT_MODES:
            raise ValueError("Unknown limit mode {}".format(self.limit_mode))

    @classmethod
    def from_config(cls, section):
        return cls(int(section["max_iterations"]), float(section["damping_init"]), float(section["convergence_tol"]),
                   str(section["limit_mode"]), float(section["penalty_weight"]))


@dataclass(frozen=True)
class ReconstructionSettings:
    confidence_threshold: float = 0.3
    max_gap: int = 5
    filter_cutoff_hz: Optional[float] = 6.
    filter_order: int = 4
    static_frame: int = 0
    scale_bounds: Tuple[float, float] = DEFAULT_SCALE_BOUNDS
    scale_regularization: float = 1e-6
    scale_max_iterations: int = 200
    ik: IKSettings = field(default_factory=IKSettings)

    @classmethod
    def from_config(cls, config=DEFAULTS):
        rec, scale = config["reconstruction"], config["scale"]
        return cls(
            confidence_threshold=float(rec["confidence_threshold"]),
            max_gap=int(rec["max_gap"]),
            filter_cutoff_hz=rec["filter_cutoff_hz"],
            filter_order=int(rec["filter_order"]),
            static_frame=int(rec["static_frame"]),
            scale_bounds=tuple(scale["bounds"]),
            scale_regularization=float(scale["regularization"]),
            scale_max_iterations=int(scale["max_iterations"]),
            ik=IKSettings.from_config(config["ik"]))


class LabeledPoints(NamedTuple):
    """3D targets: `labels` name marker or keypoint labels, `positions` is `(P, 3)` or `(T, P, 3)` (NaN = missing)"""
    labels: Tuple[str, ...]
    positions: torch.Tensor


class LMResult(NamedTuple):
    x: torch.Tensor
    cost: float
    iterations: int
    converged: bool


class IKResult(NamedTuple):
    pose: torch.Tensor
    rms: float
    iterations: int
    converged: bool


class ScaleFitResult(NamedTuple):
    scales: ScaleSet
    pose: torch.Tensor
    rms: float
    iterations: int
    converged: bool


class IKSequenceResult(NamedTuple):
    motion: MotionSequence
    rms: torch.Tensor
    iterations: torch.Tensor
    converged: torch.Tensor


def levenberg_marquardt(residuals, x0, max_iterations=100, damping_init=1e-3, tol=1e-8, project=None):
    """Minimise `|r(x)|^2` with a multiplicatively damped Gauss-Newton method

    The damping is divided by 10 after an accepted step and multiplied by 10 after a rejected one. A step is accepted
    when it does not increase the cost.

    Parameters
    ----------
    residuals : callable
        Maps `x` to the pair `(r, J)` with `r` of shape `(M,)` and `J` of shape `(M, N)`.
    x0 : torch.Tensor
        Initial state `(N,)`.
    max_iterations : int
        Iteration budget.
    damping_init : float
        Initial damping factor.
    tol : float
        Convergence threshold on the step norm.
    project : callable or None
        Projection applied to every candidate state, e.g. clamping into bounds.

    Returns
    -------
    result : LMResult
        Best iterate, its cost, the number of iterations and a convergence flag.
    """
    x = x0.clone() if project is None else project(x0.clone())
    r, J = residuals(x)
    cost = float(r @ r)
    if not math.isfinite(cost):
        raise ConvergenceError("LM initial cost is not finite: {}".format(cost))
    damping = damping_init
    eye = torch.eye(x.numel(), dtype=x.dtype)

    for it in range(1, max_iterations + 1):
        previous = cost
        JtJ = J.t() @ J
        g = J.t() @ r
        A = JtJ + damping * (torch.diag(torch.diagonal(JtJ)) + _DAMPING_FLOOR * eye)
        candidate = x - torch.linalg.solve(A, g)
        if project is not None:
            candidate = project(candidate)
        step = float((candidate - x).norm())

        r_new, J_new = residuals(candidate)
        cost_new = float(r_new @ r_new)
        if cost_new <= cost:
            x, r, J, cost = candidate, r_new, J_new, cost_new
            damping = max(damping / 10, 1e-12)
        else:
            damping *= 10
        if not cost <= previous:
            raise ConvergenceError("LM cost increased from {} to {}".format(previous, cost))

        logger.debug("LM iteration %d: cost %.6e, step %.3e, damping %.1e", it, cost, step, damping)
        if step < tol or cost == 0.:
            return LMResult(x, cost, it, True)
        if damping > _MAX_DAMPING:
            break

    return LMResult(x, cost, it, False)


def _as_targets(targets):
    if isinstance(targets, LabeledPoints):
        labels, positions = targets
    elif isinstance(targets, dict):
        labels = tuple(targets.keys())
        positions = torch.stack([torch.as_tensor(v, dtype=torch.float64) for v in targets.values()]) \
            if targets else torch.zeros(0, 3, dtype=torch.float64)
    else:
        raise TypeError("targets must be LabeledPoints or a dict of label -> position")
    positions = torch.as_tensor(positions, dtype=torch.float64)
    if positions.shape[-2:] != (len(labels), 3):
        raise DimensionError("targets must have shape (..., {}, 3), got {}".format(len(labels), tuple(positions.shape)))
    return tuple(labels), positions


def _observed(labels, positions):
    """Drop labels whose target is missing"""
    valid = torch.isfinite(positions).all(dim=-1)
    if bool(valid.all()):
        return labels, positions
    return tuple(l for l, v in zip(labels, valid.tolist()) if v), positions[valid]


def _limit_terms(model, settings, pose):
    """Range penalty residuals and their Jacobian, empty in project mode"""
    lower, upper = model.bounds
    if settings.limit_mode != "penalty":
        return pose.new_zeros(0), pose.new_zeros(0, pose.numel())
    weight = math.sqrt(settings.penalty_weight)
    violation = torch.clamp(pose - upper, min=0.) + torch.clamp(pose - lower, max=0.)
    active = (violation != 0).to(pose.dtype)
    return weight * violation, weight * torch.diag(active)


def _clamp_pose(model, pose):
    lower, upper = model.bounds
    return torch.minimum(torch.maximum(pose, lower), upper)


def _check_limits(model, settings, pose):
    if settings.limit_mode == "project":
        lower, upper = model.bounds
        if not bool(((pose >= lower) & (pose <= upper)).all()):
            raise ConvergenceError("projected pose left its coordinate ranges")


def inverse_kinematics_frame(model, scales, targets, init=None, settings=None):
    """Fit the coordinates of one frame to labelled 3D targets

    Parameters
    ----------
    model : SkeletalModel
        A valid model.
    scales : ScaleSet or torch.Tensor or None
        Segment scales, `None` for unit scales.
    targets : LabeledPoints or dict
        Target positions `(P, 3)` of model markers and/or keypoints, NaN entries are ignored.
    init : torch.Tensor or None
        Initial pose, the model default pose when omitted.
    settings : IKSettings or None
        Solver settings.

    Returns
    -------
    result : IKResult
        Fitted pose, marker RMS in meters, iteration count and convergence flag.
    """
    settings = IKSettings() if settings is None else settings
    labels, positions = _observed(*_as_targets(targets))
    if len(labels) == 0:
        raise MissingDataError("no targets to fit")
    init = model.default_pose() if init is None else torch.as_tensor(init, dtype=torch.float64)
    if init.shape != (model.num_coordinates,):
        raise DimensionError("initial pose has {} values, expected {}".format(init.numel(), model.num_coordinates))
    points = model.tables.resolve(labels)
    flat_targets = positions.reshape(-1)

    def residuals(pose):
        current, jac = evaluate_points(model, pose, scales, points)
        r_lim, J_lim = _limit_terms(model, settings, pose)
        return (torch.cat([current.reshape(-1) - flat_targets, r_lim]),
                torch.cat([jac["coordinates"], J_lim], dim=0))

    project = (lambda pose: _clamp_pose(model, pose)) if settings.limit_mode == "project" else None
    result = levenberg_marquardt(residuals, init, settings.max_iterations, settings.damping_init,
                                 settings.convergence_tol, project)
    _check_limits(model, settings, result.x)

    rms = _rms(model, result.x, scales, points, positions)
    if not result.converged:
        logger.warning("IK did not converge after %d iterations (rms %.4f m)", result.iterations, rms)
    return IKResult(result.x, rms, result.iterations, result.converged)


def _rms(model, pose, scales, points, positions):
    current, _ = evaluate_points(model, pose, scales, points, ())
    return float(((current - positions) ** 2).sum(dim=-1).mean().sqrt())


def fit_scales(model, static_markers, static_pose_guess=None, settings=None, bounds=DEFAULT_SCALE_BOUNDS,
               regularization=1e-6, max_iterations=None):
    """Jointly fit segment scales and a static pose to one frame of marker positions

    The reported `rms` is the root mean square over markers of the 3D distance between fitted and observed
    positions. With independent Gaussian noise of per-axis standard deviation `sigma` on `M` markers,
    the expected rms is close to `sigma * sqrt(3 - P / M)` where `P` counts the coordinates and scale factors, about
    `1.2 * sigma` on the generic model.

    Parameters
    ----------
    model : SkeletalModel
        A valid model.
    static_markers : LabeledPoints or dict
        Marker (or keypoint) positions `(P, 3)` of the static trial, NaN entries are ignored.
    static_pose_guess : torch.Tensor or None
        Initial pose, the model default pose when omitted.
    settings : IKSettings or None
        Solver settings, `max_iterations` is overridden by the argument of the same name when given.
    bounds : tuple of float
        Scale factors are clamped into this interval after every step.
    regularization : float
        Weight of the `(s - 1)` prior keeping unobservable scale factors at 1, 0 disables it.
    max_iterations : int or None
        Iteration budget of the joint solve.

    Returns
    -------
    result : ScaleFitResult
        Fitted scales and pose, marker RMS in meters, iteration count and convergence flag.
    """
    settings = IKSettings() if settings is None else settings
    labels, positions = _observed(*_as_targets(static_markers))
    if len(labels) == 0:
        raise MissingDataError("no static markers to fit")
    points = model.tables.resolve(labels)

    if regularization <= 0:
        counts = torch.bincount(points.segments, minlength=model.num_segments)
        for name, count in zip(model.segment_names, counts.tolist()):
            if count < 3:
                raise InsufficientMarkersError(
                    "segment {} has {} static markers, at least 3 are needed without scale regularization".format(
                        name, count))

    J, B = model.num_coordinates, model.num_segments
    pose0 = model.default_pose() if static_pose_guess is None else torch.as_tensor(static_pose_guess,
                                                                                    dtype=torch.float64)
    x0 = torch.cat([pose0, torch.ones(3 * B, dtype=torch.float64)])
    flat_targets = positions.reshape(-1)
    prior = math.sqrt(regularization) if regularization > 0 else 0.
    lo, hi = float(bounds[0]), float(bounds[1])

    def residuals(x):
        pose, scales = x[:J], x[J:].view(B, 3)
        current, jac = evaluate_points(model, pose, scales, points, ("coordinates", "scales"))
        r_lim, J_lim = _limit_terms(model, settings, pose)
        r = [current.reshape(-1) - flat_targets, r_lim]
        rows = [torch.cat([jac["coordinates"], jac["scales"]], dim=1),
                torch.cat([J_lim, J_lim.new_zeros(J_lim.size(0), 3 * B)], dim=1)]
        if prior > 0:
            r.append(prior * (x[J:] - 1))
            rows.append(torch.cat([x.new_zeros(3 * B, J), prior * torch.eye(3 * B, dtype=x.dtype)], dim=1))
        return torch.cat(r), torch.cat(rows, dim=0)

    def project(x):
        pose = _clamp_pose(model, x[:J]) if settings.limit_mode == "project" else x[:J]
        return torch.cat([pose, x[J:].clamp(lo, hi)])

    iterations = settings.max_iterations if max_iterations is None else max_iterations
    result = levenberg_marquardt(residuals, x0, iterations, settings.damping_init, settings.convergence_tol, project)
    pose, values = result.x[:J], result.x[J:].view(B, 3)
    _check_limits(model, settings, pose)

    rms = _rms(model, pose, values, points, positions)
    if not result.converged:
        logger.warning("scale fit did not converge after %d iterations (rms %.4f m)", result.iterations, rms)
    return ScaleFitResult(ScaleSet(values.clone(), model.segment_names), pose, rms, result.iterations,
                          result.converged)


def inverse_kinematics_sequence(model, scales, target_sequence, settings=None, frame_rate=60., init=None, tb=None):
    """Frame-by-frame inverse kinematics with warm start

    Frame 0 starts from `init` (the model default pose when omitted), every later frame from the solution of the
    previous one.

    Parameters
    ----------
    target_sequence : LabeledPoints
        Targets with positions of shape `(T, P, 3)`.
    tb : tensorboardX.SummaryWriter or None
        Receives per-frame RMS and iteration counts when given.

    Returns
    -------
    result : IKSequenceResult
        Motion with one pose per target frame, per-frame RMS, iteration counts and convergence flags.
    """
    settings = IKSettings() if settings is None else settings
    labels, positions = _as_targets(target_sequence)
    if positions.dim() != 3 or positions.size(0) == 0:
        raise MissingDataError("target sequence is empty")

    pose = model.default_pose() if init is None else torch.as_tensor(init, dtype=torch.float64)
    poses, rms, iterations, converged = [], [], [], []
    rms_meter = AverageMeter()
    for t in range(positions.size(0)):
        try:
            result = inverse_kinematics_frame(model, scales, LabeledPoints(labels, positions[t]), pose, settings)
        except (KinefitError, ValueError, RuntimeError) as e:
            raise FittingError(t, e) from e

        pose = result.pose
        poses.append(result.pose)
        rms.append(result.rms)
        iterations.append(result.iterations)
        converged.append(result.converged)
        rms_meter.update(result.rms)
        if tb is not None:
            tb.add_scalar("ik/rms", result.rms, t)
            tb.add_scalar("ik/iterations", result.iterations, t)

    logger.info("IK on %d frames: mean rms %.5f m, max rms %.5f m, %d not converged", len(poses), rms_meter.avg,
                rms_meter.max, converged.count(False))
    motion = MotionSequence(torch.stack(poses), frame_rate, model.coordinate_names)
    return IKSequenceResult(motion, torch.tensor(rms, dtype=torch.float64), torch.tensor(iterations),
                            torch.tensor(converged))


def butterworth_lowpass(series, cutoff_hz=6., sample_rate_hz=60., order=4):
    """Zero-phase Butterworth low-pass filter along the first axis

    The filter is applied forward and backward, squaring its single-pass magnitude response.

    Parameters
    ----------
    series : torch.Tensor or np.ndarray
        Samples `(T, ...)`, every trailing channel is filtered independently.
    cutoff_hz : float
        Cut-off frequency, strictly between 0 and the Nyquist frequency.
    sample_rate_hz : float
        Sampling rate.
    order : int
        Filter order.

    Returns
    -------
    filtered : torch.Tensor or np.ndarray
        Filtered samples, same type and shape as `series`.
    """
    if order < 1:
        raise FilterError("filter order must be at least 1, got {}".format(order))
    nyquist = sample_rate_hz / 2
    if not 0 < cutoff_hz < nyquist:
        raise FilterError("cut-off {} Hz must lie in (0, {}) Hz for a {} Hz signal".format(
            cutoff_hz, nyquist, sample_rate_hz))

    is_tensor = isinstance(series, torch.Tensor)
    values = series.detach().cpu().numpy() if is_tensor else np.asarray(series, dtype=np.float64)
    padlen = 3 * order
    if values.shape[0] <= padlen:
        raise FilterError("series of {} samples is too short for an order {} filter, need more than {}".format(
            values.shape[0], order, padlen))

    b, a = signal.butter(order, cutoff_hz / nyquist, "low", analog=False)
    filtered = signal.filtfilt(b, a, values, axis=0, padlen=padlen)
    return torch.from_numpy(np.ascontiguousarray(filtered)) if is_tensor else filtered


def _runs(missing):
    edges = np.diff(np.concatenate([[0], missing.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def fill_gaps(series, max_gap=5, labels=None):
    """Fill missing samples (NaN) of every channel

    Interior gaps of at most `max_gap` frames are linearly interpolated, gaps of at most `max_gap` frames at either end
    take the nearest observed value. Longer gaps raise `MissingDataError` naming their first frame.

    Parameters
    ----------
    series : torch.Tensor or np.ndarray
        Samples `(T, ...)`.
    max_gap : int
        Longest gap that is filled.
    labels : list of str or None
        Channel names used in error messages, one per trailing element.
    """
    is_tensor = isinstance(series, torch.Tensor)
    values = series.detach().cpu().numpy() if is_tensor else np.asarray(series, dtype=np.float64)
    shape = values.shape
    frame = pd.DataFrame(values.reshape(shape[0], -1))

    missing = frame.isna().to_numpy()
    worst = None
    for c in range(missing.shape[1]):
        for start, stop in _runs(missing[:, c]):
            if stop - start > max_gap and (worst is None or start < worst[0]):
                worst = (start, stop, c)
    if worst is not None:
        start, stop, c = worst
        name = labels[c] if labels is not None else "channel {}".format(c)
        if stop - start == shape[0]:
            raise MissingDataError("{} is never observed".format(name))
        raise MissingDataError("gap of {} frames in {} starting at frame {} exceeds {} frames".format(
            stop - start, name, start, max_gap))

    filled = frame.interpolate(method="linear", limit_area="inside").bfill().ffill().to_numpy().reshape(shape)
    return torch.from_numpy(filled) if is_tensor else filled


@contextmanager
def _stage(name):
    try:
        yield
    except Exception as e:
        if not hasattr(e, "stage"):
            e.stage = name
        logger.error("stage %s failed: %s", name, e)
        raise


def reconstruct_sequence(model, cam_a, cam_b, keypoints_2d_a, keypoints_2d_b, static_frame_index=None, settings=None,
                         frame_rate=60., tb=None):
    """Multi-step markerless reconstruction from two views

    Triangulate every labelled observation, drop those below the confidence threshold, fill short gaps, low-pass the
    3D trajectories, fit segment scales on the static frame and run inverse kinematics over the whole sequence.

    Parameters
    ----------
    model : SkeletalModel
        Model whose marker or keypoint labels name the 2D observations.
    cam_a, cam_b : Camera
        The two views.
    keypoints_2d_a, keypoints_2d_b : KeypointTrack
        Frame-aligned observations with the same labels in both views.
    static_frame_index : int or None
        Frame used for scale fitting, `settings.static_frame` when omitted.
    settings : ReconstructionSettings or None
        Pipeline settings.
    frame_rate : float
        Sampling rate of the observations.
    tb : tensorboardX.SummaryWriter or None
        Receives per-frame diagnostics when given.

    Returns
    -------
    scales : ScaleSet
        Fitted segment scales.
    motion : MotionSequence
        Fitted coordinates, one frame per observation frame.
    report : dict
        Per-stage residuals and counts.
    """
    settings = ReconstructionSettings() if settings is None else settings
    static = settings.static_frame if static_frame_index is None else static_frame_index
    track_a, track_b = keypoints_2d_a, keypoints_2d_b
    if track_a.labels != track_b.labels:
        raise DimensionError("the two views observe different labels")
    if track_a.num_frames != track_b.num_frames:
        raise DimensionError("the two views have {} and {} frames".format(track_a.num_frames, track_b.num_frames))
    T, labels = track_a.num_frames, track_a.labels
    if not 0 <= static < T:
        raise MissingDataError("static frame {} is outside the {} observed frames".format(static, T))
    for label in labels:
        if not model.tables.has_label(label):
            raise KeyError("observation label {} is not a marker or keypoint of model {}".format(label, model.name))

    with _stage("triangulation"):
        threshold = settings.confidence_threshold
        valid = (track_a.confidence >= threshold) & (track_b.confidence >= threshold) & \
            torch.isfinite(track_a.uv).all(dim=-1) & torch.isfinite(track_b.uv).all(dim=-1)
        empty = (~valid.any(dim=1)).nonzero()
        if empty.numel() > 0:
            raise MissingDataError("frame {} has no observation with confidence >= {}".format(
                int(empty[0]), threshold))

        points = torch.full((T, len(labels), 3), math.nan, dtype=torch.float64)
        residuals = torch.full((T, len(labels)), math.nan, dtype=torch.float64)
        points[valid], residuals[valid] = triangulate_points(cam_a, cam_b, track_a.uv[valid], track_b.uv[valid])
        dropped = int((~valid).sum())
        logger.info("triangulated %d observations over %d frames, dropped %d below confidence %.2f",
                    int(valid.sum()), T, dropped, threshold)

    with _stage("gap filling"):
        channel_labels = ["{}.{}".format(l, axis) for l in labels for axis in "xyz"]
        points = fill_gaps(points, settings.max_gap, channel_labels)

    with _stage("filtering"):
        if settings.filter_cutoff_hz:
            points = butterworth_lowpass(points, settings.filter_cutoff_hz, frame_rate, settings.filter_order)
            logger.info("filtered trajectories at %.1f Hz (order %d)", settings.filter_cutoff_hz,
                        settings.filter_order)

    with _stage("scaling"):
        scale_fit = fit_scales(model, LabeledPoints(labels, points[static]), None, settings.ik,
                               settings.scale_bounds, settings.scale_regularization, settings.scale_max_iterations)
        logger.info("fitted scales on frame %d: rms %.5f m after %d iterations", static, scale_fit.rms,
                    scale_fit.iterations)
        if tb is not None:
            tb.add_scalar("scale/rms", scale_fit.rms, 0)

    with _stage("inverse kinematics"):
        ik = inverse_kinematics_sequence(model, scale_fit.scales, LabeledPoints(labels, points), settings.ik,
                                         frame_rate, tb=tb)

    report = {
        "frames": T,
        "frame_rate_hz": float(frame_rate),
        "static_frame": int(static),
        "confidence_threshold": float(threshold),
        "triangulation": {
            "observations": int(valid.sum()),
            "dropped": dropped,
            "mean_residual_px": float(residuals[valid].mean()),
            "max_residual_px": float(residuals[valid].max())
        },
        "filter": {
            "cutoff_hz": float(settings.filter_cutoff_hz) if settings.filter_cutoff_hz else None,
            "order": int(settings.filter_order)
        },
        "scale": {
            "rms_m": scale_fit.rms,
            "iterations": scale_fit.iterations,
            "converged": scale_fit.converged
        },
        "ik": {
            "mean_rms_m": float(ik.rms.mean()),
            "max_rms_m": float(ik.rms.max()),
            "mean_iterations": float(ik.iterations.to(torch.float64).mean()),
            "nonconverged_frames": int((~ik.converged).sum())
        }
    }
    return scale_fit.scales, ik.motion, report
