from dataclasses import dataclass
from typing import NamedTuple, Tuple

import torch
import torch.autograd as autograd
from torch.autograd.function import once_differentiable

from .errors import DimensionError
from .model import ScaleSet

__all__ = [
    "PointSet", "KinematicTables", "MotionSequence", "Chain", "ForwardKinematics",
    "prepare_inputs", "chain", "forward_kinematics", "marker_positions", "point_positions", "evaluate_points",
    "jacobian_points", "jacobian_keypoints", "root_relative"
]


def _skew(v):
    x, y, z = v
    return torch.tensor([[0., -z, y], [z, 0., -x], [-y, x, 0.]], dtype=torch.float64)


def _rodrigues(skew, skew2, angle):
    sin = torch.sin(angle)[..., None, None]
    cos = torch.cos(angle)[..., None, None]
    return torch.eye(3, dtype=angle.dtype) + sin * skew + (1 - cos) * skew2


class _Joint(NamedTuple):
    index: int
    rotation: bool
    axis: torch.Tensor
    skew: torch.Tensor
    skew2: torch.Tensor


@dataclass(frozen=True, eq=False)
class PointSet:
    """Labelled points rigidly attached to model segments

    Every point is stored as `(segment, local offset)` and placed at `o_seg + R_seg (s_seg * offset)`. `levers[p, b]`
    is the local vector that the scale of segment `b` multiplies on the way to point `p` (zero when `b` is not on
    the path), `moves[p, q]` tells whether coordinate `q` moves point `p`.
    """
    labels: Tuple[str, ...]
    segments: torch.Tensor
    offsets: torch.Tensor
    levers: torch.Tensor
    moves: torch.Tensor

    def __len__(self):
        return len(self.labels)


class KinematicTables(object):
    """Index tables shared by every kinematic evaluation of a model"""

    def __init__(self, model):
        self.num_coordinates = model.num_coordinates
        self.num_segments = model.num_segments
        self.root = model.root

        index = {name: i for i, name in enumerate(model.segment_names)}
        self.parents = [index[s.parent] if s.parent is not None else -1 for s in model.segments]
        self.order = self._topological_order()
        self.offsets = torch.tensor([s.joint_offset for s in model.segments], dtype=torch.float64)
        self.mass_centers = torch.tensor([s.mass_center for s in model.segments], dtype=torch.float64)
        self.rotational = model.rotational.clone()

        self.joints = []
        self.coordinate_segment = torch.empty(self.num_coordinates, dtype=torch.long)
        for b, segment in enumerate(model.segments):
            joints = []
            for name, axis in zip(segment.coordinates, segment.axes):
                q = model.coordinate_index(name)
                skew = _skew(axis)
                joints.append(_Joint(q, model.coordinates[q].is_rotation, torch.tensor(axis, dtype=torch.float64),
                                     skew, skew @ skew))
                self.coordinate_segment[q] = b
            self.joints.append(joints)

        # descends[a, b]: segment a lies in the subtree of b, next_on_path[b, a]: child of b leading to a
        B = self.num_segments
        self.descends = torch.zeros(B, B, dtype=torch.bool)
        self.next_on_path = torch.full((B, B), -1, dtype=torch.long)
        for a in range(B):
            self.descends[a, a] = True
            child, current = a, self.parents[a]
            while current >= 0:
                self.descends[a, current] = True
                self.next_on_path[current, a] = child
                child, current = current, self.parents[current]

        self._labels = {}
        for b, name in enumerate(model.segment_names):
            if self.parents[b] < 0:
                self._labels[name + ".joint"] = (b, (0., 0., 0.))
            else:
                self._labels[name + ".joint"] = (self.parents[b], model.segments[b].joint_offset)
        for b, name in enumerate(model.segment_names):
            self._labels[name + ".com"] = (b, model.segments[b].mass_center)
        for marker in model.markers:
            self._labels[marker.name] = (index[marker.segment], marker.offset)

        self._cache = {}
        self.keypoints = self.resolve(model.keypoint_names)
        self.markers = self.resolve(model.marker_names)

    def _topological_order(self):
        children = [[] for _ in self.parents]
        for b, p in enumerate(self.parents):
            if p >= 0:
                children[p].append(b)
        order, stack = [], [self.root]
        while stack:
            b = stack.pop()
            order.append(b)
            stack.extend(reversed(children[b]))
        return order

    def has_label(self, label):
        return label in self._labels

    def resolve(self, labels):
        """Build (or fetch from cache) the point set of a list of marker and keypoint labels"""
        labels = tuple(labels)
        if labels in self._cache:
            return self._cache[labels]

        for label in labels:
            if label not in self._labels:
                raise KeyError("unknown point label {}".format(label))
        segments = torch.tensor([self._labels[l][0] for l in labels], dtype=torch.long)
        offsets = torch.tensor([self._labels[l][1] for l in labels], dtype=torch.float64).view(-1, 3)

        nxt = self.next_on_path[:, segments].t()
        levers = torch.where((nxt >= 0)[..., None], self.offsets[nxt.clamp(min=0)],
                             torch.zeros((), dtype=torch.float64))
        levers[torch.arange(len(labels)), segments] = offsets
        moves = self.descends[segments][:, self.coordinate_segment]

        points = PointSet(labels, segments, offsets, levers, moves)
        self._cache[labels] = points
        return points


@dataclass(frozen=True, eq=False)
class MotionSequence:
    """Coordinate values over time

    Parameters
    ----------
    values : torch.Tensor
        Tensor of shape `(T, J)`, radians for rotations and meters for translations.
    frame_rate : float
        Sampling rate in Hz.
    coordinate_names : tuple of str
        Column names, in model coordinate order.
    """
    values: torch.Tensor
    frame_rate: float
    coordinate_names: Tuple[str, ...]

    def __post_init__(self):
        values = torch.as_tensor(self.values, dtype=torch.float64)
        if values.dim() != 2 or values.size(1) != len(self.coordinate_names):
            raise DimensionError("motion values must have shape (T, {}), got {}".format(
                len(self.coordinate_names), tuple(values.shape)))
        if not self.frame_rate > 0:
            raise ValueError("frame rate must be positive, got {}".format(self.frame_rate))
        if not torch.isfinite(values).all():
            raise ValueError("motion contains non-finite values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "frame_rate", float(self.frame_rate))
        object.__setattr__(self, "coordinate_names", tuple(self.coordinate_names))

    @classmethod
    def constant(cls, model, pose, num_frames, frame_rate):
        pose = torch.as_tensor(pose, dtype=torch.float64)
        return cls(pose.expand(num_frames, -1).clone(), frame_rate, model.coordinate_names)

    def __len__(self):
        return self.values.size(0)

    @property
    def num_frames(self):
        return self.values.size(0)

    def times(self):
        return torch.arange(self.num_frames, dtype=torch.float64) / self.frame_rate

    def select(self, names):
        index = [self.coordinate_names.index(n) for n in names]
        return self.values[:, index]

    def check_model(self, model):
        if self.coordinate_names != model.coordinate_names:
            raise DimensionError("motion coordinates do not match model {} ({} vs {} columns)".format(
                model.name, len(self.coordinate_names), model.num_coordinates))

    def slice(self, start, stop):
        return MotionSequence(self.values[start:stop], self.frame_rate, self.coordinate_names)

    def windows(self, length=64, stride=None):
        """Split into fixed-length windows, a trailing partial window is dropped"""
        if length < 1:
            raise ValueError("window length must be positive")
        stride = length if stride is None else stride
        return [self.slice(start, start + length) for start in range(0, self.num_frames - length + 1, stride)]


class Chain(NamedTuple):
    """World-frame state of the kinematic tree

    origins `(..., B, 3)`, rotations `(..., B, 3, 3)`, axes `(..., J, 3)` (world axis of every coordinate) and
    pivots `(..., J, 3)` (the joint center every rotational coordinate turns about).
    """
    origins: torch.Tensor
    rotations: torch.Tensor
    axes: torch.Tensor
    pivots: torch.Tensor


def prepare_inputs(model, pose, scales=None):
    """Check a pose / scale pair against a model and broadcast them to a common batch shape"""
    pose = torch.as_tensor(pose, dtype=torch.float64)
    if pose.dim() == 0 or pose.size(-1) != model.num_coordinates:
        raise DimensionError("pose has {} values but model {} has {} coordinates".format(
            pose.size(-1) if pose.dim() > 0 else 1, model.name, model.num_coordinates))
    if not torch.isfinite(pose).all():
        raise ValueError("pose contains non-finite values")

    if scales is None:
        scales = torch.ones(model.num_segments, 3, dtype=torch.float64)
    elif isinstance(scales, ScaleSet):
        scales = scales.values
    scales = torch.as_tensor(scales, dtype=torch.float64)
    if scales.dim() < 2 or tuple(scales.shape[-2:]) != (model.num_segments, 3):
        raise DimensionError("scales must have shape (..., {}, 3), got {}".format(
            model.num_segments, tuple(scales.shape)))
    return pose, scales


def _expand(pose, scales):
    batch = torch.broadcast_shapes(pose.shape[:-1], scales.shape[:-2])
    return pose.expand(*batch, pose.size(-1)), scales.expand(*batch, *scales.shape[-2:])


def _chain(tables, pose, scales):
    batch = pose.shape[:-1]
    eye = torch.eye(3, dtype=torch.float64).expand(*batch, 3, 3)
    origins = [None] * tables.num_segments
    rotations = [None] * tables.num_segments
    axes = [None] * tables.num_coordinates
    pivots = [None] * tables.num_coordinates

    for b in tables.order:
        p = tables.parents[b]
        if p < 0:
            origin = tables.offsets[b].expand(*batch, 3)
            rotation = eye
        else:
            local = scales[..., p, :] * tables.offsets[b]
            origin = origins[p] + (rotations[p] @ local[..., None])[..., 0]
            rotation = rotations[p]

        # Translations act in the parent frame before any rotation of the same joint
        for joint in tables.joints[b]:
            if not joint.rotation:
                origin = origin + pose[..., joint.index, None] * joint.axis
                axes[joint.index] = joint.axis.expand(*batch, 3)
        for joint in tables.joints[b]:
            if joint.rotation:
                axes[joint.index] = (rotation @ joint.axis)
                rotation = rotation @ _rodrigues(joint.skew, joint.skew2, pose[..., joint.index])
            pivots[joint.index] = origin

        origins[b] = origin
        rotations[b] = rotation

    empty = pose.new_zeros(*batch, 0, 3)
    return Chain(
        torch.stack(origins, dim=-2),
        torch.stack(rotations, dim=-3),
        torch.stack(axes, dim=-2) if axes else empty,
        torch.stack(pivots, dim=-2) if pivots else empty)


def _positions(chain, scales, points):
    seg = points.segments
    local = scales[..., seg, :] * points.offsets
    return chain.origins[..., seg, :] + (chain.rotations[..., seg, :, :] @ local[..., None])[..., 0]


def _coordinate_jacobian(tables, chain, points, positions):
    """Derivatives `(..., P, 3, J)` of the point positions with respect to the coordinates"""
    lever = positions[..., :, None, :] - chain.pivots[..., None, :, :]
    axes = chain.axes[..., None, :, :].expand_as(lever)
    columns = torch.where(tables.rotational[:, None], torch.cross(axes, lever, dim=-1), axes)
    columns = columns * points.moves[..., None]
    return columns.transpose(-1, -2)


def _scale_jacobian(chain, points):
    """Derivatives `(..., P, 3, B, 3)` of the point positions with respect to the scale factors"""
    return torch.einsum("...bij,pbj->...pibj", chain.rotations, points.levers)


def chain(model, pose, scales=None):
    pose, scales = _expand(*prepare_inputs(model, pose, scales))
    return _chain(model.tables, pose, scales)


class ForwardKinematics(autograd.Function):
    @staticmethod
    def forward(ctx, pose, scales, tables, points):
        ctx.pose_shape = pose.shape
        ctx.scales_shape = scales.shape
        ctx.tables = tables
        ctx.points = points

        pose, scales = _expand(pose, scales)
        ctx.chain = _chain(tables, pose, scales)
        positions = _positions(ctx.chain, scales, points)

        ctx.save_for_backward(positions)
        return positions

    @staticmethod
    @once_differentiable
    def backward(ctx, dy):
        positions, = ctx.saved_tensors

        if ctx.needs_input_grad[0]:
            jac = _coordinate_jacobian(ctx.tables, ctx.chain, ctx.points, positions)
            dpose = torch.einsum("...pi,...piq->...q", dy, jac).sum_to_size(ctx.pose_shape)
        else:
            dpose = None

        if ctx.needs_input_grad[1]:
            dscales = torch.einsum("...pi,...bij,pbj->...bj", dy, ctx.chain.rotations, ctx.points.levers)
            dscales = dscales.sum_to_size(ctx.scales_shape)
        else:
            dscales = None

        return dpose, dscales, None, None


def _resolve(model, points):
    if isinstance(points, PointSet):
        return points
    return model.tables.resolve(points)


def point_positions(model, pose, scales, points):
    """World positions `(..., P, 3)` of arbitrary marker / keypoint labels"""
    pose, scales = prepare_inputs(model, pose, scales)
    return ForwardKinematics.apply(pose, scales, model.tables, _resolve(model, points))


def forward_kinematics(model, pose, scales=None):
    """Keypoint positions of a model

    Parameters
    ----------
    model : SkeletalModel
        A valid skeletal model.
    pose : torch.Tensor
        Coordinate values of shape `(..., J)`.
    scales : ScaleSet or torch.Tensor or None
        Scale factors of shape `(..., B, 3)`, `None` for unit scales.

    Returns
    -------
    keypoints : torch.Tensor
        World positions of shape `(..., K, 3)` in meters, ordered as `model.keypoint_names`.
    """
    return point_positions(model, pose, scales, model.tables.keypoints)


def marker_positions(model, pose, scales=None):
    """World positions `(..., M, 3)` of the model markers, ordered as `model.marker_names`"""
    return point_positions(model, pose, scales, model.tables.markers)


def evaluate_points(model, pose, scales, points, wrt=("coordinates",)):
    """Point positions and their Jacobians from a single traversal of the tree

    Returns
    -------
    positions : torch.Tensor
        World positions `(..., P, 3)`.
    jacobians : dict
        Flattened Jacobians by target: `(..., P * 3, J)` for `"coordinates"`, `(..., P * 3, B * 3)` for `"scales"`.
        Rows are point-major (`x, y, z` of the first point first), scale columns segment-major.
    """
    points = _resolve(model, points)
    pose, scales = _expand(*prepare_inputs(model, pose, scales))
    chain_ = _chain(model.tables, pose, scales)
    positions = _positions(chain_, scales, points)

    jacobians = {}
    for target in wrt:
        if target == "coordinates":
            jac = _coordinate_jacobian(model.tables, chain_, points, positions)
            jacobians[target] = jac.reshape(*jac.shape[:-3], len(points) * 3, model.num_coordinates)
        elif target == "scales":
            jac = _scale_jacobian(chain_, points)
            jacobians[target] = jac.reshape(*jac.shape[:-4], len(points) * 3, model.num_segments * 3)
        else:
            raise ValueError("Unknown derivative target {}".format(target))
    return positions, jacobians


def jacobian_points(model, pose, scales, points, wrt="coordinates"):
    """Analytic Jacobian of flattened point positions, see `evaluate_points`"""
    return evaluate_points(model, pose, scales, points, (wrt,))[1][wrt]


def jacobian_keypoints(model, pose, scales=None, wrt="coordinates"):
    return jacobian_points(model, pose, scales, model.tables.keypoints, wrt)


def root_relative(keypoints, model):
    """Express keypoints relative to the root joint center, which becomes the origin"""
    keypoints = torch.as_tensor(keypoints, dtype=torch.float64)
    if keypoints.dim() < 2 or tuple(keypoints.shape[-2:]) != (model.num_keypoints, 3):
        raise DimensionError("keypoints must have shape (..., {}, 3), got {}".format(
            model.num_keypoints, tuple(keypoints.shape)))
    return keypoints - keypoints[..., model.root:model.root + 1, :]
