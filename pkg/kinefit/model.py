import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from os import path
from typing import Optional, Tuple

import torch

from .errors import DimensionError, ModelParseError, ModelValidationError

ROTATION = "rotation"
TRANSLATION = "translation"
FREE = "free"
CONSTRAINED = "constrained"

_AXIS_TOL = 1e-9
_MAX_JOINT_COORDINATES = 6

DEFAULT_SCALE_BOUNDS = (0.5, 2.0)


def _to_degrees(value):
    # Rounded so that saving a loaded model reproduces its file
    return round(math.degrees(value), 9)


@dataclass(frozen=True)
class Coordinate:
    """A scalar degree of freedom of the skeletal model

    Rotations are stored in radians and translations in meters, degrees only appear in files.
    """
    name: str
    kind: str
    constraint: str
    range: Optional[Tuple[float, float]] = None
    default_value: float = 0.

    @property
    def is_rotation(self):
        return self.kind == ROTATION

    @property
    def is_constrained(self):
        return self.constraint == CONSTRAINED


@dataclass(frozen=True)
class BodySegment:
    """A rigid body of the skeleton

    `axes` holds one unit vector per entry of `coordinates`: the rotation axis of a rotational coordinate, or the
    translation direction (in the parent frame) of a translational one.
    """
    name: str
    parent: Optional[str]
    joint_offset: Tuple[float, float, float]
    mass_center: Tuple[float, float, float]
    coordinates: Tuple[str, ...] = ()
    axes: Tuple[Tuple[float, float, float], ...] = ()


@dataclass(frozen=True)
class Marker:
    name: str
    segment: str
    offset: Tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class SkeletalModel:
    """Articulated skeletal model

    Segments form a rooted tree, `coordinates` fixes the order of the global coordinate vector and keypoints are
    derived: all joint centers in segment order followed by all mass centers in segment order. Instances are never
    mutated after construction and can be shared freely between threads.
    """
    name: str
    segments: Tuple[BodySegment, ...]
    coordinates: Tuple[Coordinate, ...]
    markers: Tuple[Marker, ...] = ()
    declared: dict = field(default_factory=dict)

    @cached_property
    def coordinate_names(self):
        return tuple(c.name for c in self.coordinates)

    @cached_property
    def segment_names(self):
        return tuple(s.name for s in self.segments)

    @cached_property
    def marker_names(self):
        return tuple(m.name for m in self.markers)

    @cached_property
    def keypoint_names(self):
        return tuple("{}.joint".format(s) for s in self.segment_names) + \
            tuple("{}.com".format(s) for s in self.segment_names)

    @property
    def num_coordinates(self):
        return len(self.coordinates)

    @property
    def num_segments(self):
        return len(self.segments)

    @property
    def num_keypoints(self):
        return 2 * len(self.segments)

    @cached_property
    def root(self):
        """Index of the root segment"""
        roots = [i for i, s in enumerate(self.segments) if s.parent is None]
        if len(roots) != 1:
            raise ModelValidationError(["model must have exactly one root segment, found {}".format(len(roots))])
        return roots[0]

    def coordinate_index(self, name):
        try:
            return self.coordinate_names.index(name)
        except ValueError:
            raise KeyError("unknown coordinate {}".format(name))

    def segment_index(self, name):
        try:
            return self.segment_names.index(name)
        except ValueError:
            raise KeyError("unknown segment {}".format(name))

    @cached_property
    def rotational(self):
        return torch.tensor([c.is_rotation for c in self.coordinates], dtype=torch.bool)

    @cached_property
    def bounds(self):
        """Lower and upper bounds of every coordinate, infinite for free ones"""
        lower = torch.full((self.num_coordinates,), -math.inf, dtype=torch.float64)
        upper = torch.full((self.num_coordinates,), math.inf, dtype=torch.float64)
        for i, c in enumerate(self.coordinates):
            if c.is_constrained:
                lower[i], upper[i] = c.range
        return lower, upper

    @cached_property
    def ranges(self):
        """Range matrix `(n, 2)` of the constrained rotational coordinates, in `free_constrained_split` order"""
        _, constrained = free_constrained_split(self)
        return torch.tensor([self.coordinates[i].range for i in constrained], dtype=torch.float64).view(-1, 2)

    def default_pose(self):
        return torch.tensor([c.default_value for c in self.coordinates], dtype=torch.float64)

    @cached_property
    def tables(self):
        """Precomputed kinematic tables, only available on valid models"""
        from .kinematics import KinematicTables
        report = validate_model(self)
        if report:
            raise ModelValidationError(report)
        return KinematicTables(self)

    def to_dict(self):
        coordinates = []
        for c in self.coordinates:
            to_file = _to_degrees if c.is_rotation else float
            entry = {"name": c.name, "kind": c.kind, "class": c.constraint, "default": to_file(c.default_value)}
            if c.range is not None:
                entry["range"] = [to_file(c.range[0]), to_file(c.range[1])]
            coordinates.append(entry)

        return {
            "name": self.name,
            "declared": dict(self.declared),
            "coordinates": coordinates,
            "segments": [{
                "name": s.name,
                "parent": s.parent,
                "offset": list(s.joint_offset),
                "mass_center": list(s.mass_center),
                "coordinates": list(s.coordinates),
                "axes": [list(a) for a in s.axes]
            } for s in self.segments],
            "markers": [{"name": m.name, "segment": m.segment, "offset": list(m.offset)} for m in self.markers]
        }


@dataclass(frozen=True, eq=False)
class ScaleSet:
    """Per-segment 3-axis scale factors, rows ordered as the model segments"""
    values: torch.Tensor
    segment_names: Tuple[str, ...]

    def __post_init__(self):
        values = torch.as_tensor(self.values, dtype=torch.float64)
        if values.dim() != 2 or values.size(1) != 3 or values.size(0) != len(self.segment_names):
            raise DimensionError("scale set must have shape ({}, 3), got {}".format(
                len(self.segment_names), tuple(values.shape)))
        object.__setattr__(self, "values", values)

    @classmethod
    def unit(cls, model):
        return cls(torch.ones(model.num_segments, 3, dtype=torch.float64), model.segment_names)

    def __len__(self):
        return len(self.segment_names)


def _vec3(value, field_name):
    try:
        vec = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ModelParseError("expected a list of three numbers", field=field_name)
    if len(vec) != 3:
        raise ModelParseError("expected a list of three numbers, got {}".format(len(vec)), field=field_name)
    return vec


def _get(entry, key, field_name, default=KeyError):
    if not isinstance(entry, dict):
        raise ModelParseError("expected an object", field=field_name)
    if key not in entry:
        if default is KeyError:
            raise ModelParseError("missing required field", field="{}.{}".format(field_name, key))
        return default
    return entry[key]


def model_from_dict(data):
    """Build a (not yet validated) `SkeletalModel` from the parsed model document"""
    coordinates = []
    for i, entry in enumerate(_get(data, "coordinates", "model")):
        where = "coordinates[{}]".format(i)
        kind = _get(entry, "kind", where)
        from_file = math.radians if kind == ROTATION else float
        raw_range = _get(entry, "range", where, None)
        if raw_range is not None:
            if not isinstance(raw_range, (list, tuple)) or len(raw_range) != 2:
                raise ModelParseError("expected [min, max]", field=where + ".range")
            raw_range = (from_file(float(raw_range[0])), from_file(float(raw_range[1])))
        coordinates.append(Coordinate(
            name=str(_get(entry, "name", where)),
            kind=kind,
            constraint=_get(entry, "class", where),
            range=raw_range,
            default_value=from_file(float(_get(entry, "default", where, 0.)))))

    segments = []
    for i, entry in enumerate(_get(data, "segments", "model")):
        where = "segments[{}]".format(i)
        coords = tuple(str(c) for c in _get(entry, "coordinates", where, []))
        axes = tuple(_vec3(a, "{}.axes[{}]".format(where, j)) for j, a in enumerate(_get(entry, "axes", where, [])))
        segments.append(BodySegment(
            name=str(_get(entry, "name", where)),
            parent=_get(entry, "parent", where, None),
            joint_offset=_vec3(_get(entry, "offset", where, [0., 0., 0.]), where + ".offset"),
            mass_center=_vec3(_get(entry, "mass_center", where, [0., 0., 0.]), where + ".mass_center"),
            coordinates=coords,
            axes=axes))

    markers = []
    for i, entry in enumerate(_get(data, "markers", "model", [])):
        where = "markers[{}]".format(i)
        markers.append(Marker(
            name=str(_get(entry, "name", where)),
            segment=str(_get(entry, "segment", where)),
            offset=_vec3(_get(entry, "offset", where), where + ".offset")))

    return SkeletalModel(
        name=str(_get(data, "name", "model", "model")),
        segments=tuple(segments),
        coordinates=tuple(coordinates),
        markers=tuple(markers),
        declared=dict(_get(data, "declared", "model", {})))


def load_model(model_file, validate=True):
    """Load a skeletal model file

    Parameters
    ----------
    model_file : str
        Path to a `.kmodel` document (see `docs/model_format.md`).
    validate : bool
        If `True` raise `ModelValidationError` naming the first violated invariant.

    Returns
    -------
    model : SkeletalModel
        The loaded model, coordinate order matches the file order.
    """
    with open(model_file, "r") as fd:
        text = fd.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelParseError(e.msg, line=e.lineno)

    model = model_from_dict(data)
    if validate:
        report = validate_model(model)
        if report:
            raise ModelValidationError(report)
    return model


def save_model(model, model_file):
    with open(model_file, "w") as fd:
        json.dump(model.to_dict(), fd, indent=2)
        fd.write("\n")


def generic_model_path():
    return path.join(path.dirname(path.abspath(__file__)), "data", "generic_fullbody.kmodel")


def load_generic_model():
    """The shipped full-body model: 36 coordinates, 22 segments, 44 keypoints"""
    return load_model(generic_model_path())


def _check_coordinates(model, report):
    seen = set()
    for c in model.coordinates:
        if c.name in seen:
            report.append("coordinate '{}' is defined more than once".format(c.name))
        seen.add(c.name)
        if c.kind not in (ROTATION, TRANSLATION):
            report.append("coordinate '{}' has unknown kind '{}'".format(c.name, c.kind))
        if c.constraint == CONSTRAINED:
            if c.range is None:
                report.append("constrained coordinate '{}' has no range".format(c.name))
            elif not c.range[0] < c.range[1]:
                report.append("constrained coordinate '{}' has an empty range [{}, {}]".format(
                    c.name, c.range[0], c.range[1]))
        elif c.constraint == FREE:
            if c.range is not None:
                report.append("free coordinate '{}' must not declare a range".format(c.name))
        else:
            report.append("coordinate '{}' has unknown class '{}'".format(c.name, c.constraint))
        if not math.isfinite(c.default_value):
            report.append("coordinate '{}' has a non-finite default value".format(c.name))


def _check_tree(model, report):
    names = [s.name for s in model.segments]
    if len(set(names)) != len(names):
        report.append("segment names are not unique")
    by_name = {s.name: s for s in model.segments}

    roots = [s.name for s in model.segments if s.parent is None]
    if len(roots) != 1:
        report.append("model must have exactly one root segment, found {}".format(len(roots)))

    for s in model.segments:
        if s.parent is not None and s.parent not in by_name:
            report.append("segment '{}' has unknown parent '{}'".format(s.name, s.parent))

    # Follow parent links, a walk longer than the segment count is a cycle
    in_cycle = set()
    for s in model.segments:
        visited = []
        current = s
        while current is not None and current.parent is not None and current.name not in in_cycle:
            if current.name in visited:
                cycle = visited[visited.index(current.name):]
                in_cycle.update(cycle)
                report.append("cycle detected through segments {}".format(" -> ".join(cycle + [current.name])))
                break
            visited.append(current.name)
            current = by_name.get(current.parent)


def _check_joints(model, report):
    kinds = {c.name: c.kind for c in model.coordinates}
    owners = {}
    for s in model.segments:
        if len(s.coordinates) > _MAX_JOINT_COORDINATES:
            report.append("segment '{}' has {} joint coordinates, at most {} allowed".format(
                s.name, len(s.coordinates), _MAX_JOINT_COORDINATES))
        if len(s.axes) != len(s.coordinates):
            report.append("segment '{}' declares {} axes for {} coordinates".format(
                s.name, len(s.axes), len(s.coordinates)))
        for j, name in enumerate(s.coordinates):
            owners.setdefault(name, []).append(s.name)
            if name not in kinds:
                report.append("segment '{}' references unknown coordinate '{}'".format(s.name, name))
            elif kinds[name] == TRANSLATION and s.parent is not None:
                report.append("translation '{}' is only allowed on the root segment, found on '{}'".format(
                    name, s.name))
        for j, axis in enumerate(s.axes):
            norm = math.sqrt(sum(a * a for a in axis))
            if abs(norm - 1.) > _AXIS_TOL:
                report.append("segment '{}' axis {} {} is not unit length (norm {:.12g})".format(
                    s.name, j, list(axis), norm))

    for c in model.coordinates:
        count = len(owners.get(c.name, []))
        if count != 1:
            report.append("coordinate '{}' is referenced by {} segments, expected exactly one".format(c.name, count))


def _check_markers(model, report):
    segments = set(model.segment_names)
    seen = set()
    for m in model.markers:
        if m.name in seen:
            report.append("marker '{}' is defined more than once".format(m.name))
        seen.add(m.name)
        if m.segment not in segments:
            report.append("marker '{}' is attached to unknown segment '{}'".format(m.name, m.segment))
        if not all(math.isfinite(v) for v in m.offset):
            report.append("marker '{}' has a non-finite offset".format(m.name))


def _check_declared(model, report):
    free, _ = free_constrained_split(model)
    actual = {
        "coordinates": model.num_coordinates,
        "segments": model.num_segments,
        "keypoints": model.num_keypoints,
        "markers": len(model.markers),
        "free_rotational": len(free)
    }
    for key, value in sorted(model.declared.items()):
        if key not in actual:
            report.append("unknown declared count '{}'".format(key))
        elif int(value) != actual[key]:
            report.append("declared {} count is {} but the model has {}".format(key, value, actual[key]))


def validate_model(model):
    """Check every model invariant

    Returns
    -------
    report : list of str
        One entry per violation, empty iff the model is valid.
    """
    report = []
    _check_coordinates(model, report)
    _check_tree(model, report)
    _check_joints(model, report)
    _check_markers(model, report)
    _check_declared(model, report)
    return report


def validate_scales(scales, bounds=DEFAULT_SCALE_BOUNDS):
    """Plausibility gate on a scale set, returns a list of violations"""
    values = scales.values if isinstance(scales, ScaleSet) else torch.as_tensor(scales, dtype=torch.float64)
    names = scales.segment_names if isinstance(scales, ScaleSet) else range(values.size(0))
    report = []
    for name, row in zip(names, values):
        for axis, v in zip("xyz", row.tolist()):
            if not math.isfinite(v) or v <= 0:
                report.append("scale {}.{} = {} is not strictly positive".format(name, axis, v))
            elif not bounds[0] <= v <= bounds[1]:
                report.append("scale {}.{} = {:.6g} outside [{}, {}]".format(name, axis, v, bounds[0], bounds[1]))
    return report


def free_constrained_split(model):
    """Split the rotational coordinates into free and range-limited ones

    Returns
    -------
    free : tuple of int
        Indices of the free rotational coordinates.
    constrained : tuple of int
        Indices of the constrained rotational coordinates.
    """
    free = tuple(i for i, c in enumerate(model.coordinates) if c.is_rotation and c.constraint == FREE)
    constrained = tuple(i for i, c in enumerate(model.coordinates) if c.is_rotation and c.constraint == CONSTRAINED)
    return free, constrained
