import logging
import math
from dataclasses import dataclass, field
from os import makedirs, path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
from PIL import Image

from .config import DEFAULTS
from .errors import DegenerateGeometryError, DimensionError
from .fitting import LabeledPoints
from .geometry import KeypointTrack, place_cameras, project_points, render_silhouette
from .kinematics import MotionSequence, marker_positions
from .model import ScaleSet, load_model, save_model, validate_scales
from . import io

__all__ = ["MOTIONS", "SubjectSpec", "ClipSpec", "ClipObservation", "sample_subject", "generate_motion",
           "render_clip", "dataset_specs", "write_dataset", "regenerate_dataset", "split_subjects"]

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MODEL_FILE = "model.kmodel"
SPLITS = ("train", "val", "test")
_RAMP_S = 0.5
_MIN_BASELINE_M = 1e-3

# coordinate: (center, amplitude, harmonic, phase), angles in degrees, translations in meters
_GAIT = {
    "pelvis_ty": (0., 0.02, 2, 0.),
    "pelvis_tz": (0., 0.02, 1, 0.),
    "pelvis_tilt": (5., 3., 2, 0.),
    "pelvis_list": (0., 4., 1, 0.),
    "pelvis_rotation": (0., 5., 1, 0.),
    "hip_flexion_r": (10., 25., 1, 0.),
    "hip_flexion_l": (10., 25., 1, math.pi),
    "hip_adduction_r": (0., 5., 1, 0.),
    "hip_adduction_l": (0., 5., 1, math.pi),
    "knee_angle_r": (-30., 25., 1, -math.pi / 2),
    "knee_angle_l": (-30., 25., 1, math.pi / 2),
    "ankle_angle_r": (0., 12., 1, math.pi / 4),
    "ankle_angle_l": (0., 12., 1, 5 * math.pi / 4),
    "mtp_angle_r": (10., 10., 1, math.pi),
    "mtp_angle_l": (10., 10., 1, 0.),
    "lumbar_rotation": (0., 5., 1, math.pi),
    "arm_flex_r": (0., 20., 1, math.pi),
    "arm_flex_l": (0., 20., 1, 0.),
    "arm_add_r": (-5., 3., 2, 0.),
    "arm_add_l": (-5., 3., 2, 0.),
    "elbow_flex_r": (15., 10., 1, math.pi),
    "elbow_flex_l": (15., 10., 1, 0.),
}
_SQUAT = {
    "pelvis_ty": (-0.15, 0.15, 1, -math.pi / 2),
    "pelvis_tilt": (10., 10., 1, math.pi / 2),
    "hip_flexion_r": (45., 40., 1, math.pi / 2),
    "hip_flexion_l": (45., 40., 1, math.pi / 2),
    "knee_angle_r": (-45., 40., 1, -math.pi / 2),
    "knee_angle_l": (-45., 40., 1, -math.pi / 2),
    "ankle_angle_r": (10., 10., 1, math.pi / 2),
    "ankle_angle_l": (10., 10., 1, math.pi / 2),
    "lumbar_extension": (-10., 10., 1, -math.pi / 2),
    "arm_flex_r": (45., 30., 1, math.pi / 2),
    "arm_flex_l": (45., 30., 1, math.pi / 2),
    "neck_flexion": (0., 10., 1, -math.pi / 2),
}
_ARM_WAVE = {
    "arm_flex_r": (60., 30., 1, 0.),
    "arm_add_r": (-40., 30., 1, math.pi / 2),
    "arm_rot_r": (0., 20., 2, 0.),
    "elbow_flex_r": (45., 30., 2, 0.),
    "pro_sup_r": (0., 20., 1, 0.),
    "wrist_flex_r": (0., 30., 2, math.pi / 2),
    "arm_flex_l": (30., 20., 1, math.pi),
    "arm_add_l": (-20., 15., 1, math.pi / 2),
    "elbow_flex_l": (30., 20., 1, math.pi),
    "wrist_flex_l": (0., 20., 2, 0.),
    "lumbar_bending": (0., 5., 1, 0.),
    "neck_flexion": (0., 5., 1, math.pi),
}
MOTIONS = {"gait": (_GAIT, 1.), "squat": (_SQUAT, 0.4), "arm_wave": (_ARM_WAVE, 0.8)}
IMPORTED = "csv"


def _rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


@dataclass(frozen=True, eq=False)
class SubjectSpec:
    """Subject identity: its seed, the scale distribution and the resolved scales

    Scales are drawn per segment and axis from a log-normal distribution with standard deviation `sigma` and clipped to
    `clip`.
    """
    name: str
    seed: int
    sigma: float = 0.07
    clip: Tuple[float, float] = (0.8, 1.2)
    scales: Optional[ScaleSet] = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("scale sigma must be non-negative, got {}".format(self.sigma))
        if self.scales is not None:
            violations = validate_scales(self.scales, self.clip)
            if violations:
                raise ValueError("subject {}: {}".format(self.name, violations[0]))

    def to_dict(self):
        return {"name": self.name, "seed": int(self.seed), "sigma": float(self.sigma), "clip": list(self.clip)}


def sample_subject(model, name, seed, sigma=0.07, clip=(0.8, 1.2)):
    rng = _rng(seed, 0)
    values = np.clip(np.exp(rng.normal(0., sigma, size=(model.num_segments, 3))), clip[0], clip[1])
    scales = ScaleSet(torch.from_numpy(values), model.segment_names)
    return SubjectSpec(name, int(seed), float(sigma), tuple(clip), scales)


@dataclass(frozen=True, eq=False)
class ClipSpec:
    """Everything needed to synthesize one clip deterministically

    Parameters
    ----------
    name : str
        Clip name, also the name of its dataset directory.
    subject : SubjectSpec
        Subject performing the clip.
    motion : str
        One of `gait`, `squat`, `arm_wave` or `csv` for an imported motion file.
    seed : int
        Seed of the motion primitives, camera placement and noise.
    duration_s, frame_rate : float
        Length and sampling of the procedural motion.
    static_duration_s : float
        Length of the static trial at the default pose prepended to the motion.
    noise_px : float
        Standard deviation of the pixel noise added to 2D observations.
    marker_noise_m : float
        Per-axis standard deviation in meters of the isotropic Gaussian noise added to the exported 3D markers, the
        RMS 3D displacement of a marker is `sqrt(3)` times larger.
    amplitude : float
        Multiplier of every procedural primitive, 0 yields the default pose.
    motion_file : str or None
        Motion CSV read when `motion` is `csv`.
    camera : dict
        Camera placement configuration, see `place_cameras`.
    """
    name: str
    subject: SubjectSpec
    motion: str = "gait"
    seed: int = 0
    duration_s: float = 10.
    frame_rate: float = 60.
    static_duration_s: float = 1.
    noise_px: float = 0.
    marker_noise_m: float = 0.
    amplitude: float = 1.
    motion_file: Optional[str] = None
    camera: Dict = field(default_factory=lambda: dict(DEFAULTS["camera"]))

    def __post_init__(self):
        if self.motion not in MOTIONS and self.motion != IMPORTED:
            raise ValueError("unknown motion {}, expected one of {}".format(
                self.motion, ", ".join(sorted(MOTIONS) + [IMPORTED])))
        if self.motion == IMPORTED and self.motion_file is None:
            raise ValueError("imported motions need a motion file")
        if not (self.duration_s > 0 and self.frame_rate > 0):
            raise ValueError("duration and frame rate must be positive")
        if self.static_duration_s < 0:
            raise ValueError("static trial duration must be non-negative")
        if self.noise_px < 0 or self.marker_noise_m < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0 <= self.amplitude <= 1:
            raise ValueError("motion amplitude must lie in [0, 1], got {}".format(self.amplitude))

    @property
    def static_frames(self):
        return int(round(self.static_duration_s * self.frame_rate))

    def to_dict(self):
        return {
            "name": self.name,
            "subject": self.subject.to_dict(),
            "motion": self.motion,
            "seed": int(self.seed),
            "duration_s": float(self.duration_s),
            "frame_rate": float(self.frame_rate),
            "static_duration_s": float(self.static_duration_s),
            "noise_px": float(self.noise_px),
            "marker_noise_m": float(self.marker_noise_m),
            "amplitude": float(self.amplitude),
            "motion_file": self.motion_file,
            "camera": self.camera
        }

    @classmethod
    def from_dict(cls, data, model):
        subject = data["subject"]
        subject = sample_subject(model, subject["name"], subject["seed"], subject["sigma"], tuple(subject["clip"]))
        fields = {k: v for k, v in data.items() if k != "subject"}
        return cls(subject=subject, **fields)


@dataclass(frozen=True, eq=False)
class ClipObservation:
    """A synthetic clip with full ground truth

    `motion` includes the static trial (frames `[0, static_frames)`), `markers` holds the exported 3D marker
    trajectories and `tracks` the 2D observations of the frontal and sagittal cameras.
    """
    spec: ClipSpec
    motion: MotionSequence
    scales: ScaleSet
    markers: LabeledPoints
    tracks: Tuple[KeypointTrack, KeypointTrack]
    cameras: Tuple
    static_frame: int = 0

    def __post_init__(self):
        T = self.motion.num_frames
        if self.markers.positions.size(0) != T or any(t.num_frames != T for t in self.tracks):
            raise DimensionError("clip {} has inconsistent frame counts".format(self.spec.name))

    @property
    def static_frames(self):
        return self.spec.static_frames


def _procedural(model, spec):
    table, frequency = MOTIONS[spec.motion]
    rng = _rng(spec.seed, 1)
    frequency *= rng.uniform(0.9, 1.1)
    phase = rng.uniform(0., 2 * math.pi)

    T = int(round(spec.duration_s * spec.frame_rate))
    t = np.arange(T) / spec.frame_rate
    ramp = np.where(t < _RAMP_S, 0.5 - 0.5 * np.cos(math.pi * t / _RAMP_S), 1.)

    default = model.default_pose().numpy()
    values = np.tile(default, (T, 1))
    for name in sorted(table):
        center, amplitude, harmonic, offset = table[name]
        j = model.coordinate_index(name)
        amplitude *= rng.uniform(0.8, 1.2)
        wave = center + amplitude * np.sin(2 * math.pi * harmonic * frequency * t + harmonic * phase + offset)
        if model.coordinates[j].is_rotation:
            wave = np.radians(wave)
        values[:, j] += spec.amplitude * ramp * wave
    return torch.from_numpy(values)


def _imported(model, spec):
    motion = io.read_motion(spec.motion_file, model, spec.frame_rate)
    lower, upper = model.bounds
    values = torch.max(torch.min(motion.values, upper), lower)
    outside = values != motion.values
    if outside.any():
        logger.warning("clamped %d values of %s into coordinate ranges", int(outside.sum()), spec.motion_file)
    return values


def generate_motion(model, spec):
    """Joint-angle trajectories of a clip, without the static trial

    Procedural motions are sums of sinusoidal primitives with per-seed phase, frequency and amplitude, ramped in from
    the default pose over the first half second. Imported motions are clamped into the constrained ranges.
    """
    values = _imported(model, spec) if spec.motion == IMPORTED else _procedural(model, spec)
    return MotionSequence(values, spec.frame_rate, model.coordinate_names)


def _observe(camera, points, noise_px, rng):
    uv, depth = project_points(camera, points)
    if noise_px > 0:
        uv = uv + torch.from_numpy(rng.normal(0., noise_px, size=tuple(uv.shape)))
    visible = (depth > 0) & (uv[..., 0] >= 0) & (uv[..., 0] < camera.image_width_px) & \
        (uv[..., 1] >= 0) & (uv[..., 1] < camera.image_height_px)
    uv = torch.where((depth > 0)[..., None], uv, torch.full_like(uv, math.nan))
    hidden = int((~visible).sum())
    if hidden:
        logger.warning("%d observations fall outside camera %s", hidden, camera.name)
    return uv, visible.to(torch.float64)


def render_clip(model, spec):
    """Synthesize a clip: motion, scales, 3D markers and two-view 2D observations

    The 2D tracks project the clean 3D markers, pixel noise is then added to them; marker noise only affects the
    exported 3D trajectories, drawn independently per axis with standard deviation `marker_noise_m`. A static trial
    at the default pose is prepended.
    """
    motion = generate_motion(model, spec)
    if spec.static_frames:
        static = MotionSequence.constant(model, model.default_pose(), spec.static_frames, spec.frame_rate)
        motion = MotionSequence(torch.cat([static.values, motion.values]), spec.frame_rate, model.coordinate_names)
    scales = spec.subject.scales
    markers = marker_positions(model, motion.values, scales.values)

    cameras = place_cameras(spec.camera, spec.seed)
    if (cameras[0].center - cameras[1].center).norm() < _MIN_BASELINE_M:
        raise DegenerateGeometryError("cameras of clip {} share their center".format(spec.name))

    rng = _rng(spec.seed, 2)
    tracks = []
    for camera in cameras:
        uv, confidence = _observe(camera, markers, spec.noise_px, rng)
        tracks.append(KeypointTrack(model.marker_names, uv, confidence))

    if spec.marker_noise_m > 0:
        markers = markers + torch.from_numpy(rng.normal(0., spec.marker_noise_m, size=tuple(markers.shape)))
    logger.info("rendered clip %s: %s, %d frames", spec.name, spec.motion, motion.num_frames)
    return ClipObservation(spec, motion, scales, LabeledPoints(model.marker_names, markers), tuple(tracks),
                           cameras)


def split_subjects(subjects, proportions=(42, 6, 8), seed=0):
    """Assign subjects (not clips) to train, val and test

    Split sizes follow `proportions` with largest-remainder rounding, the assignment is shuffled with `seed`.
    """
    subjects = sorted(subjects)
    total = float(sum(proportions))
    if total <= 0 or any(p < 0 for p in proportions):
        raise ValueError("split proportions must be non-negative with a positive sum")
    exact = [len(subjects) * p / total for p in proportions]
    counts = [int(math.floor(e)) for e in exact]
    for i in sorted(range(len(exact)), key=lambda i: counts[i] - exact[i])[:len(subjects) - sum(counts)]:
        counts[i] += 1

    order = np.random.default_rng(seed).permutation(len(subjects))
    splits, start = {}, 0
    for name, count in zip(SPLITS, counts):
        for i in order[start:start + count]:
            splits[subjects[i]] = name
        start += count
    return splits


def dataset_specs(model, config=DEFAULTS, seed=0, subjects=None, clips_per_subject=None, noise_px=None):
    """Clip specs of a synthetic dataset, cycling through the configured motions"""
    synth = config["synth"]
    subjects = synth["subjects"] if subjects is None else subjects
    clips_per_subject = synth["clips_per_subject"] if clips_per_subject is None else clips_per_subject
    noise_px = synth["noise_px"] if noise_px is None else noise_px
    if subjects < 1 or clips_per_subject < 1:
        raise ValueError("a dataset needs at least one subject and one clip per subject")

    rng = np.random.default_rng(seed)
    specs = []
    for i in range(subjects):
        subject = sample_subject(model, "s{:03d}".format(i), int(rng.integers(2 ** 31)), synth["scale_sigma"],
                                 tuple(synth["scale_clip"]))
        for j in range(clips_per_subject):
            motion = synth["motions"][(i * clips_per_subject + j) % len(synth["motions"])]
            specs.append(ClipSpec(
                name="{}_c{:02d}_{}".format(subject.name, j, motion),
                subject=subject,
                motion=motion,
                seed=int(rng.integers(2 ** 31)),
                duration_s=synth["duration_s"],
                frame_rate=synth["frame_rate"],
                static_duration_s=synth["static_duration_s"],
                noise_px=noise_px,
                marker_noise_m=synth["marker_noise_m"],
                camera=dict(config["camera"])))
    return specs


def _write_clip(clip_dir, model, clip):
    makedirs(clip_dir, exist_ok=True)
    io.write_motion(path.join(clip_dir, "motion.csv"), clip.motion, model)
    io.write_scales(path.join(clip_dir, "scales.csv"), clip.scales)
    io.write_markers(path.join(clip_dir, "markers3d.csv"), clip.markers, clip.motion.frame_rate)

    first = clip.static_frames if clip.static_frames < clip.motion.num_frames else 0
    files = {"motion": "motion.csv", "scales": "scales.csv", "markers3d": "markers3d.csv"}
    for camera, track in zip(clip.cameras, clip.tracks):
        io.write_camera(path.join(clip_dir, camera.name + ".kcam"), camera)
        io.write_keypoints_2d(path.join(clip_dir, "kp2d_{}.csv".format(camera.name)), track)
        mask = render_silhouette(camera, clip.markers.positions[first])
        _save_mask(path.join(clip_dir, "silhouette_{}.png".format(camera.name)), mask)
        files["camera_" + camera.name] = camera.name + ".kcam"
        files["kp2d_" + camera.name] = "kp2d_{}.csv".format(camera.name)
        files["silhouette_" + camera.name] = "silhouette_{}.png".format(camera.name)
    return files


def _save_mask(file_name, mask):
    Image.fromarray(mask.numpy().astype(np.uint8) * 255).save(file_name, format="PNG")


def write_dataset(model, clips, out_dir, splits=None, seed=None, overwrite=False):
    """Write clips, their model and a manifest to `out_dir`

    Parameters
    ----------
    model : SkeletalModel
        Model the clips were rendered with, stored next to the manifest for regeneration.
    clips : list of ClipObservation
        Clips to write, one directory each.
    out_dir : str
        Dataset directory.
    splits : dict or None
        Subject name to split, computed with `split_subjects` when omitted.
    seed : int or None
        Dataset seed recorded in the manifest.
    overwrite : bool
        Replace an existing manifest instead of raising `FileExistsError`.

    Returns
    -------
    manifest : dict
        The manifest written to `out_dir/manifest.json`.
    """
    if not clips:
        raise ValueError("cannot write an empty dataset")
    names = [c.spec.name for c in clips]
    if len(set(names)) != len(names):
        raise ValueError("clip names collide in the manifest")
    manifest_file = path.join(out_dir, MANIFEST)
    if path.exists(manifest_file) and not overwrite:
        raise FileExistsError("{} already exists".format(manifest_file))

    makedirs(out_dir, exist_ok=True)
    save_model(model, path.join(out_dir, MODEL_FILE))
    if splits is None:
        splits = split_subjects({c.spec.subject.name for c in clips}, seed=0 if seed is None else seed)

    entries = []
    for clip in clips:
        files = _write_clip(path.join(out_dir, clip.spec.name), model, clip)
        entries.append({
            "name": clip.spec.name,
            "subject": clip.spec.subject.name,
            "split": splits[clip.spec.subject.name],
            "frames": clip.motion.num_frames,
            "static_frame": clip.static_frame,
            "static_frames": clip.static_frames,
            "files": files,
            "spec": clip.spec.to_dict()
        })

    manifest = {"model": MODEL_FILE, "seed": seed, "clips": entries}
    io.write_json(manifest_file, manifest)
    logger.info("wrote %d clips to %s", len(clips), out_dir)
    return manifest


def regenerate_dataset(manifest_file, out_dir, overwrite=False):
    """Rebuild a dataset from its manifest, the result is byte-identical to the original"""
    manifest = io.read_json(manifest_file)
    model = load_model(path.join(path.dirname(path.abspath(manifest_file)), manifest["model"]))
    clips = [render_clip(model, ClipSpec.from_dict(entry["spec"], model)) for entry in manifest["clips"]]
    splits = {entry["subject"]: entry["split"] for entry in manifest["clips"]}
    return write_dataset(model, clips, out_dir, splits, manifest["seed"], overwrite)
