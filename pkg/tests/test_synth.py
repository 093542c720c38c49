import filecmp
import math
import os

import pytest
import torch
from torch.testing import assert_close

from kinefit import io
from kinefit.config import DEFAULTS
from kinefit.errors import DegenerateGeometryError
from kinefit.geometry import project
from kinefit.kinematics import MotionSequence
from kinefit.losses import bio_constraint_loss, loss_layout
from kinefit.synth import ClipSpec, dataset_specs, generate_motion, regenerate_dataset, render_clip, \
    sample_subject, split_subjects, write_dataset


def _spec(model, **kwargs):
    kwargs.setdefault("duration_s", 1.)
    return ClipSpec("clip", sample_subject(model, "s000", 3), kwargs.pop("motion", "gait"), 11, **kwargs)


def _tree(root):
    files = []
    for directory, _, names in os.walk(root):
        files += [os.path.relpath(os.path.join(directory, n), root) for n in names]
    return sorted(files)


def test_default_clip_length(model):
    motion = generate_motion(model, ClipSpec("clip", sample_subject(model, "s000", 0)))
    assert motion.num_frames == 600
    assert motion.frame_rate == 60.


def test_zero_amplitude_is_constant(model):
    motion = generate_motion(model, _spec(model, amplitude=0.))
    assert torch.equal(motion.values, model.default_pose().expand(motion.num_frames, -1))


@pytest.mark.parametrize("motion", ["gait", "squat", "arm_wave"])
def test_motion_respects_ranges(model, motion):
    values = generate_motion(model, _spec(model, motion=motion, duration_s=5.)).values
    layout = loss_layout(model)
    assert bio_constraint_loss(values[:, layout.constrained], model.ranges).item() == 0.
    lower, upper = model.bounds
    assert bool(((values >= lower) & (values <= upper)).all())


def test_motion_starts_at_default_pose(model):
    values = generate_motion(model, _spec(model)).values
    assert_close(values[0], model.default_pose())


def test_subject_scales(model):
    subject = sample_subject(model, "s001", 5, sigma=0.5)
    values = subject.scales.values
    assert values.shape == (model.num_segments, 3)
    assert float(values.min()) >= 0.8 and float(values.max()) <= 1.2
    assert torch.equal(values, sample_subject(model, "s001", 5, sigma=0.5).scales.values)
    assert torch.equal(sample_subject(model, "s002", 5, sigma=0.).scales.values, torch.ones_like(values))


def test_clip_spec_validation(model):
    subject = sample_subject(model, "s000", 0)
    with pytest.raises(ValueError):
        ClipSpec("clip", subject, "juggling")
    with pytest.raises(ValueError):
        ClipSpec("clip", subject, amplitude=1.5)
    with pytest.raises(ValueError):
        ClipSpec("clip", subject, noise_px=-1.)
    with pytest.raises(ValueError):
        ClipSpec("clip", subject, "csv")


def test_render_clip_zero_noise(model):
    clip = render_clip(model, _spec(model))
    assert clip.motion.num_frames == 60 + 60
    assert_close(clip.motion.values[0], model.default_pose())
    for camera, track in zip(clip.cameras, clip.tracks):
        assert torch.equal(track.uv, project(camera, clip.markers.positions))
        assert bool((track.confidence == 1.).all())
    assert clip.tracks[0].labels == model.marker_names


def test_render_clip_is_deterministic(model):
    a = render_clip(model, _spec(model, noise_px=2., marker_noise_m=0.01))
    b = render_clip(model, _spec(model, noise_px=2., marker_noise_m=0.01))
    assert torch.equal(a.tracks[0].uv, b.tracks[0].uv)
    assert torch.equal(a.markers.positions, b.markers.positions)

    clean = render_clip(model, _spec(model))
    noise = a.tracks[1].uv - clean.tracks[1].uv
    assert 1. < float(noise.std()) < 3.


def test_render_clip_rejects_shared_center(model):
    camera = dict(DEFAULTS["camera"], distance_m=0., azimuth_jitter_deg=0., height_jitter_m=0., target_jitter_m=0.)
    with pytest.raises(DegenerateGeometryError):
        render_clip(model, _spec(model, camera=camera))


def test_imported_motion_is_clamped(model, tmp_path):
    values = model.default_pose().expand(30, -1).clone()
    values[:, model.coordinate_index("knee_angle_r")] = math.radians(40.)
    file_name = str(tmp_path / "motion.csv")
    io.write_motion(file_name, MotionSequence(values, 60., model.coordinate_names), model)

    motion = generate_motion(model, _spec(model, motion="csv", motion_file=file_name))
    assert motion.num_frames == 30
    knee = motion.values[:, model.coordinate_index("knee_angle_r")]
    assert knee.max().item() == pytest.approx(math.radians(10.))


def test_split_subjects():
    subjects = ["s{:03d}".format(i) for i in range(56)]
    splits = split_subjects(subjects, seed=0)
    counts = {name: list(splits.values()).count(name) for name in ("train", "val", "test")}
    assert counts == {"train": 42, "val": 6, "test": 8}
    assert splits == split_subjects(list(reversed(subjects)), seed=0)
    assert sorted(split_subjects(["a", "b", "c"]).values()) == ["test", "train", "train"]


def test_dataset_specs(model):
    specs = dataset_specs(model, DEFAULTS, seed=4, subjects=2, clips_per_subject=3)
    assert [s.name for s in specs] == ["s000_c00_gait", "s000_c01_squat", "s000_c02_arm_wave",
                                       "s001_c00_gait", "s001_c01_squat", "s001_c02_arm_wave"]
    assert specs[0].subject is specs[2].subject
    again = dataset_specs(model, DEFAULTS, seed=4, subjects=2, clips_per_subject=3)
    assert [s.seed for s in specs] == [s.seed for s in again]


def test_write_and_regenerate_dataset(model, tmp_path):
    config = dict(DEFAULTS, synth=dict(DEFAULTS["synth"], duration_s=0.5, static_duration_s=0.25))
    specs = dataset_specs(model, config, seed=1, subjects=2, clips_per_subject=1)
    first = str(tmp_path / "first")
    manifest = write_dataset(model, [render_clip(model, s) for s in specs], first, seed=1)

    assert [c["name"] for c in manifest["clips"]] == ["s000_c00_gait", "s001_c00_squat"]
    entry = manifest["clips"][0]
    assert entry["frames"] == 45 and entry["static_frames"] == 15
    assert set(entry["files"]) >= {"motion", "scales", "markers3d", "camera_frontal", "kp2d_sagittal",
                                   "silhouette_frontal"}
    clip_dir = os.path.join(first, entry["name"])
    assert io.read_motion(os.path.join(clip_dir, "motion.csv"), model).num_frames == 45
    assert io.read_keypoints_2d(os.path.join(clip_dir, "kp2d_frontal.csv")).labels == model.marker_names

    with pytest.raises(FileExistsError):
        write_dataset(model, [render_clip(model, specs[0])], first)

    second = str(tmp_path / "second")
    regenerate_dataset(os.path.join(first, "manifest.json"), second)
    files = _tree(first)
    assert files == _tree(second)
    match, mismatch, errors = filecmp.cmpfiles(first, second, files, shallow=False)
    assert mismatch == [] and errors == []


def test_write_dataset_rejects_duplicates(model, tmp_path):
    clip = render_clip(model, _spec(model))
    with pytest.raises(ValueError):
        write_dataset(model, [clip, clip], str(tmp_path / "out"))
    with pytest.raises(ValueError):
        write_dataset(model, [], str(tmp_path / "out"))
