import json
import os

import pytest

from kinefit import cli, io
from kinefit.cli import main
from kinefit.errors import ConvergenceError, FittingError
from kinefit.metrics import EvaluationReport
from kinefit.model import generic_model_path


@pytest.fixture(scope="module")
def short_config(tmp_path_factory):
    file_name = tmp_path_factory.mktemp("config") / "short.json"
    file_name.write_text(json.dumps({"synth": {"duration_s": 0.5, "static_duration_s": 0.25}}))
    return str(file_name)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, short_config):
    out = str(tmp_path_factory.mktemp("data") / "dataset")
    assert main(["gen", "--config", short_config, "--subjects", "1", "--seed", "5", "--out", out]) == 0
    return out


def _clip_dir(dataset):
    manifest = io.read_json(os.path.join(dataset, "manifest.json"))
    return os.path.join(dataset, manifest["clips"][0]["name"])


def test_gen_is_reproducible(dataset, short_config, tmp_path, capsys):
    again = str(tmp_path / "again")
    assert main(["gen", "--config", short_config, "--subjects", "1", "--seed", "5", "--out", again]) == 0
    assert capsys.readouterr().out.strip() == os.path.join(again, "manifest.json")
    with open(os.path.join(dataset, "manifest.json")) as a, open(os.path.join(again, "manifest.json")) as b:
        assert a.read() == b.read()


def test_gen_seed_from_environment(short_config, tmp_path, monkeypatch):
    monkeypatch.setenv("KINEFIT_SEED", "9")
    out = str(tmp_path / "env")
    assert main(["gen", "--config", short_config, "--subjects", "1", "--out", out]) == 0
    assert io.read_json(os.path.join(out, "manifest.json"))["seed"] == 9


def test_gen_refuses_to_overwrite(dataset, short_config):
    assert main(["gen", "--config", short_config, "--subjects", "1", "--seed", "5", "--out", dataset]) == 2


def test_gen_invalid_model(tmp_path):
    assert main(["gen", "--model", str(tmp_path / "missing.kmodel"), "--out", str(tmp_path / "out")]) == 2


def test_fit_and_eval(dataset, tmp_path, capsys):
    clip = _clip_dir(dataset)
    fitted = str(tmp_path / "fit")
    assert main(["fit", "--clip", clip, "--out", fitted, "--self-eval"]) == 0
    report = io.read_json(os.path.join(fitted, "report.json"))
    assert report["frames"] == 45
    assert report["self_eval"]["MAE_angle_deg"] < 1.
    assert sorted(os.listdir(fitted)) == ["motion.csv", "report.json", "scales.csv"]

    out = str(tmp_path / "eval")
    assert main(["eval", "--pred", fitted, "--truth", clip, "--out", out, "--traces"]) == 0
    assert "MAE_angle_deg" in capsys.readouterr().out
    loaded = EvaluationReport.from_csv(os.path.join(out, "report.csv"))
    assert loaded.rows[0]["MAE_angle_deg"] == pytest.approx(report["self_eval"]["MAE_angle_deg"], rel=1e-6)
    assert os.path.isfile(os.path.join(out, "{}_traces.csv".format(os.path.basename(clip))))


def test_eval_truth_against_itself(dataset, tmp_path):
    out = str(tmp_path / "eval")
    assert main(["eval", "--pred", dataset, "--truth", dataset, "--out", out, "--align", "sequence",
                 "--mae-reduction", "mean"]) == 0
    report = json.loads(open(os.path.join(out, "report.json")).read())
    assert report["settings"]["align"] == "sequence"
    assert report["settings"]["mae_reduction"] == "mean"
    for value in report["mean"].values():
        assert value == pytest.approx(0., abs=1e-6)


def test_eval_plots(dataset, tmp_path):
    clip = _clip_dir(dataset)
    plots = str(tmp_path / "plots")
    assert main(["eval", "--pred", clip, "--truth", clip, "--out", str(tmp_path / "eval"), "--plots", plots,
                 "--exclude-coords", "pelvis_tilt,pelvis_list"]) == 0
    files = os.listdir(plots)
    assert "{}_knee_angle_r.svg".format(os.path.basename(clip)) in files
    assert not any("pelvis_tilt" in f for f in files)


def test_fit_requires_every_input(dataset, tmp_path):
    clip = _clip_dir(dataset)
    args = ["fit", "--cam-a", os.path.join(clip, "frontal.kcam"), "--cam-b", os.path.join(clip, "sagittal.kcam"),
            "--kp2d-a", os.path.join(clip, "kp2d_frontal.csv"), "--out", str(tmp_path / "fit")]
    assert main(args) == 2
    assert main(args + ["--kp2d-b", str(tmp_path / "missing.csv")]) == 2


def test_gradcheck(capsys):
    assert main(["gradcheck", "--loss", "bio", "--loss", "scale", "--draws", "5"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split()[:2] == ["loss", "draws"]
    assert [line.split()[0] for line in lines[1:]] == ["bio", "scale"]
    assert all(line.endswith("PASS") for line in lines[1:])


def test_model_validate(tmp_path, capsys):
    assert main(["model", "validate", generic_model_path()]) == 0
    assert capsys.readouterr().out.startswith("valid: 36 coordinates, 22 segments, 44 keypoints")

    data = json.loads(open(generic_model_path()).read())
    data["segments"][1]["parent"] = "toes_r"
    broken = tmp_path / "cycle.kmodel"
    broken.write_text(json.dumps(data))
    assert main(["model", "validate", str(broken)]) == 2
    assert "cycle" in capsys.readouterr().out

    broken.write_text("{")
    assert main(["model", "validate", str(broken)]) == 2


def test_fit_solver_failure_exits_with_1(dataset, tmp_path, monkeypatch):
    def diverging(*args, **kwargs):
        raise FittingError(3, ConvergenceError("LM cost increased from 1.0 to 2.0"))

    monkeypatch.setattr(cli, "reconstruct_sequence", diverging)
    assert main(["fit", "--clip", _clip_dir(dataset), "--out", str(tmp_path / "fit")]) == 1
    assert not os.path.exists(str(tmp_path / "fit"))
