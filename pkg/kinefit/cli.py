import argparse
import logging
import os
import sys
from dataclasses import replace
from multiprocessing import Pool
from os import makedirs, path

from . import io
from .config import load_config
from .fitting import ReconstructionSettings, reconstruct_sequence
from .losses import LOSSES, gradient_check
from .metrics import angle_traces, evaluation_report
from .model import generic_model_path, load_model, validate_model
from .synth import MANIFEST, dataset_specs, regenerate_dataset, render_clip, write_dataset
from .utils import init_logger, summary_writer

__all__ = ["main", "cmd_gen", "cmd_fit", "cmd_eval", "cmd_gradcheck", "cmd_model_validate"]

logger = logging.getLogger(__name__)

SEED_VARIABLE = "KINEFIT_SEED"


def _seed(args, default):
    if args.seed is not None:
        return args.seed
    if os.environ.get(SEED_VARIABLE):
        try:
            return int(os.environ[SEED_VARIABLE])
        except ValueError:
            raise ValueError("{} must be an integer, got {}".format(SEED_VARIABLE, os.environ[SEED_VARIABLE]))
    return int(default)


def _model(args):
    return load_model(args.model if args.model is not None else generic_model_path())


def _pool_map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with Pool(min(jobs, len(items))) as pool:
            return pool.map(fn, items)
    return [fn(item) for item in items]


# gen

def _render_worker(item):
    model_file, spec = item
    return render_clip(load_model(model_file), spec)


def cmd_gen(args, config):
    if args.from_manifest is not None:
        regenerate_dataset(args.from_manifest, args.out, args.overwrite)
        print(path.join(args.out, MANIFEST))
        return 0

    model_file = args.model if args.model is not None else generic_model_path()
    model = load_model(model_file)
    seed = _seed(args, config["synth"]["seed"])
    specs = dataset_specs(model, config, seed, args.subjects, args.clips_per_subject, args.noise_px)
    logger.info("generating %d clips with seed %d", len(specs), seed)

    clips = _pool_map(_render_worker, [(model_file, spec) for spec in specs], args.jobs)
    write_dataset(model, clips, args.out, seed=seed, overwrite=args.overwrite)
    print(path.join(args.out, MANIFEST))
    return 0


# fit

def _clip_inputs(args, config):
    """Cameras, tracks, static frame and frame rate of the clip to reconstruct"""
    frame_rate = config["synth"]["frame_rate"] if args.frame_rate is None else args.frame_rate
    static = config["reconstruction"]["static_frame"]
    if args.clip is not None:
        files = {"cam_a": "frontal.kcam", "cam_b": "sagittal.kcam",
                 "kp2d_a": "kp2d_frontal.csv", "kp2d_b": "kp2d_sagittal.csv"}
        files = {k: path.join(args.clip, v) for k, v in files.items()}
        manifest_file = path.join(path.dirname(path.abspath(args.clip)), MANIFEST)
        if path.exists(manifest_file):
            name = path.basename(path.normpath(args.clip))
            for entry in io.read_json(manifest_file)["clips"]:
                if entry["name"] == name:
                    static = entry["static_frame"]
                    if args.frame_rate is None:
                        frame_rate = entry["spec"]["frame_rate"]
    else:
        files = {k: getattr(args, k) for k in ("cam_a", "cam_b", "kp2d_a", "kp2d_b")}

    for key, file_name in files.items():
        flag = "--" + key.replace("_", "-")
        if file_name is None:
            raise ValueError("{} is required without --clip".format(flag))
        if not path.isfile(file_name):
            raise FileNotFoundError("{}: no such file {}".format(flag, file_name))
    if args.static_frame is not None:
        static = args.static_frame
    return (io.read_camera(files["cam_a"]), io.read_camera(files["cam_b"]), io.read_keypoints_2d(files["kp2d_a"]),
            io.read_keypoints_2d(files["kp2d_b"]), static, frame_rate)


def _self_eval(model, clip_dir, scales, motion):
    truth_motion, truth_scales = path.join(clip_dir, "motion.csv"), path.join(clip_dir, "scales.csv")
    if not (path.isfile(truth_motion) and path.isfile(truth_scales)):
        raise FileNotFoundError("--self-eval needs motion.csv and scales.csv in {}".format(clip_dir))
    name = path.basename(path.normpath(clip_dir))
    truth = {name: (io.read_motion(truth_motion, model, motion.frame_rate), io.read_scales(truth_scales, model))}
    report = evaluation_report(model, {name: (motion, scales)}, truth)
    return dict(report.rows[0])


def cmd_fit(args, config):
    model = _model(args)
    settings = ReconstructionSettings.from_config(config)
    if args.filter_hz is not None:
        settings = replace(settings, filter_cutoff_hz=args.filter_hz or None)
    cam_a, cam_b, track_a, track_b, static, frame_rate = _clip_inputs(args, config)

    tb = summary_writer(args.log_dir)
    try:
        scales, motion, report = reconstruct_sequence(model, cam_a, cam_b, track_a, track_b, static, settings,
                                                      frame_rate, tb)
    finally:
        if tb is not None:
            tb.close()

    if args.self_eval:
        if args.clip is None:
            raise ValueError("--self-eval needs --clip")
        report["self_eval"] = _self_eval(model, args.clip, scales, motion)
        logger.info("self evaluation: MAE %.3f deg, PA-MPJPE %.3f mm", report["self_eval"]["MAE_angle_deg"],
                    report["self_eval"]["PA_MPJPE_mm"])

    makedirs(args.out, exist_ok=True)
    io.write_motion(path.join(args.out, "motion.csv"), motion, model)
    io.write_scales(path.join(args.out, "scales.csv"), scales)
    io.write_json(path.join(args.out, "report.json"), report)
    print(path.join(args.out, "report.json"))

    nonconverged = report["ik"]["nonconverged_frames"]
    if nonconverged:
        logger.warning("%d frames did not converge", nonconverged)
        if args.strict:
            return 1
    return 0


# eval

def _bundle(directory, model, frame_rate):
    """Clip name to (motion, scales) for a single clip directory or a directory of clips"""
    if path.isfile(path.join(directory, "motion.csv")):
        dirs = {path.basename(path.normpath(directory)): directory}
    else:
        dirs = {name: path.join(directory, name) for name in sorted(os.listdir(directory))
                if path.isfile(path.join(directory, name, "motion.csv"))}
    if not dirs:
        raise FileNotFoundError("no motion.csv found under {}".format(directory))
    return {name: (io.read_motion(path.join(d, "motion.csv"), model, frame_rate),
                   io.read_scales(path.join(d, "scales.csv"), model)) for name, d in dirs.items()}


def cmd_eval(args, config):
    model = _model(args)
    frame_rate = config["synth"]["frame_rate"] if args.frame_rate is None else args.frame_rate
    exclude = config["eval"]["exclude_coords"] if args.exclude_coords is None else \
        [c for c in args.exclude_coords.split(",") if c]
    align = config["eval"]["align"] if args.align is None else args.align
    reduction = config["eval"]["mae_reduction"] if args.mae_reduction is None else args.mae_reduction
    if align not in ("frame", "sequence"):
        raise ValueError("Unknown alignment {}".format(align))

    predictions = _bundle(args.pred, model, frame_rate)
    truths = _bundle(args.truth, model, frame_rate)
    if len(predictions) == 1 and len(truths) == 1:
        # a single fitted clip is compared with a single ground truth clip whatever their directory names
        predictions = {next(iter(truths)): next(iter(predictions.values()))}
    report = evaluation_report(model, predictions, truths, exclude, align == "frame", reduction)

    makedirs(args.out, exist_ok=True)
    report.to_csv(path.join(args.out, "report.csv"))
    report.to_json(path.join(args.out, "report.json"))
    with open(path.join(args.out, "report.txt"), "w") as fd:
        fd.write(report.format() + "\n")
    print(report.format())

    if args.traces or args.plots is not None:
        coordinates = [c.name for c in model.coordinates if c.is_rotation and c.name not in set(exclude)]
        for clip in sorted(predictions):
            traces = angle_traces(predictions[clip][0], truths[clip][0], coordinates)
            if args.traces:
                traces.to_csv(path.join(args.out, "{}_traces.csv".format(clip)), index=False)
            if args.plots is not None:
                from .plots import plot_angle_traces
                plot_angle_traces(traces, args.plots, clip)
    return 0


# gradcheck

def cmd_gradcheck(args, config):
    model = _model(args)
    section = config["gradcheck"]
    seed = _seed(args, section["seed"])
    draws = section["draws"] if args.draws is None else args.draws
    losses = args.loss if args.loss else LOSSES

    rows, ok = [], True
    for loss in losses:
        result = gradient_check(model, loss, seed, draws, section["frames"], section["step"], section["rtol"],
                                section["pass_fraction"])
        ok &= result.ok
        rows.append("{:<12}{:>8}{:>12.4f}{:>14.3e}  {}".format(
            loss, result.draws, result.pass_rate, result.max_error, "PASS" if result.ok else "FAIL"))

    print("{:<12}{:>8}{:>12}{:>14}  {}".format("loss", "draws", "pass_rate", "max_error", "status"))
    for row in rows:
        print(row)
    return 0 if ok else 1


# model validate

def cmd_model_validate(args, config):
    model = load_model(args.model_file, validate=False)
    report = validate_model(model)
    if report:
        for violation in report:
            print("invalid: {}".format(violation))
        return 2
    free = sum(1 for c in model.coordinates if c.is_rotation and not c.is_constrained)
    print("valid: {} coordinates, {} segments, {} keypoints, {} markers, {} free rotational".format(
        model.num_coordinates, model.num_segments, model.num_keypoints, len(model.markers), free))
    return 0


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, metavar="FILE", help="JSON configuration file")
    common.add_argument("--log-dir", type=str, metavar="PATH", help="log file and Tensorboard directory")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="kinefit", description="Markerless motion capture kinematics toolkit")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    gen = commands.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    gen.add_argument("--model", type=str, metavar="FILE", help="skeletal model (default: generic full body)")
    gen.add_argument("--subjects", type=int, metavar="N", help="number of subjects")
    gen.add_argument("--clips-per-subject", type=int, metavar="N", help="clips per subject")
    gen.add_argument("--noise-px", type=float, metavar="SIGMA", help="pixel noise of the 2D observations")
    gen.add_argument("--seed", type=int, help="dataset seed (default: ${} or config)".format(SEED_VARIABLE))
    gen.add_argument("--out", type=str, required=True, metavar="DIR", help="output directory")
    gen.add_argument("--from-manifest", type=str, metavar="FILE", help="regenerate the dataset of a manifest")
    gen.add_argument("-j", "--jobs", type=int, default=1, metavar="N", help="parallel clips (default: 1)")
    gen.add_argument("--overwrite", action="store_true", help="replace an existing manifest")
    gen.set_defaults(func=cmd_gen)

    fit = commands.add_parser("fit", parents=[common], help="reconstruct motion from two views")
    fit.add_argument("--model", type=str, metavar="FILE", help="skeletal model (default: generic full body)")
    fit.add_argument("--clip", type=str, metavar="DIR", help="dataset clip directory")
    fit.add_argument("--cam-a", type=str, metavar="FILE", help="first camera file")
    fit.add_argument("--cam-b", type=str, metavar="FILE", help="second camera file")
    fit.add_argument("--kp2d-a", type=str, metavar="FILE", help="2D keypoints seen by the first camera")
    fit.add_argument("--kp2d-b", type=str, metavar="FILE", help="2D keypoints seen by the second camera")
    fit.add_argument("--static-frame", type=int, metavar="N", help="frame used for scaling")
    fit.add_argument("--frame-rate", type=float, metavar="HZ", help="sampling rate of the observations")
    fit.add_argument("--filter-hz", type=float, metavar="HZ", help="low-pass cutoff, 0 disables filtering")
    fit.add_argument("--out", type=str, required=True, metavar="DIR", help="output directory")
    fit.add_argument("--self-eval", action="store_true", help="compare against the clip's ground truth")
    fit.add_argument("--strict", action="store_true", help="fail when a frame does not converge")
    fit.set_defaults(func=cmd_fit)

    ev = commands.add_parser("eval", parents=[common], help="compare predictions with ground truth")
    ev.add_argument("--model", type=str, metavar="FILE", help="skeletal model (default: generic full body)")
    ev.add_argument("--pred", type=str, required=True, metavar="DIR", help="predicted clip(s)")
    ev.add_argument("--truth", type=str, required=True, metavar="DIR", help="ground truth clip(s)")
    ev.add_argument("--out", type=str, required=True, metavar="DIR", help="report directory")
    ev.add_argument("--frame-rate", type=float, metavar="HZ", help="sampling rate of the motions")
    ev.add_argument("--exclude-coords", type=str, metavar="NAMES", help="comma separated coordinates to skip")
    ev.add_argument("--align", type=str, choices=("frame", "sequence"), help="Procrustes alignment granularity")
    ev.add_argument("--mae-reduction", type=str, choices=("sum", "mean"),
                    help="sum (default) or mean of the angle error over coordinates")
    ev.add_argument("--traces", action="store_true", help="write per-coordinate angle traces as CSV")
    ev.add_argument("--plots", type=str, metavar="DIR", help="write per-coordinate angle traces as SVG")
    ev.set_defaults(func=cmd_eval)

    gc = commands.add_parser("gradcheck", parents=[common], help="check analytic loss gradients")
    gc.add_argument("--model", type=str, metavar="FILE", help="skeletal model (default: generic full body)")
    gc.add_argument("--loss", type=str, action="append", choices=LOSSES, help="restrict to a loss, repeatable")
    gc.add_argument("--seed", type=int, help="seed (default: ${} or config)".format(SEED_VARIABLE))
    gc.add_argument("--draws", type=int, metavar="N", help="random draws per loss")
    gc.set_defaults(func=cmd_gradcheck)

    model = commands.add_parser("model", help="skeletal model utilities")
    model_commands = model.add_subparsers(dest="model_command", metavar="COMMAND")
    model_commands.required = True
    validate = model_commands.add_parser("validate", parents=[common], help="validate a model file")
    validate.add_argument("model_file", metavar="FILE", help="model file")
    validate.set_defaults(func=cmd_model_validate)
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    init_logger(args.log_dir, args.verbose)
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except (ValueError, OSError, KeyError) as e:
        logger.error("%s%s", _stage_prefix(e), e)
        return 2
    except RuntimeError as e:
        logger.error("%s%s", _stage_prefix(e), e)
        return 1


def _stage_prefix(e):
    stage = getattr(e, "stage", None)
    return "{} failed: ".format(stage) if stage else ""


if __name__ == "__main__":
    sys.exit(main())
