import json

DEFAULTS = {
    "ik": {
        "max_iterations": 100,
        "damping_init": 1e-3,
        "convergence_tol": 1e-8,
        "limit_mode": "project",  # supported: project, penalty
        "penalty_weight": 100.
    },
    "scale": {
        "bounds": [0.5, 2.0],
        "regularization": 1e-6,  # weight of the (s - 1) prior, 0 disables it
        "max_iterations": 200
    },
    "reconstruction": {
        "confidence_threshold": 0.3,
        "max_gap": 5,
        "filter_cutoff_hz": 6.,
        "filter_order": 4,
        "static_frame": 0
    },
    "synth": {
        "seed": 0,
        "subjects": 2,
        "clips_per_subject": 1,
        "duration_s": 10.,
        "frame_rate": 60.,
        "static_duration_s": 1.,
        "motions": ["gait", "squat", "arm_wave"],
        "noise_px": 0.,
        "marker_noise_m": 0.,
        "scale_sigma": 0.07,
        "scale_clip": [0.8, 1.2],
        "split": [42, 6, 8]
    },
    "camera": {
        "focal_length_mm": 33.,
        "sensor_width_mm": 36.,
        "image_width_px": 1080,
        "image_height_px": 720,
        "distance_m": 4.,
        "height_m": 1.1,
        "height_jitter_m": 0.1,
        "azimuth_jitter_deg": 5.,
        "target": [0., 0.95, 0.],
        "target_jitter_m": 0.05
    },
    "eval": {
        "align": "frame",  # supported: frame, sequence
        "mae_reduction": "sum",  # supported: sum, mean
        "exclude_coords": []
    },
    "gradcheck": {
        "seed": 0,
        "draws": 1000,
        "frames": 2,
        "step": 1e-6,
        "rtol": 1e-4,
        "pass_fraction": 0.99
    }
}


def _merge(src, dst):
    for k, v in src.items():
        if k in dst:
            if isinstance(v, dict):
                _merge(src[k], dst[k])
        else:
            dst[k] = v


def load_config(config_file=None, defaults=DEFAULTS):
    """Load a JSON configuration file, filling every missing entry from `defaults`

    Parameters
    ----------
    config_file : str or None
        Path to a JSON file. If `None` a copy of the defaults is returned.
    defaults : dict
        Nested dictionary of default values.

    Returns
    -------
    config : dict
        The merged configuration.
    """
    if config_file is None:
        config = {}
    else:
        with open(config_file, "r") as fd:
            config = json.load(fd)
    _merge(json.loads(json.dumps(defaults)), config)
    return config
