"""Run configuration: one JSON document with defaults for every field.

Unknown keys and wrongly typed values are rejected; range checks are left to
the dataclasses the sections are turned into.
"""

import copy
import json
from pathlib import Path

from dulda.phantom import DEFAULT_ACTIVITY, PhantomSpec, ScanSpec
from dulda.projector import GridSpec, SinogramSpec, check_geometry
from dulda.regularizer import init_params
from dulda.solvers import LdaConfig
from dulda.trainer import LOSS_MODES, TrainConfig

DEFAULTS = {
    "seed": 0,
    "grid": {"n_pixels_per_side": 64, "pixel_size": 1.0},
    "sinogram": {"n_angles": 90, "n_bins": 96, "bin_width": 1.0},
    "phantom": {
        "n_background_ellipses": 3,
        "n_tumors": 2,
        "tumor_radius_range": [2.0, 4.5],
        "activity_levels": dict(DEFAULT_ACTIVITY),
    },
    "scan": {"total_counts": 1e6, "randoms_fraction": 0.2},
    "dataset": {"n_train": 24, "n_val": 4, "n_test": 8, "realization": 0},
    "regularizer": {
        "channels": [1, 8, 8, 8],
        "kernel_size": 3,
        "delta": 0.002,
        "alpha0": 0.01,
        "beta0": 0.02,
        "init_seed": 0,
    },
    "lda": {
        "n_phases": 4,
        "max_line_search": 10,
        "shrink": 0.5,
        "eps_shrink": 0.9,
        "sigma_tol": 1.0,
        "eps0": 1e-3,
        "x0_value": 1.0,
    },
    "train": {
        "lam": 0.1,
        "learning_rate": 1e-4,
        "batch_size": 8,
        "epochs": 100,
        "rotation_set": [90, 180, 270],
        "noise": "poisson",
        "noise_std": 1.0,
        "loss_mode": "dual",
        "stop_gradient_target": False,
        "allow_interpolated_rotation": False,
        "max_retries": 5,
    },
    "mlem": {"n_iter": 25},
    "emtv": {"n_iter": 25, "penalty": 2e-5},
    "ablation": {"phase_counts": [2, 4, 6, 8, 10], "loss_modes": list(LOSS_MODES)},
    "bias_variance": {"realizations": 5},
}


class ConfigError(ValueError):
    pass


def _check(value, default, where):
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        # free-form mapping of region name to activity
        if where.endswith("activity_levels"):
            for k, v in value.items():
                _check(v, 0.0, f"{where}.{k}")
            return
        unknown = set(value) - set(default)
        if unknown:
            raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
        for k, v in value.items():
            _check(v, default[k], f"{where}.{k}" if where else k)
    elif isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        if default:
            for i, v in enumerate(value):
                _check(v, default[0], f"{where}[{i}]")


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "activity_levels":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, seed=None):
    """Defaults overlaid with the JSON file at ``path`` and an optional seed."""
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    _check(user, DEFAULTS, "")
    cfg = _merge(DEFAULTS, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def validate(cfg):
    """Build every typed object once so range errors surface before any work."""
    try:
        check_geometry(grid_spec(cfg), sino_spec(cfg))
        phantom_spec(cfg), scan_spec(cfg)
        lda_config(cfg), train_config(cfg), initial_params(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    ds = cfg["dataset"]
    if min(ds["n_train"], ds["n_val"], ds["n_test"]) < 0 or ds["realization"] < 0:
        raise ConfigError("dataset sizes and realization must be nonnegative")
    if ds["n_train"] + ds["n_val"] + ds["n_test"] == 0:
        raise ConfigError("dataset has zero samples")
    if cfg["mlem"]["n_iter"] < 0 or cfg["emtv"]["n_iter"] < 0 or cfg["emtv"]["penalty"] < 0:
        raise ConfigError("iteration counts and the EM-TV penalty must be nonnegative")
    if any(k < 1 for k in cfg["ablation"]["phase_counts"]):
        raise ConfigError("ablation phase counts must be >= 1")
    if any(m not in LOSS_MODES for m in cfg["ablation"]["loss_modes"]):
        raise ConfigError(f"ablation loss modes must be among {LOSS_MODES}")
    if cfg["bias_variance"]["realizations"] < 2:
        raise ConfigError("bias_variance.realizations must be >= 2")
    lda, reg = cfg["lda"], cfg["regularizer"]
    if reg["channels"][0] != 1 or len(reg["channels"]) < 2 or reg["kernel_size"] % 2 == 0:
        raise ConfigError("regularizer needs channels starting at 1 and an odd kernel size")
    if lda["n_phases"] < 1:
        raise ConfigError("lda.n_phases must be >= 1")


def grid_spec(cfg):
    return GridSpec(**cfg["grid"])


def sino_spec(cfg):
    return SinogramSpec(**cfg["sinogram"])


def phantom_spec(cfg):
    p = dict(cfg["phantom"])
    p["tumor_radius_range"] = tuple(p["tumor_radius_range"])
    if len(p["tumor_radius_range"]) != 2:
        raise ValueError("tumor_radius_range needs two entries")
    return PhantomSpec(seed=cfg["seed"], **p)


def scan_spec(cfg):
    return ScanSpec(seed=cfg["seed"], **cfg["scan"])


def lda_config(cfg, n_phases=None):
    d = dict(cfg["lda"])
    if n_phases is not None:
        d["n_phases"] = n_phases
    return LdaConfig(**d)


def train_config(cfg, **overrides):
    d = dict(cfg["train"], seed=cfg["seed"])
    d["rotation_set"] = tuple(d["rotation_set"])
    d.update(overrides)
    return TrainConfig(**d)


def initial_params(cfg, n_phases=None):
    reg = cfg["regularizer"]
    return init_params(
        n_phases=n_phases or cfg["lda"]["n_phases"],
        channels=tuple(reg["channels"]),
        kernel_size=reg["kernel_size"],
        delta=reg["delta"],
        alpha0=reg["alpha0"],
        beta0=reg["beta0"],
        seed=reg["init_seed"],
    )


def dumps(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True)
