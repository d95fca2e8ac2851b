"""Pipeline configuration: one versioned TOML file covering every module.

The schema is the DEFAULTS tree below; unknown sections or keys are
rejected. Values can come from (in priority order) environment variables
``DEPTHNAV_<SECTION>__<KEY>``, the TOML file, a named profile, then the
defaults. A sha256 of the canonical JSON dump identifies the configuration
and is embedded in every artifact manifest.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import control, depthproc, dynamics, env, models, ppo
from . import scene as sc
from .errors import ConfigError

ENV_PREFIX = "DEPTHNAV_"

DEFAULTS: dict[str, dict] = {
    "global": {
        "seed": 0,
        "out_dir": "runs/default",
        "profile": "tiny",
    },
    "scene": {
        "density": 0.12,
        "density_bootstrap": 0.02,
        "bounds_min": [0.0, -6.0, 0.0],
        "bounds_max": [18.0, 6.0, 5.0],
        "clearance": 1.5,
        "num_scenes_train": 8,
        "num_scenes_eval": 8,
        "kind_weights": [0.25, 0.15, 0.6],
        "sphere_radius": [0.15, 0.5],
        "box_half_extent": [0.1, 0.45],
        "cylinder_radius": [0.08, 0.35],
    },
    "camera": {
        "width": 80,
        "height": 48,
        "fx": 60.0,
        "fy": 60.0,
        "cx": 40.0,
        "cy": 24.0,
        "max_depth": 12.0,
        "baseline": 0.1,
    },
    "degrade": {
        "subpixel_levels": 4,
        "occlusion_threshold": 0.08,
        "speckle_rate": 0.1,
        "speckle_patch": 5,
        "noise_sigma_coeff": 0.004,
        "min_depth": 0.3,
    },
    "dynamics": {
        "mass": 0.75,
        "inertia_diag": [0.0025, 0.0025, 0.004],
        "k_v": 0.1,
        "k_omega": 0.05,
        "drone_radius": 0.15,
    },
    "control": {
        "omega_n": [8.0, 8.0, 4.0],
        "zeta": [0.7, 0.7, 0.7],
        "omega_max": [3.0, 3.0, 1.5],
        "omega_dot_max": [30.0, 30.0, 10.0],
        "thrust_rate_max": 15.0,
        "thrust_max": 25.0,
        "rate_gain": 40.0,
        "dt": 0.01,
        "action_period": 0.1,
        "k_q": [100.0, 100.0, 25.0],
        "k_omega_track": [18.0, 18.0, 8.0],
        "tau_max": [0.6, 0.6, 0.25],
    },
    "reward": {
        "lambda_d": -0.02,
        "lambda_z": -0.05,
        "lambda_v": -0.1,
        "lambda_dir": -0.01,
        "lambda_input": -0.001,
        "lambda_perc": -0.02,
        "v_max": 2.0,
        "r_exceed": -10.0,
        "r_collision": -10.0,
        "r_arrive": 10.0,
        "d_min": 0.6,
    },
    "env": {
        "depth_mode": "gt",
        "dilation_kernel": 5,
        "timeout_s": 15.0,
        "a_xy_max": 5.0,
        "a_z_min": 2.0,
        "a_z_max": 17.0,
        "yaw_rate_max": 1.5,
        "min_goal_distance": 4.0,
        "flight_band": [0.35, 0.75],
        "yaw_jitter": 0.3,
        "perception": "vae",  # vae | lstm
    },
    "vae": {
        "arch": "resnet",  # resnet | plain
        "beta": 0.001,
        "learning_rate": 0.0003,
        "epochs": 20,
        "batch_size": 64,
        "seed_offset": 100,
    },
    "lstm": {
        "learning_rate": 0.0003,
        "epochs": 4,
        "batch_size": 16,
        "gap": 20,
        "seed_offset": 200,
    },
    "ppo": {
        "discount": 0.99,
        "gae_lambda": 0.95,
        "clip_range": 0.2,
        "epochs": 4,
        "minibatch": 1024,
        "entropy_coef": 0.003,
        "value_coef": 0.5,
        "learning_rate": 0.0003,
        "rollout_length": 256,
        "num_envs": 8,
        "total_steps": 300000,
        "kl_target": 0.05,
    },
    "bootstrap": {
        "total_steps": 60000,
        "dataset_size": 4000,
    },
    "adapt": {
        "lambda_grl": 1.0,
        "gamma": 0.5,
        "lr_vae": 0.0001,
        "lr_disc": 0.001,
        "batch_size": 64,
        "steps": 1500,
        "warmup_fraction": 0.1,
    },
    "eval": {
        "trials_per_scene": 30,
        "gsi_samples": 2000,
        "max_parallel": 32,
    },
}

PROFILES: dict[str, dict[str, dict]] = {
    # CI-scale: minutes end to end
    "tiny": {
        "camera": {"width": 80, "height": 48, "fx": 60.0, "fy": 60.0, "cx": 40.0, "cy": 24.0},
        "ppo": {"num_envs": 4, "total_steps": 40000, "minibatch": 512, "rollout_length": 128},
        "bootstrap": {"total_steps": 12000, "dataset_size": 800},
        "vae": {"epochs": 6},
        "lstm": {"epochs": 2},
        "adapt": {"steps": 300},
        "scene": {"num_scenes_train": 4, "num_scenes_eval": 4},
        "eval": {"trials_per_scene": 5, "gsi_samples": 400},
    },
    # acceptance-scale: hours on a CPU workstation
    "desk": {
        "camera": {"width": 112, "height": 64, "fx": 85.0, "fy": 85.0, "cx": 56.0, "cy": 32.0},
        "ppo": {"num_envs": 8, "total_steps": 400000},
        "bootstrap": {"total_steps": 60000, "dataset_size": 4000},
        "vae": {"epochs": 20},
        "lstm": {"epochs": 4},
        "adapt": {"steps": 2000},
        "scene": {"num_scenes_train": 8, "num_scenes_eval": 8},
        "eval": {"trials_per_scene": 30, "gsi_samples": 2000},
    },
}


@dataclass
class Config:
    """Validated configuration tree plus its content hash."""

    data: dict[str, dict]

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    @property
    def hash(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    @property
    def seed(self) -> int:
        return int(self.data["global"]["seed"])

    @property
    def out_dir(self) -> str:
        return self.data["global"]["out_dir"]


def _merge(base: dict, overlay: dict, path: str = "") -> None:
    for key, value in overlay.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a section")
            _merge(base[key], value, where)
        else:
            base[key] = _coerce(base[key], value, where)


def _coerce(default, value, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"{where} must be a list of length {len(default)}")
        return [_coerce(d, v, where) for d, v in zip(default, value)]
    raise ConfigError(f"unsupported config type at {where}")


def _env_overrides() -> dict[str, dict]:
    out: dict[str, dict] = {}
    for name, raw in os.environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, key = name[len(ENV_PREFIX):].lower().split("__", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.setdefault(section, {})[key] = value
    return out


def load_config(path: str | None = None, profile: str | None = None,
                overrides: dict | None = None, use_env: bool = True) -> Config:
    """Resolve defaults <- profile <- file <- explicit overrides <- env vars."""
    data = copy.deepcopy(DEFAULTS)
    file_data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                file_data = tomllib.load(fh)
        except FileNotFoundError as err:
            raise ConfigError(f"config file not found: {path}") from err
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"invalid TOML in {path}: {err}") from err
    profile_name = profile or file_data.get("global", {}).get("profile") or data["global"]["profile"]
    if profile_name not in PROFILES:
        raise ConfigError(f"unknown profile {profile_name!r}; choose from {sorted(PROFILES)}")
    _merge(data, PROFILES[profile_name])
    data["global"]["profile"] = profile_name
    if file_data:
        _merge(data, file_data)
    if overrides:
        _merge(data, overrides)
    if use_env:
        _merge(data, _env_overrides())
    return Config(data)


def save_config(config: Config, path: str) -> None:
    """Deterministic TOML emission (sections and keys in schema order)."""
    lines: list[str] = []
    for section, entries in config.data.items():
        lines.append(f"[{section}]")
        for key, value in entries.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines))
    os.replace(tmp, path)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {type(value).__name__} to TOML")


# ---------------------------------------------------------------------------
# builders: config sections -> module parameter objects
# ---------------------------------------------------------------------------

def camera_model(cfg: Config) -> sc.CameraModel:
    c = cfg["camera"]
    return sc.CameraModel(width=c["width"], height=c["height"], fx=c["fx"], fy=c["fy"],
                          cx=c["cx"], cy=c["cy"], max_depth=c["max_depth"], baseline=c["baseline"])


def primitive_dims(cfg: Config) -> sc.PrimitiveDims:
    s = cfg["scene"]
    return sc.PrimitiveDims(
        kind_weights=tuple(s["kind_weights"]),
        sphere_radius=tuple(s["sphere_radius"]),
        box_half_extent=tuple(s["box_half_extent"]),
        cylinder_radius=tuple(s["cylinder_radius"]),
    )


def drone_params(cfg: Config) -> dynamics.DroneParams:
    d = cfg["dynamics"]
    return dynamics.DroneParams(mass=d["mass"], inertia=np.diag(d["inertia_diag"]),
                                k_v=d["k_v"], k_omega=d["k_omega"], drone_radius=d["drone_radius"])


def refgen_params(cfg: Config) -> control.RefGenParams:
    c = cfg["control"]
    return control.RefGenParams(
        omega_n=np.array(c["omega_n"]), zeta=np.array(c["zeta"]),
        omega_max=np.array(c["omega_max"]), omega_dot_max=np.array(c["omega_dot_max"]),
        thrust_rate_max=c["thrust_rate_max"], thrust_max=c["thrust_max"],
        rate_gain=c["rate_gain"], dt=c["dt"], action_period=c["action_period"],
    )


def tracker_gains(cfg: Config) -> control.TrackerGains:
    c = cfg["control"]
    return control.TrackerGains(k_q=np.array(c["k_q"]), k_omega=np.array(c["k_omega_track"]),
                                tau_max=np.array(c["tau_max"]))


def reward_params(cfg: Config) -> env.RewardParams:
    r = cfg["reward"]
    return env.RewardParams(**r)


def degrade_params(cfg: Config, seed: int = 0) -> depthproc.StereoDegradeParams:
    d = cfg["degrade"]
    levels = d["subpixel_levels"]
    return depthproc.StereoDegradeParams(
        subpixel_levels=None if levels == 0 else levels,
        occlusion_threshold=d["occlusion_threshold"], speckle_rate=d["speckle_rate"],
        speckle_patch=d["speckle_patch"], noise_sigma_coeff=d["noise_sigma_coeff"],
        min_depth=d["min_depth"], seed=seed,
    )


def action_bounds(cfg: Config) -> env.ActionBounds:
    e = cfg["env"]
    return env.ActionBounds(a_xy_max=e["a_xy_max"], a_z_min=e["a_z_min"],
                            a_z_max=e["a_z_max"], yaw_rate_max=e["yaw_rate_max"])


def env_params(cfg: Config, depth_mode: str | None = None, dilation: int | None = None) -> env.EnvParams:
    e = cfg["env"]
    return env.EnvParams(
        reward=reward_params(cfg),
        bounds=action_bounds(cfg),
        drone=drone_params(cfg),
        refgen=refgen_params(cfg),
        gains=tracker_gains(cfg),
        degrade=degrade_params(cfg, seed=cfg.seed),
        depth_mode=depth_mode if depth_mode is not None else e["depth_mode"],
        dilation_kernel=dilation if dilation is not None else e["dilation_kernel"],
        timeout_s=e["timeout_s"],
        flight_band=tuple(e["flight_band"]),
        yaw_jitter=e["yaw_jitter"],
        min_goal_distance=e["min_goal_distance"],
    )


def ppo_config(cfg: Config, total_steps: int | None = None, seed: int | None = None) -> ppo.PpoConfig:
    p = dict(cfg["ppo"])
    if total_steps is not None:
        p["total_steps"] = total_steps
    return ppo.PpoConfig(seed=cfg.seed if seed is None else seed, **p)


def adaptation_params(cfg: Config) -> models.AdaptationParams:
    a = cfg["adapt"]
    return models.AdaptationParams(
        lambda_grl=a["lambda_grl"], gamma=a["gamma"], beta=cfg["vae"]["beta"],
        lr_vae=a["lr_vae"], lr_disc=a["lr_disc"], batch_size=a["batch_size"],
        warmup_fraction=a["warmup_fraction"],
    )


def observation_scale(latent_dim: int, cfg: Config) -> np.ndarray:
    """Fixed diagonal scaling for policy inputs (documented in the layout)."""
    c = cfg["control"]
    phys = np.array([3.0, 3.0, 1.0, 1.0, 1.0, 4.0, 4.0, 4.0,
                     *np.array(c["omega_max"]),
                     *np.array(c["omega_dot_max"])], dtype=np.float32)
    return np.concatenate([phys, np.full(latent_dim, 3.0, dtype=np.float32)])