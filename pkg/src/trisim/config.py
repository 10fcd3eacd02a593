"""Workbench configuration: a flat `key = value` text file with one
[section] per module. Unknown sections or keys are rejected; every value has
a typed default so a missing file section falls back to the documented
defaults.

All randomness flows from one master seed through named sub-streams so each
command can be re-run independently and reproducibly.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .embed import EmbedConfig
from .errors import ConfigError
from .cut import CutConfig
from .policy import TrainCfg
from .raster import Camera, StyleParams
from .reward import HsvBounds, RewardConfig
from .sim import SimConfig

__all__ = ["WorkbenchConfig", "named_stream", "STREAMS"]

STREAMS = {
    "sim": 0,
    "dataset": 1,
    "stylize": 2,
    "translator": 3,
    "select": 4,
    "policy": 5,
    "patches": 6,
}


def named_stream(master_seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible generator for one subsystem."""
    if name not in STREAMS:
        raise ConfigError(f"unknown random stream {name!r}")
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(STREAMS[name],))
    return np.random.Generator(np.random.PCG64(seq))


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_floats(s: str, n: int) -> tuple:
    parts = s.split()
    if len(parts) != n:
        raise ConfigError(f"expected {n} numbers, got {s!r}")
    return tuple(float(p) for p in parts)


# section -> key -> (parser, default)
_SCHEMA: dict[str, dict[str, tuple]] = {
    "sim": {
        "grid_nx": (int, 17),
        "grid_ny": (int, 21),
        "sheet_size": (lambda s: _parse_floats(s, 2), (0.08, 0.10)),
        "origin": (lambda s: _parse_floats(s, 3), (0.335, 0.102, 0.465)),
        "dt": (float, 1.0 / 60.0),
        "solver_iters": (int, 20),
        "gravity": (lambda s: _parse_floats(s, 3), (0.0, -9.81, 0.0)),
        "grasp_radius": (float, 0.008),
        "pull_substeps": (int, 30),
        "settle_steps": (int, 30),
        "damping": (float, 0.02),
        "stiffness": (float, 1.0),
        "workspace_min": (lambda s: _parse_floats(s, 3), (0.275, 0.092, 0.395)),
        "workspace_max": (lambda s: _parse_floats(s, 3), (0.395, 0.162, 0.545)),
        "pin_fracs": (lambda s: _parse_floats(s, 2), (0.0, 1.0)),
        "line_frac": (float, 0.8),
        "line_span": (lambda s: _parse_floats(s, 2), (0.35, 0.65)),
        "line_width": (float, 0.008),
        "fold_frac": (float, 0.65),
        "floor_enabled": (_parse_bool, True),
        "tissue_thickness": (float, 0.002),
        "grasp_shell": (float, 0.001),
        "pull_strain_limit": (float, 0.35),
    },
    "camera": {
        "eye_offset": (lambda s: _parse_floats(s, 3), (0.0, 0.17, -0.06)),
        "look_offset": (lambda s: _parse_floats(s, 3), (0.0, 0.0, 0.0)),
        "up": (lambda s: _parse_floats(s, 3), (0.0, 1.0, 0.0)),
        "fov": (float, 50.0),
        "width": (int, 128),
        "height": (int, 128),
    },
    "style": {
        "gamma": (float, 1.4),
        "vignette_strength": (float, 0.35),
        "noise_stddev": (float, 6.0),
        "blur_radius": (int, 1),
    },
    "reward": {
        "eps1_frac": (float, 0.005),
        "eps2": (float, 0.01),
        "hue_band": (lambda s: _parse_floats(s, 2), (0.0, 10.0)),
        "hue_band2": (lambda s: _parse_floats(s, 2), (170.0, 179.0)),
        "sat_band": (lambda s: _parse_floats(s, 2), (100.0, 255.0)),
        "val_band": (lambda s: _parse_floats(s, 2), (100.0, 255.0)),
    },
    "dataset": {
        "count_source": (int, 500),
        "count_target": (int, 150),
        "image_size": (int, 128),
        "actions_per_episode": (int, 4),
    },
    "cut": {
        "epochs": (int, 400),
        "save_every": (int, 10),
        "batch_size": (int, 1),
        "lr": (float, 2e-4),
        "adam_beta1": (float, 0.5),
        "tau": (float, 0.07),
        "lambda_gan": (float, 1.0),
        "lambda_x": (float, 1.0),
        "lambda_y": (float, 1.0),
        "n_taps": (int, 5),
        "patches_per_tap": (int, 32),
        "embed_dim": (int, 32),
        "width": (int, 8),
        "head_hidden": (int, 32),
    },
    "embed": {
        "n_taps": (int, 5),
        "patches_per_tap": (int, 32),
        "embed_dim": (int, 32),
        "seed_policy": (str, "global"),
        "location_seed": (int, 0),
    },
    "metrics": {
        "is_splits": (int, 4),
        "feature_epochs": (int, 12),
        "feature_width": (int, 8),
        "feature_dim": (int, 16),
        "score_sample": (int, 128),
        "top_n": (int, 5),
    },
    "policy": {
        "batch_size": (int, 64),
        "lr": (float, 3e-4),
        "entropy_coef": (float, 0.0),
        "epochs": (int, 128),
        "total_steps_image": (int, 12800),
        "total_steps_embedded": (int, 128000),
        "clip": (float, 0.2),
        "gamma": (float, 0.99),
        "gae_lambda": (float, 0.95),
        "runs_per_condition": (int, 10),
        "checkpoints_per_run": (int, 10),
        "test_episodes": (int, 10),
        "horizon": (int, 5),
        "n_envs": (int, 10),
        "rollout_steps": (int, 640),
        "value_coef": (float, 0.5),
        "hidden": (int, 64),
        "conv_width": (int, 8),
        "settle_on_reset": (int, 60),
    },
}


@dataclass
class WorkbenchConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    @staticmethod
    def defaults() -> "WorkbenchConfig":
        return WorkbenchConfig(
            {
                section: {k: default for k, (_, default) in keys.items()}
                for section, keys in _SCHEMA.items()
            }
        )

    @staticmethod
    def load(path: str) -> "WorkbenchConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        read = parser.read(path, encoding="utf-8")
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        cfg = WorkbenchConfig.defaults()
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                parse, _ = _SCHEMA[section][key]
                try:
                    cfg.values[section][key] = parse(raw)
                except ConfigError:
                    raise
                except Exception as exc:
                    raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc
        cfg.validate()
        return cfg

    def get(self, section: str, key: str):
        return self.values[section][key]

    def canonical(self) -> str:
        buf = io.StringIO()
        for section in sorted(self.values):
            buf.write(f"[{section}]\n")
            for key in sorted(self.values[section]):
                v = self.values[section][key]
                if isinstance(v, tuple):
                    v = " ".join(repr(x) for x in v)
                buf.write(f"{key} = {v}\n")
        return buf.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def validate(self) -> "WorkbenchConfig":
        self.sim_config().validate()
        self.camera().validate()
        self.style_params().validate()
        self.reward_config().validate()
        self.cut_config().validate()
        self.embed_config().validate()
        self.train_cfg().validate()
        return self

    # ---- typed views ---------------------------------------------------------

    def sim_config(self) -> SimConfig:
        s = self.values["sim"]
        return SimConfig(
            grid_nx=s["grid_nx"],
            grid_ny=s["grid_ny"],
            sheet_size=tuple(s["sheet_size"]),
            origin=tuple(s["origin"]),
            dt=s["dt"],
            solver_iters=s["solver_iters"],
            gravity=tuple(s["gravity"]),
            grasp_radius=s["grasp_radius"],
            pull_substeps=s["pull_substeps"],
            settle_steps=s["settle_steps"],
            damping=s["damping"],
            stiffness=s["stiffness"],
            workspace_box=(tuple(s["workspace_min"]), tuple(s["workspace_max"])),
            pin_fracs=tuple(s["pin_fracs"]),
            line_frac=s["line_frac"],
            line_span=tuple(s["line_span"]),
            line_width=s["line_width"],
            fold_frac=s["fold_frac"],
            floor_enabled=s["floor_enabled"],
            tissue_thickness=s["tissue_thickness"],
            grasp_shell=s["grasp_shell"],
            pull_strain_limit=s["pull_strain_limit"],
        )

    def camera(self, resolution: tuple[int, int] | None = None) -> Camera:
        c = self.values["camera"]
        origin = np.array(self.values["sim"]["origin"])
        eye = origin + np.array(c["eye_offset"])
        look = origin + np.array(c["look_offset"])
        return Camera(
            eye=tuple(eye),
            look_at=tuple(look),
            up=tuple(c["up"]),
            vertical_fov=c["fov"],
            resolution=resolution or (c["width"], c["height"]),
        )

    def style_params(self, seed: int = 0) -> StyleParams:
        s = self.values["style"]
        return StyleParams(
            gamma=s["gamma"],
            vignette_strength=s["vignette_strength"],
            noise_stddev=s["noise_stddev"],
            blur_radius=s["blur_radius"],
            seed=seed,
        )

    def reward_config(self, resolution: tuple[int, int] | None = None) -> RewardConfig:
        r = self.values["reward"]
        c = self.values["camera"]
        w, h = resolution or (c["width"], c["height"])
        eps1 = max(1, int(round(r["eps1_frac"] * w * h)))
        s_lo, s_hi = (int(v) for v in r["sat_band"])
        v_lo, v_hi = (int(v) for v in r["val_band"])
        h1_lo, h1_hi = (int(v) for v in r["hue_band"])
        h2_lo, h2_hi = (int(v) for v in r["hue_band2"])
        bounds = HsvBounds(
            lower=(h1_lo, s_lo, v_lo),
            upper=(h1_hi, s_hi, v_hi),
            second_band=((h2_lo, s_lo, v_lo), (h2_hi, s_hi, v_hi)),
        )
        return RewardConfig(eps1=eps1, eps2=r["eps2"], bounds=bounds)

    def cut_config(self) -> CutConfig:
        c = self.values["cut"]
        return CutConfig(
            lambda_gan=c["lambda_gan"],
            lambda_x=c["lambda_x"],
            lambda_y=c["lambda_y"],
            tau=c["tau"],
            n_taps=c["n_taps"],
            patches_per_tap=c["patches_per_tap"],
            embed_dim=c["embed_dim"],
            epochs=c["epochs"],
            save_every=c["save_every"],
            batch_size=c["batch_size"],
            lr=c["lr"],
            adam_beta1=c["adam_beta1"],
            width=c["width"],
            head_hidden=c["head_hidden"],
        )

    def embed_config(self) -> EmbedConfig:
        e = self.values["embed"]
        return EmbedConfig(
            n_taps=e["n_taps"],
            patches_per_tap=e["patches_per_tap"],
            embed_dim=e["embed_dim"],
            seed_policy=e["seed_policy"],
            location_seed=e["location_seed"],
        )

    def train_cfg(self) -> TrainCfg:
        p = self.values["policy"]
        return TrainCfg(
            batch_size=p["batch_size"],
            lr=p["lr"],
            entropy_coef=p["entropy_coef"],
            epochs=p["epochs"],
            total_steps_image=p["total_steps_image"],
            total_steps_embedded=p["total_steps_embedded"],
            clip=p["clip"],
            gamma=p["gamma"],
            gae_lambda=p["gae_lambda"],
            runs_per_condition=p["runs_per_condition"],
            checkpoints_per_run=p["checkpoints_per_run"],
            test_episodes_per_checkpoint=p["test_episodes"],
            horizon=p["horizon"],
            n_envs=p["n_envs"],
            rollout_steps=p["rollout_steps"],
            value_coef=p["value_coef"],
            hidden=p["hidden"],
            conv_width=p["conv_width"],
        )
