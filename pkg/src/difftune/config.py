"""Run configuration: INI-style key/value file with fail-closed validation.

Unknown sections or keys are rejected so a typo in a hyperparameter name
cannot silently fall back to a default. Every run echoes its fully resolved
configuration next to its outputs.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

from .condition import RecapStrategy
from .denoiser import DenoiserConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .schedule import NoiseSchedule, make_schedule

# section -> key -> (type, default)
SCHEMA = {
    "encoder": {
        "image_size": (int, 32),
        "patch_size": (int, 4),
        "embed_dim": (int, 64),
        "depth": (int, 4),
        "heads": (int, 4),
    },
    "denoiser": {
        "patch_size": (int, 4),
        "embed_dim": (int, 64),
        "depth": (int, 4),
        "heads": (int, 4),
        "time_embed_dim": (int, 64),
    },
    "schedule": {
        "timesteps": (int, 1000),
        "beta_min": (float, 1e-4),
        "beta_max": (float, 0.02),
    },
    "trainer": {
        "pretrain_steps": (int, 2000),
        "tune_steps": (int, 500),
        "batch_size": (int, 32),
        "states_per_image": (int, 2),
        "pretrain_lr": (float, 1e-3),
        "tune_lr": (float, 1e-4),
        "momentum": (float, 0.9),
        "seed": (int, 0),
    },
    "recap": {
        "strategy": (str, "random_subset"),
        "p": (float, 0.15),
        "window": (int, 6),
    },
    "dataset": {
        "dir": (str, "data"),
        "train_images": (int, 512),
        "pairs_per_pattern": (int, 256),
        "labeled_images": (int, 1024),
    },
    "eval": {
        "knn_k": (int, 5),
    },
    "output": {
        "dir": (str, "out"),
    },
}


@dataclass
class RunConfig:
    values: dict  # section -> key -> typed value

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["trainer"]["seed"]

    def with_seed(self, seed: int) -> "RunConfig":
        values = {s: dict(kv) for s, kv in self.values.items()}
        values["trainer"]["seed"] = int(seed)
        return RunConfig(values)

    def encoder_config(self) -> EncoderConfig:
        e = self.values["encoder"]
        return EncoderConfig(
            image_size=e["image_size"],
            patch_size=e["patch_size"],
            embed_dim=e["embed_dim"],
            depth=e["depth"],
            heads=e["heads"],
        )

    def denoiser_config(self) -> DenoiserConfig:
        d = self.values["denoiser"]
        grid = self.values["encoder"]["image_size"] // d["patch_size"]
        return DenoiserConfig(
            patch_size=d["patch_size"],
            embed_dim=d["embed_dim"],
            depth=d["depth"],
            heads=d["heads"],
            time_embed_dim=d["time_embed_dim"],
            cond_dim=self.values["encoder"]["embed_dim"],
            num_patches=grid * grid,
        )

    def schedule(self) -> NoiseSchedule:
        s = self.values["schedule"]
        return make_schedule(s["timesteps"], s["beta_min"], s["beta_max"])

    def recap_strategy(self) -> RecapStrategy:
        r = self.values["recap"]
        kind = r["strategy"]
        if kind == "random_subset":
            return RecapStrategy.random_subset(r["p"])
        if kind == "pooled_window":
            return RecapStrategy.pooled_window(r["window"])
        if kind in ("class_only", "class"):
            return RecapStrategy.class_only()
        if kind == "all":
            return RecapStrategy.all_tokens()
        raise ConfigError(f"[recap] strategy: unknown variant {kind!r}")


def default_config() -> RunConfig:
    return RunConfig(
        {section: {key: spec[1] for key, spec in keys.items()} for section, keys in SCHEMA.items()}
    )


def _convert(section: str, key: str, raw: str, target_type):
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {target_type.__name__}"
        ) from None


def load_config(path=None) -> RunConfig:
    """Parse a config file onto the defaults; None yields pure defaults."""
    cfg = default_config()
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            cfg.values[section][key] = _convert(section, key, raw, SCHEMA[section][key][0])
    return cfg


def effective_config_text(cfg: RunConfig) -> str:
    """Fully resolved INI text, sufficient to reproduce the run."""
    lines = []
    for section in SCHEMA:
        lines.append(f"[{section}]")
        for key in SCHEMA[section]:
            lines.append(f"{key} = {cfg.values[section][key]}")
        lines.append("")
    return "\n".join(lines)


def write_effective_config(cfg: RunConfig, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "effective-config.ini")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(effective_config_text(cfg))
    return path
