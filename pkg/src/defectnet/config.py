"""Run configuration: one JSON document with a desk/paper profile switch.

The profile chooses a full default tree (data, model, training, patching,
evaluation); user keys override defaults and unknown keys are rejected.
"desk" is sized to train on a laptop CPU in minutes; "paper" carries the
full-scale settings (400/20/200 patching, batch 10, VGG-19 widths).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

from .model import ModelConfig
from .synth import SceneSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration or CLI usage."""


DESK_PROFILE = {
    "profile": "desk",
    "seed": 0,
    "data": {
        "scenes": 200,
        "image_size": 96,
        "num_classes": 4,
        "ratios": [1000, 300, 10, 1],
        "presence": [0.5, 0.125],
        "noise_sigma": 0.10,
        "blob_area_ranges": [],
        "train_fraction": 0.8,
    },
    "model": {
        "widths": [16, 32, 64, 64, 64],
        "conv_counts": [1, 1, 1, 1, 1],
        "dilated_width": 64,
        "dilation_schedule": [2, 4, 8, 16, 16, 8, 4, 2],
        "skip_stages": [1, 2, 3, 4, 5],
        "branch_stage": 2,
        "leaky_alpha": 0.1,
    },
    "train": {
        "loss": "hybrid",
        "learning_rate": 1e-3,
        "batch_size": 1,
        "epochs": 30,
        "steps_per_epoch": 100,
        "ce_clamp": "max",
        "grad_clip": 10.0,
        "weight_norm": "expected_pixel",
        "weight_scale": 3.0,
    },
    "patch": {
        "patch_size": 64,
        "train_stride": 16,
        "infer_overlap": 32,
        "min_distinct_classes": 3,
    },
    "eval": {
        "defect_class_ids": [2, 3],
        "ablate_seeds": [0, 1, 2],
    },
}

PAPER_PROFILE = {
    "profile": "paper",
    "seed": 0,
    "data": {
        "scenes": 24,
        "image_size": 1024,
        "num_classes": 9,
        "ratios": [20000, 6000, 200, 60, 30, 20, 12, 8, 4],
        "presence": [1.0, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3],
        "noise_sigma": 0.10,
        "blob_area_ranges": [],
        "train_fraction": 0.8,
    },
    "model": {
        "widths": [64, 128, 256, 512, 512],
        "conv_counts": [2, 2, 4, 4, 4],
        "dilated_width": 128,
        "dilation_schedule": [2, 4, 8, 16, 16, 8, 4, 2],
        "skip_stages": [1, 2, 3, 4, 5],
        "branch_stage": 2,
        "leaky_alpha": 0.1,
    },
    "train": {
        "loss": "hybrid",
        "learning_rate": 1e-4,
        "batch_size": 10,
        "epochs": 30,
        "steps_per_epoch": None,
        "ce_clamp": "max",
        "grad_clip": 10.0,
        "weight_norm": "expected_pixel",
        "weight_scale": 1.0,
    },
    "patch": {
        "patch_size": 400,
        "train_stride": 20,
        "infer_overlap": 200,
        "min_distinct_classes": 3,
    },
    "eval": {
        "defect_class_ids": [2, 3, 4, 5, 6, 7, 8],
        "ablate_seeds": [0, 1, 2],
    },
}

PROFILES = {"desk": DESK_PROFILE, "paper": PAPER_PROFILE}


@dataclass
class RunConfig:
    raw: dict

    @property
    def profile(self):
        return self.raw["profile"]

    @property
    def seed(self):
        return self.raw["seed"]

    @property
    def num_classes(self):
        return self.raw["data"]["num_classes"]

    def scene_spec(self, seed=None) -> SceneSpec:
        d = self.raw["data"]
        return SceneSpec(
            image_size=d["image_size"],
            num_classes=d["num_classes"],
            ratios=tuple(d["ratios"]),
            blob_area_ranges=tuple(tuple(r) for r in d["blob_area_ranges"]),
            presence=tuple(d["presence"]),
            noise_sigma=d["noise_sigma"],
            seed=self.raw["seed"] if seed is None else seed,
        )

    def model_config(self) -> ModelConfig:
        m = self.raw["model"]
        return ModelConfig(
            num_classes=self.num_classes,
            widths=tuple(m["widths"]),
            conv_counts=tuple(m["conv_counts"]),
            dilated_width=m["dilated_width"],
            dilation_schedule=tuple(m["dilation_schedule"]),
            skip_stages=tuple(m["skip_stages"]),
            branch_stage=m["branch_stage"],
            leaky_alpha=m["leaky_alpha"],
        )

    def train_config(self, loss=None, seed=None) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            loss=t["loss"] if loss is None else loss,
            learning_rate=t["learning_rate"],
            batch_size=t["batch_size"],
            epochs=t["epochs"],
            seed=self.raw["seed"] if seed is None else seed,
            ce_clamp=t["ce_clamp"],
            grad_clip=t["grad_clip"],
            steps_per_epoch=t["steps_per_epoch"],
            weight_norm=t["weight_norm"],
            weight_scale=t["weight_scale"],
        )

    @property
    def patch(self):
        return self.raw["patch"]

    @property
    def defect_class_ids(self):
        return list(self.raw["eval"]["defect_class_ids"])

    @property
    def ablate_seeds(self):
        return list(self.raw["eval"]["ablate_seeds"])

    @property
    def train_fraction(self):
        return self.raw["data"]["train_fraction"]

    def config_hash(self):
        """Identity of a training run for checkpoint compatibility.

        train.epochs is excluded: extending a run past its old horizon is
        the resume use case, and the trajectory through shared epochs is
        unchanged by it.
        """
        pruned = copy.deepcopy(self.raw)
        pruned["train"].pop("epochs", None)
        return hashlib.sha256(
            json.dumps(pruned, sort_keys=True).encode("utf-8")
        ).hexdigest()


def _merge_strict(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be an object")
            out[key] = _merge_strict(base[key], value, where)
        else:
            out[key] = value
    return out


def load_run_config(source=None, overrides=None) -> RunConfig:
    """Build a RunConfig from a JSON path / dict plus CLI-style overrides.

    overrides maps dotted keys ("train.loss", "seed") to values; None values
    are ignored so unset CLI flags pass through.
    """
    user = {}
    if source is not None:
        if isinstance(source, dict):
            user = copy.deepcopy(source)
        else:
            try:
                with open(source) as fh:
                    user = json.load(fh)
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {source}")
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}")
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")

    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    profile = overrides.pop("profile", None) or user.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    user["profile"] = profile

    merged = _merge_strict(PROFILES[profile], user)
    for dotted, value in overrides.items():
        node = merged
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[parts[-1]] = value

    cfg = RunConfig(merged)
    try:  # construct the typed views so validation runs up front
        cfg.scene_spec()
        cfg.model_config()
        cfg.train_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc))
    if not 0.0 < cfg.train_fraction < 1.0:
        raise ConfigError("data.train_fraction must lie in (0,1)")
    if cfg.raw["data"]["scenes"] < 1:
        raise ConfigError("data.scenes must be >= 1")
    for c in cfg.defect_class_ids:
        if not 2 <= c < cfg.num_classes:
            raise ConfigError("eval.defect_class_ids must exclude background and structure")
    if not cfg.ablate_seeds:
        raise ConfigError("eval.ablate_seeds must not be empty")
    return cfg
