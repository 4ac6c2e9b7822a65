"""Experiment configuration files.

The format is flat ``section.key = value`` lines; ``#`` starts a comment.
Values are JSON scalars or lists (``36``, ``0.04``, ``true``, ``"sala"``,
``[3, 3, 3, 4, 1]``, ``null``). Unknown keys are rejected so that a typo can
never silently fall back to a default.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .aggregation import AggregatorConfig, Family
from .network import FEATURE_RECIPES, NetworkSpec
from .synthetic import SyntheticSceneSpec
from .training import AugmentConfig, TrainConfig

__all__ = ["ConfigParseError", "DataConfig", "ExperimentConfig", "parse_config", "parse_config_text",
           "emit_config", "PRESETS"]

PRESETS = tuple(f.value for f in Family)


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.key = key


@dataclass
class DataConfig:
    train_dir: str | None = None
    val_dir: str | None = None
    val_rooms: int = 2
    synthetic: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)

    @property
    def is_synthetic(self) -> bool:
        return self.train_dir is None


@dataclass
class ExperimentConfig:
    network: NetworkSpec = field(default_factory=NetworkSpec)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    checkpoint: str | None = None
    feature_recipe: str = "zrgb1"


# -- value checkers ---------------------------------------------------------


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return v


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _bool(v):
    if not isinstance(v, bool):
        raise TypeError("expected true or false")
    return v


def _str(v):
    if not isinstance(v, str):
        raise TypeError("expected a quoted string")
    return v


def _list(inner):
    def check(v):
        if not isinstance(v, list):
            raise TypeError("expected a list")
        return tuple(inner(x) for x in v)
    return check


def _opt(inner):
    def check(v):
        return None if v is None else inner(v)
    return check


def _choice(*options):
    def check(v):
        v = _str(v)
        if v not in options:
            raise TypeError(f"expected one of {', '.join(options)}")
        return v
    return check


SCHEMA: dict[str, Callable[[Any], Any]] = {
    "network.C": _int,
    "network.blocks_per_stage": _list(_int),
    "network.num_classes": _int,
    "network.feature_recipe": _choice(*FEATURE_RECIPES),
    "network.heads": _opt(_list(_int)),
    "network.bottleneck": _int,
    "network.base_grid": _float,
    "network.base_radius": _float,
    "network.k_max": _int,
    "network.neighbor_select": _choice("nearest", "random"),
    "network.leaky_slope": _float,
    "aggregator.preset": _choice(*PRESETS),
    "aggregator.groups": _int,
    "aggregator.pos_hidden": _opt(_int),
    "aggregator.sigma": _float,
    "training.lr": _float,
    "training.momentum": _float,
    "training.weight_decay": _float,
    "training.epochs": _int,
    "training.steps_per_epoch": _opt(_int),
    "training.batch_size": _int,
    "training.sphere_radius": _float,
    "training.min_sphere_points": _int,
    "training.rot_z": _bool,
    "training.scale_lo": _float,
    "training.scale_hi": _float,
    "training.jitter_sigma": _float,
    "training.color_drop_p": _float,
    "training.vote_stride": _opt(_float),
    "training.val_every": _int,
    "training.recalibration_batches": _int,
    "training.seed": _int,
    "training.workers": _int,
    "data.train_dir": _opt(_str),
    "data.val_dir": _opt(_str),
    "data.val_rooms": _int,
    "data.num_rooms": _int,
    "data.room_size": _float,
    "data.classes": _int,
    "data.density": _float,
    "data.primitives": _opt(_list(_str)),
    "data.noise_sigma": _float,
    "data.color_jitter": _float,
    "data.seed": _int,
    "output.dir": _str,
    "eval.checkpoint": _opt(_str),
}

REQUIRED = ("output.dir", "training.seed")


def _flatten(cfg: ExperimentConfig) -> dict[str, Any]:
    n, a, t, d = cfg.network, cfg.aggregator, cfg.training, cfg.data
    s = d.synthetic
    return {
        "network.C": n.C, "network.blocks_per_stage": list(n.blocks_per_stage),
        "network.num_classes": n.num_classes, "network.feature_recipe": cfg.feature_recipe,
        "network.heads": None if n.heads is None else list(n.heads), "network.bottleneck": n.bottleneck,
        "network.base_grid": n.base_grid, "network.base_radius": n.base_radius, "network.k_max": n.k_max,
        "network.neighbor_select": n.neighbor_select, "network.leaky_slope": n.leaky_slope,
        "aggregator.preset": a.family.value, "aggregator.groups": a.groups,
        "aggregator.pos_hidden": a.pos_hidden, "aggregator.sigma": a.sigma,
        "training.lr": t.lr, "training.momentum": t.momentum, "training.weight_decay": t.weight_decay,
        "training.epochs": t.epochs, "training.steps_per_epoch": t.steps_per_epoch,
        "training.batch_size": t.batch_size, "training.sphere_radius": t.sphere_radius,
        "training.min_sphere_points": t.min_sphere_points, "training.rot_z": t.aug.rot_z,
        "training.scale_lo": t.aug.scale_range[0], "training.scale_hi": t.aug.scale_range[1],
        "training.jitter_sigma": t.aug.jitter_sigma, "training.color_drop_p": t.aug.color_drop_p,
        "training.vote_stride": t.vote_stride, "training.val_every": t.val_every,
        "training.recalibration_batches": t.recalibration_batches,
        "training.seed": t.seed, "training.workers": t.workers,
        "data.train_dir": d.train_dir, "data.val_dir": d.val_dir, "data.val_rooms": d.val_rooms,
        "data.num_rooms": s.num_rooms, "data.room_size": s.room_size, "data.classes": s.classes,
        "data.density": s.density, "data.primitives": list(s.primitives), "data.noise_sigma": s.noise_sigma,
        "data.color_jitter": s.color_jitter, "data.seed": s.seed,
        "output.dir": cfg.output_dir, "eval.checkpoint": cfg.checkpoint,
    }


def _build(values: dict[str, Any]) -> ExperimentConfig:
    defaults = _flatten(ExperimentConfig())
    v = {**defaults, **values}
    recipe = v["network.feature_recipe"]
    network = NetworkSpec(
        C=v["network.C"], blocks_per_stage=v["network.blocks_per_stage"], num_classes=v["network.num_classes"],
        in_features=FEATURE_RECIPES[recipe], heads=v["network.heads"], bottleneck=v["network.bottleneck"],
        base_grid=v["network.base_grid"], base_radius=v["network.base_radius"], k_max=v["network.k_max"],
        neighbor_select=v["network.neighbor_select"], leaky_slope=v["network.leaky_slope"])
    aggregator = AggregatorConfig(Family(v["aggregator.preset"]), v["aggregator.groups"],
                                  pos_hidden=v["aggregator.pos_hidden"], sigma=v["aggregator.sigma"])
    aug = AugmentConfig(v["training.rot_z"], (v["training.scale_lo"], v["training.scale_hi"]),
                        v["training.jitter_sigma"], v["training.color_drop_p"])
    training = TrainConfig(
        lr=v["training.lr"], momentum=v["training.momentum"], weight_decay=v["training.weight_decay"],
        epochs=v["training.epochs"], steps_per_epoch=v["training.steps_per_epoch"],
        batch_size=v["training.batch_size"], sphere_radius=v["training.sphere_radius"],
        min_sphere_points=v["training.min_sphere_points"], aug=aug, feature_recipe=recipe,
        vote_stride=v["training.vote_stride"], val_every=v["training.val_every"],
        recalibration_batches=v["training.recalibration_batches"], seed=v["training.seed"],
        workers=v["training.workers"])
    synthetic = SyntheticSceneSpec(
        num_rooms=v["data.num_rooms"], room_size=v["data.room_size"], classes=v["data.classes"],
        density=v["data.density"], primitives=v["data.primitives"], noise_sigma=v["data.noise_sigma"],
        color_jitter=v["data.color_jitter"], seed=v["data.seed"])
    data = DataConfig(v["data.train_dir"], v["data.val_dir"], v["data.val_rooms"], synthetic)
    return ExperimentConfig(network, aggregator, training, data, v["output.dir"], v["eval.checkpoint"], recipe)


def parse_config_text(text: str, overrides: dict[str, Any] | None = None, check_paths: bool = True,
                      source: str = "<config>", defaults: dict[str, Any] | None = None) -> ExperimentConfig:
    """Parse config text. Precedence: ``overrides`` > file > ``defaults`` > built-in defaults."""
    values: dict[str, Any] = {}
    for key, val in (defaults or {}).items():
        if key not in SCHEMA:
            raise ConfigParseError(f"unknown default key {key!r}", None, key)
        values[key] = SCHEMA[key](val)
    lines: dict[str, int] = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq:
            raise ConfigParseError(f"expected 'section.key = value', got {raw.strip()!r}", no)
        if key not in SCHEMA:
            raise ConfigParseError(f"unknown key {key!r}", no, key)
        if key in lines:
            raise ConfigParseError(f"duplicate key {key!r} (first set on line {lines[key]})", no, key)
        try:
            parsed = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ConfigParseError(f"cannot parse value for {key!r}: {value.strip()!r}", no, key) from exc
        try:
            values[key] = SCHEMA[key](parsed)
        except TypeError as exc:
            raise ConfigParseError(f"type mismatch for {key!r}: {exc}", no, key) from exc
        lines[key] = no
    for key, val in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigParseError(f"unknown override key {key!r}", None, key)
        values[key] = SCHEMA[key](val)
    for key in REQUIRED:
        if key not in values:
            raise ConfigParseError(f"missing required field {key!r} in {source}", None, key)
    try:
        cfg = _build(values)
    except (ValueError, TypeError) as exc:
        key = next((k for k in values if k.split(".")[-1] in str(exc)), None)
        raise ConfigParseError(f"invalid configuration: {exc}", lines.get(key), key) from exc
    if check_paths:
        for key in ("data.train_dir", "data.val_dir", "eval.checkpoint"):
            p = values.get(key)
            if p is not None and not os.path.exists(p):
                raise ConfigParseError(f"{key} path {p!r} does not exist", lines.get(key), key)
    return cfg


def _strip_comment(raw: str) -> str:
    """Drop everything from the first ``#`` that is not inside a JSON string."""
    in_string = escaped = False
    for i, ch in enumerate(raw):
        if escaped:
            escaped = False
        elif ch == "\\" and in_string:
            escaped = True
        elif ch == '"':
            in_string = not in_string
        elif ch == "#" and not in_string:
            return raw[:i]
    return raw


def parse_config(path: str | os.PathLike, overrides: dict[str, Any] | None = None,
                 check_paths: bool = True, defaults: dict[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigParseError(f"config file {str(path)!r} does not exist")
    return parse_config_text(path.read_text(), overrides, check_paths, str(path), defaults)


def emit_config(cfg: ExperimentConfig) -> str:
    """Every key with its resolved value, grouped by section."""
    out, section = [], None
    for key, value in _flatten(cfg).items():
        sec = key.split(".", 1)[0]
        if sec != section:
            if section is not None:
                out.append("")
            section = sec
        out.append(f"{key} = {json.dumps(value)}")
    return "\n".join(out) + "\n"
