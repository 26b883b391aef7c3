"""Flat key-value experiment configuration.

Config files are plain text, one ``section.key = value`` per line, with ``#``
comments. Every key is validated against the schema below; unknown keys are
rejected, every default is materialized, and the resolved config (defaults
included) is echoed into the run directory and hashed, so each run records
exactly which numbers it used.
"""

from __future__ import annotations

import hashlib
import re
from pathlib import Path
from typing import Any

import numpy as np

from taskaug.data import SubpopulationMode, TaskSpec, default_task_spec
from taskaug.errors import ConfigError

# type tags: int, float, bool, str, floats (comma list)
SCHEMA: dict[str, tuple[str, Any]] = {
    "seed": ("int", 0),
    "task.num_classes": ("int", 4),
    "task.feature_dim": ("int", 2),
    "task.center_radius": ("float", 3.0),
    "task.core_scale": ("float", 0.5),
    "task.halo_scale": ("float", 0.8),
    "task.train_mix": ("floats", [0.5, 0.5]),
    "task.val_mix": ("floats", [0.5, 0.5]),
    "task.label_noise": ("float", 0.0),
    "sizes.train": ("int", 1000),
    "sizes.val": ("int", 200),
    "sizes.test": ("int", 1000),
    "generator.hidden": ("int", 128),
    "generator.time_dim": ("int", 32),
    "generator.cond_dim": ("int", 16),
    "generator.timesteps": ("int", 50),
    "generator.base_steps": ("int", 1000),
    "generator.beta_start": ("float", 1e-4),
    "generator.beta_end": ("float", 0.02),
    "generator.train_steps": ("int", 6000),
    "generator.batch_size": ("int", 128),
    "generator.lr": ("float", 1e-3),
    "generator.cond_dropout": ("float", 0.1),
    "generator.synthesis_guidance": ("float", 2.0),
    "tokens.lr": ("float", 1e-4),
    "tokens.steps": ("int", 400),
    "tokens.few_shot": ("int", 16),
    "classifier.arch": ("str", "mlp-small"),
    "classifier.epochs": ("int", 60),
    "classifier.batch_size": ("int", 128),
    "classifier.lr": ("float", 0.01),
    "classifier.momentum": ("float", 0.9),
    "classifier.weight_decay": ("float", 5e-4),
    "todv.max_iters": ("int", 2000),
    "todv.classifier_lr": ("float", 0.01),
    "todv.weightnet_lr": ("float", 1e-3),
    "todv.train_batch": ("int", 128),
    "todv.val_batch": ("int", 128),
    "todv.hidden": ("int", 100),
    "todv.eval_every": ("int", 100),
    "todv.warmup_multiplier": ("float", 1.0),
    "mlco.enabled": ("bool", True),
    "mlco.beta": ("float", 500.0),
    "mlco.lr": ("float", 1e-4),
    "mlco.batch_per_class": ("int", 64),
    "mlco.iterations": ("int", 3),
    "mlco.rho": ("float", 0.25),
    "mlco.pair_cap": ("int", 64),
    "mlco.max_steps_per_class": ("int", 400),
    "mlco.guidance": ("float", 2.0),
    "mlco.holdout_fraction": ("float", 0.2),
    "ilpo.enabled": ("bool", True),
    "ilpo.prompt_opt": ("bool", True),
    "ilpo.noise_opt": ("bool", True),
    "ilpo.prompt_lr": ("float", 0.001),
    "ilpo.prompt_epochs": ("int", 400),
    "ilpo.omega_denoise": ("float", 5.5),
    "ilpo.omega_invert": ("float", 0.0),
    "ilpo.chain_length": ("int", 10),
    "ilpo.noise_draws": ("int", 8),
    "ilpo.lambda": ("float", 0.1),
    "ilpo.round_trips": ("int", 1),
    "pipeline.budgets": ("floats", [1.0]),
    "pipeline.regime": ("str", "joint"),
    "analysis.probe_l2": ("float", 1e-3),
    "analysis.bins": ("int", 20),
    "analysis.influence_train_cap": ("int", 600),
    "analysis.influence_test_cap": ("int", 300),
    "reuse.arch_b": ("str", "mlp-wide"),
}

# per-class mode overrides, e.g. task.class0.mode1.mean = 1.0,-2.0
_PATTERN_KEYS = [
    (re.compile(r"^task\.class(\d+)\.mode(\d+)\.mean$"), "floats"),
    (re.compile(r"^task\.class(\d+)\.mode(\d+)\.scale$"), "float"),
    (re.compile(r"^task\.class(\d+)\.mode(\d+)\.weight$"), "float"),
    (re.compile(r"^task\.class(\d+)\.val_mix$"), "floats"),
]

_REGIMES = ("joint", "synthetic_only")


def _coerce(key: str, kind: str, raw: str) -> Any:
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "floats":
            return [float(v) for v in raw.split(",") if v.strip() != ""]
        return raw
    except ValueError as e:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {kind}") from e


def _pattern_kind(key: str) -> str | None:
    for rx, kind in _PATTERN_KEYS:
        if rx.match(key):
            return kind
    return None


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse and validate config lines, filling defaults for missing keys."""
    values: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {n}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key in SCHEMA:
            kind = SCHEMA[key][0]
        else:
            kind = _pattern_kind(key)
            if kind is None:
                raise ConfigError(f"config line {n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {n}: duplicate key {key!r}")
        values[key] = _coerce(key, kind, raw)
    for key, (_, default) in SCHEMA.items():
        values.setdefault(key, list(default) if isinstance(default, list) else default)
    _validate(values)
    return values


def load_config(path: str | Path | None) -> dict[str, Any]:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config_text(text)


def _validate(cfg: dict[str, Any]) -> None:
    if cfg["pipeline.regime"] not in _REGIMES:
        raise ConfigError(f"pipeline.regime must be one of {_REGIMES}, got {cfg['pipeline.regime']!r}")
    if any(b < 0 for b in cfg["pipeline.budgets"]):
        raise ConfigError("pipeline.budgets must be non-negative")
    if cfg["pipeline.regime"] == "synthetic_only" and all(b == 0 for b in cfg["pipeline.budgets"]):
        raise ConfigError("synthetic_only training needs a positive synthesis budget")
    for key in ("sizes.train", "sizes.val", "sizes.test"):
        if cfg[key] <= 0:
            raise ConfigError(f"{key} must be positive")
    if not (0.0 <= cfg["task.label_noise"] <= 1.0):
        raise ConfigError("task.label_noise must lie in [0, 1]")
    if cfg["ilpo.omega_denoise"] < cfg["ilpo.omega_invert"]:
        raise ConfigError("ilpo.omega_denoise must be >= ilpo.omega_invert")


def format_config(cfg: dict[str, Any]) -> str:
    """Canonical text form: sorted keys, repr-exact values."""
    lines = []
    for key in sorted(cfg):
        val = cfg[key]
        if isinstance(val, list):
            rendered = ",".join(repr(float(v)) for v in val)
        elif isinstance(val, bool):
            rendered = "true" if val else "false"
        elif isinstance(val, float):
            rendered = repr(val)
        else:
            rendered = str(val)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict[str, Any]) -> str:
    return hashlib.sha256(format_config(cfg).encode("utf-8")).hexdigest()[:16]


def task_spec_from_config(cfg: dict[str, Any]) -> TaskSpec:
    """Build the task: explicit per-class mode keys win over the preset geometry."""
    explicit = {k: v for k, v in cfg.items() if k.startswith("task.class")}
    if not explicit:
        return default_task_spec(
            num_classes=cfg["task.num_classes"],
            feature_dim=cfg["task.feature_dim"],
            center_radius=cfg["task.center_radius"],
            core_scale=cfg["task.core_scale"],
            halo_scale=cfg["task.halo_scale"],
            train_mix=tuple(cfg["task.train_mix"]),
            val_mix=tuple(cfg["task.val_mix"]),
            label_noise=cfg["task.label_noise"],
        )
    k_classes = cfg["task.num_classes"]
    modes: list[list[SubpopulationMode]] = []
    val: list[np.ndarray] = []
    for k in range(k_classes):
        class_modes = []
        j = 0
        while f"task.class{k}.mode{j}.mean" in explicit:
            mean = np.array(explicit[f"task.class{k}.mode{j}.mean"], dtype=np.float64)
            try:
                scale = explicit[f"task.class{k}.mode{j}.scale"]
                weight = explicit[f"task.class{k}.mode{j}.weight"]
            except KeyError as e:
                raise ConfigError(f"class {k} mode {j}: missing {e.args[0]}") from None
            class_modes.append(SubpopulationMode(mean=mean, scale=scale, weight=weight))
            j += 1
        if not class_modes:
            raise ConfigError(f"explicit task definition is missing modes for class {k}")
        modes.append(class_modes)
        vm = explicit.get(f"task.class{k}.val_mix", cfg["task.val_mix"])
        val.append(np.array(vm, dtype=np.float64))
    return TaskSpec(num_classes=k_classes, modes=modes, validation_mixing=val,
                    label_noise=cfg["task.label_noise"])
