"""Experiment configuration: schema, strict validation, canonical hashing.

Configs are single YAML documents.  Unknown keys are hard errors so typos
cannot silently change an experiment; validation failures list every
offending field at once.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from activesense import channels as chx
from activesense.policy import ArchConfig, TaskSpec, TrainConfig

METHODS = (
    "active",
    "nonadaptive-random",
    "nonadaptive-learned",
    "omp",
    "hiebs",
    "hiepm",
    "lmmse-phase-match",
    "mrt-oracle",
)

SWEEP_AXES = ("snr-db", "frames")


class ConfigError(ValueError):
    """Invalid experiment configuration; message lists the offending fields."""


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(self.values))


@dataclass(frozen=True)
class EvalSpec:
    episodes: int = 1000
    seed: int = 9000


@dataclass
class ExperimentConfig:
    name: str
    task: dict
    channel: dict
    methods: tuple
    sweep: SweepSpec
    evaluation: EvalSpec
    training: dict
    baselines: dict
    seeds: tuple
    output_dir: str

    # -- resolution helpers -------------------------------------------------

    def channel_config(self, frames_hint: int | None = None):
        c = self.channel
        if c["family"] == "mmwave":
            return chx.MmWaveConfig(
                antennas=c["antennas"],
                paths=c["paths"],
                phi_min=np.deg2rad(c["phi_min_deg"]),
                phi_max=np.deg2rad(c["phi_max_deg"]),
                spacing=c["spacing"],
            )
        return chx.RisConfig(
            rows=c["rows"],
            cols=c["cols"],
            rician_factor=c["rician_factor"],
            noise_variance=c["noise_variance"],
            spacing1=c["spacing1"],
            spacing2=c["spacing2"],
        )

    @property
    def noise_variance(self) -> float:
        if self.channel["family"] == "mmwave":
            return 1.0
        return float(self.channel["noise_variance"])

    def task_at(self, sweep_value) -> TaskSpec:
        """TaskSpec with the sweep axis applied."""
        snr_db = self.task["snr_db"]
        frames = self.task["frames"]
        if self.sweep.axis == "snr-db":
            snr_db = float(sweep_value)
        else:
            frames = int(sweep_value)
        power = self.noise_variance * 10.0 ** (snr_db / 10.0)
        return TaskSpec(
            task=self.task["kind"],
            constraint=self.task["constraint"],
            coherence=self.task["coherence"],
            frames=frames,
            pilot_power=power,
        )

    def train_config(self, seed: int) -> TrainConfig:
        t = self.training
        return TrainConfig(
            steps=t["steps"],
            batch_size=t["batch_size"],
            val_size=t["val_size"],
            val_interval=t["val_interval"],
            learning_rate=t["learning_rate"],
            lr_floor=t["lr_floor"],
            lr_decay=t["lr_decay"],
            patience=t["patience"],
            early_stop=t["early_stop"],
            clip_norm=t["clip_norm"],
            precision=t["precision"],
            seed=seed,
            arch=ArchConfig(
                state_size=t["state_size"],
                sensing_hidden=tuple(t["sensing_hidden"]),
                final_hidden=tuple(t["final_hidden"]) if t["final_hidden"] else None,
                final_input=t["final_input"],
            ),
        )

    def canonical_dict(self) -> dict:
        return {
            "name": self.name,
            "task": self.task,
            "channel": self.channel,
            "methods": list(self.methods),
            "sweep": {"axis": self.sweep.axis, "values": list(self.sweep.values)},
            "evaluation": {"episodes": self.evaluation.episodes, "seed": self.evaluation.seed},
            "training": self.training,
            "baselines": self.baselines,
            "seeds": list(self.seeds),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


_TASK_DEFAULTS = {
    "kind": None,  # required
    "constraint": None,  # required
    "coherence": "coherent",
    "frames": None,  # required
    "snr_db": 0.0,
}

_MMWAVE_DEFAULTS = {
    "family": None,
    "antennas": None,
    "paths": 1,
    "phi_min_deg": -60.0,
    "phi_max_deg": 60.0,
    "spacing": 0.5,
}

_RIS_DEFAULTS = {
    "family": None,
    "rows": None,
    "cols": None,
    "rician_factor": 10.0,
    "noise_variance": 1.0,
    "spacing1": 0.5,
    "spacing2": 0.5,
}

_TRAIN_DEFAULTS = {
    "steps": 20000,
    "batch_size": 64,
    "val_size": 1000,
    "val_interval": 500,
    "learning_rate": 1e-3,
    "lr_floor": 1e-5,
    "lr_decay": 0.3162,
    "patience": 10,
    "early_stop": True,
    "clip_norm": 1.0,
    "precision": "float64",
    "state_size": 128,
    "sensing_hidden": [256, 256, 256],
    "final_hidden": None,
    "final_input": "cell",
}

_BASELINE_DEFAULTS = {
    "grid_size": 720,
    "lmmse_prior_draws": 10000,
}


def _merge_section(raw: dict, defaults: dict, section: str, errors: list[str]) -> dict:
    out = dict(defaults)
    for key, value in raw.items():
        if key not in defaults:
            errors.append(f"{section}.{key}: unknown key")
        else:
            out[key] = value
    for key, value in out.items():
        if value is None and defaults.get(key, "") is None and key != "final_hidden":
            errors.append(f"{section}.{key}: required")
    return out


def _validate_methods(cfg: ExperimentConfig, errors: list[str]) -> None:
    task_kind = cfg.task["kind"]
    family = cfg.channel["family"]
    frames_values = (
        [int(v) for v in cfg.sweep.values]
        if cfg.sweep.axis == "frames"
        else [cfg.task["frames"]]
    )
    for m in cfg.methods:
        if m not in METHODS:
            errors.append(f"methods: unknown method {m!r}")
            continue
        if m in ("nonadaptive-random", "nonadaptive-learned", "mrt-oracle"):
            if task_kind == "aoa-estimation":
                errors.append(f"methods: {m} outputs beamformers, not AoA estimates")
        if m in ("omp", "hiebs", "hiepm") and family != "mmwave":
            errors.append(f"methods: {m} requires the mmwave channel family")
        if m in ("hiebs", "hiepm"):
            if task_kind != "aoa-estimation":
                errors.append(f"methods: {m} only supports aoa-estimation")
            if cfg.channel.get("paths", 1) != 1:
                errors.append(f"methods: {m} requires a single-path channel")
        if m == "hiebs":
            for frames in frames_values:
                if frames < 2 or frames % 2:
                    errors.append(
                        f"methods: hiebs consumes 2 pilots per stage, frames={frames} invalid"
                    )
        if m == "hiepm":
            n = cfg.baselines["grid_size"]
            if n < 2 or n & (n - 1):
                errors.append("baselines.grid_size: hiepm needs a power-of-two grid")
        if m == "lmmse-phase-match" and task_kind != "ris-reflection":
            errors.append("methods: lmmse-phase-match only supports ris-reflection")
        if m == "omp" and task_kind == "ris-reflection":
            errors.append("methods: omp does not support ris-reflection")


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a parsed YAML document; raises ConfigError listing problems."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    known_top = {"name", "task", "channel", "methods", "sweep", "evaluation",
                 "training", "baselines", "seeds", "output_dir"}
    for key in raw:
        if key not in known_top:
            errors.append(f"{key}: unknown key")

    name = raw.get("name")
    if not name:
        errors.append("name: required")
    task = _merge_section(raw.get("task", {}), _TASK_DEFAULTS, "task", errors)
    family = raw.get("channel", {}).get("family")
    if family == "mmwave":
        channel = _merge_section(raw.get("channel", {}), _MMWAVE_DEFAULTS, "channel", errors)
    elif family == "ris":
        channel = _merge_section(raw.get("channel", {}), _RIS_DEFAULTS, "channel", errors)
    else:
        errors.append("channel.family: must be 'mmwave' or 'ris'")
        channel = {"family": family}
    training = _merge_section(raw.get("training", {}), _TRAIN_DEFAULTS, "training", errors)
    baselines = _merge_section(raw.get("baselines", {}), _BASELINE_DEFAULTS, "baselines", errors)

    sweep_raw = raw.get("sweep", {})
    for key in sweep_raw:
        if key not in ("axis", "values"):
            errors.append(f"sweep.{key}: unknown key")
    axis = sweep_raw.get("axis", "snr-db")
    values = sweep_raw.get("values")
    if axis not in SWEEP_AXES:
        errors.append(f"sweep.axis: must be one of {SWEEP_AXES}")
    if not values:
        errors.append("sweep.values: required, non-empty")
        values = []
    elif list(values) != sorted(values):
        errors.append("sweep.values: must be sorted ascending")

    eval_raw = raw.get("evaluation", {})
    for key in eval_raw:
        if key not in ("episodes", "seed"):
            errors.append(f"evaluation.{key}: unknown key")
    evaluation = EvalSpec(
        episodes=eval_raw.get("episodes", 1000), seed=eval_raw.get("seed", 9000)
    )
    if evaluation.episodes < 1:
        errors.append("evaluation.episodes: must be >= 1")

    methods = tuple(raw.get("methods") or ())
    if not methods:
        errors.append("methods: required, non-empty")
    seeds = tuple(raw.get("seeds") or ())
    if not seeds:
        errors.append("seeds: required, non-empty")
    output_dir = raw.get("output_dir") or f"runs/{name}"

    cfg = ExperimentConfig(
        name=name or "",
        task=task,
        channel=channel,
        methods=methods,
        sweep=SweepSpec(axis=axis, values=tuple(values)),
        evaluation=evaluation,
        training=training,
        baselines=baselines,
        seeds=seeds,
        output_dir=output_dir,
    )

    if not errors:
        _validate_methods(cfg, errors)
        try:
            for value in cfg.sweep.values:
                cfg.task_at(value)
            cfg.channel_config()
            cfg.train_config(seeds[0])
        except (ValueError, TypeError) as exc:
            errors.append(str(exc))

    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(sorted(errors)))
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return parse_config(raw)
