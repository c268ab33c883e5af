"""Experiment configuration: TOML sections, strict keys, range validation.

Every tunable named by the other modules appears here with its default.
Unknown sections or keys are rejected. The resolved configuration hashes to
a stable hex digest that is embedded in every artifact a run emits.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import tomli

from .errors import ConfigError

DEFAULTS: dict = {
    "seed": 0,
    "env": {
        "family": "tabular",
        "n_states": 20,
        "n_actions": 4,
        "n_successors": 3,
        "gamma": 0.9,
        "horizon": 25,
        "reward_style": "uniform",
        "init_style": "uniform",
        "base_seed": 3,
        "pointmass_noise": 0.01,
    },
    "data": {
        "preset": "motivating",  # motivating | hetero4 | custom
        "n_source_traj": 200,
        "n_target_traj": 20,
        "target_quality": "medium",
        "source_quality": "medium_expert",  # hetero4 preset
        "shift_kind": "kinematic",  # motivating preset shift
        "shift_level": "medium",
    },
    "modality": {
        "d_z": 4,
        "hidden": 64,
        "ensemble_size": 3,
        "outer_iters": 20,
        "e_steps": 40,
        "m_steps": 40,
        "lr": 3e-4,
        "batch_traj": 16,
        "n_latent_samples": 1,
        "n_latent_samples_eval": 8,
        "kl_weight": 1.0,
        "mode": "stochastic",
        "tol_em": 1e-5,
        "patience": 3,
        "sample_z": False,
    },
    "advantage": {
        "alpha": 2.0,
        "hidden": [64],
        "lr": 3e-4,
        "batch_size": 128,
        "n_steps": 50000,
    },
    "alignment": {
        "lambda_f": 0.6,
        "lambda_g": 0.7,
        "d_rep": 16,
        "hidden": [64],
        "temperature": 1.0,
        "n_negatives": 64,
        "lr": 3e-4,
        "batch_size": 128,
        "n_steps": 3000,
        "xi": 0.5,
        "raw_h": False,
    },
    "policy": {
        "gamma": 0.99,
        "expectile_tau": 0.7,
        "awr_beta": 3.0,
        "polyak_mu": 0.005,
        "w_max": 100.0,
        "hidden": [64],
        "lr": 3e-4,
        "batch_src": 128,
        "batch_tar": 128,
        "n_steps": 100000,
        "filtered_pi": False,
        "n_eval_episodes": 100,
        "metrics_every": 0,
    },
    "oracle": {
        "n_instances": 200,
        "n_states": 20,
        "n_actions": 4,
        "gamma": 0.9,
        "tol": 1e-12,
        "tol_ma": 1e-6,
        "showcase_seed": 11,
    },
}

_CHOICES = {
    ("env", "family"): ("tabular", "pointmass"),
    ("data", "preset"): ("motivating", "hetero4", "custom"),
    ("data", "shift_kind"): ("kinematic", "morphology", "none"),
    ("data", "shift_level"): ("easy", "medium"),
    ("modality", "mode"): ("stochastic", "full_batch"),
}


def _validate_ranges(cfg: dict):
    checks = [
        ("alignment", "lambda_f", lambda v: 0.0 <= v <= 1.0, "lambda must be in [0, 1]"),
        ("alignment", "lambda_g", lambda v: 0.0 <= v <= 1.0, "lambda must be in [0, 1]"),
        ("alignment", "xi", lambda v: 0.0 < v <= 1.0, "xi must be in (0, 1]"),
        ("policy", "gamma", lambda v: 0.0 <= v < 1.0, "gamma must be in [0, 1)"),
        ("env", "gamma", lambda v: 0.0 <= v < 1.0, "gamma must be in [0, 1)"),
        ("oracle", "gamma", lambda v: 0.0 <= v < 1.0, "gamma must be in [0, 1)"),
        ("advantage", "alpha", lambda v: v > 0.0, "alpha must be positive"),
        ("policy", "expectile_tau", lambda v: 0.0 < v < 1.0, "expectile tau must be in (0, 1)"),
    ]
    for section, key, ok, msg in checks:
        if key in cfg.get(section, {}):
            if not ok(cfg[section][key]):
                raise ConfigError(f"[{section}] {key}: {msg} (got {cfg[section][key]})")
    for (section, key), choices in _CHOICES.items():
        v = cfg[section][key]
        if v not in choices:
            raise ConfigError(f"[{section}] {key} must be one of {choices}, got {v!r}")


class ExperimentConfig:
    """Resolved configuration with defaults applied and strict key checking."""

    def __init__(self, overrides: dict | None = None):
        cfg = copy.deepcopy(DEFAULTS)
        for section, value in (overrides or {}).items():
            if section == "seed":
                if not isinstance(value, int):
                    raise ConfigError("seed must be an integer")
                cfg["seed"] = value
                continue
            if section not in cfg or not isinstance(value, dict):
                raise ConfigError(f"unknown config section [{section}]")
            for key, v in value.items():
                if key not in cfg[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                cfg[section][key] = v
        _validate_ranges(cfg)
        self._cfg = cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        raw = Path(path).read_bytes()
        try:
            doc = tomli.loads(raw.decode("utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls(doc)

    @property
    def seed(self) -> int:
        return self._cfg["seed"]

    def section(self, name: str) -> dict:
        return dict(self._cfg[name])

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """New config with section dicts shallow-merged in."""
        doc = copy.deepcopy(self._cfg)
        for name, patch in sections.items():
            if name == "seed":
                doc["seed"] = patch
                continue
            doc[name].update(patch)
        out = ExperimentConfig.__new__(ExperimentConfig)
        _validate_ranges(doc)
        out._cfg = doc
        return out

    def to_dict(self) -> dict:
        return copy.deepcopy(self._cfg)

    @property
    def hash(self) -> str:
        blob = json.dumps(self._cfg, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
