"""Declarative run configuration: flat key=value sections, strict schema.

Unknown sections or keys are rejected; re-serialization is canonical so a
config hash identifies a run. Section names mirror the engine's modules and
every training constant has a named key.
"""

from __future__ import annotations

import configparser
import hashlib
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected boolean, got {text!r}")


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "seed": (int, 0),
        "threads": (int, 1),
        "out_dir": (str, "runs/out"),
    },
    "data": {
        "conditions": (str, ""),
        "molecule_file": (str, "molecule.json"),
        "potential_file": (str, "potential.json"),
        "reference_file": (str, "reference.xyz"),
        "ensemble_file": (str, "md.xyz"),
        "reference_frame": (int, 0),
    },
    "energy": {
        "backend": (str, "analytic"),
        # <= 0 means auto: 1.0 for analytic/table, k_B * 298.15 K for external
        "kT": (float, -1.0),
        "use_metric_volume": (_bool, False),
        "table_side": (int, 100),
        "external_timeout": (float, 30.0),
        "external_max_inflight": (int, 64),
    },
    "gnn": {
        "layers": (int, 3),
        "hidden_dim": (int, 64),
        "force_channels": (int, 8),
        "n_components": (int, 4),
        "rbf_count": (int, 16),
        "rbf_max": (float, 8.0),
        "step_embed_dim": (int, 8),
        "equiv_hidden": (int, 64),
        "kappa_max": (float, 500.0),
        "weight_map": (str, "softmax_square"),
    },
    "gfn": {
        "trajectory_length": (int, 6),
        "epsilon": (float, 0.5),
        "replay_fraction": (float, 0.5),
        "trajectories_per_condition": (int, 64),
        "conditions_per_batch": (int, 0),
        "n_train_steps": (int, 20000),
        "lr": (float, 1e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
        "replay_capacity": (int, 1000),
        "replay_diversity_radius": (float, 0.1),
        "checkpoint_every": (int, 2000),
        "log_every": (int, 1),
    },
    "pretrain": {
        "samples_per_condition": (int, 10000),
        "train_fraction": (float, 0.8),
        "n_train_steps": (int, 3000),
        "batch_size": (int, 128),
        "lr": (float, 1e-3),
    },
    "evalsuite": {
        "grid_side": (int, 100),
        "grid_mode": (str, "regular"),
        "n_trajectories": (int, 10),
        "energy_bins": (int, 50),
    },
}


class Config:
    """Parsed configuration; values accessed as cfg['section']['key']."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @staticmethod
    def defaults() -> "Config":
        return Config(
            {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
        )

    def canonical_text(self) -> str:
        lines = []
        for sec in SCHEMA:
            lines.append(f"[{sec}]")
            for key in SCHEMA[sec]:
                val = self.values[sec][key]
                if isinstance(val, bool):
                    text = "true" if val else "false"
                elif isinstance(val, float):
                    text = repr(val)
                else:
                    text = str(val)
                lines.append(f"{key} = {text}")
            lines.append("")
        return "\n".join(lines)

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.canonical_text(), encoding="utf-8")


def load_config(path) -> Config:
    """Parse and validate a config file; unknown sections/keys fail fast."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (kT)
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    values = {sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{sec}]")
            caster, _ = SCHEMA[sec][key]
            try:
                values[sec][key] = caster(raw)
            except (ValueError, ConfigError) as e:
                raise ConfigError(f"{path}: bad value for [{sec}] {key}: {raw!r} ({e})") from e
    return Config(values)
