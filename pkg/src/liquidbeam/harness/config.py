"""Run configuration: ``key = value`` files, presets and flag overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

from ..channel import SceneConfig
from ..dataset import TBAR_GRID
from ..models import MODEL_KINDS

OUT_DIR_ENV = "LIQUIDBEAM_OUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: str = "lnn"
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 3e-5
    tbars: tuple[float, ...] = TBAR_GRID
    seeds: tuple[int, ...] = (0,)
    n_train: int = 10240
    n_val: int = 2560
    noise_sweep: tuple[float, ...] = (7.0, 9.0, 11.0, 13.0)
    retrain_per_noise: bool = True
    train_data: str = ""
    val_data: str = ""
    out_dir: str = "runs"
    workers: int = 1

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if not self.tbars or any(not 0 <= t <= 1 for t in self.tbars):
            raise ConfigError(f"tbars must be a non-empty subset of [0, 1], got {self.tbars}")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("n_train and n_val must be >= 1")

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def resolved_out_dir(self) -> Path:
        return Path(os.environ.get(OUT_DIR_ENV) or self.out_dir)


PRESETS: dict[str, dict[str, Any]] = {
    "full": {},
    "desk": {"n_antennas": 16, "n_beams": 16, "n_slots": 5, "n_train": 2048, "n_val": 512,
             "epochs": 30, "learning_rate": 1e-3, "noise_sweep": (9.0, 11.0, 13.0)},
    "tiny": {"n_antennas": 16, "n_beams": 16, "n_slots": 3, "n_train": 64, "n_val": 32,
             "epochs": 2, "learning_rate": 1e-3, "noise_sweep": (9.0, 13.0)},
}

ALIASES = {"Q": "n_beams", "N_t": "n_antennas", "N_F": "noise_figure_db", "P": "tx_power_dbm",
           "L": "n_paths", "v": "ue_speed", "T": "slot_length", "W": "bandwidth_hz",
           "seed": "seeds", "kind": "model", "lr": "learning_rate"}

_SCENE_KEYS = {f.name: f for f in fields(SceneConfig)}
_RUN_KEYS = {f.name: f for f in fields(RunConfig) if f.name != "scene"}
_SCENE_KEYS.pop("seed")


def valid_keys() -> list[str]:
    return sorted(set(_SCENE_KEYS) | set(_RUN_KEYS) | set(ALIASES))


def _convert(key: str, raw, kind: str):
    if not isinstance(raw, str):   # keyword flags arrive as Python values
        if kind.startswith("tuple"):
            items = raw if isinstance(raw, (tuple, list)) else (raw,)
            raw = " ".join(str(x) for x in items)
        else:
            raw = str(raw)
    raw = raw.strip()
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    if kind in ("bool", bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "tuple[float, ...]":
        return tuple(float(x) for x in raw.replace(",", " ").split())
    if kind == "tuple[int, ...]":
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw


def _field_type(key: str) -> str:
    f = _SCENE_KEYS.get(key) or _RUN_KEYS[key]
    return f.type if isinstance(f.type, str) else f.type.__name__


def parse_pairs(pairs: Iterable[tuple[str, str, str]]) -> dict[str, Any]:
    """Typed values from (key, value, location) triples; location goes into errors."""
    out = {}
    for key, raw, where in pairs:
        key = ALIASES.get(key, key)
        if key not in _SCENE_KEYS and key not in _RUN_KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}; valid keys: {', '.join(valid_keys())}")
        try:
            out[key] = _convert(key, raw, _field_type(key))
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    return out


def read_config_file(path: str | Path) -> dict[str, Any]:
    triples = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        triples.append((key.strip(), raw, f"{path}:{lineno}"))
    return parse_pairs(triples)


def build_config(values: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    scene_vals = {k: v for k, v in values.items() if k in _SCENE_KEYS}
    run_vals = {k: v for k, v in values.items() if k in _RUN_KEYS}
    try:
        scene = replace(base.scene, **scene_vals)
        return replace(base, scene=scene, **run_vals)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config(path: str | Path | None = None, overrides: Iterable[str] = (),
                 preset: str | None = None, **flags) -> RunConfig:
    """Preset, then file, then ``key=value`` overrides, then keyword flags."""
    values: dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(read_config_file(path))
    triples = []
    for i, item in enumerate(overrides):
        if "=" not in item:
            raise ConfigError(f"override #{i + 1}: expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        triples.append((k.strip(), v, f"override #{i + 1}"))
    values.update(parse_pairs(triples))
    values.update(parse_pairs((k, v, f"--{k}") for k, v in flags.items() if v is not None))
    return build_config(values)
