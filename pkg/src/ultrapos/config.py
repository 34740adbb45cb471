"""Scenario and anchor-map files (TOML).

Layout: flat top-level keys for channel and frame settings, optional
``[receiver]``, ``[cbeacon]``, ``[clock]`` and ``[mic]`` tables, and one
``[[anchor]]`` block per anchor. An anchor-map file is any TOML file with
``[[anchor]]`` blocks, so a scenario file doubles as its own anchor map.
See ``data/example_scenario.toml`` for a commented example.
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .channel import Anchor, CBeaconConfig, Receiver, Scenario
from .clocksched import ClockModel
from .errors import ConfigError
from .micmodel import MicNonlinearity

_TOP_KEYS = {
    "c", "snr_db", "snr_ref_distance", "echoes", "rate", "preamble_ms", "bit_ms", "guard_ms",
    "carrier_freq", "ramp_ms", "slot_ms", "groups", "rounds", "lead_s", "tail_s", "dims", "z_fixed",
    "dual_mic", "absorption_db_per_m", "seed",
}
_TABLES = {"receiver", "cbeacon", "clock", "mic", "anchor"}


def _read(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


def _vec3(value, where: str) -> np.ndarray:
    try:
        v = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: expected three numbers, got {value!r}") from e
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ConfigError(f"{where}: expected three finite numbers, got {value!r}")
    return v


def _build(cls, table: dict, where: str, **extra):
    try:
        return cls(**table, **extra)
    except TypeError as e:
        raise ConfigError(f"[{where}]: {e}") from e


def _anchors(raw: dict, where: str) -> list[Anchor]:
    blocks = raw.get("anchor", [])
    if not isinstance(blocks, list):
        raise ConfigError(f"{where}: anchors must be [[anchor]] blocks")
    out = []
    for i, blk in enumerate(blocks):
        if "id" not in blk or "position" not in blk:
            raise ConfigError(f"{where}: anchor block {i} needs 'id' and 'position'")
        unknown = set(blk) - {"id", "position", "amplitude", "slot"}
        if unknown:
            raise ConfigError(f"{where}: anchor block {i} has unknown keys {sorted(unknown)}")
        out.append(Anchor(int(blk["id"]), _vec3(blk["position"], f"anchor {blk['id']} position"),
                          float(blk.get("amplitude", 1.0)), blk.get("slot")))
    return out


def scenario_from_dict(raw: dict, where: str = "<scenario>") -> tuple[Scenario, int]:
    """Build a scenario from parsed TOML; returns ``(scenario, seed)``."""
    unknown = set(raw) - _TOP_KEYS - _TABLES
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    if "receiver" not in raw:
        raise ConfigError(f"{where}: missing [receiver] table")
    rec = dict(raw["receiver"])
    rec["position"] = _vec3(rec.get("position"), "receiver.position")
    if "secondary" in rec:
        rec["secondary"] = _vec3(rec["secondary"], "receiver.secondary")
    receiver = _build(Receiver, rec, "receiver")
    cbeacon = None
    if "cbeacon" in raw:
        cb = dict(raw["cbeacon"])
        cb["position"] = _vec3(cb.get("position"), "cbeacon.position")
        cbeacon = _build(CBeaconConfig, cb, "cbeacon")
    clock = _build(ClockModel, dict(raw.get("clock", {"sync_error_std": 0.0})), "clock")
    mic = _build(MicNonlinearity, dict(raw.get("mic", {})), "mic")
    top = {k: v for k, v in raw.items() if k in _TOP_KEYS and k != "seed"}
    if "echoes" in top:
        try:
            top["echoes"] = [(float(d), float(a)) for d, a in top["echoes"]]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{where}: echoes must be [[delay_s, rel_amp], ...]") from e
    try:
        scn = Scenario(anchors=_anchors(raw, where), receiver=receiver, cbeacon=cbeacon,
                       clock=clock, mic=mic, **top)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e
    return scn, int(raw.get("seed", 0))


def load_scenario(path) -> tuple[Scenario, int]:
    return scenario_from_dict(_read(path), str(path))


def load_anchor_map(path) -> dict[int, np.ndarray]:
    anchors = _anchors(_read(path), str(path))
    if not anchors:
        raise ConfigError(f"{path}: no [[anchor]] blocks")
    ids = [a.id for a in anchors]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}: duplicate anchor ids")
    return {a.id: a.position for a in anchors}


def example_path(name: str = "example_scenario.toml") -> Path:
    return Path(__file__).parent / "data" / name
