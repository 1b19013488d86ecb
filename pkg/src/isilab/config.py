"""Flat key=value experiment configuration.

Keys use dotted section prefixes (``channel.cir``, ``train.batch_size``);
values are plain strings parsed on access.  ``#`` starts a comment, blank
lines are skipped.  The format stays trivially parseable from any
language.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

from .channel import PRESET_CIRS, Cir


class ConfigError(ValueError):
    pass


class ExperimentConfig:
    def __init__(self, values: dict):
        self.values = dict(values)

    @classmethod
    def from_text(cls, text):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, val = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"line {lineno}: empty key")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = val.strip()
        return cls(values)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls.from_text(f.read())

    def canonical_text(self):
        return "\n".join(f"{k} = {self.values[k]}" for k in sorted(self.values)) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    # -- typed getters -----------------------------------------------------

    def get(self, key, default=None):
        return self.values.get(key, default)

    def get_str(self, key, default=None):
        v = self.values.get(key)
        return default if v is None else v

    def get_int(self, key, default=None):
        v = self.values.get(key)
        if v is None:
            if default is None:
                raise ConfigError(f"missing integer key {key!r}")
            return default
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"{key!r} must be an integer, got {v!r}")

    def get_float(self, key, default=None):
        v = self.values.get(key)
        if v is None:
            if default is None:
                raise ConfigError(f"missing float key {key!r}")
            return default
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{key!r} must be a number, got {v!r}")

    def get_bool(self, key, default=False):
        v = self.values.get(key)
        if v is None:
            return default
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key!r} must be boolean, got {v!r}")

    def get_float_list(self, key, default=None):
        v = self.values.get(key)
        if v is None:
            if default is None:
                raise ConfigError(f"missing list key {key!r}")
            return list(default)
        try:
            return [float(t) for t in v.split(",") if t.strip()]
        except ValueError:
            raise ConfigError(f"{key!r} must be a comma-separated number list, got {v!r}")

    def get_int_list(self, key, default=None):
        return [int(round(x)) for x in self.get_float_list(key, default)]

    def get_cir(self, key="channel.cir", default="proakis-c"):
        """CIR preset name or comma-separated real/complex tap literals."""
        raw = self.get_str(key, default)
        if raw in PRESET_CIRS:
            return Cir.preset(raw)
        try:
            taps = [complex(t.replace("i", "j")) for t in raw.split(",") if t.strip()]
        except ValueError:
            raise ConfigError(f"{key!r}: neither a preset ({sorted(PRESET_CIRS)}) nor tap literals: {raw!r}")
        if not taps:
            raise ConfigError(f"{key!r}: empty tap list")
        return Cir(np.asarray(taps))


def validate(config: ExperimentConfig):
    """Raise ConfigError for unusable settings; returns normalized info."""
    problems = []
    for key in ("code.alist", "detector.checkpoint"):
        path = config.get_str(key)
        if path and not os.path.exists(path):
            problems.append(f"{key} references a missing file: {path}")
    try:
        config.get_cir()
    except ConfigError as e:
        problems.append(str(e))
    m = config.get_int("channel.constellation", 2)
    if m not in (2, 4, 16, 64):
        problems.append(f"channel.constellation must be one of 2,4,16,64, got {m}")
    sweep = config.get("sweep.snr_db") or config.get("sweep.ebn0_db")
    if sweep is not None:
        pts = config.get_float_list("sweep.snr_db" if config.get("sweep.snr_db") else "sweep.ebn0_db")
        if not pts:
            problems.append("sweep grid is empty")
    if problems:
        raise ConfigError("; ".join(problems))
    return True
