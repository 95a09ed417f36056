"""Flat key=value experiment configs with typed validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from ..core.config import MAX_DIM, InvalidInput

KINDS = ("detect", "cover", "perc", "broadcast", "sausage", "couple", "density", "calibrate")
SEED_MAX = 2**64 - 1


class SchemaError(InvalidInput):
    """Config does not match the schema of its experiment kind."""


@dataclass(frozen=True)
class Param:
    type: type
    default: Any = None  # None means required
    check: Callable[[Any], bool] | None = None
    rule: str = ""
    choices: tuple = ()

    def parse(self, key: str, raw: str):
        raw = raw.strip()
        try:
            if self.type is bool:
                low = raw.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                val = low in ("true", "1", "yes")
            elif self.type is int:
                val = int(raw)
            elif self.type is float:
                val = float(raw)
                if not math.isfinite(val):
                    raise ValueError(raw)
            else:
                val = raw
        except ValueError:
            raise SchemaError(f"{key}: expected {self.type.__name__}, got {raw!r}") from None
        return val

    def validate(self, key: str, val):
        if self.choices and val not in self.choices:
            raise SchemaError(f"{key}: must be one of {', '.join(map(str, self.choices))}, got {val!r}")
        if self.check is not None and not self.check(val):
            raise SchemaError(f"{key}: must be {self.rule}, got {val!r}")
        return val


def _pos(t=float, default=None):
    return Param(t, default, lambda v: v > 0, "> 0")


def _nonneg(t=float, default=None):
    return Param(t, default, lambda v: v >= 0, ">= 0")


def _unit(default=None):
    return Param(float, default, lambda v: 0 < v < 1, "in (0, 1)")


_DIM = Param(int, None, lambda v: 1 <= v <= MAX_DIM, f"in 1..{MAX_DIM}")
_DIM23 = Param(int, None, lambda v: v in (2, 3), "2 or 3")

SCHEMAS: dict[str, dict[str, Param]] = {
    "detect": {
        "lam": _nonneg(),
        "r": _pos(),
        "d": _DIM,
        "dt": _pos(),
        "horizon": _pos(),
        "trials": _pos(int),
        "target": Param(str, "stationary", choices=("stationary", "brownian")),
    },
    "cover": {
        "set": Param(str, None, choices=("Point", "Segment", "Cube", "CantorIterate")),
        "R": _pos(float, 1.0),
        "epsilon": _pos(float, 0.1),
        "level": _nonneg(int, 0),
        "lam": _nonneg(),
        "r": _pos(),
        "d": _DIM,
        "dt": _pos(),
        "horizon": _pos(),
        "trials": _pos(int),
    },
    "perc": {
        "lam": _nonneg(),
        "r": _pos(),
        "d": _DIM23,
        "side": _pos(),
        "horizon": _pos(int),
        "dt": _pos(float, 1.0),
        "trials": _pos(int),
    },
    "broadcast": {
        "n": _pos(),
        "lam": _pos(),
        "r": _pos(),
        "d": _DIM23,
        "trials": _pos(int),
        "lambda_c": _nonneg(float, 0.0),  # 0: use the cached calibration or the literature value
        "max_steps": _pos(int, 1000),
    },
    "sausage": {
        "d": _DIM,
        "r": _pos(),
        "t": _nonneg(),
        "dt": _pos(float, 1e-4),
        "paths": _pos(int, 10000),
        "method": Param(str, "auto", choices=("auto", "ExactMinMax1D", "HitOrMiss", "Voxel")),
        "samples_per_path": _pos(int, 256),
    },
    "couple": {
        "d": _DIM,
        "ell": _pos(),
        "beta": _pos(),
        "eps": _unit(),
        "K_prime": _pos(),
        "K": _nonneg(float, 0.0),  # 0: smallest admissible
        "Delta": _nonneg(float, 0.0),  # 0: smallest admissible
        "lam": _nonneg(float, 0.0),  # 0: exact floor in every cell
        "runs": _pos(int),
    },
    "density": {
        "lam": _pos(),
        "d": _DIM,
        "cube_side": _pos(),
        "cell_side": _pos(),
        "xi": Param(float, None, lambda v: 0 <= v < 1, "in [0, 1)"),
        "t": _pos(int),
        "runs": _pos(int),
    },
    "calibrate": {
        "d": _DIM23,
        "r": _pos(),
        "side": _pos(),
        "trials": _pos(int),
        "lam_max": _nonneg(float, 0.0),  # 0: four times the literature value
    },
}


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    parameters: dict = field(default_factory=dict)
    output_path: str = "out.csv"
    seed: int = 0

    def echo(self) -> dict:
        return {"kind": self.kind, "parameters": dict(self.parameters), "output_path": str(self.output_path), "seed": self.seed}


def parse_config_text(text: str) -> dict:
    """Raw key -> string map from ``key = value`` lines; '#' starts a comment."""
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"line {no}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise SchemaError(f"line {no}: empty key")
        if key in out:
            raise SchemaError(f"line {no}: duplicate key {key!r}")
        out[key] = val
    return out


def validate_parameters(kind: str, raw: dict) -> dict:
    """Typed, defaulted parameters for ``kind``; values may be strings or already typed."""
    if kind not in SCHEMAS:
        raise SchemaError(f"unknown kind {kind!r}; expected one of {', '.join(KINDS)}")
    schema = SCHEMAS[kind]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise SchemaError(f"{kind}: unknown parameter(s) {', '.join(unknown)}")
    out = {}
    for key, p in schema.items():
        if key in raw:
            val = raw[key]
            if isinstance(val, str):
                val = p.parse(key, val)
            elif p.type is float and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            elif not isinstance(val, p.type) or (p.type is int and isinstance(val, bool)):
                raise SchemaError(f"{key}: expected {p.type.__name__}, got {val!r}")
        elif p.default is None:
            raise SchemaError(f"{kind}: missing required parameter {key!r}")
        else:
            val = p.default
        out[key] = p.validate(key, val)
    return out


def make_spec(kind: str, parameters: dict, output_path, seed: int) -> ExperimentSpec:
    seed = int(seed)
    if not 0 <= seed <= SEED_MAX:
        raise SchemaError("seed must be an unsigned 64-bit integer")
    return ExperimentSpec(kind, validate_parameters(kind, parameters), str(output_path), seed)


def load_spec(kind: str, config_path, output_path, seed: int) -> ExperimentSpec:
    try:
        text = Path(config_path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read config: {exc}") from None
    return make_spec(kind, parse_config_text(text), output_path, seed)
