"""Simulation configuration: intensity, radius, dimension, time grid and domain."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

MAX_DIM = 4

# Infinite-volume truncation: w = r + BUFFER_C * sqrt(t_max * ln(1/BUFFER_DELTA)).
BUFFER_C = 4.0
BUFFER_DELTA = 1e-6


class InvalidInput(ValueError):
    """Raised when arguments violate an operation's preconditions."""


class InsufficientBuffer(InvalidInput):
    """Raised when a BoxedPlane buffer is too small for the requested horizon."""


class InvalidDomain(InvalidInput):
    """Raised when an operation is called on the wrong kind of domain."""


class DomainKind(str, Enum):
    BOXED = "boxed"
    TORUS = "torus"


def required_buffer(r: float, horizon: float, delta: float = BUFFER_DELTA, c: float = BUFFER_C) -> float:
    """Smallest buffer width for which omitted nodes reach the window with prob < delta."""
    return r + c * math.sqrt(max(horizon, 0.0) * math.log(1.0 / delta))


@dataclass(frozen=True)
class DomainSpec:
    """Either a window Q_side (centered at the origin) padded by ``buffer``, or a torus [0, side)^d."""

    kind: DomainKind = DomainKind.BOXED
    side: float = 1.0
    buffer: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", DomainKind(self.kind))
        if not self.side > 0:
            raise InvalidInput(f"domain side must be > 0, got {self.side}")
        if self.buffer < 0:
            raise InvalidInput(f"domain buffer must be >= 0, got {self.buffer}")
        if self.kind is DomainKind.TORUS and self.buffer != 0:
            raise InvalidInput("torus domains carry no buffer")

    @classmethod
    def boxed(cls, window: float, buffer: float) -> "DomainSpec":
        return cls(DomainKind.BOXED, float(window), float(buffer))

    @classmethod
    def boxed_for(cls, window: float, r: float, horizon: float) -> "DomainSpec":
        """BoxedPlane whose buffer satisfies the truncation rule for ``horizon``."""
        return cls(DomainKind.BOXED, float(window), required_buffer(r, horizon))

    @classmethod
    def torus(cls, side: float) -> "DomainSpec":
        return cls(DomainKind.TORUS, float(side), 0.0)

    @classmethod
    def torus_for_count(cls, n: float, lam: float, d: int) -> "DomainSpec":
        """Torus of volume n/lam, so that the expected node count is n."""
        return cls.torus((n / lam) ** (1.0 / d))

    @property
    def is_torus(self) -> bool:
        return self.kind is DomainKind.TORUS

    def bounds(self, d: int) -> tuple:
        """(lo, hi) corners of the simulated region."""
        if self.is_torus:
            return (0.0,) * d, (self.side,) * d
        h = self.side / 2 + self.buffer
        return (-h,) * d, (h,) * d

    def window_bounds(self, d: int) -> tuple:
        if self.is_torus:
            return self.bounds(d)
        h = self.side / 2
        return (-h,) * d, (h,) * d


@dataclass(frozen=True)
class SimConfig:
    lam: float
    r: float
    d: int = 2
    dt: float = 0.01
    horizon: float = 1.0
    domain: DomainSpec = field(default_factory=DomainSpec)
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0 or not math.isfinite(self.lam):
            raise InvalidInput(f"lam must be finite and >= 0, got {self.lam}")
        if not self.r > 0:
            raise InvalidInput(f"r must be > 0, got {self.r}")
        if int(self.d) != self.d or not 1 <= self.d <= MAX_DIM:
            raise InvalidInput(f"d must be an integer in 1..{MAX_DIM}, got {self.d}")
        if not self.dt > 0:
            raise InvalidInput(f"dt must be > 0, got {self.dt}")
        if self.horizon < 0:
            raise InvalidInput(f"horizon must be >= 0, got {self.horizon}")
        if self.horizon > 0 and self.dt > self.horizon * (1 + 1e-12):
            raise InvalidInput("dt must not exceed a positive horizon")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidInput("seed must be a 64-bit unsigned integer")

    @property
    def n_steps(self) -> int:
        """Number of dt steps in [0, horizon] (grid includes t=0)."""
        return int(round(self.horizon / self.dt)) if self.horizon > 0 else 0

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)

    def check_buffer(self, horizon: float | None = None, reach: float | None = None) -> None:
        """Refuse to run when the BoxedPlane buffer is smaller than the truncation rule.

        ``reach`` overrides the interaction distance (defaults to r).
        """
        if self.domain.is_torus:
            return
        t = self.horizon if horizon is None else horizon
        need = required_buffer(self.r if reach is None else reach, t)
        if self.domain.buffer + 1e-12 < need:
            raise InsufficientBuffer(
                f"buffer {self.domain.buffer:.4g} < required {need:.4g} for horizon {t:g}; "
                "results would be biased by omitted nodes"
            )
