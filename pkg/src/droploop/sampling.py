"""Printing-condition space, Latin hypercube initialization, and candidate pools.

The search space is a 3-D axis-aligned box over (pressure, frequency,
translation speed). All samplers are pure functions of their seed, so runs
are reproducible and safe to parallelize with distinct seeds.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError

DIM_NAMES = ("pressure", "frequency", "speed")
DIM_UNITS = ("MPa", "Hz", "mm/s")

# Default box, widened so that the reference 12-sample training batch and
# both known good operating points fall strictly inside it.
DEFAULT_BOUNDS = ((0.02, 0.15), (15.0, 40.0), (100.0, 900.0))


@dataclass(frozen=True)
class Dimension:
    name: str
    low: float
    high: float
    unit: str = ""

    def __post_init__(self) -> None:
        if not (self.low < self.high):
            raise BoundsError(
                f"dimension {self.name!r}: low ({self.low}) must be < high ({self.high})"
            )


@dataclass(frozen=True)
class ParameterSpace:
    """Axis-aligned box over the three hardware printing parameters.

    The normalization map to the unit cube is affine per dimension and
    bijective on the box, which keeps surrogate lengthscales comparable
    across dimensions.
    """

    dims: tuple[Dimension, Dimension, Dimension] = field(
        default_factory=lambda: tuple(
            Dimension(n, lo, hi, u)
            for n, (lo, hi), u in zip(DIM_NAMES, DEFAULT_BOUNDS, DIM_UNITS)
        )
    )

    def __post_init__(self) -> None:
        if len(self.dims) != 3:
            raise BoundsError(f"expected exactly 3 dimensions, got {len(self.dims)}")

    @property
    def lows(self) -> np.ndarray:
        return np.array([d.low for d in self.dims], dtype=float)

    @property
    def highs(self) -> np.ndarray:
        return np.array([d.high for d in self.dims], dtype=float)

    def normalize(self, values: np.ndarray) -> np.ndarray:
        """Map points from the box to the unit cube (rows are points)."""
        return (np.asarray(values, dtype=float) - self.lows) / (self.highs - self.lows)

    def denormalize(self, unit: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`normalize`."""
        return self.lows + np.asarray(unit, dtype=float) * (self.highs - self.lows)

    def contains(self, values: np.ndarray, atol: float = 0.0) -> bool:
        v = np.asarray(values, dtype=float)
        return bool(np.all(v >= self.lows - atol) and np.all(v <= self.highs + atol))

    def to_dict(self) -> dict:
        return {
            "dims": [
                {"name": d.name, "low": d.low, "high": d.high, "unit": d.unit}
                for d in self.dims
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParameterSpace":
        dims = tuple(
            Dimension(d["name"], float(d["low"]), float(d["high"]), d.get("unit", ""))
            for d in data["dims"]
        )
        if len(dims) != 3:
            raise BoundsError(f"expected exactly 3 dimensions, got {len(dims)}")
        return cls(dims=dims)

    @classmethod
    def from_bounds(cls, bounds) -> "ParameterSpace":
        dims = tuple(
            Dimension(n, float(lo), float(hi), u)
            for n, (lo, hi), u in zip(DIM_NAMES, bounds, DIM_UNITS)
        )
        return cls(dims=dims)


@dataclass(frozen=True)
class PrintConditions:
    """One point in the (pressure, frequency, speed) space."""

    pressure: float
    frequency: float
    speed: float

    def as_array(self) -> np.ndarray:
        return np.array([self.pressure, self.frequency, self.speed], dtype=float)

    @classmethod
    def from_array(cls, values) -> "PrintConditions":
        p, f, s = (float(v) for v in values)
        return cls(pressure=p, frequency=f, speed=s)

    def to_dict(self) -> dict:
        return {
            "pressure_mpa": self.pressure,
            "frequency_hz": self.frequency,
            "speed_mm_s": self.speed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PrintConditions":
        return cls(
            pressure=float(data["pressure_mpa"]),
            frequency=float(data["frequency_hz"]),
            speed=float(data["speed_mm_s"]),
        )


def lhs_sample(space: ParameterSpace, n: int, seed: int) -> list[PrintConditions]:
    """Latin hypercube sample of ``n`` printing conditions.

    Each dimension's range is split into ``n`` equal-width strata and exactly
    one point lands in each stratum, uniformly at random within it. The
    stratum-to-sample permutation is drawn independently per dimension from
    the seeded generator, so the output is deterministic for a fixed seed.

    Parameters
    ----------
    space:
        The 3-D search box.
    n:
        Number of samples, at least 1.
    seed:
        Seed for the random generator.

    Returns
    -------
    list[PrintConditions]
        ``n`` points inside the closed box.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    unit = np.empty((n, 3), dtype=float)
    for j in range(3):
        strata = rng.permutation(n)
        unit[:, j] = (strata + rng.uniform(size=n)) / n
    values = space.denormalize(np.clip(unit, 0.0, 1.0))
    return [PrintConditions.from_array(row) for row in values]


def uniform_candidates(space: ParameterSpace, m: int, seed: int) -> list[PrintConditions]:
    """``m`` i.i.d. uniform points in the box, deterministic per seed."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    values = space.denormalize(rng.uniform(size=(m, 3)))
    return [PrintConditions.from_array(row) for row in values]


def uniform_unit_candidates(m: int, seed: int) -> np.ndarray:
    """``m`` uniform points in the unit cube as an ``(m, 3)`` array."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    return np.random.default_rng(seed).uniform(size=(m, 3))
