"""Uniform 1-D grids, cell-mass measures and the operations acting on them.

A measure is stored as the vector of masses of the cells of a uniform
partition of ``[a, b]``; all integrals against Lebesgue measure are midpoint
quadrature at the cell centers.  The mollify-and-shift operator, domain
enlargement by zero and the CDF formula for the Wasserstein-1 distance all
live here because every other module builds on them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyMask,
    GridMismatch,
    MassMismatch,
    NonCommensurateRho,
    SupportTooWide,
)

#: relative mass below which a cell does not count as supporting a measure
ATOM_TOL = 1e-14
#: relative tolerance used when comparing total masses
MASS_TOL = 1e-10


def _frozen(arr, dtype=float):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Grid:
    """Uniform partition of ``[a, b]`` into ``m`` cells."""

    a: float
    b: float
    m: int

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)) or not self.b > self.a:
            raise ValueError(f"need finite a < b, got a={self.a}, b={self.b}")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"cell count must be a positive integer, got {self.m}")
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "m", int(self.m))

    @property
    def h(self) -> float:
        return (self.b - self.a) / self.m

    @property
    def length(self) -> float:
        return self.b - self.a

    @property
    def centers(self) -> np.ndarray:
        return self.a + (np.arange(self.m) + 0.5) * self.h

    def boundary_distance(self) -> np.ndarray:
        """Distance of every cell center to the nearer endpoint."""
        x = self.centers
        return np.minimum(x - self.a, self.b - x)

    def same_as(self, other: "Grid", rtol: float = 1e-12) -> bool:
        scale = rtol * max(self.length, other.length)
        return (
            self.m == other.m
            and abs(self.a - other.a) <= scale
            and abs(self.b - other.b) <= scale
        )

    def to_dict(self):
        return {"a": self.a, "b": self.b, "m": self.m}


def check_same_grid(g1: Grid, g2: Grid):
    if not g1.same_as(g2):
        raise GridMismatch(f"grids differ: {g1} vs {g2}")


@dataclass(frozen=True)
class DiscreteMeasure:
    """Nonnegative cell masses ``w`` on ``grid``."""

    grid: Grid
    w: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = _frozen(self.w)
        if w.shape != (self.grid.m,):
            raise ValueError(f"expected {self.grid.m} weights, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if np.any(w < 0):
            raise ValueError("measure weights must be nonnegative")
        object.__setattr__(self, "w", w)

    @property
    def mass(self) -> float:
        # correctly rounded, so zero padding never changes it
        return math.fsum(self.w)

    @property
    def density(self) -> np.ndarray:
        return self.w / self.grid.h

    def support(self) -> np.ndarray:
        """Boolean mask of cells whose mass exceeds the atom tolerance."""
        return self.w > ATOM_TOL * self.mass

    def normalize(self) -> "DiscreteMeasure":
        mass = self.mass
        if mass <= 0:
            raise ValueError("cannot normalize a zero measure")
        return DiscreteMeasure(self.grid, self.w / mass)

    def to_dict(self):
        d = self.grid.to_dict()
        d["w"] = self.w.tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d) -> "DiscreteMeasure":
        return cls(Grid(d["a"], d["b"], d["m"]), d["w"])

    @classmethod
    def from_json(cls, text: str) -> "DiscreteMeasure":
        return cls.from_dict(json.loads(text))

    # convenience constructors
    @classmethod
    def uniform(cls, grid: Grid, mass: float = 1.0) -> "DiscreteMeasure":
        return cls(grid, np.full(grid.m, mass / grid.m))

    @classmethod
    def dirac(cls, grid: Grid, x: float, mass: float = 1.0) -> "DiscreteMeasure":
        """Unit (or ``mass``) atom in the cell containing ``x``."""
        i = min(int((x - grid.a) / grid.h), grid.m - 1)
        if i < 0:
            raise ValueError(f"{x} outside [{grid.a}, {grid.b}]")
        w = np.zeros(grid.m)
        w[i] = mass
        return cls(grid, w)


@dataclass(frozen=True)
class SupportMask:
    """Cells whose center lies at distance at least ``rho`` from the boundary."""

    grid: Grid
    allowed: np.ndarray = field(repr=False)
    rho: float

    def __post_init__(self):
        allowed = _frozen(self.allowed, dtype=bool)
        if allowed.shape != (self.grid.m,):
            raise ValueError("mask length does not match grid")
        if not np.array_equal(allowed, _center_rule(self.grid, self.rho)):
            raise ValueError("mask does not follow the cell-center distance rule")
        if not allowed.any():
            raise EmptyMask(f"no cell of {self.grid} is at distance >= {self.rho}")
        object.__setattr__(self, "allowed", allowed)
        object.__setattr__(self, "rho", float(self.rho))

    @classmethod
    def from_rho(cls, grid: Grid, rho: float) -> "SupportMask":
        return cls(grid, _center_rule(grid, rho), rho)

    @property
    def count(self) -> int:
        return int(self.allowed.sum())

    def admits(self, mu: DiscreteMeasure) -> bool:
        return not np.any(mu.support() & ~self.allowed)


def _center_rule(grid: Grid, rho: float) -> np.ndarray:
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    return grid.boundary_distance() >= rho - 1e-12 * grid.length


def support_distance(mu: DiscreteMeasure) -> float:
    """Smallest center-to-boundary distance over supporting cells (inf if none)."""
    supp = mu.support()
    if not supp.any():
        return math.inf
    return float(mu.grid.boundary_distance()[supp].min())


def _commensurate_cells(rho: float, h: float) -> int:
    k = rho / h
    kr = round(k)
    if rho < 0 or abs(k - kr) > 1e-9 * max(1.0, k):
        raise NonCommensurateRho(f"rho={rho} is not an integer multiple of h={h}")
    return int(kr)


def extend_grid(grid: Grid, rho: float) -> Grid:
    k = _commensurate_cells(rho, grid.h)
    return Grid(grid.a - k * grid.h, grid.b + k * grid.h, grid.m + 2 * k)


def extend_by_zero(mu: DiscreteMeasure, rho: float) -> DiscreteMeasure:
    """Embed ``mu`` into the grid enlarged by ``rho`` on both sides."""
    k = _commensurate_cells(rho, mu.grid.h)
    if k == 0:
        return mu
    return DiscreteMeasure(extend_grid(mu.grid, rho), np.pad(mu.w, k))


def block_offset(outer: Grid, inner: Grid) -> int:
    """Index of the first cell of ``inner`` inside ``outer``.

    Raises GridMismatch unless ``inner`` is a contiguous cell sub-block.
    """
    h = outer.h
    tol = 1e-9 * h
    if abs(inner.h - h) > tol:
        raise GridMismatch(f"cell widths differ: {h} vs {inner.h}")
    off = (inner.a - outer.a) / h
    k = round(off)
    if abs(off - k) * h > tol or k < 0 or k + inner.m > outer.m:
        raise GridMismatch(f"{inner} is not a cell sub-block of {outer}")
    return int(k)


def restrict(mu: DiscreteMeasure, target: Grid) -> DiscreteMeasure:
    k = block_offset(mu.grid, target)
    return DiscreteMeasure(target, mu.w[k : k + target.m])


def mollifier_weights(h: float, delta: float):
    """Discrete standard bump of radius ``delta`` sampled on a grid of width ``h``.

    Returns ``(offsets, weights)`` with integer cell offsets ``|j| h < delta``
    and weights summing to one.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    jmax = max(int(math.ceil(delta / h - 1e-12)) - 1, 0)
    offsets = np.arange(-jmax, jmax + 1)
    t = offsets * h / delta
    vals = np.exp(-1.0 / (1.0 - t * t))
    return offsets, vals / vals.sum()


def convolve_cells(w: np.ndarray, h: float, delta: float) -> np.ndarray:
    """Convolve cell masses with the discrete bump; mass past the ends is dropped."""
    _, k = mollifier_weights(h, delta)
    jmax = (len(k) - 1) // 2
    full = np.convolve(w, k)
    return full[jmax : jmax + len(w)]


def mollify_shift_weights(w: np.ndarray, grid: Grid, delta: float) -> np.ndarray:
    """Array form of :func:`mollify_shift` without validation (signed input allowed)."""
    return convolve_cells(w, grid.h, delta) + delta * grid.h / grid.length


def mollify_shift(mu: DiscreteMeasure, delta: float) -> DiscreteMeasure:
    """``phi_delta * mu + delta/|Omega|`` as cell masses; adds exactly ``delta`` of mass."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    dist = support_distance(mu)
    if dist < delta - 1e-12 * mu.grid.length:
        raise SupportTooWide(
            f"support distance {dist} is smaller than delta={delta}"
        )
    return DiscreteMeasure(mu.grid, mollify_shift_weights(mu.w, mu.grid, delta))


def _check_masses(m1: float, m2: float, tol: float = MASS_TOL):
    if abs(m1 - m2) > tol * max(1.0, abs(m1), abs(m2)):
        raise MassMismatch(f"masses differ: {m1!r} vs {m2!r}")


def w1_1d(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    """Wasserstein-1 distance of two equal-mass measures on the same grid."""
    check_same_grid(mu.grid, nu.grid)
    _check_masses(mu.mass, nu.mass)
    diff = np.cumsum(mu.w - nu.w)[:-1]
    return float(mu.grid.h * np.abs(diff).sum())
