"""Scatterer grids, charge profiles, receivers, incident waves and partitions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import isqrt
from pathlib import Path

import numpy as np


class ConfigurationError(ValueError):
    pass


# Grid points are numbered row-major with x fastest: j = iy * n_side + ix.


def grid_coordinates(n_side: int, spacing: str = "inclusive") -> np.ndarray:
    if spacing == "inclusive":
        return -0.5 + np.arange(n_side) / (n_side - 1)
    if spacing == "cell":
        return -0.5 + (np.arange(n_side) + 0.5) / n_side
    raise ConfigurationError(f"unknown grid spacing {spacing!r}")


def q4(x, y):
    return np.where(np.cos(2 * np.pi * x) ** 2 + np.cos(2 * np.pi * y) ** 2 > 0.5, 0.1, 0.0)


def q16(x, y):
    return np.where(np.cos(4 * np.pi * x) ** 2 + np.cos(4 * np.pi * y) ** 2 > 0.5, 0.1, 0.0)


def qb(x, y):
    return 0.01 * np.exp(-((x - 0.1) ** 2 + (y - 0.2) ** 2) / 0.03)


def zero(x, y):
    return np.zeros(np.broadcast(x, y).shape)


CHARGE_FUNCTIONS = {"q4": q4, "q16": q16, "qb": qb, "zero": zero}


@dataclass(frozen=True)
class ScattererGrid:
    n_side: int
    positions: np.ndarray
    charges: np.ndarray
    spacing: str = "inclusive"

    @property
    def n(self) -> int:
        return self.n_side * self.n_side

    def with_charges(self, charges) -> "ScattererGrid":
        charges = np.asarray(charges, dtype=float)
        if charges.shape != (self.n,):
            raise ValueError(f"expected {self.n} charges, got shape {charges.shape}")
        return ScattererGrid(self.n_side, self.positions, charges, self.spacing)


def load_charge_table(path) -> np.ndarray:
    """Read a row-major JSON array of charges."""
    return np.asarray(json.loads(Path(path).read_text()), dtype=float)


def build_grid(n_side: int, charge_fn="q4", table=None, spacing: str = "inclusive") -> ScattererGrid:
    """Regular ``n_side x n_side`` grid on ``[-0.5, 0.5]^2`` with charges.

    ``charge_fn`` is one of ``q4``, ``q16``, ``qb``, ``zero``, ``custom`` (then
    ``table`` holds the row-major charges, or a path to a JSON array) or any
    callable ``f(x, y)``.
    """
    if n_side < 2:
        raise ConfigurationError("the grid needs at least 2 points per side")
    c = grid_coordinates(n_side, spacing)
    xx, yy = np.meshgrid(c, c, indexing="xy")
    positions = np.column_stack([xx.ravel(), yy.ravel()])
    if charge_fn == "custom":
        if table is None:
            raise ConfigurationError("custom charges need a table")
        charges = load_charge_table(table) if isinstance(table, (str, Path)) else np.asarray(table, float)
        if charges.shape != (n_side * n_side,):
            raise ConfigurationError(f"charge table must have {n_side * n_side} entries")
    else:
        fn = CHARGE_FUNCTIONS[charge_fn] if isinstance(charge_fn, str) else charge_fn
        charges = np.asarray(fn(positions[:, 0], positions[:, 1]), dtype=float)
    if not np.all(np.isfinite(charges)):
        raise ConfigurationError("charges must be finite")
    return ScattererGrid(n_side, positions, charges, spacing)


@dataclass(frozen=True)
class ReceiverRing:
    n_receivers: int
    radius: float
    positions: np.ndarray


def receiver_ring(n_receivers: int, radius: float = 0.8) -> ReceiverRing:
    r = np.arange(1, n_receivers + 1)
    ang = 2 * np.pi * r / n_receivers
    return ReceiverRing(n_receivers, float(radius), radius * np.column_stack([np.cos(ang), np.sin(ang)]))


@dataclass(frozen=True)
class IncidentSet:
    wavenumber: float
    directions: np.ndarray

    @property
    def n_directions(self) -> int:
        return self.directions.shape[0]


def incident_set(k: float, n_directions: int) -> IncidentSet:
    ang = 2 * np.pi * np.arange(n_directions) / n_directions
    return IncidentSet(float(k), np.column_stack([np.cos(ang), np.sin(ang)]))


def plane_wave(k: float, theta, points) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if abs(np.linalg.norm(theta) - 1.0) > 1e-12:
        raise ValueError("incident direction must be a unit vector")
    return np.exp(1j * k * (np.asarray(points) @ theta))


def incident_fields(inc: IncidentSet, points) -> np.ndarray:
    """Plane waves for every direction as columns, shape ``(N, N_d)``."""
    return np.exp(1j * inc.wavenumber * (np.asarray(points) @ inc.directions.T))


def perturb_charges(q, k: float, n: int, seed: int = 0) -> np.ndarray:
    """Add ``1e-2 ||q|| u / (k n^2)`` with ``u ~ U[0, 1]`` drawn per point."""
    q = np.asarray(q, dtype=float)
    rng = np.random.default_rng(seed)
    scale = 1e-2 * np.linalg.norm(q) / (k * n * n)
    return q + scale * rng.uniform(0.0, 1.0, size=q.shape)


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Partition:
    layout: str
    n_subdomains: int
    overlap: int
    n_side: int
    core_masks: np.ndarray     # (N_s, N) bool
    overlap_masks: np.ndarray  # (N_s, N) bool

    def core_indices(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.core_masks[i])

    def overlap_indices(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.overlap_masks[i])


def _block_ranges(n_side, n_blocks, overlap):
    width = n_side // n_blocks
    out = []
    for b in range(n_blocks):
        lo, hi = b * width, (b + 1) * width
        out.append(((lo, hi), (max(lo - overlap, 0), min(hi + overlap, n_side))))
    return out


def build_partition(n_side: int, layout: str = "squares", n_subdomains: int = 4,
                    overlap: int = 0) -> Partition:
    """Equal-block partition of the grid with ``overlap`` extra points per side."""
    if overlap < 0:
        raise ConfigurationError("overlap must be non-negative")
    if layout == "squares":
        m = isqrt(n_subdomains)
        if m * m != n_subdomains:
            raise ConfigurationError(f"squares layout needs a perfect-square N_s, got {n_subdomains}")
        if n_side % m:
            raise ConfigurationError(f"sqrt(N_s)={m} does not divide n_side={n_side}")
        xr = _block_ranges(n_side, m, overlap)
        yr = xr
    elif layout == "vertical_bands":
        if n_subdomains < 1 or n_side % n_subdomains:
            raise ConfigurationError(f"N_s={n_subdomains} does not divide n_side={n_side}")
        xr = _block_ranges(n_side, n_subdomains, overlap)
        yr = [((0, n_side), (0, n_side))]
    else:
        raise ConfigurationError(f"unknown partition layout {layout!r}")

    ix = np.tile(np.arange(n_side), n_side)
    iy = np.repeat(np.arange(n_side), n_side)
    cores, overs = [], []
    for (cy, oy) in yr:
        for (cx, ox) in xr:
            cores.append((ix >= cx[0]) & (ix < cx[1]) & (iy >= cy[0]) & (iy < cy[1]))
            overs.append((ix >= ox[0]) & (ix < ox[1]) & (iy >= oy[0]) & (iy < oy[1]))
    return Partition(layout, len(cores), overlap, n_side, np.array(cores), np.array(overs))
