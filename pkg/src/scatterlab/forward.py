"""Discrete Lippmann-Schwinger system for point scatterers and its measurement map."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .numkit import GmresOptions, LUFactors, gmres, hankel0_first_kind, lu_factor, lu_solve
from .scene import IncidentSet, ReceiverRing, ScattererGrid, incident_fields, incident_set, receiver_ring


class GeometryError(ValueError):
    pass


class SolverDivergence(RuntimeError):
    pass


def dense_cap() -> int:
    """Largest N for which dense N x N operators are formed (``SCATTERLAB_DENSE_CAP``)."""
    return int(os.environ.get("SCATTERLAB_DENSE_CAP", 64 * 64))


def green(k: float, r) -> np.ndarray:
    """Free-space Green's function ``(i/4) H0^(1)(k r)`` for ``r > 0``."""
    return 0.25j * hankel0_first_kind(k * np.asarray(r, dtype=float))


def _grid_offsets(grid: ScattererGrid):
    n = grid.n_side
    return np.tile(np.arange(n), n), np.repeat(np.arange(n), n)


def _green_table(grid: ScattererGrid, k: float) -> np.ndarray:
    """``T[dy, dx]`` = kernel between two grid points ``(dx, dy)`` steps apart."""
    c = grid.positions[: grid.n_side, 0]
    h = c[1] - c[0]
    d = np.arange(grid.n_side) * h
    r = np.hypot(d[:, None], d[None, :])
    table = np.zeros(r.shape, dtype=complex)
    if k != 0:
        table.flat[1:] = green(k, r.flat[1:])
    return table


def assemble_G(grid: ScattererGrid, k: float) -> np.ndarray:
    """Scatterer-to-scatterer kernel matrix with zero diagonal.

    Grid points only see ``n_side^2`` distinct distances, so the kernel is
    evaluated once per offset and gathered.  At ``k = 0`` the matrix is
    returned as zero, since only ``k^2 G`` enters the system.
    """
    if grid.n == 1:
        return np.zeros((1, 1), dtype=complex)
    table = _green_table(grid, k)
    ix, iy = _grid_offsets(grid)
    ix = ix.astype(np.int32)
    iy = iy.astype(np.int32)
    dx = np.abs(ix[:, None] - ix[None, :])
    dy = np.abs(iy[:, None] - iy[None, :])
    return table[dy, dx]


def assemble_G_points(points, k: float) -> np.ndarray:
    """Kernel matrix for an arbitrary point cloud (zero diagonal)."""
    points = np.asarray(points, dtype=float)
    r = np.hypot(*(points[:, None, :] - points[None, :, :]).transpose(2, 0, 1))
    off = ~np.eye(len(points), dtype=bool)
    if np.any(r[off] < 1e-14):
        raise GeometryError("two scatterers coincide")
    out = np.zeros(r.shape, dtype=complex)
    if k != 0:
        out[off] = green(k, r[off])
    return out


def assemble_Gr(receivers: ReceiverRing, grid: ScattererGrid, k: float) -> np.ndarray:
    """Receiver-to-scatterer kernel matrix, shape ``(N_r, N)``."""
    y = receivers.positions
    x = grid.positions
    r = np.hypot(y[:, 0:1] - x[None, :, 0], y[:, 1:2] - x[None, :, 1])
    if np.any(r < 1e-14):
        raise GeometryError("a receiver coincides with a scatterer")
    if k == 0:
        return np.zeros(r.shape, dtype=complex)
    return green(k, r)


@dataclass
class ForwardSystem:
    """``A = I + k^2 G Q`` for one wavenumber and one set of charges."""

    k: float
    grid: ScattererGrid
    G: np.ndarray
    a_dense: Optional[np.ndarray] = None
    _factors: Optional[LUFactors] = field(default=None, repr=False)

    @property
    def q(self) -> np.ndarray:
        return self.grid.charges

    @property
    def n(self) -> int:
        return self.grid.n

    def factors(self) -> LUFactors:
        if self._factors is None:
            self._factors = lu_factor(self.dense())
        return self._factors

    def dense(self) -> np.ndarray:
        if self.a_dense is None:
            if self.n > dense_cap():
                raise MemoryError(f"N={self.n} exceeds the dense cap {dense_cap()}")
            self.a_dense = _dense_A(self.G, self.k, self.q)
        return self.a_dense

    def with_charges(self, charges) -> "ForwardSystem":
        """Same grid and kernel, new charges."""
        return build_system(self.grid.with_charges(charges), self.k, G=self.G,
                            dense=self.a_dense is not None)


def _dense_A(G, k, q):
    a = G * (k * k * q)[None, :]
    a[np.diag_indices_from(a)] += 1.0
    return a


def build_system(grid: ScattererGrid, k: float, G=None, dense: Optional[bool] = None) -> ForwardSystem:
    if G is None:
        G = assemble_G(grid, k)
    if dense is None:
        dense = grid.n <= dense_cap()
    a = _dense_A(G, k, grid.charges) if dense else None
    return ForwardSystem(float(k), grid, G, a)


def _scale_rows(q, v):
    return q[:, None] * v if v.ndim == 2 else q * v


def apply_A(sys: ForwardSystem, v) -> np.ndarray:
    v = np.asarray(v)
    if v.shape[0] != sys.n:
        raise ValueError(f"vector length {v.shape[0]} does not match N={sys.n}")
    if sys.a_dense is not None:
        return sys.a_dense @ v
    return v + sys.k ** 2 * (sys.G @ _scale_rows(sys.q, v))


def apply_A_adjoint(sys: ForwardSystem, v) -> np.ndarray:
    v = np.asarray(v)
    if sys.a_dense is not None:
        return sys.a_dense.conj().T @ v
    return v + sys.k ** 2 * _scale_rows(sys.q, sys.G.conj() @ v)


def rhs(sys: ForwardSystem, u_inc) -> np.ndarray:
    """``-k^2 G Q u_inc``."""
    return -sys.k ** 2 * (sys.G @ _scale_rows(sys.q, np.asarray(u_inc)))


def forward_solve(sys: ForwardSystem, u_inc, method: str = "lu", opts: Optional[GmresOptions] = None,
                  precond=None, callback=None):
    """Scattered field at the scatterers.

    Returns ``(u_scat, report)``; ``report`` is a :class:`GmresReport` for the
    iterative method and ``None`` for the direct one.  With ``method="lu"``
    ``u_inc`` may hold several incident fields as columns.
    """
    u_inc = np.asarray(u_inc)
    if u_inc.shape[0] != sys.n:
        raise ValueError(f"incident field length {u_inc.shape[0]} does not match N={sys.n}")
    b = rhs(sys, u_inc)
    if method == "lu":
        return lu_solve(sys.factors(), b), None
    if method != "gmres":
        raise ValueError(f"unknown forward method {method!r}")
    report = gmres(lambda v: apply_A(sys, v), b, precond=precond, opts=opts, callback=callback)
    return report.solution, report


def measure(sys: ForwardSystem, receivers: ReceiverRing, u_inc, u_scat, gr=None) -> np.ndarray:
    """Scattered field at the receivers, ``-k^2 G_r Q (u_inc + u_scat)``.

    Pass a precomputed ``gr = assemble_Gr(...)`` to avoid re-evaluating the
    kernel.  Column stacks of fields give column stacks of measurements.
    """
    if gr is None:
        gr = assemble_Gr(receivers, sys.grid, sys.k)
    total = np.asarray(u_inc) + np.asarray(u_scat)
    return -sys.k ** 2 * (gr @ _scale_rows(sys.q, total))


def relative_error(x, x_ref) -> float:
    ref = np.linalg.norm(x_ref)
    if ref == 0:
        raise ZeroDivisionError("reference vector has zero norm")
    return float(np.linalg.norm(np.asarray(x) - np.asarray(x_ref)) / ref)


# ---------------------------------------------------------------------------
# Multi-direction data
# ---------------------------------------------------------------------------


@dataclass
class MeasurementSet:
    k: float
    directions: IncidentSet
    receivers: ReceiverRing
    data: np.ndarray  # (N_d, N_r)

    def stacked(self) -> np.ndarray:
        """Data as one vector ordered by direction."""
        return self.data.reshape(-1)

    def to_json(self) -> str:
        payload = {
            "k": self.k,
            "nd": int(self.directions.n_directions),
            "nr": int(self.receivers.n_receivers),
            "radius": self.receivers.radius,
            "data": [[[float(z.real), float(z.imag)] for z in row] for row in self.data],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "MeasurementSet":
        raw = json.loads(text)
        data = np.array(raw["data"], dtype=float)
        data = data[..., 0] + 1j * data[..., 1]
        inc = incident_set(raw["k"], raw["nd"])
        rec = receiver_ring(raw["nr"], raw["radius"])
        if data.shape != (raw["nd"], raw["nr"]):
            raise ValueError("data shape does not match nd x nr")
        return cls(float(raw["k"]), inc, rec, data)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "MeasurementSet":
        return cls.from_json(Path(path).read_text())


def synth_data(grid: ScattererGrid, k: float, n_directions: int, receivers: ReceiverRing,
               solver: str = "lu", opts: Optional[GmresOptions] = None, noise: float = 0.0,
               seed: int = 0, sys: Optional[ForwardSystem] = None) -> MeasurementSet:
    """Synthetic receiver data for ``n_directions`` plane waves.

    ``noise`` adds seeded complex Gaussian noise of that relative level.
    """
    inc = incident_set(k, n_directions)
    sys = sys if sys is not None else build_system(grid, k)
    u_inc = incident_fields(inc, grid.positions)
    if solver == "lu":
        u_scat, _ = forward_solve(sys, u_inc, "lu")
    else:
        cols, failed = [], []
        for j in range(n_directions):
            u, rep = forward_solve(sys, u_inc[:, j], "gmres", opts=opts)
            if not rep.converged:
                failed.append(j)
            cols.append(u)
        if failed:
            raise SolverDivergence(f"forward solve did not converge for directions {failed}")
        u_scat = np.column_stack(cols)
    data = measure(sys, receivers, u_inc, u_scat).T.copy()
    if noise > 0:
        rng = np.random.default_rng(seed)
        level = noise * np.linalg.norm(data) / np.sqrt(2 * data.size)
        data = data + level * (rng.standard_normal(data.shape) + 1j * rng.standard_normal(data.shape))
    return MeasurementSet(float(k), inc, receivers, data)
