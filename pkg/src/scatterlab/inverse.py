"""Fréchet derivative, regularized Gauss-Newton Hessian, its preconditioners and
the Gauss-Newton loop.

For one incident direction ``j`` the derivative of the receiver data with
respect to the charges is ``J_j = B diag(u_j)`` with ``u_j`` the total field
and

    B = -k^2 G_r + k^4 G_r Q A^{-1} G,

which does not depend on the direction.  Stacking the directions gives
``J^H J = (B^H B) ∘ (conj(U) U^T)`` where ``U`` holds the total fields as
columns, so the dense Hessian costs one ``N x N_r x N`` product instead of
``N_d`` of them.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg as sla

from .forward import (ForwardSystem, MeasurementSet, assemble_G, assemble_Gr, build_system,
                      dense_cap, forward_solve, measure)
from .numkit import (GmresOptions, GmresReport, SingularMatrixError, SvdOptions, eigh_truncated,
                     gmres, lu_solve, power_sigma_max)
from .scene import build_partition, incident_fields
from .schwarz import build_dd, build_rc, rc_dense_inverse


class FactorizationError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# Fréchet derivative
# ---------------------------------------------------------------------------


@dataclass
class FrechetOperator:
    """``J`` at one iterate, for all incident directions of a data set.

    ``u_tot`` holds the total fields ``u_inc + u_scat`` as columns (N x N_d).
    Products with ``J`` and ``J^H`` use the LU factors of ``A``; ``kernel()``
    forms the dense ``B`` once and is reused by the Hessian.
    """

    sys: ForwardSystem
    gr: np.ndarray
    u_tot: np.ndarray
    _kernel: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def k(self) -> float:
        return self.sys.k

    @property
    def n(self) -> int:
        return self.sys.n

    @property
    def n_directions(self) -> int:
        return self.u_tot.shape[1]

    @property
    def n_receivers(self) -> int:
        return self.gr.shape[0]

    def kernel(self) -> np.ndarray:
        if self._kernel is None:
            self._kernel = frechet_kernel(self.sys, self.gr)
        return self._kernel


def frechet_kernel(sys: ForwardSystem, gr: np.ndarray, a_inverse: Optional[np.ndarray] = None) -> np.ndarray:
    """Dense ``B = -k^2 G_r + k^4 G_r Q X G`` with ``X = A^{-1}`` or a given surrogate."""
    k2 = sys.k ** 2
    grq = gr * sys.q[None, :]
    if a_inverse is None:
        # (G_r Q) A^{-1} through a transposed solve with N_r right-hand sides
        z = lu_solve(sys.factors(), grq.T, trans=1).T
    else:
        z = grq @ a_inverse
    return -k2 * gr + (k2 * k2) * (z @ sys.G)


def build_frechet(sys: ForwardSystem, receivers, u_inc, u_scat, gr=None) -> FrechetOperator:
    if gr is None:
        gr = assemble_Gr(receivers, sys.grid, sys.k)
    u_inc = np.asarray(u_inc)
    u_tot = u_inc + np.asarray(u_scat)
    if u_tot.ndim == 1:
        u_tot = u_tot[:, None]
    return FrechetOperator(sys, gr, u_tot)


def apply_J(op: FrechetOperator, v) -> np.ndarray:
    """``J v`` stacked by direction (length ``N_d * N_r``)."""
    v = np.asarray(v)
    if v.shape != (op.n,):
        raise ValueError(f"expected a vector of length {op.n}")
    scaled = op.u_tot * v[:, None]
    if op._kernel is not None:
        w = op._kernel @ scaled
    else:
        sys = op.sys
        k2 = sys.k ** 2
        inner = lu_solve(sys.factors(), sys.G @ scaled)
        w = op.gr @ (-k2 * scaled + (k2 * k2) * (sys.q[:, None] * inner))
    return w.T.reshape(-1)


def apply_J_adjoint(op: FrechetOperator, w) -> np.ndarray:
    w = np.asarray(w)
    if w.shape != (op.n_directions * op.n_receivers,):
        raise ValueError(f"expected a vector of length {op.n_directions * op.n_receivers}")
    wm = w.reshape(op.n_directions, op.n_receivers).T
    if op._kernel is not None:
        y = op._kernel.conj().T @ wm
    else:
        sys = op.sys
        k2 = sys.k ** 2
        t = op.gr.conj().T @ wm
        inner = lu_solve(sys.factors(), sys.q[:, None] * t, trans=2)
        y = -k2 * t + (k2 * k2) * (sys.G.conj() @ inner)
    return np.sum(op.u_tot.conj() * y, axis=1)


def dense_J(op: FrechetOperator) -> np.ndarray:
    """Explicit stacked ``J`` (``N_d N_r x N``)."""
    b = op.kernel()
    return np.concatenate([b * op.u_tot[:, j][None, :] for j in range(op.n_directions)])


def gram_JhJ(kernel: np.ndarray, u_tot: np.ndarray) -> np.ndarray:
    """``J^H J`` from the direction-independent kernel and the total fields."""
    c = kernel.conj().T @ kernel
    c *= u_tot.conj() @ u_tot.T
    return c


# ---------------------------------------------------------------------------
# Hessian
# ---------------------------------------------------------------------------


@dataclass
class HessianOperator:
    """``H = sigma^{-2} J^H J + beta I``."""

    frechet: FrechetOperator
    beta: float
    sigma: float
    dense: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.frechet.n

    def __call__(self, v):
        return apply_H(self, v)


def estimate_sigma_max(op: FrechetOperator, iters: int = 30, seed: int = 0) -> float:
    return power_sigma_max(lambda v: apply_J(op, v), lambda w: apply_J_adjoint(op, w),
                           op.n, iters=iters, seed=seed)


def build_hessian(op: FrechetOperator, beta: float, sigma: Optional[float] = None,
                  dense: Optional[bool] = None, seed: int = 0) -> HessianOperator:
    if beta <= 0:
        raise ValueError("beta must be positive")
    if dense is None:
        dense = op.n <= dense_cap()
    if dense:
        op.kernel()
    if sigma is None:
        sigma = estimate_sigma_max(op, seed=seed)
    if sigma <= 0:
        raise ValueError("sigma_max of J is zero; the data do not depend on the charges")
    h = None
    if dense:
        h = gram_JhJ(op.kernel(), op.u_tot)
        h /= sigma * sigma
        h[np.diag_indices_from(h)] += beta
    return HessianOperator(op, float(beta), float(sigma), h)


def apply_H(H: HessianOperator, v) -> np.ndarray:
    v = np.asarray(v)
    if H.dense is not None:
        return H.dense @ v
    op = H.frechet
    return apply_J_adjoint(op, apply_J(op, v)) / H.sigma ** 2 + H.beta * v


def hessian_rhs(H: HessianOperator, residual) -> np.ndarray:
    """``sigma^{-2} J^H r``."""
    return apply_J_adjoint(H.frechet, np.asarray(residual)) / H.sigma ** 2


# ---------------------------------------------------------------------------
# Preconditioners
# ---------------------------------------------------------------------------


@dataclass
class LowRankPreconditioner:
    """``U (S + beta)^{-1} U^H + beta^{-1} (I - U U^H)``."""

    U: np.ndarray
    S: np.ndarray
    beta: float

    def __call__(self, v):
        v = np.asarray(v)
        c = self.U.conj().T @ v
        d = self.S + self.beta if v.ndim == 1 else (self.S + self.beta)[:, None]
        return self.U @ (c / d) + (v - self.U @ c) / self.beta


def build_lr_precond(H: HessianOperator, n_lambda: int, svd_opts: Optional[SvdOptions] = None,
                     seed: int = 0) -> LowRankPreconditioner:
    """Invert the rank-``n_lambda`` truncation of ``sigma^{-2} J^H J`` plus ``beta I``."""
    svd_opts = svd_opts or SvdOptions()
    n = H.n
    if n_lambda < 0 or n_lambda > n:
        raise ValueError(f"N_lambda={n_lambda} outside [0, {n}]")
    if H.dense is not None:
        m = H.dense.copy()
        m[np.diag_indices_from(m)] -= H.beta

        def apply_m(x):
            return m @ x
    else:
        op, s2 = H.frechet, H.sigma ** 2

        def apply_m(x):
            cols = [apply_J_adjoint(op, apply_J(op, c)) / s2 for c in np.atleast_2d(x.T)]
            return np.column_stack(cols)
    lam, u = eigh_truncated(apply_m, n, n_lambda, svd_opts.oversample, svd_opts.power_iters, seed)
    return LowRankPreconditioner(u, np.clip(lam, 0.0, None), H.beta)


@dataclass
class CholeskyPreconditioner:
    """Solve with a Hermitian positive definite matrix through its Cholesky factor."""

    factor: tuple
    n_lambda: int = 0

    def __call__(self, v):
        return sla.cho_solve(self.factor, np.asarray(v, dtype=complex), check_finite=False)


def approximate_hessian(H: HessianOperator, a_inverse: np.ndarray) -> np.ndarray:
    """``sigma^{-2} J̃^H J̃ + beta I`` with ``A^{-1}`` replaced by ``a_inverse``."""
    op = H.frechet
    kt = frechet_kernel(op.sys, op.gr, a_inverse)
    ht = gram_JhJ(kt, op.u_tot)
    ht /= H.sigma ** 2
    ht[np.diag_indices_from(ht)] += H.beta
    return ht


def build_hrc_precond(H: HessianOperator, partition, n_lambda: int,
                      svd_opts: Optional[SvdOptions] = None, seed: int = 0,
                      variant: str = "RAS") -> CholeskyPreconditioner:
    """HRC preconditioner: the Hessian with ``A^{-1}`` replaced by the RC surrogate.

    ``J̃`` uses the same ``sigma_max`` scaling as ``H``.  The approximate
    Hessian is factored by Cholesky.
    """
    sys = H.frechet.sys
    if sys.n > dense_cap():
        raise MemoryError(f"N={sys.n} exceeds the dense cap {dense_cap()}")
    dd = build_dd(sys, partition, variant)
    rc = build_rc(sys, dd, n_lambda, svd_opts, seed)
    ht = approximate_hessian(H, rc_dense_inverse(rc))
    try:
        factor = sla.cho_factor(ht, lower=False, overwrite_a=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        d = np.real(np.diagonal(ht))
        raise FactorizationError(
            f"approximate Hessian is not numerically positive definite "
            f"(smallest diagonal entry {d.min():.3e}): {exc}") from exc
    return CholeskyPreconditioner(factor, rc.n_lambda)


# ---------------------------------------------------------------------------
# Gauss-Newton
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    delta_q: np.ndarray
    report: GmresReport
    imag_ratio: float
    solution: np.ndarray


def gauss_newton_step(H: HessianOperator, residual, precond=None,
                      gmres_opts: Optional[GmresOptions] = None, callback=None) -> StepResult:
    """Solve ``H x = sigma^{-2} J^H r``; the charge update is ``Re x``."""
    b = hessian_rhs(H, residual)
    report = gmres(lambda v: apply_H(H, v), b, precond=precond, opts=gmres_opts, callback=callback)
    x = report.solution
    re = np.linalg.norm(x.real)
    ratio = float(np.linalg.norm(x.imag) / re) if re > 0 else 0.0
    return StepResult(x.real.copy(), report, ratio, x)


def solve_to_accuracy(H: HessianOperator, rhs, reference, threshold: float = 1e-3,
                      precond=None, max_iter: int = 2000, tol: float = 1e-13):
    """GMRES on ``H`` stopped at the first iterate with ``e_rel < threshold``.

    Returns ``(iterations, e_rel, report)``.  This realizes "iterations needed
    to reach an error of order 1e-4": ``threshold = 1e-3`` stops as soon as
    the error drops into that decade.
    """
    ref_norm = np.linalg.norm(reference)
    seen = {"err": math.inf}

    def cb(_, x):
        seen["err"] = float(np.linalg.norm(x - reference) / ref_norm)
        return seen["err"] < threshold

    opts = GmresOptions(tol=tol, max_iter=max_iter, use_preconditioned_residual=True)
    report = gmres(lambda v: apply_H(H, v), rhs, precond=precond, opts=opts, callback=cb)
    err = float(np.linalg.norm(report.solution - reference) / ref_norm)
    return report.iterations, err, report


@dataclass
class GaussNewtonConfig:
    eps_residual: float = 1e-8
    eps_update: float = 1e-8
    max_iters: int = 20
    beta: float = 1e-6
    gmres: GmresOptions = field(default_factory=lambda: GmresOptions(tol=1e-7, max_iter=1000))
    precond: str = "none"  # none | lr | hrc
    n_lambda: int = 0
    layout: str = "squares"
    n_subdomains: int = 16
    overlap: int = 4
    variant: str = "RAS"
    svd: SvdOptions = field(default_factory=SvdOptions)
    sigma_iters: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.eps_residual <= 0 or self.eps_update <= 0:
            raise ValueError("Gauss-Newton tolerances must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.precond not in ("none", "lr", "hrc"):
            raise ValueError(f"unknown preconditioner {self.precond!r}")


@dataclass
class TraceRow:
    """State at iterate ``iteration``.

    ``update_norm`` is the norm of the step that produced this iterate and
    ``gmres_iters`` the cost of the step taken from it.
    """

    iteration: int
    objective: float
    residual_norm: float
    update_norm: float
    gmres_iters: int
    e_rel: float
    imag_ratio: float = 0.0


@dataclass
class GaussNewtonResult:
    q: np.ndarray
    trace: List[TraceRow]
    stop_reason: str
    error: Optional[str] = None

    @property
    def gmres_total(self) -> int:
        return sum(r.gmres_iters for r in self.trace)

    @property
    def iterations(self) -> int:
        """Number of charge updates taken."""
        return max(len(self.trace) - 1, 0)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "objective", "update_norm", "gmres_iters", "e_rel"])
        for r in self.trace:
            w.writerow([r.iteration, f"{r.objective:.17g}", f"{r.update_norm:.17g}",
                        r.gmres_iters, f"{r.e_rel:.17g}"])
        return buf.getvalue()


def forward_all(sys: ForwardSystem, data: MeasurementSet, gr):
    u_inc = incident_fields(data.directions, sys.grid.positions)
    u_scat, _ = forward_solve(sys, u_inc, "lu")
    pred = measure(sys, data.receivers, u_inc, u_scat, gr=gr).T
    return u_inc, u_scat, pred


def _preconditioner(H: HessianOperator, cfg: GaussNewtonConfig):
    if cfg.precond == "none":
        return None
    if cfg.precond == "lr":
        return build_lr_precond(H, cfg.n_lambda, cfg.svd, cfg.seed)
    grid = H.frechet.sys.grid
    part = build_partition(grid.n_side, cfg.layout, cfg.n_subdomains, cfg.overlap)
    return build_hrc_precond(H, part, cfg.n_lambda, cfg.svd, cfg.seed, cfg.variant)


def gauss_newton(data: MeasurementSet, grid, q0, cfg: GaussNewtonConfig,
                 q_true=None, G=None, gr=None) -> GaussNewtonResult:
    """Gauss-Newton iteration without line search.

    ``grid`` supplies the geometry; its charges are replaced by ``q0``.  The
    loop stops on the residual test, the iteration cap, or (after the first
    update) the update-norm test; ``stop_reason`` names the guard that fired.
    """
    k = data.k
    q = np.array(q0, dtype=float)
    if G is None:
        G = assemble_G(grid, k)
    if gr is None:
        gr = assemble_Gr(data.receivers, grid, k)
    d = data.data
    truth_norm = None if q_true is None else np.linalg.norm(q_true)

    def err(qv):
        if q_true is None or not truth_norm:
            return float("nan")
        return float(np.linalg.norm(qv - q_true) / truth_norm)

    trace: List[TraceRow] = []
    update_norm = 0.0
    it = 0
    while True:
        try:
            sys = build_system(grid.with_charges(q), k, G=G)
            u_inc, u_scat, pred = forward_all(sys, data, gr)
        except (SingularMatrixError, MemoryError) as exc:
            return GaussNewtonResult(q, trace, "forward_failure", str(exc))
        r = d - pred
        rnorm = float(np.linalg.norm(r))
        row = TraceRow(it, 0.5 * rnorm ** 2, rnorm, update_norm, 0, err(q))
        trace.append(row)
        if rnorm < cfg.eps_residual:
            return GaussNewtonResult(q, trace, "residual")
        if it >= cfg.max_iters:
            return GaussNewtonResult(q, trace, "max_iters")
        if it > 0 and update_norm < cfg.eps_update:
            return GaussNewtonResult(q, trace, "update")

        op = FrechetOperator(sys, gr, u_inc + u_scat)
        try:
            if op.n <= dense_cap():
                op.kernel()
            H = build_hessian(op, cfg.beta, estimate_sigma_max(op, cfg.sigma_iters, cfg.seed))
            precond = _preconditioner(H, cfg)
        except (np.linalg.LinAlgError, MemoryError, ValueError) as exc:
            return GaussNewtonResult(q, trace, "step_failure", str(exc))
        step = gauss_newton_step(H, r.reshape(-1), precond, cfg.gmres)
        q = q + step.delta_q
        update_norm = float(np.linalg.norm(step.delta_q))
        it += 1
        row.gmres_iters = step.report.iterations
        row.imag_ratio = step.imag_ratio
