"""Overlapping Schwarz preconditioners and their low-rank (RC) correction.

Every variant is a sum over subdomains of an embedded local inverse,
``sum_i R_out_i A_ii^{-1} R_in_i``, where ``A_ii`` is ``A`` restricted to the
overlapped subdomain.  The variants differ only in the two masks:

======  ==========  ===========
name    input mask  output mask
======  ==========  ===========
AS      overlap     overlap
RAS     overlap     core
AHS     core        overlap
SRAS    core        core
======  ==========  ===========

The RC preconditioner corrects a Schwarz preconditioner ``P = Ã^{-1}`` with
the leading singular triplets of ``Ã - A`` so that ``Ã_RC = Ã - U S V^H``
approximates ``A``; its inverse is applied with the Woodbury identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .forward import ForwardSystem, apply_A, apply_A_adjoint, dense_cap
from .numkit import (LUFactors, SingularMatrixError, SvdOptions, lu_factor, lu_solve,
                     power_sigma_max, svd_truncated)
from .scene import Partition

VARIANTS = ("AS", "RAS", "AHS", "SRAS")
_INPUT_IS_CORE = {"AS": False, "RAS": False, "AHS": True, "SRAS": True}
_OUTPUT_IS_CORE = {"AS": False, "RAS": True, "AHS": False, "SRAS": True}


@dataclass(frozen=True)
class SubdomainFactor:
    index: int
    overlap_indices: np.ndarray
    core_local: np.ndarray  # positions within overlap_indices that lie in the core
    factors: LUFactors


@dataclass(frozen=True)
class DDPreconditioner:
    variant: str
    partition: Partition
    factors: List[SubdomainFactor]
    n: int

    def __call__(self, v):
        return apply_dd(self, v)


def build_dd(sys: ForwardSystem, partition: Partition, variant: str = "RAS") -> DDPreconditioner:
    variant = variant.upper()
    if variant not in VARIANTS:
        raise ValueError(f"unknown Schwarz variant {variant!r}")
    if partition.core_masks.shape[1] != sys.n:
        raise ValueError("partition does not match the system size")
    a = sys.dense() if sys.a_dense is not None or sys.n <= dense_cap() else None
    out = []
    for i in range(partition.n_subdomains):
        idx = partition.overlap_indices(i)
        if a is not None:
            block = a[np.ix_(idx, idx)]
        else:
            block = sys.k ** 2 * sys.G[np.ix_(idx, idx)] * sys.q[idx][None, :]
            block[np.diag_indices_from(block)] += 1.0
        try:
            f = lu_factor(block, overwrite=True)
        except SingularMatrixError as exc:
            raise SingularMatrixError(f"subdomain {i} block is singular: {exc}") from exc
        core_local = np.flatnonzero(partition.core_masks[i][idx])
        out.append(SubdomainFactor(i, idx, core_local, f))
    return DDPreconditioner(variant, partition, out, sys.n)


def apply_dd(P: DDPreconditioner, v) -> np.ndarray:
    """Apply the Schwarz preconditioner to a vector or to columns of a matrix."""
    v = np.asarray(v)
    if v.shape[0] != P.n:
        raise ValueError(f"vector length {v.shape[0]} does not match N={P.n}")
    in_core = _INPUT_IS_CORE[P.variant]
    out_core = _OUTPUT_IS_CORE[P.variant]
    y = np.zeros(v.shape, dtype=complex)
    for sf in P.factors:
        idx = sf.overlap_indices
        if in_core:
            local = np.zeros((len(idx),) + v.shape[1:], dtype=complex)
            local[sf.core_local] = v[idx[sf.core_local]]
        else:
            local = v[idx].astype(complex)
        x = lu_solve(sf.factors, local)
        if out_core:
            y[idx[sf.core_local]] += x[sf.core_local]
        else:
            y[idx] += x
    return y


def dd_to_dense(P: DDPreconditioner) -> np.ndarray:
    """Materialize ``Ã^{-1}`` as an explicit ``N x N`` matrix."""
    if P.n > dense_cap():
        raise MemoryError(f"N={P.n} exceeds the dense cap {dense_cap()}")
    in_core = _INPUT_IS_CORE[P.variant]
    out_core = _OUTPUT_IS_CORE[P.variant]
    m = np.zeros((P.n, P.n), dtype=complex)
    for sf in P.factors:
        idx = sf.overlap_indices
        cols = sf.core_local if in_core else np.arange(len(idx))
        rhs = np.zeros((len(idx), len(cols)), dtype=complex)
        rhs[cols, np.arange(len(cols))] = 1.0
        x = lu_solve(sf.factors, rhs)
        rows = sf.core_local if out_core else np.arange(len(idx))
        m[np.ix_(idx[rows], idx[cols])] += x[rows]
    return m


# ---------------------------------------------------------------------------
# Rank correction
# ---------------------------------------------------------------------------


@dataclass
class RCPreconditioner:
    base: DDPreconditioner
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray
    core: Optional[LUFactors]
    pinv_U: np.ndarray  # Ã^{-1} U
    approx_factors: Optional[LUFactors] = field(default=None, repr=False)  # LU of Ã^{-1}
    seed: int = 0

    @property
    def n_lambda(self) -> int:
        return self.S.size

    def __call__(self, v):
        return apply_rc(self, v)


def build_rc(sys: ForwardSystem, P: DDPreconditioner, n_lambda: int,
             svd_opts: Optional[SvdOptions] = None, seed: int = 0) -> RCPreconditioner:
    """Correct ``P`` with the leading ``n_lambda`` singular triplets of ``Ã - A``."""
    svd_opts = svd_opts or SvdOptions()
    n = sys.n
    if n_lambda < 0 or n_lambda >= n:
        raise ValueError(f"N_lambda must lie in [0, N), got {n_lambda}")
    empty = RCPreconditioner(P, np.zeros((n, 0), complex), np.zeros(0), np.zeros((n, 0), complex),
                             None, np.zeros((n, 0), complex), None, seed)
    if n_lambda == 0:
        return empty
    approx = lu_factor(dd_to_dense(P), overwrite=True)

    def diff(x):
        return lu_solve(approx, x) - apply_A(sys, x)

    def diff_adj(y):
        return lu_solve(approx, y, trans=2) - apply_A_adjoint(sys, y)

    width = min(n_lambda + svd_opts.oversample, n)
    u, s, v = svd_truncated(diff, diff_adj, n, n, n_lambda, width - n_lambda,
                            svd_opts.power_iters, seed)
    if s.size == 0 or s[0] == 0.0:
        empty.approx_factors = approx
        return empty
    if s[-1] < 1e-13 * s[0]:
        raise SingularMatrixError(
            f"singular value {s[-1]:.3e} is below 1e-13 * S_max; use a smaller N_lambda")
    pinv_u = apply_dd(P, u)
    core = np.diag(1.0 / s) - v.conj().T @ pinv_u
    try:
        core_f = lu_factor(core)
    except SingularMatrixError as exc:
        raise SingularMatrixError(
            f"Woodbury core is singular ({exc}); try a different N_lambda") from exc
    return RCPreconditioner(P, u, s, v, core_f, pinv_u, approx, seed)


def apply_rc(P: RCPreconditioner, v) -> np.ndarray:
    """``Ã^{-1} v + Ã^{-1} U (S^{-1} - V^H Ã^{-1} U)^{-1} V^H Ã^{-1} v``."""
    x = apply_dd(P.base, v)
    if P.core is None:
        return x
    return x + P.pinv_U @ lu_solve(P.core, P.V.conj().T @ x)


def rc_dense_inverse(P: RCPreconditioner) -> np.ndarray:
    """``Ã_RC^{-1}`` as an explicit matrix."""
    m = dd_to_dense(P.base)
    if P.core is None:
        return m
    return m + P.pinv_U @ lu_solve(P.core, P.V.conj().T @ m)


def _scale(s, x):
    return s[:, None] * x if x.ndim == 2 else s * x


def rc_relative_error(sys: ForwardSystem, P: RCPreconditioner, iters: int = 30, seed: int = 0) -> float:
    """Estimate ``||Ã_RC - A|| / ||A||`` in the 2-norm by power iteration."""
    if P.approx_factors is None:
        P.approx_factors = lu_factor(dd_to_dense(P.base), overwrite=True)
    approx, u, s, v = P.approx_factors, P.U, P.S, P.V

    def err(x):
        return lu_solve(approx, x) - apply_A(sys, x) - u @ _scale(s, v.conj().T @ x)

    def err_adj(y):
        return lu_solve(approx, y, trans=2) - apply_A_adjoint(sys, y) - v @ _scale(s, u.conj().T @ y)

    num = power_sigma_max(err, err_adj, sys.n, iters=iters, seed=seed)
    den = power_sigma_max(lambda x: apply_A(sys, x), lambda y: apply_A_adjoint(sys, y),
                          sys.n, iters=iters, seed=seed)
    return num / den


def difference_spectrum(sys: ForwardSystem, P: DDPreconditioner, n_values: int,
                        svd_opts: Optional[SvdOptions] = None, seed: int = 0) -> np.ndarray:
    """Leading ``n_values`` singular values of ``Ã - A``, descending."""
    svd_opts = svd_opts or SvdOptions()
    approx = lu_factor(dd_to_dense(P), overwrite=True)
    width = min(n_values + svd_opts.oversample, sys.n)
    _, s, _ = svd_truncated(lambda x: lu_solve(approx, x) - apply_A(sys, x),
                            lambda y: lu_solve(approx, y, trans=2) - apply_A_adjoint(sys, y),
                            sys.n, sys.n, n_values, width - n_values, svd_opts.power_iters, seed)
    return s


def dump_spectrum(values, path) -> None:
    Path(path).write_text(json.dumps([float(x) for x in values]))
