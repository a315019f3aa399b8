"""Dense complex linear algebra and special functions shared by the solvers.

Linear maps are plain callables acting on 1-D vectors; maps that are handed
to :func:`svd_truncated` must also accept 2-D arrays and act column-wise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

LinearMap = Callable[[np.ndarray], np.ndarray]


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class NumericalBreakdown(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# Bessel functions of order zero (Cephes rational approximations)
# ---------------------------------------------------------------------------

_SQ2OPI = 7.9788456080286535587989e-1
_PIO4 = 7.85398163397448309616e-1
_TWOOPI = 6.36619772367581343075535e-1
_DR1 = 5.78318596294678452118e0
_DR2 = 3.04712623436620863991e1

_PP = (7.96936729297347051624e-4, 8.28352392107440799803e-2, 1.23953371646414299388e0,
       5.44725003058768775090e0, 8.74716500199817011941e0, 5.30324038235394892183e0,
       9.99999999999999997821e-1)
_PQ = (9.24408810558863637013e-4, 8.56288474354474431428e-2, 1.25352743901058953537e0,
       5.47097740330417105182e0, 8.76190883237069594232e0, 5.30605288235394617618e0,
       1.00000000000000000218e0)
_QP = (-1.13663838898469149931e-2, -1.28252718670509318512e0, -1.95539544257735972385e1,
       -9.32060152123768231369e1, -1.77681167980488050595e2, -1.47077505154951170175e2,
       -5.14105326766599330220e1, -6.05014350600728481186e0)
_QQ = (6.43178256118178023184e1, 8.56430025976980587198e2, 3.88240183605401609683e3,
       7.24046774195652478189e3, 5.93072701187316984827e3, 2.06209331660327847417e3,
       2.42005740240291393179e2)
_RP = (-4.79443220978201773821e9, 1.95617491946556577543e12, -2.49248344360967716204e14,
       9.70862251047306323952e15)
_RQ = (4.99563147152651017219e2, 1.73785401676374683123e5, 4.84409658339962045305e7,
       1.11855537045356834862e10, 2.11277520115489217587e12, 3.10518229857422583814e14,
       3.18121955943204943306e16, 1.71086294081043136091e18)
_YP = (1.55924367855235737965e4, -1.46639295903971606143e7, 5.43526477051876500413e9,
       -9.82136065717911466409e11, 8.75906394395366999549e13, -3.46628303384729719441e15,
       4.42733268572569800351e16, -1.84950800436986690637e16)
_YQ = (1.04128353664259848412e3, 6.26107330137134956842e5, 2.68919633393814121987e8,
       8.64002487103935000337e10, 2.02979612750105546709e13, 3.17157752842975028269e15,
       2.50596256172653059228e17)


def _polevl(x, coef):
    ans = np.full_like(x, coef[0])
    for c in coef[1:]:
        ans = ans * x + c
    return ans


def _p1evl(x, coef):
    ans = x + coef[0]
    for c in coef[1:]:
        ans = ans * x + c
    return ans


def _asymptotic_pq(x):
    w = 5.0 / x
    z = w * w
    p = _polevl(z, _PP) / _polevl(z, _PQ)
    q = _polevl(z, _QP) / _p1evl(z, _QQ)
    return p, w * q


def bessel_j0_y0(x):
    """Return ``(J0(x), Y0(x))`` for positive ``x`` (scalar or array)."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("Bessel functions of the second kind need x > 0")
    j0 = np.empty_like(x)
    y0 = np.empty_like(x)

    small = x <= 5.0
    if np.any(small):
        xs = x[small]
        z = xs * xs
        j = (z - _DR1) * (z - _DR2) * _polevl(z, _RP) / _p1evl(z, _RQ)
        tiny = xs < 1e-5
        j = np.where(tiny, 1.0 - z / 4.0, j)
        j0[small] = j
        y0[small] = _TWOOPI * np.log(xs) * j + _polevl(z, _YP) / _p1evl(z, _YQ)

    large = ~small
    if np.any(large):
        xl = x[large]
        p, wq = _asymptotic_pq(xl)
        xn = xl - _PIO4
        amp = _SQ2OPI / np.sqrt(xl)
        sn, cs = np.sin(xn), np.cos(xn)
        j0[large] = amp * (p * cs - wq * sn)
        y0[large] = amp * (p * sn + wq * cs)
    return j0, y0


def hankel0_first_kind(x):
    """Hankel function ``H0^(1)(x) = J0(x) + i Y0(x)`` for ``x > 0``.

    Accepts a scalar or an array; a scalar input gives a Python complex.
    """
    scalar = np.ndim(x) == 0
    j0, y0 = bessel_j0_y0(x)
    h = j0 + 1j * y0
    return complex(h) if scalar else h


# ---------------------------------------------------------------------------
# LU factorization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LUFactors:
    """Partial-pivoted LU factors in LAPACK ``getrf`` layout."""

    lu: np.ndarray
    piv: np.ndarray

    @property
    def n(self) -> int:
        return self.lu.shape[0]

    def permutation(self) -> np.ndarray:
        """Row order ``p`` such that ``A[p] = L @ U``."""
        perm = np.arange(self.n)
        for i, j in enumerate(self.piv):
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def unpack(self):
        """Return ``(perm, L, U)``."""
        lower = np.tril(self.lu, -1) + np.eye(self.n, dtype=self.lu.dtype)
        return self.permutation(), lower, np.triu(self.lu)


def lu_factor(a, overwrite: bool = False) -> LUFactors:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"lu_factor needs a square matrix, got shape {a.shape}")
    if a.size == 0:
        return LUFactors(np.zeros((0, 0), dtype=complex), np.zeros(0, dtype=np.int32))
    scale = np.max(np.abs(a))
    if not np.isfinite(scale):
        raise ValueError("matrix has non-finite entries")
    a = a.astype(np.result_type(a.dtype, np.complex128), copy=not overwrite)
    with warnings.catch_warnings():
        # exact zero pivots are reported below as SingularMatrixError
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(a, overwrite_a=True, check_finite=False)
    pivots = np.abs(np.diagonal(lu))
    smallest = pivots.min()
    if scale == 0.0 or smallest < 1e-14 * scale:
        raise SingularMatrixError(
            f"matrix is singular to working precision (min pivot {smallest:.3e}, max entry {scale:.3e})"
        )
    return LUFactors(lu, piv)


def lu_solve(factors: LUFactors, b, trans: int = 0) -> np.ndarray:
    """Solve with the factored matrix.

    ``trans`` follows LAPACK: 0 solves ``A x = b``, 1 ``A^T x = b`` and
    2 ``A^H x = b``.
    """
    b = np.asarray(b)
    if b.shape[0] != factors.n:
        raise ValueError(f"right-hand side has {b.shape[0]} rows, factors are {factors.n}x{factors.n}")
    if factors.n == 0:
        return b.astype(complex)
    b = b.astype(np.complex128, copy=False)
    return sla.lu_solve((factors.lu, factors.piv), b, trans=trans, check_finite=False)


# ---------------------------------------------------------------------------
# GMRES
# ---------------------------------------------------------------------------


@dataclass
class GmresOptions:
    tol: float = 1e-11
    max_iter: Optional[int] = None
    use_preconditioned_residual: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("GMRES tolerance must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("GMRES max_iter must be at least 1")


@dataclass
class GmresReport:
    solution: np.ndarray
    iterations: int
    residual_history: list = field(default_factory=list)
    converged: bool = False
    stopped_by_callback: bool = False


def gmres(apply_op: LinearMap, b, precond: Optional[LinearMap] = None,
          opts: Optional[GmresOptions] = None, callback=None) -> GmresReport:
    """Left-preconditioned full GMRES with modified Gram-Schmidt and Givens rotations.

    The stopping test compares ``||M(b - Ax)|| / ||Mb||`` against ``opts.tol``
    when a preconditioner ``M`` is given and ``opts.use_preconditioned_residual``
    is set; otherwise the true relative residual ``||b - Ax|| / ||b||`` is used.
    ``residual_history`` records that same quantity, starting with the initial
    value 1.

    ``callback(k, x_k)`` is invoked after every iteration with the current
    iterate; returning ``True`` stops the solve early.  Building ``x_k`` costs
    an extra ``O(nk)`` per iteration, so it only happens when a callback is set.
    """
    opts = opts or GmresOptions()
    b = np.asarray(b, dtype=np.complex128)
    n = b.shape[0]
    max_iter = n if opts.max_iter is None else opts.max_iter
    max_iter = min(max_iter, n)
    x = np.zeros(n, dtype=np.complex128)

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return GmresReport(x, 0, [0.0], True)

    prec = precond if precond is not None else (lambda v: v)
    r0 = np.asarray(prec(b), dtype=np.complex128)
    beta = np.linalg.norm(r0)
    if beta == 0.0 or not np.isfinite(beta):
        raise NumericalBreakdown("preconditioned right-hand side is zero or non-finite")
    true_residual = precond is not None and not opts.use_preconditioned_residual

    cap = min(max_iter, 64)
    basis = np.zeros((cap + 1, n), dtype=np.complex128)
    hess = np.zeros((cap + 1, cap), dtype=np.complex128)
    cs = np.zeros(max_iter)
    sn = np.zeros(max_iter, dtype=np.complex128)
    g = np.zeros(max_iter + 1, dtype=np.complex128)
    g[0] = beta
    basis[0] = r0 / beta
    history = [1.0]

    def current_solution(k):
        y = sla.solve_triangular(hess[:k, :k], g[:k], check_finite=False)
        return y @ basis[:k]

    converged = False
    stopped = False
    k = 0
    for j in range(max_iter):
        if j == cap:
            cap = min(2 * cap, max_iter)
            basis = np.concatenate([basis, np.zeros((cap + 1 - basis.shape[0], n), complex)])
            grown = np.zeros((cap + 1, cap), dtype=np.complex128)
            grown[:hess.shape[0], :hess.shape[1]] = hess
            hess = grown
        w = np.asarray(prec(apply_op(basis[j])), dtype=np.complex128)
        for i in range(j + 1):
            hij = np.vdot(basis[i], w)
            hess[i, j] = hij
            w = w - hij * basis[i]
        hnext = np.linalg.norm(w)
        if not np.isfinite(hnext):
            raise NumericalBreakdown(f"non-finite Arnoldi vector at iteration {j + 1}")
        hess[j + 1, j] = hnext
        happy = hnext <= 1e-14 * beta
        if not happy:
            basis[j + 1] = w / hnext

        for i in range(j):
            a, c = hess[i, j], hess[i + 1, j]
            hess[i, j] = cs[i] * a + sn[i] * c
            hess[i + 1, j] = -np.conj(sn[i]) * a + cs[i] * c
        a, c = hess[j, j], hess[j + 1, j]
        cj, sj, rj = _givens(a, c)
        cs[j], sn[j] = cj, sj
        hess[j, j] = rj
        hess[j + 1, j] = 0.0
        g[j + 1] = -np.conj(sj) * g[j]
        g[j] = cj * g[j]
        k = j + 1

        if true_residual:
            x = current_solution(k)
            rel = np.linalg.norm(b - apply_op(x)) / bnorm
        else:
            rel = abs(g[k]) / beta
        history.append(float(rel))

        if callback is not None:
            if not true_residual:
                x = current_solution(k)
            if callback(k, x):
                stopped = True
                break
        if rel <= opts.tol or happy:
            converged = True
            break

    x = current_solution(k)
    return GmresReport(x, k, history, converged, stopped)


def _givens(a, b):
    """Rotation with real cosine ``c`` and complex sine ``s`` zeroing ``b``.

    ``[[c, s], [-conj(s), c]] @ [a, b] = [r, 0]``.
    """
    if b == 0:
        return 1.0, 0.0j, a
    if a == 0:
        return 0.0, np.conj(b) / abs(b), abs(b)
    abs_a = abs(a)
    norm = np.hypot(abs_a, abs(b))
    c = abs_a / norm
    phase = a / abs_a
    s = phase * np.conj(b) / norm
    return c, s, phase * norm


# ---------------------------------------------------------------------------
# Hermitian eigensolver (cyclic Jacobi, round-robin ordering)
# ---------------------------------------------------------------------------


def _round_robin(n):
    """Pairings of ``0..m-1`` (``m`` even) so every pair meets once per sweep."""
    m = n + (n % 2)
    others = list(range(1, m))
    rounds = []
    for _ in range(m - 1):
        ring = [0] + others
        pairs = [(ring[i], ring[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p), max(p)) for p in pairs if max(p) < n]
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        others = others[-1:] + others[:-1]
    return rounds


def hermitian_eigh(a, tol: float = 1e-12, max_sweeps: int = 60):
    """Eigen-decomposition of a Hermitian matrix by cyclic complex Jacobi.

    Returns eigenvalues in descending order and the matching unitary matrix of
    eigenvectors (as columns).  Disjoint rotations of one round-robin round are
    applied together.
    """
    a = np.array(a, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("hermitian_eigh needs a square matrix")
    n = a.shape[0]
    anorm = np.linalg.norm(a)
    if n == 0:
        return np.zeros(0), np.zeros((0, 0), dtype=complex)
    if anorm > 0 and np.linalg.norm(a - a.conj().T) > 1e-10 * anorm:
        raise ValueError("matrix is not Hermitian")
    a = 0.5 * (a + a.conj().T)
    v = np.eye(n, dtype=np.complex128)
    if n == 1 or anorm == 0:
        return np.real(np.diagonal(a)).copy(), v

    rounds = _round_robin(n)
    target = tol * anorm
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diagonal(a)))
        if off <= target:
            break
        for p, q in rounds:
            apq = a[p, q]
            mag = np.abs(apq)
            active = mag > 1e-300
            safe = np.where(active, mag, 1.0)
            phase = np.where(active, apq / safe, 1.0)
            app = a[p, p].real
            aqq = a[q, q].real
            theta = (aqq - app) / (2.0 * safe)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta == 0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # W = diag(1, conj(phase)) @ [[c, s], [-s, c]] on the (p, q) plane
            wpp = c
            wpq = s
            wqp = -s * np.conj(phase)
            wqq = c * np.conj(phase)

            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = ap * wpp + aq * wqp
            a[:, q] = ap * wpq + aq * wqq
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = np.conj(wpp)[:, None] * rp + np.conj(wqp)[:, None] * rq
            a[q, :] = np.conj(wpq)[:, None] * rp + np.conj(wqq)[:, None] * rq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = vp * wpp + vq * wqp
            v[:, q] = vp * wpq + vq * wqq

    evals = np.real(np.diagonal(a))
    order = np.argsort(-evals, kind="stable")
    return evals[order], v[:, order]


# ---------------------------------------------------------------------------
# Randomized SVD and power iteration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SvdOptions:
    oversample: int = 10
    power_iters: int = 2


def _orth(y):
    q, _ = np.linalg.qr(y)
    return q


def _complex_gaussian(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def svd_truncated(apply_m: LinearMap, apply_m_adj: LinearMap, n_rows: int, n_cols: int,
                  rank: int, oversample: int = 10, power_iters: int = 2, seed: int = 0):
    """Leading ``rank`` singular triplets of a matrix known only through products.

    Parameters
    ----------
    apply_m, apply_m_adj : callable
        Products with the matrix and its conjugate transpose.  Both must
        accept 2-D blocks of column vectors.
    n_rows, n_cols : int
        Shape of the matrix.
    rank : int
        Number of triplets returned.
    oversample, power_iters : int
        Extra sketch columns and subspace iterations of the range finder.
    seed : int
        Seed of the Gaussian test matrix.

    Returns
    -------
    U : (n_rows, rank) ndarray
    S : (rank,) ndarray, non-negative and descending
    V : (n_cols, rank) ndarray
        ``M ~ U @ diag(S) @ V^H``.
    """
    if rank < 0:
        raise ValueError("rank must be non-negative")
    width = rank + oversample
    if width > min(n_rows, n_cols):
        raise ValueError(
            f"rank + oversample = {width} exceeds matrix dimensions {n_rows}x{n_cols}"
        )
    if rank == 0:
        return (np.zeros((n_rows, 0), dtype=complex), np.zeros(0),
                np.zeros((n_cols, 0), dtype=complex))
    rng = np.random.default_rng(seed)
    omega = _complex_gaussian(rng, (n_cols, width))
    q = _orth(apply_m(omega))
    for _ in range(power_iters):
        z = _orth(apply_m_adj(q))
        q = _orth(apply_m(z))

    bh = np.asarray(apply_m_adj(q))  # B^H, shape (n_cols, width), B = Q^H M
    gram = bh.conj().T @ bh          # B B^H
    gram = 0.5 * (gram + gram.conj().T)
    lam, w = hermitian_eigh(gram)
    lam, w = lam[:rank], w[:, :rank]
    s = np.sqrt(np.clip(lam, 0.0, None))
    u = q @ w
    vraw = bh @ w
    live = s > 0
    vraw[:, live] /= s[live]
    v, r = np.linalg.qr(vraw)
    # keep the phases of the computed vectors; qr may flip them
    d = np.diagonal(r)
    ph = np.where(np.abs(d) > 0, d / np.where(np.abs(d) > 0, np.abs(d), 1.0), 1.0)
    v = v * ph
    return u, s, v


def eigh_truncated(apply_m: LinearMap, n: int, rank: int, oversample: int = 10,
                   power_iters: int = 2, seed: int = 0):
    """Leading ``rank`` eigenpairs of a Hermitian positive semi-definite operator.

    Randomized range finder followed by Rayleigh-Ritz: the projected matrix
    ``Q^H M Q`` is diagonalized directly, so small eigenvalues keep absolute
    accuracy near ``eps * lambda_max`` (a Gram-matrix SVD would square it).
    ``oversample`` is trimmed so the sketch never exceeds ``n`` columns.
    """
    if rank < 0 or rank > n:
        raise ValueError(f"rank {rank} outside [0, {n}]")
    if rank == 0:
        return np.zeros(0), np.zeros((n, 0), dtype=complex)
    width = min(rank + oversample, n)
    rng = np.random.default_rng(seed)
    q = _orth(apply_m(_complex_gaussian(rng, (n, width))))
    for _ in range(power_iters):
        q = _orth(apply_m(q))
    t = q.conj().T @ apply_m(q)
    lam, w = hermitian_eigh(0.5 * (t + t.conj().T))
    return lam[:rank], q @ w[:, :rank]


def power_sigma_max(apply_m: LinearMap, apply_m_adj: LinearMap, n_cols: int,
                    iters: int = 30, seed: int = 0) -> float:
    """Largest singular value estimated by power iteration on ``M^H M``."""
    if iters < 1:
        raise ValueError("power iteration needs at least one step")
    rng = np.random.default_rng(seed)
    x = _complex_gaussian(rng, n_cols)
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(iters):
        mx = apply_m(x)
        sigma = np.linalg.norm(mx)
        if sigma == 0.0:
            return 0.0
        y = apply_m_adj(mx)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
    return float(np.linalg.norm(apply_m(x)))
