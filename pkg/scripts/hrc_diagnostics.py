"""How close the RC surrogate gets to A^{-1}, and what that does to the Hessian.

For one linearized problem (q4, k/(2 pi) = 5 by default) prints, per N_lambda:
the 2-norm relative error of Ã_RC^{-1} against A^{-1}, the 2-norm distance of
the approximate Hessian from H (both scaled by sigma_max^-2), and the GMRES
count to e_rel < 1e-3.  Dense 2-norms are used, so keep n_side <= 32.
"""

import argparse

import numpy as np
import scipy.linalg as sla

from scatterlab.experiments import hessian_case
from scatterlab.inverse import CholeskyPreconditioner, approximate_hessian, solve_to_accuracy
from scatterlab.scene import build_partition
from scatterlab.schwarz import build_dd, build_rc, rc_dense_inverse


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-side", type=int, default=32)
    ap.add_argument("--freq", type=float, default=5.0)
    ap.add_argument("--subdomains", type=int, default=16)
    ap.add_argument("--overlap", type=int, default=3)
    ap.add_argument("--n-lambdas", type=int, nargs="+", default=[0, 40, 80, 160])
    args = ap.parse_args()

    case = hessian_case(args.n_side, "q4", 2 * np.pi * args.freq, 8, 2000, 1e-6)
    H = case.H
    sys = H.frechet.sys
    a = sys.dense()
    a_inv = np.linalg.inv(a)
    print(f"N={sys.n}  sigma_max(J)={H.sigma:.4g}  cond_2(A)={np.linalg.cond(a):.4g}")
    plain = solve_to_accuracy(H, case.rhs, case.reference, max_iter=2000)[0]
    print(f"unpreconditioned: {plain} iterations")
    P = build_dd(sys, build_partition(args.n_side, "squares", args.subdomains, args.overlap), "RAS")
    for nl in args.n_lambdas:
        m = rc_dense_inverse(build_rc(sys, P, nl))
        inv_err = np.linalg.norm(m - a_inv, 2) / np.linalg.norm(a_inv, 2)
        ht = approximate_hessian(H, m)
        h_err = np.linalg.norm(ht - H.dense, 2)
        pre = CholeskyPreconditioner(sla.cho_factor(ht), nl)
        its = solve_to_accuracy(H, case.rhs, case.reference, precond=pre, max_iter=2000)[0]
        print(f"N_lambda={nl:4d}  inverse error {inv_err:.3e}  |H~ - H| {h_err:.3e}  HRC iterations {its}")


if __name__ == "__main__":
    main()
