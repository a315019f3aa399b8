"""Desk-scale nonlinear reconstruction (q_b on 32 x 32, k = 1..5).

Prints one line per frequency and arm, then the GMRES totals and the final
reconstruction error.  The per-frequency charges are checkpointed so a run
can be resumed with ``--resume-from K``.
"""

import argparse
import time

from scatterlab.experiments import ExperimentConfig, run_rla


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--arms", nargs="+", default=["none", "hrc"], choices=["none", "lr", "hrc"])
    ap.add_argument("--k-last", type=float, default=5.0)
    ap.add_argument("--checkpoints", default=None, help="directory for per-frequency charges")
    ap.add_argument("--resume-from", type=float, default=None)
    ap.add_argument("--csv", default=None, help="write the result table here")
    args = ap.parse_args()

    cfg = ExperimentConfig(experiment="I5", n_side=32, charge_fn="qb", n_directions=8, n_receivers=2000,
                           k_first=1.0, k_last=args.k_last, k_step=0.25, arms=args.arms)
    t0 = time.perf_counter()

    def progress(rec):
        r = rec.result
        err = r.trace[-1].e_rel if r.trace else float("nan")
        print(f"k={rec.k:5.2f}  gn={r.iterations:2d}  gmres={r.gmres_total:4d}  stop={r.stop_reason:<8s}"
              f"  e_rel={err:.3e}  t={time.perf_counter() - t0:6.0f}s {r.error or ''}", flush=True)

    table = run_rla(cfg, checkpoint_dir=args.checkpoints, resume_from=args.resume_from, progress=progress)
    results = table.extra["results"]
    for arm, res in results.items():
        final = [r for r in table.rows if r["arm"] == arm][-1]
        print(f"{arm:>5s}: GMRES total {res.gmres_total}, final e_rel {final['e_rel']:.4f}")
    if "hrc" in results and "none" in results:
        print(f"ratio hrc/none = {results['hrc'].gmres_total / results['none'].gmres_total:.3f}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(table.to_csv())


if __name__ == "__main__":
    main()
