"""Experiment configurations and runners behind the ``scatterlab`` CLI.

Each runner returns a :class:`ResultTable`; rows are emitted in a fixed
scenario order and contain no timing, so CSV output is reproducible byte for
byte.  Wall-clock times go to the JSON metadata instead.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from .forward import (assemble_G, assemble_Gr, build_system, dense_cap, forward_solve,
                      relative_error, synth_data)
from .inverse import (FrechetOperator, apply_J, apply_J_adjoint, build_hessian, build_hrc_precond,
                      build_lr_precond, estimate_sigma_max, hessian_rhs, solve_to_accuracy,
                      forward_all)
from .numkit import GmresOptions, SvdOptions, lu_factor, lu_solve, svd_truncated
from .rla import FrequencySchedule, linear_schedule, rla_run, standard_config
from .scene import ConfigurationError, build_grid, build_partition, perturb_charges, plane_wave, receiver_ring
from .schwarz import build_dd, build_rc, difference_spectrum

EXPERIMENTS = ("F1", "F2", "F3", "F4", "F5", "I1", "I2", "I3", "I4", "I5",
               "forward", "rla", "spectra")


@dataclass
class ExperimentConfig:
    experiment: str
    n_side: int = 32
    n_sides: List[int] = field(default_factory=list)
    charge_fn: str = "q4"
    charge_fns: List[str] = field(default_factory=list)
    frequencies: List[float] = field(default_factory=lambda: [5.0])  # k / (2 pi)
    layouts: List[str] = field(default_factory=lambda: ["squares"])
    n_subdomains: List[int] = field(default_factory=lambda: [4, 16])
    overlaps: List[int] = field(default_factory=lambda: [1, 6])
    variants: List[str] = field(default_factory=lambda: ["AS", "RAS", "AHS", "SRAS"])
    n_lambdas: List[int] = field(default_factory=lambda: [20, 40, 60, 80])
    tol_plain: float = 1e-11
    tol_precond: float = 1e-13
    max_iter: Optional[int] = None
    n_directions: int = 8
    n_receivers: int = 2000
    receiver_radius: float = 0.8
    beta: float = 1e-6
    thresholds: List[float] = field(default_factory=lambda: [1e-3])
    svd_oversample: int = 10
    svd_power_iters: int = 2
    spectrum: str = "difference"  # difference | J | H | H_lr | H_hrc
    n_values: int = 40
    k_first: float = 1.0
    k_last: float = 5.0
    k_step: float = 0.25
    arms: List[str] = field(default_factory=lambda: ["none", "hrc"])
    rla_subdomains: int = 16
    rla_overlap: int = 4
    on_failure: str = "continue"
    seed: int = 0

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.experiment!r}")
        if self.n_side < 2:
            raise ConfigurationError("n_side must be at least 2")
        if self.tol_plain <= 0 or self.tol_precond <= 0:
            raise ConfigurationError("tolerances must be positive")
        if any(t <= 0 for t in self.thresholds):
            raise ConfigurationError("error thresholds must be positive")
        if self.on_failure not in ("continue", "abort"):
            raise ConfigurationError("on_failure must be 'continue' or 'abort'")

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("configuration must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")
        if "experiment" not in raw:
            raise ConfigurationError("configuration needs an 'experiment' key")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def svd(self) -> SvdOptions:
        return SvdOptions(self.svd_oversample, self.svd_power_iters)

    def plain_opts(self) -> GmresOptions:
        return GmresOptions(self.tol_plain, self.max_iter, use_preconditioned_residual=False)

    def precond_opts(self) -> GmresOptions:
        return GmresOptions(self.tol_precond, self.max_iter, use_preconditioned_residual=True)


# ---------------------------------------------------------------------------
# Result tables
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if value is None:
        return ""
    return str(value)


@dataclass
class ResultTable:
    columns: List[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    timings_ms: List[float] = field(default_factory=list)
    skipped: List[Dict[str, Any]] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)

    def add(self, row: Dict[str, Any], started: float):
        missing = set(row) - set(self.columns)
        if missing:
            raise KeyError(f"row has columns outside the schema: {sorted(missing)}")
        self.rows.append(row)
        self.timings_ms.append(1e3 * (time.perf_counter() - started))

    def skip(self, row: Dict[str, Any], reason: str):
        row = dict(row)
        row["note"] = f"skipped: {reason}"
        self.rows.append(row)
        self.timings_ms.append(0.0)
        self.skipped.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r.get(c)) for c in self.columns])
        return buf.getvalue()

    def column(self, name):
        return [r.get(name) for r in self.rows]


FORWARD_COLUMNS = ["experiment", "n_side", "charge", "freq", "k", "layout", "n_subdomains",
                   "overlap", "method", "n_lambda", "iterations", "e_rel", "converged", "note"]
INVERSE_COLUMNS = ["experiment", "n_side", "charge", "freq", "k", "n_subdomains", "overlap",
                   "method", "n_lambda", "threshold", "iterations", "e_rel", "converged", "note"]
RLA_COLUMNS = ["arm", "index", "k", "gn_iters", "gmres_step", "gmres_total", "objective",
               "e_rel", "stop_reason", "failed"]


# ---------------------------------------------------------------------------
# Forward experiments
# ---------------------------------------------------------------------------


def _forward_case(n_side, charge_fn, freq):
    k = 2 * np.pi * freq
    grid = build_grid(n_side, charge_fn)
    sys = build_system(grid, k)
    u_inc = plane_wave(k, np.array([1.0, 0.0]), grid.positions)
    ref = None
    if grid.n <= dense_cap():
        ref, _ = forward_solve(sys, u_inc, "lu")
    return k, grid, sys, u_inc, ref


def _err(x, ref):
    return float("nan") if ref is None else relative_error(x, ref)


def run_forward_table(cfg: ExperimentConfig) -> ResultTable:
    """F1-F5 share one loop: plain GMRES, then each (layout, N_s, delta) cell."""
    table = ResultTable(FORWARD_COLUMNS)
    exp = cfg.experiment
    sides = cfg.n_sides or [cfg.n_side]
    charges = cfg.charge_fns or [cfg.charge_fn]
    for n_side in sides:
        overlaps = cfg.overlaps if not cfg.n_sides else [scaled_overlap(n_side)]
        for charge in charges:
            for freq in cfg.frequencies:
                t0 = time.perf_counter()
                k, grid, sys, u_inc, ref = _forward_case(n_side, charge, freq)
                base = dict(experiment=exp, n_side=n_side, charge=charge, freq=freq, k=k)
                x, rep = forward_solve(sys, u_inc, "gmres", opts=cfg.plain_opts())
                table.add(dict(base, method="GMRES", iterations=rep.iterations, e_rel=_err(x, ref),
                               converged=rep.converged), t0)
                for layout in cfg.layouts:
                    for ns in cfg.n_subdomains:
                        for delta in overlaps:
                            cell = dict(base, layout=layout, n_subdomains=ns, overlap=delta)
                            try:
                                part = build_partition(n_side, layout, ns, delta)
                            except ConfigurationError as exc:
                                table.skip(dict(cell, method="-"), str(exc))
                                continue
                            if exp == "F5":
                                _rc_ladder(cfg, table, sys, u_inc, ref, part, cell)
                                continue
                            for variant in cfg.variants:
                                t0 = time.perf_counter()
                                P = build_dd(sys, part, variant)
                                x, rep = forward_solve(sys, u_inc, "gmres", opts=cfg.precond_opts(), precond=P)
                                table.add(dict(cell, method=variant, iterations=rep.iterations,
                                               e_rel=_err(x, ref), converged=rep.converged), t0)
    return table


def _rc_ladder(cfg, table, sys, u_inc, ref, part, cell):
    t0 = time.perf_counter()
    P = build_dd(sys, part, "RAS")
    x, rep = forward_solve(sys, u_inc, "gmres", opts=cfg.precond_opts(), precond=P)
    table.add(dict(cell, method="RAS", iterations=rep.iterations, e_rel=_err(x, ref),
                   converged=rep.converged), t0)
    for nl in cfg.n_lambdas:
        t0 = time.perf_counter()
        if sys.n > dense_cap():
            table.skip(dict(cell, method="RC", n_lambda=nl), "dense cap exceeded")
            continue
        rc = build_rc(sys, P, nl, cfg.svd(), cfg.seed)
        x, rep = forward_solve(sys, u_inc, "gmres", opts=cfg.precond_opts(), precond=rc)
        table.add(dict(cell, method="RC", n_lambda=nl, iterations=rep.iterations,
                       e_rel=_err(x, ref), converged=rep.converged), t0)


def scaled_overlap(n_side: int) -> int:
    """Overlap for the scalability ladder: 3 points at n_side = 64, proportional otherwise."""
    return max(1, int(round(3 * n_side / 64)))


def run_single_forward(cfg: ExperimentConfig) -> ResultTable:
    table = ResultTable(FORWARD_COLUMNS)
    for freq in cfg.frequencies:
        t0 = time.perf_counter()
        k, grid, sys, u_inc, ref = _forward_case(cfg.n_side, cfg.charge_fn, freq)
        x, rep = forward_solve(sys, u_inc, "gmres", opts=cfg.plain_opts())
        e = 0.0 if ref is not None and np.linalg.norm(ref) == 0 and np.linalg.norm(x) == 0 else _err(x, ref)
        table.add(dict(experiment="forward", n_side=cfg.n_side, charge=cfg.charge_fn, freq=freq, k=k,
                       method="GMRES", iterations=rep.iterations, e_rel=e, converged=rep.converged,
                       note=f"|u_scat|={np.linalg.norm(x):.17g}"), t0)
    return table


# ---------------------------------------------------------------------------
# Linearized inverse experiments
# ---------------------------------------------------------------------------


@dataclass
class HessianCase:
    k: float
    grid: Any
    H: Any
    rhs: np.ndarray
    reference: np.ndarray


def hessian_case(n_side, charge_fn, k, n_directions, n_receivers, beta, seed=0,
                 radius=0.8) -> HessianCase:
    """One Gauss-Newton step from a perturbed start: ``H``, right-hand side and LU solution."""
    grid = build_grid(n_side, charge_fn)
    rec = receiver_ring(n_receivers, radius)
    G = assemble_G(grid, k)
    data = synth_data(grid, k, n_directions, rec, sys=build_system(grid, k, G=G))
    q0 = perturb_charges(grid.charges, k, grid.n, seed=seed)
    sys = build_system(grid.with_charges(q0), k, G=G)
    gr = assemble_Gr(rec, grid, k)
    u_inc, u_scat, pred = forward_all(sys, data, gr)
    op = FrechetOperator(sys, gr, u_inc + u_scat)
    op.kernel()
    H = build_hessian(op, beta, estimate_sigma_max(op, seed=seed))
    rhs = hessian_rhs(H, (data.data - pred).reshape(-1))
    ref = lu_solve(lu_factor(H.dense), rhs)
    return HessianCase(k, grid, H, rhs, ref)


def run_inverse_table(cfg: ExperimentConfig) -> ResultTable:
    table = ResultTable(INVERSE_COLUMNS)
    exp = cfg.experiment
    sides = cfg.n_sides or [cfg.n_side]
    max_iter = cfg.max_iter or 2000
    for n_side in sides:
        overlaps = cfg.overlaps if not cfg.n_sides else [scaled_overlap(n_side)]
        for freq in cfg.frequencies:
            k = 2 * np.pi * freq
            base = dict(experiment=exp, n_side=n_side, charge=cfg.charge_fn, freq=freq, k=k)
            if n_side * n_side > dense_cap():
                table.skip(dict(base, method="-"), "dense cap exceeded")
                continue
            t0 = time.perf_counter()
            case = hessian_case(n_side, cfg.charge_fn, k, cfg.n_directions, cfg.n_receivers,
                                cfg.beta, cfg.seed, cfg.receiver_radius)
            for th in cfg.thresholds:
                it, e, rep = solve_to_accuracy(case.H, case.rhs, case.reference, th, max_iter=max_iter)
                table.add(dict(base, method="GMRES", threshold=th, iterations=it, e_rel=e,
                               converged=e < th), t0)
                t0 = time.perf_counter()
            if exp == "I4":
                for nl in cfg.n_lambdas:
                    t0 = time.perf_counter()
                    if nl > case.grid.n:
                        table.skip(dict(base, method="LR", n_lambda=nl), "N_lambda exceeds N")
                        continue
                    P = build_lr_precond(case.H, nl, cfg.svd(), cfg.seed)
                    for th in cfg.thresholds:
                        it, e, rep = solve_to_accuracy(case.H, case.rhs, case.reference, th, P, max_iter)
                        table.add(dict(base, method="LR", n_lambda=nl, threshold=th, iterations=it,
                                       e_rel=e, converged=e < th), t0)
            for ns in cfg.n_subdomains:
                for delta in overlaps:
                    cell = dict(base, n_subdomains=ns, overlap=delta)
                    try:
                        part = build_partition(n_side, "squares", ns, delta)
                    except ConfigurationError as exc:
                        table.skip(dict(cell, method="HRC"), str(exc))
                        continue
                    for nl in cfg.n_lambdas:
                        t0 = time.perf_counter()
                        try:
                            P = build_hrc_precond(case.H, part, nl, cfg.svd(), cfg.seed)
                        except (np.linalg.LinAlgError, ValueError) as exc:
                            table.skip(dict(cell, method="HRC", n_lambda=nl), str(exc))
                            continue
                        for th in cfg.thresholds:
                            it, e, rep = solve_to_accuracy(case.H, case.rhs, case.reference, th, P, max_iter)
                            table.add(dict(cell, method="HRC", n_lambda=nl, threshold=th,
                                           iterations=it, e_rel=e, converged=e < th), t0)
    return table


# ---------------------------------------------------------------------------
# Nonlinear reconstruction
# ---------------------------------------------------------------------------


def rla_data(cfg: ExperimentConfig):
    grid = build_grid(cfg.n_side, cfg.charge_fn)
    rec = receiver_ring(cfg.n_receivers, cfg.receiver_radius)
    ks = linear_schedule(cfg.k_first, cfg.k_last, cfg.k_step)
    data = [synth_data(grid, k, cfg.n_directions, rec) for k in ks]
    return grid, ks, data


def run_rla(cfg: ExperimentConfig, checkpoint_dir=None, resume_from=None, progress=None) -> ResultTable:
    table = ResultTable(RLA_COLUMNS)
    grid, ks, data = rla_data(cfg)
    q_true = grid.charges
    q0 = np.zeros(grid.n)
    finals = {}
    for arm in cfg.arms:
        sched = FrequencySchedule(ks, lambda k, arm=arm: standard_config(
            k, arm, n_subdomains=cfg.rla_subdomains, overlap=cfg.rla_overlap,
            svd=cfg.svd(), seed=cfg.seed))
        t0 = time.perf_counter()
        ckpt = None if checkpoint_dir is None else Path(checkpoint_dir) / arm
        res = rla_run(data, grid, q0, sched, q_true=q_true, on_failure=cfg.on_failure,
                      checkpoint_dir=ckpt, resume_from=resume_from, progress=progress)
        total = 0
        for i, rec in enumerate(res.records):
            r = rec.result
            total += r.gmres_total
            table.add(dict(arm=arm, index=i, k=rec.k, gn_iters=r.iterations, gmres_step=r.gmres_total,
                           gmres_total=total, objective=r.trace[-1].objective if r.trace else float("nan"),
                           e_rel=float(np.linalg.norm(r.q - q_true) / np.linalg.norm(q_true)),
                           stop_reason=r.stop_reason, failed=rec.failed), t0)
            t0 = time.perf_counter()
        finals[arm] = res
    table.extra["results"] = finals
    return table


# ---------------------------------------------------------------------------
# Spectra
# ---------------------------------------------------------------------------


def spectra(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Leading singular values of one operator of the linearized problem."""
    freq = cfg.frequencies[0]
    k = 2 * np.pi * freq
    ns, delta = cfg.n_subdomains[0], cfg.overlaps[0]
    nl = cfg.n_lambdas[0]
    out: Dict[str, Any] = dict(target=cfg.spectrum, freq=freq, k=k, n_side=cfg.n_side,
                               n_subdomains=ns, overlap=delta)
    if cfg.n_side ** 2 > dense_cap():
        raise MemoryError("spectra need the dense path")
    if cfg.spectrum == "difference":
        sys = build_system(build_grid(cfg.n_side, cfg.charge_fn), k)
        P = build_dd(sys, build_partition(cfg.n_side, "squares", ns, delta), "RAS")
        out["values"] = difference_spectrum(sys, P, cfg.n_values, cfg.svd(), cfg.seed).tolist()
        return out
    case = hessian_case(cfg.n_side, cfg.charge_fn, k, cfg.n_directions, cfg.n_receivers,
                        cfg.beta, cfg.seed, cfg.receiver_radius)
    H = case.H
    n = H.n
    if cfg.spectrum == "J":
        op = H.frechet
        _, s, _ = svd_truncated(lambda v: _cols(lambda c: apply_J(op, c), v),
                                lambda w: _cols(lambda c: apply_J_adjoint(op, c), w),
                                op.n_directions * op.n_receivers, n, cfg.n_values,
                                min(cfg.svd_oversample, n - cfg.n_values), cfg.svd_power_iters, cfg.seed)
        out["values"] = s.tolist()
        return out
    if cfg.spectrum == "H":
        m = H.dense
    elif cfg.spectrum == "H_lr":
        P = build_lr_precond(H, nl, cfg.svd(), cfg.seed)
        m = P(H.dense)
    elif cfg.spectrum == "H_hrc":
        P = build_hrc_precond(H, build_partition(cfg.n_side, "squares", ns, delta), nl, cfg.svd(), cfg.seed)
        m = P(H.dense)
    else:
        raise ConfigurationError(f"unknown spectrum target {cfg.spectrum!r}")
    out["values"] = singular_values(m, cfg.n_values, cfg.svd(), cfg.seed).tolist()
    return out


def _cols(fn, x):
    x = np.asarray(x)
    if x.ndim == 1:
        return fn(x)
    return np.column_stack([fn(c) for c in x.T])


def singular_values(m: np.ndarray, count: int, svd_opts: SvdOptions, seed: int = 0) -> np.ndarray:
    n = m.shape[1]
    count = min(count, n)
    _, s, _ = svd_truncated(lambda x: m @ x, lambda y: m.conj().T @ y, m.shape[0], n, count,
                            min(svd_opts.oversample, n - count), svd_opts.power_iters, seed)
    return s


# ---------------------------------------------------------------------------
# Dispatch and output
# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, **kwargs) -> ResultTable:
    exp = cfg.experiment
    if exp in ("F1", "F2", "F3", "F4", "F5"):
        return run_forward_table(cfg)
    if exp in ("I1", "I2", "I3", "I4"):
        return run_inverse_table(cfg)
    if exp in ("I5", "rla"):
        return run_rla(cfg, **kwargs)
    if exp == "forward":
        return run_single_forward(cfg)
    raise ConfigurationError(f"experiment {exp!r} does not produce a table")


def version_string() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                              text=True, cwd=Path(__file__).parent, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_outputs(table: ResultTable, cfg: ExperimentConfig, out_dir, name: str, threads=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.csv"
    with open(csv_path, "w", newline="") as fh:
        fh.write(table.to_csv())
    meta = dict(version=version_string(), seed=cfg.seed, threads=threads, config=cfg.to_dict(),
                rows=len(table.rows), wall_time_ms=[round(t, 3) for t in table.timings_ms],
                skipped=[r.get("note") for r in table.skipped], dense_cap=dense_cap())
    (out / f"{name}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return csv_path
