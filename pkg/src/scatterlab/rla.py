"""Recursive linearization: Gauss-Newton solves chained over increasing wavenumbers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from .forward import MeasurementSet
from .inverse import GaussNewtonConfig, GaussNewtonResult, gauss_newton
from .numkit import GmresOptions


def nlambda_schedule(k: float) -> int:
    """``ceil(40 k / 9 + 140 / 9)``, evaluated as ``ceil((40 k + 140) / 9)``."""
    if k <= 0:
        raise ValueError("k must be positive")
    # one division keeps exact cases such as k = 5.5 (360 / 9) exact
    return int(math.ceil((40.0 * k + 140.0) / 9.0))


def beta_schedule(k: float) -> float:
    return 10.0 ** (-0.9 * k - 3.7)


def standard_config(k: float, precond: str = "hrc", **overrides) -> GaussNewtonConfig:
    """Per-frequency settings of the nonlinear reconstruction experiment."""
    base = dict(
        eps_residual=1e-4 / k,
        eps_update=1e-3 / k,
        max_iters=50,
        beta=beta_schedule(k),
        gmres=GmresOptions(tol=1e-7, max_iter=1000, use_preconditioned_residual=True),
        precond=precond,
        n_lambda=nlambda_schedule(k) if precond != "none" else 0,
        n_subdomains=16,
        overlap=4,
    )
    base.update(overrides)
    return GaussNewtonConfig(**base)


@dataclass
class FrequencySchedule:
    wavenumbers: Sequence[float]
    config_for: Callable[[float], GaussNewtonConfig]

    def __post_init__(self):
        ks = list(self.wavenumbers)
        if not ks:
            raise ValueError("the schedule needs at least one wavenumber")
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("wavenumbers must be strictly ascending")
        self.wavenumbers = ks


def linear_schedule(k_first: float, k_last: float, step: float) -> List[float]:
    n = int(round((k_last - k_first) / step))
    return [k_first + step * i for i in range(n + 1)]


@dataclass
class FrequencyRecord:
    k: float
    q_in: np.ndarray
    result: GaussNewtonResult
    failed: bool = False


@dataclass
class RlaResult:
    records: List[FrequencyRecord] = field(default_factory=list)
    aborted: bool = False

    @property
    def q_final(self) -> np.ndarray:
        return self.records[-1].result.q

    @property
    def gmres_total(self) -> int:
        return sum(r.result.gmres_total for r in self.records)

    def q_per_k(self):
        return [(r.k, r.result.q) for r in self.records]


def _checkpoint_path(directory, k: float) -> Path:
    return Path(directory) / f"q_k{k:.4f}.json"


def save_checkpoint(directory, k: float, q: np.ndarray) -> Path:
    path = _checkpoint_path(directory, k)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([float(x) for x in q]))
    return path


def load_checkpoint(directory, k: float) -> np.ndarray:
    return np.asarray(json.loads(_checkpoint_path(directory, k).read_text()), dtype=float)


def rla_run(data_per_k: Sequence[MeasurementSet], grid, q0, schedule: FrequencySchedule,
            q_true=None, on_failure: str = "continue", checkpoint_dir=None,
            resume_from: Optional[float] = None, progress=None) -> RlaResult:
    """Warm-started Gauss-Newton over the schedule.

    A frequency whose inversion fails keeps the last good iterate as the
    starting point of the next one (``on_failure="continue"``) or ends the run
    (``"abort"``).  With ``resume_from`` the checkpoint written for the
    wavenumber before it seeds the run.
    """
    if on_failure not in ("continue", "abort"):
        raise ValueError("on_failure must be 'continue' or 'abort'")
    ks = schedule.wavenumbers
    if len(data_per_k) != len(ks):
        raise ValueError("need one data set per scheduled wavenumber")
    for d, k in zip(data_per_k, ks):
        if not math.isclose(d.k, k, rel_tol=0, abs_tol=1e-12):
            raise ValueError(f"data wavenumber {d.k} does not match schedule entry {k}")

    q = np.array(q0, dtype=float)
    start = 0
    if resume_from is not None:
        matches = [i for i, k in enumerate(ks) if math.isclose(k, resume_from, abs_tol=1e-12)]
        if not matches:
            raise ValueError(f"{resume_from} is not a scheduled wavenumber")
        start = matches[0]
        if start > 0:
            if checkpoint_dir is None:
                raise ValueError("resuming needs a checkpoint directory")
            q = load_checkpoint(checkpoint_dir, ks[start - 1])

    out = RlaResult()
    for data, k in zip(data_per_k[start:], ks[start:]):
        cfg = schedule.config_for(k)
        q_in = q.copy()
        res = gauss_newton(data, grid, q_in, cfg, q_true=q_true)
        failed = res.error is not None
        out.records.append(FrequencyRecord(k, q_in, res, failed))
        if progress is not None:
            progress(out.records[-1])
        if failed:
            if on_failure == "abort":
                out.aborted = True
                break
            # keep the last good iterate; the failed step left res.q untouched
        q = res.q
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, k, q)
    return out
