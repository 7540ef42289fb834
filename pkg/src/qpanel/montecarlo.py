"""Seeded Monte Carlo harness for the grouped and panel designs.

Replication ``r`` of a run with seed ``s`` draws from its own Philox stream
keyed by ``SeedSequence(s, spawn_key=(r,))``, so a replication's data do not
depend on how replications are distributed over worker processes. Results
are assembled in replication order before aggregation, which makes reports
byte-identical for any worker count.
"""

from __future__ import annotations

import csv
import os
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._io import dumps
from .estimator import estimate
from .exceptions import ConfigError, QPanelError
from .instruments import InstrumentSpec
from .md import VCOV_TYPES, clp_fit
from .panel import GroupedPanel, QuantileGrid
from .qr import fit_first_stage

__all__ = [
    "DGP_KINDS",
    "ESTIMATORS",
    "RNG_NAME",
    "DgpSpec",
    "McReport",
    "replication_rng",
    "draw",
    "draw_grouped",
    "draw_panel",
    "truth",
    "run_mc",
    "hausman_power_study",
]

DGP_KINDS = ("grouped1", "grouped2", "grouped3", "panel")
ESTIMATORS = ("md", "clp", "pooled", "be", "fe", "re_gmm", "re_2sls", "re_oi", "fe_oi")
RNG_NAME = "numpy.random.Philox (SeedSequence(seed, spawn_key=(replication,)))"
_Z975 = float(stats.norm.ppf(0.975))


@dataclass(frozen=True)
class DgpSpec:
    """Data-generating process and sample size.

    ``lam`` is the correlation between the regressor's group component and
    the group effect (panel design only).
    """

    kind: str
    m: int
    n: int
    lam: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise ConfigError(f"unknown design {self.kind!r}; expected one of {', '.join(DGP_KINDS)}")
        if int(self.m) < 2 or int(self.n) < 1:
            raise ConfigError("need m >= 2 groups and n >= 1 observations per group")
        if not -1.0 < float(self.lam) < 1.0:
            raise ConfigError("lambda must lie strictly between -1 and 1")
        if self.kind != "panel" and self.lam != 0.0:
            raise ConfigError("lambda only applies to the panel design")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def has_instrument(self) -> bool:
        return self.kind == "grouped3"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "m": int(self.m), "n": int(self.n), "lambda": float(self.lam), "seed": int(self.seed)}


def replication_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(r),))))


def truth(kind: str, tau: float) -> dict:
    """True coefficients at ``tau`` keyed by column name."""
    if kind == "panel":
        q = float(stats.norm.ppf(tau))
        return {"x1": 1.0 + 0.1 * q, "const": q}
    r = float(np.sqrt(tau))
    return {"x1": r, "x2": r, "const": tau / 2.0}


def draw_grouped(spec: DgpSpec, rng: np.random.Generator | None = None) -> GroupedPanel:
    """One draw of the grouped design (regressors ``x1``, ``x2``; instrument ``z``)."""
    rng = replication_rng(spec.seed, 0) if rng is None else rng
    m, n = int(spec.m), int(spec.n)
    x1 = np.exp(0.25 * rng.standard_normal((m, n)))
    u = rng.uniform(size=(m, n))
    z = None
    if spec.kind == "grouped3":
        z = np.exp(0.25 * rng.standard_normal(m))
        nu = np.exp(0.25 * rng.standard_normal(m))
        eta = rng.uniform(size=m)
        x2 = z + eta + nu
    else:
        x2 = np.exp(0.25 * rng.standard_normal(m))
        eta = rng.uniform(size=m) if spec.kind == "grouped2" else None
    su = np.sqrt(u)
    y = u / 2.0 + x1 * su + x2[:, None] * su
    if eta is not None:
        y += u * eta[:, None] - u / 2.0
    groups = np.repeat(np.arange(m), n)
    return GroupedPanel.from_arrays(
        y.ravel(), x1.ravel(), np.repeat(x2, n), groups,
        x1_names=("x1",), x2_names=("x2",),
        Z_ext=None if z is None else np.repeat(z, n), z_names=None if z is None else ("z",),
    )


def draw_panel(spec: DgpSpec, rng: np.random.Generator | None = None) -> GroupedPanel:
    """One draw of the panel design with heteroskedastic errors."""
    if spec.kind != "panel":
        raise ConfigError("draw_panel needs the panel design")
    rng = replication_rng(spec.seed, 0) if rng is None else rng
    m, n, lam = int(spec.m), int(spec.n), float(spec.lam)
    e = rng.standard_normal((m, 2))
    h = e[:, 0]
    alpha = lam * e[:, 0] + np.sqrt(1.0 - lam**2) * e[:, 1]
    x1 = h[:, None] + 0.5 * rng.standard_normal((m, n))
    nu = rng.standard_normal((m, n))
    y = x1 + alpha[:, None] + (1.0 + 0.1 * x1) * nu
    return GroupedPanel.from_arrays(y.ravel(), x1.ravel(), None, np.repeat(np.arange(m), n), x1_names=("x1",))


def draw(spec: DgpSpec, rng: np.random.Generator | None = None) -> GroupedPanel:
    return draw_panel(spec, rng) if spec.kind == "panel" else draw_grouped(spec, rng)


def _instrument_spec(name: str, spec: DgpSpec):
    """Instrument recipe and weighting preset of a named estimator."""
    if name == "md":
        if spec.has_instrument:
            return InstrumentSpec("external", endogenous=("x2",), instruments=("z",)), "auto"
        return InstrumentSpec("external"), "auto"
    if name == "re_2sls":
        return InstrumentSpec("random_effects_gmm"), "two_stage_ls"
    return InstrumentSpec(name), "auto"


def _clp(fs, panel: GroupedPanel, spec: DgpSpec, T: int):
    inst = None
    if spec.has_instrument:
        inst = panel.X2.copy()
        inst[:, panel.x2_names.index("x2")] = panel.Z_ext[:, 0]
    coef, se = [], []
    for tau in fs.taus:
        c = clp_fit(fs, panel, tau, instruments=inst)
        coef.append(c.gamma)
        se.append(c.se)
    return np.array(coef), np.array(se), np.full(T, np.nan), panel.x2_names


def _replicate(spec: DgpSpec, estimators, taus, r: int, vcov: str = "cluster") -> dict:
    panel = draw(spec, replication_rng(spec.seed, r))
    fs = fit_first_stage(panel, QuantileGrid(taus))
    T = len(taus)
    out = {
        "certificate_failures": fs.certificate_failures(),
        "fits": int(fs.n_neg.size),
        "fallbacks": fs.solver_fallbacks,
        "est": {},
    }
    for name in estimators:
        try:
            if name == "clp":
                coef, se, rej, names = _clp(fs, panel, spec, T)
            else:
                ispec, weighting = _instrument_spec(name, spec)
                res = estimate(panel, ispec, taus, weighting=weighting, first_stage=fs, vcov=vcov)
                coef, se, names = res.coef, res.se, res.x_names
                rej = np.array([
                    float(e.j_test().reject_05) if e.flag == "efficient" else np.nan
                    for e in res.estimates
                ])
            if not (np.all(np.isfinite(coef)) and np.all(np.isfinite(se))):
                raise QPanelError("non-finite estimate")
            out["est"][name] = (coef, se, rej, tuple(names), None)
        except (QPanelError, np.linalg.LinAlgError) as exc:
            out["est"][name] = (None, None, None, None, type(exc).__name__)
    return out


def _run_chunk(args):
    spec, estimators, taus, vcov, start, stop = args
    return [_replicate(spec, estimators, taus, r, vcov) for r in range(start, stop)]


@dataclass
class McReport:
    """Aggregated Monte Carlo results.

    ``cells`` holds one record per (estimator, quantile, coefficient) with
    bias, sd (divisor ``reps - 1``), mse, relative_mse, coverage_95,
    ci_median_length and the number of successful replications;
    ``tests`` holds overidentification rejection rates per (estimator,
    quantile). ``draws`` keeps the per-replication estimates (not
    serialized).
    """

    dgp: DgpSpec
    taus: tuple
    reps: int
    estimators: tuple
    reference: str | None
    vcov: str
    cells: list
    tests: list
    failures: dict
    first_stage: dict
    draws: dict = field(default_factory=dict, repr=False)

    def cell(self, estimator: str, tau: float, name: str) -> dict:
        for c in self.cells:
            if c["estimator"] == estimator and c["tau"] == tau and c["coefficient"] == name:
                return c
        raise KeyError((estimator, tau, name))

    def rejection_rate(self, estimator: str, tau: float) -> float:
        for t in self.tests:
            if t["estimator"] == estimator and t["tau"] == tau:
                return t["rejection_rate"]
        raise KeyError((estimator, tau))

    def to_dict(self) -> dict:
        from . import __version__

        return {
            "tool": {"name": "qpanel", "version": __version__, "numpy": np.__version__},
            "rng": RNG_NAME,
            "seed": int(self.dgp.seed),
            "dgp": self.dgp.to_dict(),
            "taus": list(self.taus),
            "reps": self.reps,
            "estimators": list(self.estimators),
            "reference": self.reference,
            "vcov": self.vcov,
            "first_stage": self.first_stage,
            "failures": self.failures,
            "cells": self.cells,
            "tests": self.tests,
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def write_csv(self, path) -> None:
        cols = ["estimator", "tau", "coefficient", "truth", "bias", "sd", "mse", "relative_mse",
                "coverage_95", "ci_median_length", "rejection_rate", "n_ok"]
        rates = {(t["estimator"], t["tau"]): t["rejection_rate"] for t in self.tests}
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for c in self.cells:
                row = dict(c, rejection_rate=rates.get((c["estimator"], c["tau"])))
                w.writerow(["" if row.get(k) is None else row[k] for k in cols])


def _resolve_workers(workers) -> int:
    if workers is None:
        env = os.environ.get("QPANEL_WORKERS")
        if env is None:
            return 1
        try:
            workers = int(env)
        except ValueError:
            raise ConfigError(f"QPANEL_WORKERS must be an integer, got {env!r}") from None
    workers = int(workers)
    if workers < 1:
        raise ConfigError("the number of workers must be positive")
    return workers


def _stat(x: np.ndarray, fn):
    return float(fn(x)) if x.size else float("nan")


def run_mc(
    dgp: DgpSpec,
    estimators=("md", "clp"),
    taus=(0.1, 0.5, 0.9),
    reps: int = 1000,
    workers: int | None = None,
    reference: str | None = "auto",
    progress: bool = False,
    vcov: str = "cluster",
) -> McReport:
    """Run ``reps`` replications of ``dgp`` for each named estimator.

    Parameters
    ----------
    estimators : sequence of str
        Names from :data:`ESTIMATORS`.
    reference : str or None
        Estimator whose MSE is the denominator of ``relative_mse``; ``"auto"``
        picks ``clp`` when it is part of the run.
    workers : int, optional
        Number of processes; defaults to ``QPANEL_WORKERS`` or 1.
    vcov : {"cluster", "jackknife"}
        Covariance estimator of the second-stage fits (the intercept
        regression always uses heteroskedasticity-robust errors).
    """
    if vcov not in VCOV_TYPES:
        raise ConfigError(f"unknown covariance type {vcov!r}")
    taus = QuantileGrid(taus).taus
    estimators = tuple(estimators)
    unknown = [e for e in estimators if e not in ESTIMATORS]
    if unknown or not estimators:
        raise ConfigError(f"unknown estimator(s) {unknown}; expected names from {', '.join(ESTIMATORS)}")
    if len(set(estimators)) != len(estimators):
        raise ConfigError("duplicate estimator names")
    if int(reps) < 1:
        raise ConfigError("reps must be at least 1")
    reps = int(reps)
    if reference == "auto":
        reference = "clp" if "clp" in estimators else None
    if reference is not None and reference not in estimators:
        raise ConfigError(f"reference estimator {reference!r} is not part of the run")
    workers = _resolve_workers(workers)

    chunk = max(1, min(50, -(-reps // workers)))
    jobs = [(dgp, estimators, taus, vcov, s, min(s + chunk, reps)) for s in range(0, reps, chunk)]
    results = []
    if workers == 1:
        for job in jobs:
            results.extend(_run_chunk(job))
            if progress:
                print(f"[qpanel] {len(results)}/{reps} replications", file=sys.stderr)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_run_chunk, jobs):
                results.extend(part)
                if progress:
                    print(f"[qpanel] {len(results)}/{reps} replications", file=sys.stderr)
    return _aggregate(dgp, estimators, taus, reps, reference, vcov, results)


def _aggregate(dgp, estimators, taus, reps, reference, vcov, results) -> McReport:
    T = len(taus)
    truths = [truth(dgp.kind, t) for t in taus]
    draws, failures, cells, tests = {}, {}, [], []
    for name in estimators:
        ok = [r["est"][name] for r in results if r["est"][name][4] is None]
        errs = Counter(r["est"][name][4] for r in results if r["est"][name][4] is not None)
        failures[name] = {"n_failed": reps - len(ok), "errors": dict(sorted(errs.items()))}
        if not ok:
            draws[name] = None
            continue
        names = ok[0][3]
        coef = np.stack([o[0] for o in ok])  # (R, T, K)
        se = np.stack([o[1] for o in ok])
        rej = np.stack([o[2] for o in ok])  # (R, T)
        draws[name] = {"names": names, "coef": coef, "se": se, "reject": rej}
        for t, tau in enumerate(taus):
            for k, cname in enumerate(names):
                est = coef[:, t, k]
                tv = truths[t].get(cname)
                err = est - tv if tv is not None else np.full_like(est, np.nan)
                half = _Z975 * se[:, t, k]
                cells.append({
                    "estimator": name,
                    "tau": tau,
                    "coefficient": cname,
                    "truth": tv,
                    "n_ok": int(est.size),
                    "mean": _stat(est, np.mean),
                    "bias": _stat(err, np.mean) if tv is not None else None,
                    "sd": _stat(est, lambda a: a.std(ddof=1)) if est.size > 1 else 0.0,
                    "mse": _stat(err, lambda a: np.mean(a**2)) if tv is not None else None,
                    "relative_mse": None,
                    "coverage_95": _stat(np.abs(err) <= half, np.mean) if tv is not None else None,
                    "ci_median_length": _stat(2.0 * half, np.median),
                })
            r = rej[:, t]
            r = r[np.isfinite(r)]
            if r.size:
                tests.append({"estimator": name, "tau": tau, "kind": "J", "n_ok": int(r.size),
                              "rejection_rate": float(r.mean())})
    if reference is not None:
        ref = {(c["tau"], c["coefficient"]): c["mse"] for c in cells if c["estimator"] == reference}
        for c in cells:
            denom = ref.get((c["tau"], c["coefficient"]))
            if c["estimator"] != reference and c["mse"] is not None and denom:
                c["relative_mse"] = c["mse"] / denom
    first = {
        "fits": int(sum(r["fits"] for r in results)),
        "certificate_failures": int(sum(r["certificate_failures"] for r in results)),
        "solver_fallbacks": int(sum(r["fallbacks"] for r in results)),
    }
    return McReport(dgp=dgp, taus=taus, reps=reps, estimators=estimators, reference=reference, vcov=vcov,
                    cells=cells, tests=tests, failures=failures, first_stage=first, draws=draws)


def hausman_power_study(
    lambdas,
    cells,
    taus=(0.5,),
    reps: int = 1000,
    seed: int = 0,
    workers: int | None = None,
) -> list:
    """Rejection rates of the overidentification test of the random-effects fit.

    Returns one record per (lambda, (m, n), tau).
    """
    rows = []
    for lam in lambdas:
        for m, n in cells:
            rep = run_mc(DgpSpec("panel", m, n, lam, seed), ("re_gmm",), taus, reps, workers)
            for tau in rep.taus:
                rows.append({
                    "lambda": float(lam), "m": int(m), "n": int(n), "tau": tau,
                    "rejection_rate": rep.rejection_rate("re_gmm", tau),
                    "n_failed": rep.failures["re_gmm"]["n_failed"],
                    "certificate_failures": rep.first_stage["certificate_failures"],
                })
    return rows
