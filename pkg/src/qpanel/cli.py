"""Command-line interface: ``estimate``, ``simulate`` and ``overid``.

Results go to stdout (or ``--out``); progress and errors go to stderr.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical or
identification error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from ._io import dumps
from .estimator import estimate
from .exceptions import ConfigError, QPanelError
from .instruments import InstrumentSpec
from .md import VCOV_TYPES, WEIGHTINGS
from .montecarlo import DGP_KINDS, ESTIMATORS, RNG_NAME, DgpSpec, draw, replication_rng, run_mc
from .panel import DEFAULT_MIN_DOF, ColumnRoles, QuantileGrid, filter_min_dof, load_config, load_csv

__all__ = ["main", "build_parser", "run_config"]

CONFIG_KEYS = {
    "outcome", "group", "x1", "x2", "instruments", "add_intercept", "min_dof", "cluster",
    "estimator", "taus", "weighting", "dof_correction", "confidence_level", "powell_bandwidth",
    "sigma_alpha_override", "data", "dgp", "seed", "vcov",
}


def _floats(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpanel", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qpanel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (("estimate", "estimate a model from a JSON config"),
                           ("overid", "overidentification (Hausman-type) test")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="JSON configuration file")
        p.add_argument("--data", help="CSV file (overrides the config's 'data')")
        p.add_argument("--out", help="write the JSON document here instead of stdout")

    p = sub.add_parser("simulate", help="Monte Carlo replications")
    p.add_argument("--dgp", required=True, choices=DGP_KINDS)
    p.add_argument("--m", type=int, required=True, help="number of groups")
    p.add_argument("--n", type=int, required=True, help="observations per group")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0,
                   help="correlation between regressor and group effect (panel design)")
    p.add_argument("--taus", type=_floats, default=[0.1, 0.5, 0.9])
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--estimators", type=_names, default=None,
                   help=f"comma-separated subset of {','.join(ESTIMATORS)}")
    p.add_argument("--reference", default="auto", help="estimator used as the relative-MSE denominator")
    p.add_argument("--vcov", choices=VCOV_TYPES, default="cluster")
    p.add_argument("--workers", type=int, default=None, help="processes (default: $QPANEL_WORKERS or 1)")
    p.add_argument("--out", help="JSON report path (default: stdout)")
    p.add_argument("--csv", help="also write a flat CSV table")
    p.add_argument("--quiet", action="store_true", help="no progress messages")
    return parser


def _load_panel(cfg: dict, data_override: str | None, base: Path):
    data = data_override or cfg.get("data")
    dgp = cfg.get("dgp")
    if (data is None) == (dgp is None):
        raise ConfigError("exactly one of 'data' and 'dgp' must be given")
    if dgp is not None:
        if not isinstance(dgp, dict):
            raise ConfigError("'dgp' must be an object with kind, m, n and optionally lambda")
        try:
            spec = DgpSpec(dgp["kind"], int(dgp["m"]), int(dgp["n"]), float(dgp.get("lambda", 0.0)),
                           int(cfg.get("seed", 0)))
        except KeyError as exc:
            raise ConfigError(f"'dgp' is missing the {exc.args[0]!r} key") from None
        panel = draw(spec, replication_rng(spec.seed, 0))
        min_dof = cfg.get("min_dof", DEFAULT_MIN_DOF)
        if not isinstance(min_dof, int) or min_dof < 0:
            raise ConfigError("min_dof must be a nonnegative integer")
        return panel, min_dof
    path = Path(data)
    if not path.is_absolute() and data_override is None:
        path = base / path
    roles = ColumnRoles.from_mapping(cfg)
    return load_csv(path, roles), roles.min_dof


def run_config(cfg: dict, data: str | None = None, base: Path = Path(".")) -> tuple:
    """Run the estimation pipeline described by ``cfg``.

    Returns ``(results, panel, dropped_groups)``.
    """
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
    level = cfg.get("confidence_level", 0.95)
    if not isinstance(level, (int, float)) or not 0.0 < level < 1.0:
        raise ConfigError("confidence_level must lie in (0, 1)")
    est_cfg = cfg.get("estimator", "pooled")
    spec = InstrumentSpec.from_mapping(est_cfg)
    weighting = cfg.get("weighting", "auto")
    if isinstance(est_cfg, dict) and "weighting" in est_cfg:
        weighting = est_cfg["weighting"]
    if weighting not in WEIGHTINGS:
        raise ConfigError(f"unknown weighting {weighting!r}")
    taus = QuantileGrid(cfg.get("taus", [0.5])).taus
    panel, min_dof = _load_panel(cfg, data, base)
    panel, dropped = filter_min_dof(panel, min_dof)
    results = estimate(
        panel, spec, taus,
        weighting=weighting,
        dof_correction=bool(cfg.get("dof_correction", False)),
        powell_bandwidth=cfg.get("powell_bandwidth"),
        sigma_alpha_override=cfg.get("sigma_alpha_override"),
        vcov=cfg.get("vcov", "cluster"),
    )
    return results, panel, dropped


def _document(cfg: dict, body: dict) -> dict:
    return {
        "tool": {"name": "qpanel", "version": __version__},
        "rng": RNG_NAME,
        "seed": cfg.get("seed"),
        "config": cfg,
        **body,
    }


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    results, panel, dropped = run_config(cfg, args.data, Path(args.config).parent)
    level = cfg.get("confidence_level", 0.95)
    body = {"dropped_groups": dropped, "results": results.to_dict(level)}
    _write(dumps(_document(cfg, body)), args.out)
    return 0


def cmd_overid(args) -> int:
    cfg = load_config(args.config)
    spec = InstrumentSpec.from_mapping(cfg.get("estimator", "pooled"))
    if spec.kind in ("optimal_re", "optimal_fe"):
        raise ConfigError("optimal-instrument estimators are exactly identified; no overidentification test")
    results, panel, dropped = run_config(cfg, args.data, Path(args.config).parent)
    tests = []
    for e in results.estimates:
        if e.n_instruments <= e.n_params:
            raise ConfigError(
                f"the {spec.kind} estimator is exactly identified ({e.n_instruments} instruments for "
                f"{e.n_params} coefficients); the overidentification test needs more instruments"
            )
        tests.append({"tau": e.tau, **e.j_test().to_dict()})
    body = {"estimator": spec.kind, "dropped_groups": dropped, "tests": tests}
    _write(dumps(_document(cfg, body)), args.out)
    return 0


def cmd_simulate(args) -> int:
    spec = DgpSpec(args.dgp, args.m, args.n, args.lam, args.seed)
    estimators = args.estimators
    if estimators is None:
        estimators = ["md", "clp"] if args.dgp != "panel" else ["pooled", "be", "fe", "re_gmm", "re_oi"]
    reference = None if args.reference in ("none", "") else args.reference
    report = run_mc(spec, estimators, args.taus, args.reps, workers=args.workers,
                    reference=reference, progress=not args.quiet, vcov=args.vcov)
    _write(report.to_json(), args.out)
    if args.csv:
        report.write_csv(args.csv)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {"estimate": cmd_estimate, "simulate": cmd_simulate, "overid": cmd_overid}[args.command]
    try:
        return handler(args)
    except QPanelError as exc:
        err = {"error": {"type": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}}
        sys.stderr.write(json.dumps(err) + "\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": {"type": "OSError", "message": str(exc), "exit_code": 3}}) + "\n")
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
