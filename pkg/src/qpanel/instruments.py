"""Second-stage design and instrument construction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .exceptions import ConfigError, IdentificationError
from .panel import GroupedPanel, group_means, within_demean

__all__ = [
    "InstrumentSpec",
    "KINDS",
    "build_design",
    "build_instruments",
    "build_problem",
    "classify_columns",
    "check_identification",
]

KINDS = (
    "pooled",
    "between",
    "fixed_effects",
    "random_effects_gmm",
    "hausman_taylor",
    "external",
    "optimal_re",
    "optimal_fe",
)

_ALIASES = {
    "fe": "fixed_effects",
    "be": "between",
    "re": "random_effects_gmm",
    "re_gmm": "random_effects_gmm",
    "ht": "hausman_taylor",
    "re_oi": "optimal_re",
    "fe_oi": "optimal_fe",
    "iv": "external",
    "within": "external",
}


@dataclass(frozen=True)
class InstrumentSpec:
    """Declarative recipe for the second-stage instruments.

    Parameters
    ----------
    kind : str
        One of :data:`KINDS` (a few short aliases such as ``"fe"`` or
        ``"re_gmm"`` are accepted).
    x1_exog, x2_exog : sequence of str, optional
        Hausman-Taylor only: names of the exogenous individual-level and
        group-level regressors. The remaining columns are endogenous.
    instruments : sequence of str
        External only: names of external instrument columns.
    endogenous : sequence of str
        External only: regressors that do not instrument themselves.
    x1_instrument : {"within", "level"}
        External only: whether exogenous individual-level regressors enter
        the instrument set demeaned or in levels.
    estimate_x2 : bool
        Fixed effects only: requesting group-level coefficients is an error.
    """

    kind: str = "external"
    x1_exog: tuple = ()
    x2_exog: tuple = ()
    instruments: tuple = ()
    endogenous: tuple = ()
    x1_instrument: str = "within"
    estimate_x2: bool = False

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown instrument kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        object.__setattr__(self, "kind", kind)
        for name in ("x1_exog", "x2_exog", "instruments", "endogenous"):
            object.__setattr__(self, name, tuple(getattr(self, name) or ()))
        if self.x1_instrument not in ("within", "level"):
            raise ConfigError("x1_instrument must be 'within' or 'level'")
        if kind in ("fixed_effects", "optimal_fe") and self.estimate_x2:
            raise ConfigError(
                "the fixed effects estimator only identifies coefficients on individual-level regressors"
            )

    @classmethod
    def from_mapping(cls, cfg: Mapping[str, Any] | str) -> "InstrumentSpec":
        if isinstance(cfg, str):
            return cls(kind=cfg)
        known = {"kind", "x1_exog", "x2_exog", "instruments", "endogenous", "x1_instrument", "estimate_x2"}
        extra = set(cfg) - known - {"weighting"}
        if extra:
            raise ConfigError(f"unknown estimator keys: {', '.join(sorted(extra))}")
        return cls(**{k: v for k, v in cfg.items() if k in known})

    @property
    def within_only(self) -> bool:
        """True when only coefficients on individual-level regressors are estimated."""
        return self.kind in ("fixed_effects", "optimal_fe")

    @property
    def tau_dependent(self) -> bool:
        return self.kind in ("optimal_re", "optimal_fe")


def build_design(panel: GroupedPanel):
    """Second-stage regressors ``[X1 | X2]`` and their column names."""
    X = np.hstack([panel.X1, panel.X2])
    return X, panel.x1_names + panel.x2_names


def _index(names: Sequence[str], wanted: Sequence[str], what: str) -> list:
    pos = {n: k for k, n in enumerate(names)}
    missing = [w for w in wanted if w not in pos]
    if missing:
        raise ConfigError(f"unknown {what} column(s): {', '.join(missing)}")
    return [pos[w] for w in wanted]


def build_instruments(panel: GroupedPanel, spec: InstrumentSpec):
    """Instrument matrix for ``spec`` and its column names.

    The optimal-instrument kinds depend on the first stage and are built by
    :mod:`qpanel.optimal_iv`; here they return the regressors themselves as
    placeholders for the exactly identified layout.
    """
    x1n = panel.x1_names
    dot = lambda names: tuple(f"within({n})" for n in names)
    bar = lambda names: tuple(f"mean({n})" for n in names)
    kind = spec.kind
    if kind == "pooled":
        return np.hstack([panel.X1, panel.X2]), x1n + panel.x2_names
    if kind == "between":
        return np.hstack([group_means(panel), panel.X2]), bar(x1n) + panel.x2_names
    if kind == "fixed_effects":
        if panel.K1 == 0:
            raise ConfigError("fixed effects need individual-level regressors")
        return within_demean(panel), dot(x1n)
    if kind == "random_effects_gmm":
        Z = np.hstack([within_demean(panel), group_means(panel), panel.X2])
        return Z, dot(x1n) + bar(x1n) + panel.x2_names
    if kind == "hausman_taylor":
        ex1 = _index(x1n, spec.x1_exog, "x1")
        ex2 = _index(panel.x2_names, spec.x2_exog, "x2")
        n_en2 = panel.K2 - len(ex2)
        if len(ex1) < n_en2:
            raise ConfigError(
                f"Hausman-Taylor order condition fails: {len(ex1)} exogenous individual-level "
                f"regressors for {n_en2} endogenous group-level regressors"
            )
        en1 = [k for k in range(panel.K1) if k not in ex1]
        dm = within_demean(panel)
        mean = group_means(panel)
        Z = np.hstack([dm[:, ex1], dm[:, en1], mean[:, ex1], panel.X2[:, ex2]])
        names = (
            dot([x1n[k] for k in ex1]) + dot([x1n[k] for k in en1])
            + bar([x1n[k] for k in ex1]) + tuple(panel.x2_names[k] for k in ex2)
        )
        return Z, names
    if kind == "external":
        en1 = set(_index(x1n, [e for e in spec.endogenous if e in x1n], "x1"))
        en2 = set(_index(panel.x2_names, [e for e in spec.endogenous if e in panel.x2_names], "x2"))
        unknown = set(spec.endogenous) - set(x1n) - set(panel.x2_names)
        if unknown:
            raise ConfigError(f"unknown endogenous column(s): {', '.join(sorted(unknown))}")
        ex1 = [k for k in range(panel.K1) if k not in en1]
        ex2 = [k for k in range(panel.K2) if k not in en2]
        own1 = within_demean(panel)[:, ex1] if spec.x1_instrument == "within" else panel.X1[:, ex1]
        names1 = (dot if spec.x1_instrument == "within" else tuple)([x1n[k] for k in ex1])
        blocks = [own1, panel.X2[:, ex2]]
        names = tuple(names1) + tuple(panel.x2_names[k] for k in ex2)
        if spec.instruments:
            if panel.Z_ext is None:
                raise ConfigError("external instruments requested but the panel has none")
            iz = _index(panel.z_names, spec.instruments, "instrument")
            blocks.append(panel.Z_ext[:, iz])
            names = names + tuple(spec.instruments)
        return np.hstack(blocks), names
    if kind == "optimal_re":
        return np.hstack([panel.X1, panel.X2]), x1n + panel.x2_names
    if kind == "optimal_fe":
        return panel.X1.copy(), x1n
    raise ConfigError(f"unsupported instrument kind {kind!r}")  # pragma: no cover


def build_problem(panel: GroupedPanel, spec: InstrumentSpec):
    """Regressors, instruments and names for a second-stage fit.

    Returns ``(X, Z, x_names, z_names)``. Estimators that only use within
    variation drop the group-level columns from ``X``.
    """
    Z, z_names = build_instruments(panel, spec)
    if spec.within_only:
        X, x_names = panel.X1.copy(), panel.x1_names
    else:
        X, x_names = build_design(panel)
    check_identification(X, Z)
    return X, Z, x_names, z_names


def check_identification(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Raise unless ``Z'X / N`` has full column rank; return it otherwise."""
    N, K = X.shape
    L = Z.shape[1]
    if L < K:
        raise IdentificationError(f"{L} instruments for {K} regressors: order condition fails")
    S = Z.T @ X / N
    sv = np.linalg.svd(S, compute_uv=False)
    if sv.size == 0 or sv[-1] <= 1e-10 * sv[0]:
        smin = float(sv[-1]) if sv.size else 0.0
        raise IdentificationError(
            f"instrument cross-moment matrix is rank deficient (smallest singular value {smin:.3g})",
            singular_value=smin,
        )
    return S


def classify_columns(Z: np.ndarray, panel: GroupedPanel):
    """Split instrument columns into zero-group-mean ones and the rest.

    Returns two index arrays: columns whose mean is zero in every group
    (their moments converge at the fast rate) and all other columns.
    """
    Z = np.asarray(Z, dtype=float)
    means = group_means(panel, Z)[panel.starts[:-1]]
    scale = np.maximum(np.abs(Z).max(axis=0), 1e-300)
    fast = np.all(np.abs(means) <= 1e-8 * scale, axis=0)
    return np.nonzero(fast)[0], np.nonzero(~fast)[0]
