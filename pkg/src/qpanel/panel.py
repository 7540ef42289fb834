"""Grouped data container, CSV ingestion and group-wise transformations."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .exceptions import ConfigError, DataError, EmptyPanelError

__all__ = [
    "GroupedPanel",
    "QuantileGrid",
    "ColumnRoles",
    "load_config",
    "load_csv",
    "filter_min_dof",
    "within_demean",
    "group_means",
    "DEFAULT_MIN_DOF",
]

DEFAULT_MIN_DOF = 25
INTERCEPT_NAME = "const"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _as_matrix(a, n: int, name: str) -> np.ndarray:
    if a is None:
        return np.empty((n, 0))
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] != n:
        raise DataError(f"{name} must have {n} rows, got shape {a.shape}")
    return a


def _group_sums(a: np.ndarray, codes: np.ndarray, m: int) -> np.ndarray:
    out = np.zeros((m,) + a.shape[1:])
    np.add.at(out, codes, a)
    return out


@dataclass(frozen=True, eq=False)
class GroupedPanel:
    """Immutable grouped dataset.

    Rows are stored contiguously by group; ``codes`` holds the dense group
    index ``0..m-1`` of every row and ``labels`` the original group label of
    each index (first-appearance order).
    """

    y: np.ndarray
    X1: np.ndarray
    X2: np.ndarray
    codes: np.ndarray
    labels: tuple
    x1_names: tuple = ()
    x2_names: tuple = ()
    Z_ext: np.ndarray | None = None
    z_names: tuple = ()
    clusters: np.ndarray | None = None
    starts: np.ndarray = field(init=False, repr=False)
    counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        counts = np.bincount(self.codes, minlength=len(self.labels))
        starts = np.concatenate([[0], np.cumsum(counts)])
        object.__setattr__(self, "counts", _readonly(counts))
        object.__setattr__(self, "starts", _readonly(starts))

    @classmethod
    def from_arrays(
        cls,
        y,
        X1=None,
        X2=None,
        groups=None,
        *,
        x1_names: Sequence[str] | None = None,
        x2_names: Sequence[str] | None = None,
        Z_ext=None,
        z_names: Sequence[str] | None = None,
        clusters=None,
        add_intercept: bool = True,
    ) -> "GroupedPanel":
        """Validate raw arrays and build a panel.

        Rows are reordered so that groups are contiguous, groups appear in
        first-appearance order of their labels and the original order is kept
        inside each group. When ``add_intercept`` is true a column of ones
        named ``const`` is appended to ``X2``.
        """
        y = np.asarray(y, dtype=float).ravel()
        n = y.shape[0]
        if groups is None:
            raise DataError("a group label per row is required")
        groups = np.asarray(groups)
        if groups.shape != (n,):
            raise DataError(f"groups must have length {n}, got shape {groups.shape}")
        X1 = _as_matrix(X1, n, "X1")
        X2 = _as_matrix(X2, n, "X2")
        Z_ext = None if Z_ext is None else _as_matrix(Z_ext, n, "Z_ext")
        x1_names = tuple(x1_names) if x1_names is not None else tuple(f"x1_{k}" for k in range(X1.shape[1]))
        x2_names = tuple(x2_names) if x2_names is not None else tuple(f"x2_{k}" for k in range(X2.shape[1]))
        if Z_ext is not None:
            z_names = tuple(z_names) if z_names is not None else tuple(f"z_{k}" for k in range(Z_ext.shape[1]))
        else:
            z_names = ()
        if len(x1_names) != X1.shape[1] or len(x2_names) != X2.shape[1]:
            raise ConfigError("column names do not match the number of columns")
        if add_intercept:
            X2 = np.column_stack([X2, np.ones(n)])
            x2_names = x2_names + (INTERCEPT_NAME,)

        for name, arr in (("y", y), ("X1", X1), ("X2", X2), ("Z_ext", Z_ext)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains missing or non-finite values")

        labels, first_idx, inverse = np.unique(groups, return_index=True, return_inverse=True)
        # relabel so that dense codes follow first appearance
        order_of_first = np.argsort(first_idx, kind="stable")
        rank = np.empty_like(order_of_first)
        rank[order_of_first] = np.arange(order_of_first.size)
        codes = rank[inverse.ravel()]
        labels = tuple(str(lab) for lab in labels[order_of_first])
        perm = np.argsort(codes, kind="stable")

        cl = None
        if clusters is not None:
            cl_raw = np.asarray(clusters)
            if cl_raw.shape != (n,):
                raise DataError("clusters must have one entry per row")
            _, cl = np.unique(cl_raw, return_inverse=True)
            cl = cl.ravel()[perm]

        panel = cls(
            y=_readonly(y[perm]),
            X1=_readonly(X1[perm]),
            X2=_readonly(X2[perm]),
            codes=_readonly(codes[perm]),
            labels=labels,
            x1_names=x1_names,
            x2_names=x2_names,
            Z_ext=None if Z_ext is None else _readonly(Z_ext[perm]),
            z_names=z_names,
            clusters=None if cl is None else _readonly(cl),
        )
        panel.validate()
        return panel

    # basic shape information
    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_groups(self) -> int:
        return len(self.labels)

    @property
    def K1(self) -> int:
        return self.X1.shape[1]

    @property
    def K2(self) -> int:
        return self.X2.shape[1]

    def group_slice(self, j: int) -> slice:
        return slice(int(self.starts[j]), int(self.starts[j + 1]))

    def cluster_codes(self) -> np.ndarray:
        """Cluster index per row; defaults to the group index."""
        return self.codes if self.clusters is None else self.clusters

    def group_rows(self, a: np.ndarray) -> np.ndarray:
        """First row of every group of a group-level array."""
        return np.asarray(a)[self.starts[:-1]]

    def validate(self) -> None:
        if self.n_groups < 2:
            raise DataError(f"at least two groups are required, got {self.n_groups}")
        if np.any(self.counts < 1):
            raise DataError("every group needs at least one observation")
        if self.K1:
            sd = self.X1.std(axis=0)
            scale = np.maximum(np.abs(self.X1).max(axis=0), 1.0)
            const = np.nonzero(sd <= 1e-12 * scale)[0]
            if const.size:
                raise DataError(
                    f"individual-level column {self.x1_names[const[0]]!r} is constant; "
                    "the intercept belongs with the group-level regressors"
                )
        bad = _varying_within(self.X2, self.codes, self.n_groups)
        if bad is not None:
            k, j = bad
            raise DataError(
                f"group-level column {self.x2_names[k]!r} varies within group {self.labels[j]!r}"
            )
        if self.clusters is not None:
            # clusters must nest groups
            first = self.clusters[self.starts[:-1]]
            if np.any(self.clusters != first[self.codes]):
                raise DataError("clusters must be at the group level or coarser")

    def subset_groups(self, keep: np.ndarray) -> "GroupedPanel":
        """Panel restricted to the groups whose index is in ``keep``."""
        keep = np.asarray(keep, dtype=int)
        rows = np.concatenate([np.arange(self.starts[j], self.starts[j + 1]) for j in keep])
        remap = np.full(self.n_groups, -1)
        remap[keep] = np.arange(keep.size)
        cl = None
        if self.clusters is not None:
            _, cl = np.unique(self.clusters[rows], return_inverse=True)
            cl = _readonly(cl.ravel())
        return GroupedPanel(
            y=_readonly(self.y[rows]),
            X1=_readonly(self.X1[rows]),
            X2=_readonly(self.X2[rows]),
            codes=_readonly(remap[self.codes[rows]]),
            labels=tuple(self.labels[j] for j in keep),
            x1_names=self.x1_names,
            x2_names=self.x2_names,
            Z_ext=None if self.Z_ext is None else _readonly(self.Z_ext[rows]),
            z_names=self.z_names,
            clusters=cl,
        )

    def with_outcome(self, y) -> "GroupedPanel":
        """Copy of the panel with a different outcome vector (same row order)."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise DataError("replacement outcome has the wrong length")
        return GroupedPanel(
            y=_readonly(y.copy()), X1=self.X1, X2=self.X2, codes=self.codes, labels=self.labels,
            x1_names=self.x1_names, x2_names=self.x2_names, Z_ext=self.Z_ext,
            z_names=self.z_names, clusters=self.clusters,
        )


def _varying_within(A: np.ndarray, codes: np.ndarray, m: int):
    if A.shape[1] == 0:
        return None
    counts = np.bincount(codes, minlength=m)
    mean = _group_sums(A, codes, m) / counts[:, None]
    dev = np.abs(A - mean[codes])
    scale = np.maximum(np.abs(A).max(axis=0), 1.0)
    bad = dev > 1e-10 * scale
    if not bad.any():
        return None
    rows, cols = np.nonzero(bad)
    return int(cols[0]), int(codes[rows[0]])


class QuantileGrid(tuple):
    """Strictly increasing tuple of quantile indices inside (0, 1)."""

    def __new__(cls, taus):
        if isinstance(taus, (int, float)):
            taus = [taus]
        taus = tuple(float(t) for t in taus)
        if not taus:
            raise ConfigError("the quantile grid is empty")
        for t in taus:
            if not (0.0 < t < 1.0) or math.isnan(t):
                raise ConfigError(f"quantile index {t} is outside (0, 1)")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ConfigError("quantile indices must be strictly increasing without duplicates")
        return super().__new__(cls, taus)

    @property
    def taus(self) -> tuple:
        return tuple(self)


def within_demean(panel: GroupedPanel, A: np.ndarray | None = None) -> np.ndarray:
    """Subtract group means from ``A`` (default ``panel.X1``)."""
    A = panel.X1 if A is None else np.asarray(A, dtype=float)
    return A - group_means(panel, A)


def group_means(panel: GroupedPanel, A: np.ndarray | None = None) -> np.ndarray:
    """Group means of ``A`` (default ``panel.X1``) repeated on every row."""
    A = panel.X1 if A is None else np.asarray(A, dtype=float)
    sums = _group_sums(A, panel.codes, panel.n_groups)
    means = sums / panel.counts.reshape((-1,) + (1,) * (A.ndim - 1))
    return means[panel.codes]


def effective_k1(panel: GroupedPanel) -> np.ndarray:
    """Rank of the demeaned individual-level regressors inside each group."""
    out = np.zeros(panel.n_groups, dtype=int)
    if panel.K1 == 0:
        return out
    dm = within_demean(panel)
    for j in range(panel.n_groups):
        block = dm[panel.group_slice(j)]
        if block.shape[0] > 1:
            tol = 1e-10 * max(1.0, np.abs(panel.X1[panel.group_slice(j)]).max()) * max(block.shape)
            out[j] = np.linalg.matrix_rank(block, tol=tol)
    return out


def filter_min_dof(panel: GroupedPanel, min_dof: int = DEFAULT_MIN_DOF):
    """Drop groups with fewer than ``min_dof`` first-stage degrees of freedom.

    The degrees of freedom of group ``j`` are ``n_j - (K1_eff_j + 1)`` where
    ``K1_eff_j`` is the within-group rank of the individual-level regressors.

    Returns
    -------
    panel : GroupedPanel
        The filtered panel (the input itself when nothing is dropped).
    dropped : list of str
        Labels of the removed groups.
    """
    if min_dof < 0:
        raise ConfigError("min_dof must be nonnegative")
    dof = panel.counts - (effective_k1(panel) + 1)
    keep = np.nonzero(dof >= min_dof)[0]
    dropped = [panel.labels[j] for j in np.nonzero(dof < min_dof)[0]]
    if keep.size == panel.n_groups:
        return panel, []
    if keep.size == 0:
        raise EmptyPanelError(f"all {panel.n_groups} groups have fewer than {min_dof} degrees of freedom")
    if keep.size < 2:
        raise EmptyPanelError("fewer than two groups survive the degrees-of-freedom filter")
    return panel.subset_groups(keep), dropped


@dataclass(frozen=True)
class ColumnRoles:
    """Column-role mapping of a CSV file."""

    outcome: str
    group: str
    x1: tuple = ()
    x2: tuple = ()
    instruments: tuple = ()
    cluster: str | None = None
    add_intercept: bool = True
    min_dof: int = DEFAULT_MIN_DOF

    @classmethod
    def from_mapping(cls, cfg: Mapping[str, Any]) -> "ColumnRoles":
        try:
            outcome, group = cfg["outcome"], cfg["group"]
        except KeyError as exc:
            raise ConfigError(f"configuration is missing the {exc.args[0]!r} key") from None
        min_dof = cfg.get("min_dof", DEFAULT_MIN_DOF)
        if not isinstance(min_dof, int) or min_dof < 0:
            raise ConfigError("min_dof must be a nonnegative integer")
        return cls(
            outcome=outcome,
            group=group,
            x1=tuple(cfg.get("x1", ())),
            x2=tuple(cfg.get("x2", ())),
            instruments=tuple(cfg.get("instruments", ()) or ()),
            cluster=cfg.get("cluster"),
            add_intercept=bool(cfg.get("add_intercept", True)),
            min_dof=min_dof,
        )


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"configuration is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("configuration must be a JSON object")
    return cfg


def load_csv(path, config) -> GroupedPanel:
    """Read a CSV file into a validated :class:`GroupedPanel`.

    ``config`` is a :class:`ColumnRoles` or a mapping with the keys
    ``outcome``, ``group``, ``x1``, ``x2``, ``instruments``, ``cluster`` and
    ``add_intercept``. Rows with a missing value in any used column are
    rejected with a :class:`DataError`.
    """
    roles = config if isinstance(config, ColumnRoles) else ColumnRoles.from_mapping(config)
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        index = {name: k for k, name in enumerate(header)}
        numeric = [roles.outcome, *roles.x1, *roles.x2, *roles.instruments]
        needed = [roles.group, *numeric] + ([roles.cluster] if roles.cluster else [])
        missing = [c for c in needed if c not in index]
        if missing:
            raise ConfigError(f"columns not found in {path.name}: {', '.join(missing)}")
        rows = list(reader)

    rows = [r for r in rows if any(cell.strip() for cell in r)]
    values = np.empty((len(rows), len(numeric)))
    groups, clusters = [], []
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"row {i} has {len(row)} fields, expected {len(header)}")
        g = row[index[roles.group]].strip()
        if not g:
            raise DataError(f"missing group label in row {i}")
        groups.append(g)
        if roles.cluster:
            clusters.append(row[index[roles.cluster]].strip())
        for k, col in enumerate(numeric):
            cell = row[index[col]].strip()
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"non-numeric value {cell!r} in row {i}, column {col!r}") from None
            if not math.isfinite(v):
                raise DataError(f"missing or non-finite value in row {i}, column {col!r}")
            values[i - 2, k] = v
    if not rows:
        raise DataError(f"{path} has no data rows")

    k1, k2 = len(roles.x1), len(roles.x2)
    return GroupedPanel.from_arrays(
        values[:, 0],
        values[:, 1:1 + k1],
        values[:, 1 + k1:1 + k1 + k2],
        np.array(groups, dtype=object),
        x1_names=roles.x1,
        x2_names=roles.x2,
        Z_ext=values[:, 1 + k1 + k2:] if roles.instruments else None,
        z_names=roles.instruments,
        clusters=np.array(clusters, dtype=object) if roles.cluster else None,
        add_intercept=roles.add_intercept,
    )
