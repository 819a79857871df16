"""Longitudinal panel data model, validation, and CSV ingestion/serialization.

The central type is :class:`Cohort`: an immutable rectangular panel of
subjects observed on a discrete time grid ``0..tau``.  Each subject carries

* per-time real covariate columns (``K1``, ``K2``, ``Y``, plus any extras),
  each with an observation flag per cell,
* per-time binary design columns: the visit indicator ``dN``, the add-on
  indicator ``A``, and the still-in-study indicator ``xi``,
* two subject-level fields: the baseline add-on assignment ``A0`` and the
  final outcome ``Y_final`` (available only for subjects still in study at
  ``tau``).

Cohorts ingest from and serialize to a long-format CSV with the fixed header
``id,time,dN,A,xi,K1,K2,Y,A0,Y_final`` (extra covariate columns may follow).
Missing cells are empty strings; person-time after a subject's censoring
month is dropped entirely.

Covariate references throughout the package use a small term language:

* ``"K1@0"`` — column ``K1`` at absolute time 0;
* ``"Y@t"`` / ``"Y@t-1"`` — column ``Y`` at the current stage time / one
  step earlier (resolved when a stage is specified);
* ``"A0"``, ``"Y_final"`` — subject-level fields;
* products join factors with ``*``, e.g. ``"A0*K1@0"`` or ``"dN@1*Y@1"``.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

#: Exact CSV header for the core columns, in order.
CORE_COLUMNS = ("id", "time", "dN", "A", "xi", "K1", "K2", "Y", "A0", "Y_final")

#: Per-time real covariate columns that may have missing cells.
STANDARD_MODIFIER_COLUMNS = ("K1", "K2", "Y")

#: Cell fill provenance codes (see ``Cohort.filled``).
FILL_NONE = 0
FILL_LOCF = 1
FILL_IMPUTED = 2


class PanelError(ValueError):
    """A cohort file or in-memory panel violates the data contract."""


class PositivityError(PanelError):
    """A strategy stratum falls below the configured positivity floor."""


@dataclass(frozen=True)
class StrategyCode:
    """One three-way action: no visit (0,0), visit (1,0), or visit+add-on (1,1)."""

    visit: int
    addon: int

    def __post_init__(self) -> None:
        if self.visit not in (0, 1) or self.addon not in (0, 1):
            raise PanelError(f"strategy indicators must be 0/1, got {(self.visit, self.addon)}")
        if self.addon == 1 and self.visit == 0:
            raise PanelError("illegal strategy (0,1): no add-on without a visit")

    @property
    def category(self) -> int:
        """0 for (0,0), 1 for (1,0), 2 for (1,1)."""
        return self.visit + self.visit * self.addon

    @classmethod
    def from_category(cls, category: int) -> "StrategyCode":
        try:
            return ALL_STRATEGIES[category]
        except (IndexError, TypeError):
            raise PanelError(f"strategy category must be 0, 1, or 2, got {category!r}") from None


#: The three legal strategies, indexed by category.
ALL_STRATEGIES = (StrategyCode(0, 0), StrategyCode(1, 0), StrategyCode(1, 1))


@dataclass(frozen=True)
class ColumnRoleMap:
    """Names the covariate terms playing each modeling role.

    Fields hold term strings (see the module docstring for the term
    language).  ``confounders`` and ``visit_covariates`` together form the
    default covariate set for the strategy-assignment (propensity) models;
    ``visit_modifiers`` / ``addon_modifiers`` are the effect-modifier sets of
    the two decision components (they may overlap); ``treatment_free`` maps a
    stage time to the predictor terms of that stage's treatment-free model.
    """

    confounders: tuple[str, ...] = ("K1@t-1", "K2@t-1")
    visit_covariates: tuple[str, ...] = ("A@t-1", "Y@t-1")
    visit_modifiers: tuple[str, ...] = ("K1@t", "Y@t")
    addon_modifiers: tuple[str, ...] = ("K1@t", "Y@t")
    treatment_free: Mapping[int, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "confounders", tuple(self.confounders))
        object.__setattr__(self, "visit_covariates", tuple(self.visit_covariates))
        object.__setattr__(self, "visit_modifiers", tuple(self.visit_modifiers))
        object.__setattr__(self, "addon_modifiers", tuple(self.addon_modifiers))
        object.__setattr__(
            self, "treatment_free", {int(k): tuple(v) for k, v in dict(self.treatment_free).items()}
        )

    @property
    def propensity_terms(self) -> tuple[str, ...]:
        return self.confounders + self.visit_covariates

    def all_terms(self) -> tuple[str, ...]:
        terms = list(self.propensity_terms + self.visit_modifiers + self.addon_modifiers)
        for stage_terms in self.treatment_free.values():
            terms.extend(stage_terms)
        return tuple(terms)


_TERM_FACTOR = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)(?:@(t(?:-\d+)?|\d+))?$")


def parse_term(term: str) -> tuple[tuple[str, object], ...]:
    """Split a term into (column, time-spec) factors.

    The time-spec is ``None`` for subject-level fields, an ``int`` for
    absolute times, or a non-positive ``int`` offset wrapped in a one-tuple
    for stage-relative references (``"@t"`` -> ``(0,)``, ``"@t-1"`` -> ``(-1,)``).
    """
    factors = []
    for raw in term.split("*"):
        raw = raw.strip()
        m = _TERM_FACTOR.match(raw)
        if m is None:
            raise PanelError(f"malformed covariate term {term!r} (factor {raw!r})")
        name, spec = m.group(1), m.group(2)
        if spec is None:
            parsed: object = None
        elif spec == "t":
            parsed = (0,)
        elif spec.startswith("t-"):
            parsed = (-int(spec[2:]),)
        else:
            parsed = int(spec)
        factors.append((name, parsed))
    if not factors:
        raise PanelError(f"empty covariate term {term!r}")
    return tuple(factors)


def resolve_term_name(term: str, t: int | None) -> str:
    """Rewrite stage-relative references in ``term`` to absolute times."""
    parts = []
    for name, spec in parse_term(term):
        if spec is None:
            parts.append(name)
        elif isinstance(spec, tuple):
            if t is None:
                raise PanelError(f"term {term!r} is stage-relative but no stage was given")
            parts.append(f"{name}@{t + spec[0]}")
        else:
            parts.append(f"{name}@{spec}")
    return "*".join(parts)


class Cohort:
    """Immutable panel of ``n`` subjects over times ``0..tau``.

    Construction validates the full data contract; all arrays are copied and
    frozen.  Derived cohorts (after missing-data completion, censoring, etc.)
    are built with :meth:`with_updates`.
    """

    def __init__(
        self,
        ids: np.ndarray,
        dn: np.ndarray,
        a: np.ndarray,
        xi: np.ndarray,
        columns: Mapping[str, np.ndarray],
        observed: Mapping[str, np.ndarray] | None = None,
        a0: np.ndarray | None = None,
        y_final: np.ndarray | None = None,
        roles: ColumnRoleMap | None = None,
        meta: Mapping[str, object] | None = None,
        repair_count: int = 0,
        filled: Mapping[str, np.ndarray] | None = None,
    ) -> None:
        self.ids = np.asarray(ids, dtype=np.int64).copy()
        n = self.ids.shape[0]
        if np.unique(self.ids).size != n:
            raise PanelError("duplicate subject ids")
        if a0 is None or y_final is None:
            raise PanelError("a0 and y_final are required")
        observed = {} if observed is None else observed
        self.dn = self._int_grid("dN", dn, n)
        self.a = self._int_grid("A", a, n)
        self.xi = self._int_grid("xi", xi, n)
        self.tau = self.dn.shape[1] - 1
        if self.tau < 2:
            raise PanelError(f"final time index must be >= 2, got {self.tau}")
        self._columns: dict[str, np.ndarray] = {}
        self._observed: dict[str, np.ndarray] = {}
        self._filled: dict[str, np.ndarray] = {}
        for name in columns:
            vals = np.array(columns[name], dtype=float)
            if vals.shape != self.dn.shape:
                raise PanelError(f"column {name!r} has shape {vals.shape}, expected {self.dn.shape}")
            obs = np.array(observed[name], dtype=bool) if name in observed else np.isfinite(vals)
            if obs.shape != vals.shape:
                raise PanelError(f"observed flags for {name!r} have the wrong shape")
            fill = (
                np.array(filled[name], dtype=np.int8)
                if filled is not None and name in filled
                else np.zeros_like(self.dn, dtype=np.int8)
            )
            self._columns[name] = vals
            self._observed[name] = obs
            self._filled[name] = fill
        for name in STANDARD_MODIFIER_COLUMNS:
            if name not in self._columns:
                raise PanelError(f"missing required column {name!r}")
        self.a0 = np.asarray(a0, dtype=float).copy()
        self.y_final = np.asarray(y_final, dtype=float).copy()
        if self.a0.shape != (n,) or self.y_final.shape != (n,):
            raise PanelError("subject-level fields must have one value per subject")
        self.roles = roles if roles is not None else ColumnRoleMap()
        self.meta: dict[str, object] = dict(meta) if meta else {}
        self.repair_count = int(repair_count)
        self._validate()
        for arr in self._all_arrays():
            arr.setflags(write=False)

    @staticmethod
    def _int_grid(name: str, values: np.ndarray, n: int) -> np.ndarray:
        arr = np.array(values, dtype=np.int8)
        if arr.ndim != 2 or arr.shape[0] != n:
            raise PanelError(f"{name} must be a (subjects x times) grid")
        if not np.isin(arr, (0, 1)).all():
            raise PanelError(f"{name} entries must be 0 or 1")
        return arr

    def _all_arrays(self) -> Iterable[np.ndarray]:
        yield from (self.ids, self.dn, self.a, self.xi, self.a0, self.y_final)
        yield from self._columns.values()
        yield from self._observed.values()
        yield from self._filled.values()

    def _validate(self) -> None:
        if np.any(np.diff(self.xi, axis=1) > 0):
            raise PanelError("non-monotone censoring: xi increases over time for some subject")
        if np.any(self.xi[:, 0] == 0):
            raise PanelError("subjects must be in study at time 0 (xi(0)=1)")
        alive = self.xi == 1
        if np.any((self.a > self.dn) & alive):
            raise PanelError("add-on without a visit: A=1 where dN=0")
        dead = ~alive
        for name, vals in self._columns.items():
            obs = self._observed[name]
            if np.any(obs & ~np.isfinite(vals)):
                raise PanelError(f"column {name!r} marked observed with a non-finite value")
            if np.any(obs & dead):
                raise PanelError(f"column {name!r} marked observed after censoring")
            if np.any(np.isfinite(vals) & dead):
                raise PanelError(f"column {name!r} holds values after censoring")
        completers = self.xi[:, self.tau] == 1
        if np.any(completers & ~np.isfinite(self.y_final)):
            raise PanelError("final outcome missing for an uncensored subject")
        if np.any(~completers & np.isfinite(self.y_final)):
            raise PanelError("final outcome present for a censored subject")
        if not np.isfinite(self.a0).all():
            raise PanelError("baseline add-on assignment A0 must be present for all subjects")
        known = set(self._columns) | {"dN", "A", "A0", "Y_final"}
        for term in self.roles.all_terms():
            for name, _ in parse_term(term):
                if name not in known:
                    raise PanelError(f"unknown column role: term {term!r} names no cohort column")

    # -- accessors ---------------------------------------------------------

    @property
    def n(self) -> int:
        return self.ids.shape[0]

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(self._columns)

    def column(self, name: str) -> np.ndarray:
        try:
            return self._columns[name]
        except KeyError:
            raise PanelError(f"no such column {name!r}") from None

    def observed(self, name: str) -> np.ndarray:
        return self._observed[name]

    def filled(self, name: str) -> np.ndarray:
        return self._filled[name]

    def alive(self, t: int) -> np.ndarray:
        """Boolean mask of subjects still in study at time ``t``."""
        return self.xi[:, t] == 1

    @property
    def completers(self) -> np.ndarray:
        """Boolean mask of subjects with the final outcome observed."""
        return self.xi[:, self.tau] == 1

    def strategy_category(self, t: int) -> np.ndarray:
        """Received strategy category (0/1/2) at time ``t`` per subject."""
        return (self.dn[:, t] + self.dn[:, t] * self.a[:, t]).astype(np.int64)

    def term_values(self, term: str, t: int | None = None) -> np.ndarray:
        """Evaluate one covariate term as an ``(n,)`` vector (NaN where unavailable)."""
        out = np.ones(self.n, dtype=float)
        for name, spec in parse_term(term):
            if spec is None:
                if name == "A0":
                    vec = self.a0
                elif name == "Y_final":
                    vec = self.y_final
                else:
                    raise PanelError(f"term {term!r}: {name!r} is not a subject-level field")
            else:
                if isinstance(spec, tuple):
                    if t is None:
                        raise PanelError(f"term {term!r} is stage-relative but no stage was given")
                    k = t + spec[0]
                else:
                    k = spec
                if not 0 <= k <= self.tau:
                    raise PanelError(f"term {term!r} resolves to time {k}, outside 0..{self.tau}")
                if name == "dN":
                    vec = self.dn[:, k].astype(float)
                elif name == "A":
                    vec = self.a[:, k].astype(float)
                elif name in self._columns:
                    vec = self._columns[name][:, k]
                else:
                    raise PanelError(f"term {term!r} names no cohort column ({name!r})")
            out = out * vec
        return out

    def term_matrix(self, terms: Sequence[str], t: int | None = None) -> tuple[np.ndarray, tuple[str, ...]]:
        """Evaluate several terms into an ``(n, k)`` matrix plus resolved names."""
        if len(terms) == 0:
            return np.empty((self.n, 0), dtype=float), ()
        cols = [self.term_values(term, t) for term in terms]
        names = tuple(resolve_term_name(term, t) for term in terms)
        return np.column_stack(cols), names

    # -- derivation --------------------------------------------------------

    def with_updates(
        self,
        columns: Mapping[str, np.ndarray] | None = None,
        observed: Mapping[str, np.ndarray] | None = None,
        filled: Mapping[str, np.ndarray] | None = None,
        xi: np.ndarray | None = None,
        dn: np.ndarray | None = None,
        a: np.ndarray | None = None,
        y_final: np.ndarray | None = None,
        meta: Mapping[str, object] | None = None,
    ) -> "Cohort":
        """Return a new validated cohort with the given pieces replaced."""
        new_columns = {name: self._columns[name] for name in self._columns}
        new_observed = {name: self._observed[name] for name in self._observed}
        new_filled = {name: self._filled[name] for name in self._filled}
        if columns:
            new_columns.update(columns)
        if observed:
            new_observed.update(observed)
        if filled:
            new_filled.update(filled)
        return Cohort(
            ids=self.ids,
            dn=self.dn if dn is None else dn,
            a=self.a if a is None else a,
            xi=self.xi if xi is None else xi,
            columns=new_columns,
            observed=new_observed,
            a0=self.a0,
            y_final=self.y_final if y_final is None else y_final,
            roles=self.roles,
            meta=self.meta if meta is None else meta,
            repair_count=self.repair_count,
            filled=new_filled,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Cohort):
            return NotImplemented
        if self.tau != other.tau or self.n != other.n:
            return False
        if set(self._columns) != set(other._columns):
            return False
        same = (
            np.array_equal(self.ids, other.ids)
            and np.array_equal(self.dn, other.dn)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.xi, other.xi)
            and np.array_equal(self.a0, other.a0, equal_nan=True)
            and np.array_equal(self.y_final, other.y_final, equal_nan=True)
        )
        if not same:
            return False
        for name in self._columns:
            if not np.array_equal(self._columns[name], other._columns[name], equal_nan=True):
                return False
            if not np.array_equal(self._observed[name], other._observed[name]):
                return False
        return True

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Cohort(n={self.n}, tau={self.tau}, columns={list(self._columns)})"


@dataclass
class ValidationReport:
    """Report-only diagnostics from :func:`validate_cohort`."""

    n: int
    tau: int
    censored_count: int
    repair_count: int
    strategy_frequencies: dict[int, tuple[float, float, float]]
    positivity_flags: list[tuple[int, int, float]]
    messages: list[str]

    @property
    def passed(self) -> bool:
        return not self.positivity_flags


def validate_cohort(cohort: Cohort, positivity_floor: float = 0.01) -> ValidationReport:
    """Summarize per-time strategy frequencies and flag positivity violations.

    Never mutates its input.  A stratum at decision time ``t`` whose
    empirical strategy probability among in-study subjects falls below
    ``positivity_floor`` is flagged.
    """
    freqs: dict[int, tuple[float, float, float]] = {}
    flags: list[tuple[int, int, float]] = []
    messages: list[str] = []
    for t in range(1, cohort.tau):
        alive = cohort.alive(t)
        total = int(alive.sum())
        if total == 0:
            messages.append(f"no subjects in study at time {t}")
            continue
        cats = cohort.strategy_category(t)[alive]
        f = tuple(float(np.mean(cats == k)) for k in range(3))
        freqs[t] = f  # type: ignore[assignment]
        for k in range(3):
            if f[k] < positivity_floor:
                flags.append((t, k, f[k]))
                messages.append(
                    f"positivity warning at time {t}: strategy {ALL_STRATEGIES[k].visit},"
                    f"{ALL_STRATEGIES[k].addon} has frequency {f[k]:.4f} < {positivity_floor}"
                )
    return ValidationReport(
        n=cohort.n,
        tau=cohort.tau,
        censored_count=int((~cohort.completers).sum()),
        repair_count=cohort.repair_count,
        strategy_frequencies=freqs,
        positivity_flags=flags,
        messages=messages,
    )


def _format_cell(value: float) -> str:
    value = float(value)
    if not math.isfinite(value):
        return ""
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def write_cohort(cohort: Cohort, path) -> None:
    """Serialize a cohort to long CSV (person-time after censoring omitted).

    Finite cell values are written with a shortest round-trip decimal
    representation, so reloading reproduces them bit-exactly.
    """
    extra = [name for name in cohort.column_names if name not in STANDARD_MODIFIER_COLUMNS]
    header = list(CORE_COLUMNS) + extra
    lines = [",".join(header)]
    for i in range(cohort.n):
        for t in range(cohort.tau + 1):
            if cohort.xi[i, t] == 0:
                break
            cells = [
                str(int(cohort.ids[i])),
                str(t),
                str(int(cohort.dn[i, t])),
                str(int(cohort.a[i, t])),
                str(int(cohort.xi[i, t])),
                _format_cell(cohort.column("K1")[i, t]),
                _format_cell(cohort.column("K2")[i, t]),
                _format_cell(cohort.column("Y")[i, t]),
                _format_cell(cohort.a0[i]),
                _format_cell(cohort.y_final[i]) if t == cohort.tau else "",
            ]
            for name in extra:
                cells.append(_format_cell(cohort.column(name)[i, t]))
            lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cohort(path, schema: ColumnRoleMap | None = None) -> Cohort:
    """Load and validate a long-format cohort CSV.

    Rows are sorted by (id, time); empty covariate cells set the observation
    flag to 0; a row with ``A=1, dN=0`` is repaired to ``dN=1`` with a logged
    count; person-time at and after a subject's first ``xi=0`` row is
    dropped.  Raises :class:`PanelError` on malformed files, duplicate
    (id, time) pairs, non-monotone ``xi``, or unknown column roles.
    """
    try:
        df = pd.read_csv(path, header=0, dtype=str, keep_default_na=False, skipinitialspace=True)
    except Exception as exc:  # pragma: no cover - pandas message passthrough
        raise PanelError(f"malformed CSV: {exc}") from exc
    got = tuple(df.columns[: len(CORE_COLUMNS)])
    if got != CORE_COLUMNS:
        raise PanelError(f"malformed CSV header: expected {','.join(CORE_COLUMNS)}, got {','.join(got)}")
    extra = [str(c) for c in df.columns[len(CORE_COLUMNS) :]]
    if df.shape[0] == 0:
        raise PanelError("empty cohort file")

    def _ints(col: str) -> np.ndarray:
        raw = df[col].to_numpy()
        if np.any(raw == ""):
            raise PanelError(f"column {col!r} has missing entries; design columns may not be missing")
        try:
            return raw.astype(np.int64)
        except ValueError as exc:
            raise PanelError(f"column {col!r} must be integer: {exc}") from exc

    def _reals(col: str) -> np.ndarray:
        raw = df[col].to_numpy()
        out = np.full(raw.shape, np.nan)
        nonempty = raw != ""
        try:
            out[nonempty] = raw[nonempty].astype(float)
        except ValueError as exc:
            raise PanelError(f"column {col!r} must be numeric: {exc}") from exc
        return out

    id_col = _ints("id")
    time_col = _ints("time")
    order = np.lexsort((time_col, id_col))
    df = df.iloc[order].reset_index(drop=True)
    id_col, time_col = id_col[order], time_col[order]
    dn_col, a_col, xi_col = _ints("dN"), _ints("A"), _ints("xi")
    real_cols = {name: _reals(name) for name in ("K1", "K2", "Y", "A0", "Y_final", *extra)}

    key = np.stack([id_col, time_col], axis=1)
    if np.unique(key, axis=0).shape[0] != key.shape[0]:
        raise PanelError("duplicate (id, time) rows")
    if time_col.min() < 0:
        raise PanelError("negative time index")
    tau = int(time_col.max())
    ids = np.unique(id_col)
    n = ids.size
    index_of = {int(v): i for i, v in enumerate(ids)}

    shape = (n, tau + 1)
    dn = np.zeros(shape, dtype=np.int8)
    a = np.zeros(shape, dtype=np.int8)
    xi = np.zeros(shape, dtype=np.int8)
    present = np.zeros(shape, dtype=bool)
    grids = {name: np.full(shape, np.nan) for name in ("K1", "K2", "Y", *extra)}
    a0 = np.full(n, np.nan)
    y_final = np.full(n, np.nan)
    repair_count = 0

    rows_i = np.fromiter((index_of[int(v)] for v in id_col), dtype=np.int64, count=len(id_col))
    for r in range(len(id_col)):
        i, t = rows_i[r], int(time_col[r])
        present[i, t] = True
        if xi_col[r] not in (0, 1) or dn_col[r] not in (0, 1) or a_col[r] not in (0, 1):
            raise PanelError("dN, A, xi entries must be 0 or 1")
        xi[i, t] = xi_col[r]
        if xi_col[r] == 0:
            continue
        dn_val, a_val = int(dn_col[r]), int(a_col[r])
        if a_val == 1 and dn_val == 0:
            dn_val = 1
            repair_count += 1
        dn[i, t], a[i, t] = dn_val, a_val
        for name in grids:
            grids[name][i, t] = real_cols[name][r]
        if real_cols["A0"][r] != real_cols["A0"][r]:  # NaN check
            raise PanelError(f"missing A0 for subject {int(id_col[r])}")
        if not math.isnan(a0[i]) and real_cols["A0"][r] != a0[i]:
            raise PanelError(f"A0 varies over time for subject {int(id_col[r])}")
        a0[i] = real_cols["A0"][r]
        yf = real_cols["Y_final"][r]
        if t == tau:
            y_final[i] = yf
        elif not math.isnan(yf):
            raise PanelError(f"Y_final populated off the final row for subject {int(id_col[r])}")

    if repair_count:
        logger.warning("repaired %d rows with A=1 but dN=0 (forced dN=1)", repair_count)

    # Per-subject structure: contiguous rows from 0, monotone xi, censoring tail.
    for i in range(n):
        times = np.flatnonzero(present[i])
        if times.size == 0 or times[0] != 0:
            raise PanelError(f"subject {int(ids[i])} has no time-0 row")
        if not np.array_equal(times, np.arange(times[0], times[-1] + 1)):
            raise PanelError(f"subject {int(ids[i])} has a gap in person-time rows")
        sub_xi = xi[i, times[0] : times[-1] + 1]
        if np.any(np.diff(sub_xi) > 0):
            raise PanelError(f"non-monotone censoring for subject {int(ids[i])}")
        first_zero = np.flatnonzero(sub_xi == 0)
        cens_from = int(first_zero[0]) if first_zero.size else int(times[-1]) + 1
        xi[i, :cens_from] = 1
        xi[i, cens_from:] = 0
        for name in grids:
            grids[name][i, cens_from:] = np.nan
        dn[i, cens_from:] = 0
        a[i, cens_from:] = 0
        if cens_from <= tau:
            y_final[i] = np.nan

    observed = {name: np.isfinite(grids[name]) for name in grids}
    return Cohort(
        ids=ids,
        dn=dn,
        a=a,
        xi=xi,
        columns=grids,
        observed=observed,
        a0=a0,
        y_final=y_final,
        roles=schema,
        repair_count=repair_count,
    )
