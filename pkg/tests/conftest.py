"""Shared fixtures and small data builders for the test suite.

Expensive Monte Carlo artifacts used by the acceptance gates are cached as
JSON under ``tests/_cache`` (keyed by their full configuration), so the
first full run is slow and later runs are fast.  Delete the cache directory
to force recomputation.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from dmar import simulate
from dmar.panel import Cohort, ColumnRoleMap

CACHE_DIR = Path(__file__).parent / "_cache"


def cache_path(kind: str, key: dict) -> Path:
    """Deterministic cache file path for a JSON-serializable key."""
    CACHE_DIR.mkdir(exist_ok=True)
    digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:20]
    return CACHE_DIR / f"{kind}-{digest}.json"


def make_cohort(
    n: int = 4,
    tau: int = 3,
    dn=None,
    a=None,
    xi=None,
    columns=None,
    a0=None,
    y_final=None,
    roles: ColumnRoleMap | None = None,
    observed=None,
) -> Cohort:
    """A small hand-specified cohort; unspecified pieces get simple defaults.

    Defaults: everyone in study at all times, a visit at every time,
    no add-ons, K1/K2/Y grids equal to ``base + time`` with distinct bases,
    final outcome ``100 + id``.
    """
    shape = (n, tau + 1)
    if dn is None:
        dn = np.ones(shape, dtype=np.int8)
        dn[:, tau] = 0
        dn[:, 0] = 1
    if a is None:
        a = np.zeros(shape, dtype=np.int8)
    if xi is None:
        xi = np.ones(shape, dtype=np.int8)
    if columns is None:
        columns = {}
        for j, name in enumerate(("K1", "K2", "Y")):
            grid = np.tile(np.arange(tau + 1, dtype=float), (n, 1)) + 10.0 * j
            grid += np.arange(n, dtype=float)[:, None] * 0.1
            grid[:, tau] = np.nan
            columns[name] = grid
    if a0 is None:
        a0 = np.zeros(n)
    if y_final is None:
        y_final = 100.0 + np.arange(n, dtype=float)
    return Cohort(
        ids=np.arange(1, n + 1),
        dn=dn,
        a=a,
        xi=xi,
        columns=columns,
        observed=observed,
        a0=a0,
        y_final=y_final,
        roles=roles,
    )


@pytest.fixture(scope="session")
def cohort_a_full() -> Cohort:
    """One fully observed scenario-A cohort at production size."""
    return simulate.generate_cohort(simulate.scenario("A", n=50_000, seed=0))
