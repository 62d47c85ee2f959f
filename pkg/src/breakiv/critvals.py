"""Critical values for sup-Wald break tests.

Under the null the sup-Wald statistic converges to the supremum over the
trimmed interval of ``||B(s) - s B(1)||^2 / (s (1 - s))`` for a
``p``-dimensional standard Brownian motion ``B``. Quantiles are obtained by
simulating Gaussian partial sums on a uniform grid.

Paths are generated in fixed-size chunks, chunk ``c`` drawing from
``numpy.random.default_rng([seed, c])``, so results do not depend on how
many workers run the chunks.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .errors import ValidationError

DEFAULT_LEVELS = (0.10, 0.05, 0.01)
CHUNK = 500

# Published quantiles for p = 6 regressors and 15% trimming.
SUP_WALD_TABLE = {
    (6, 0.15): {0.10: 17.95, 0.05: 20.08, 0.01: 24.45},
}

# Published Bai-Perron sup-F values at 20% trimming, used only on request.
BAI_PERRON_TABLE_020 = (
    {0.10: 2.61, 0.05: 2.90, 0.01: 3.46},
    {0.10: 2.89, 0.05: 3.15, 0.01: 3.63},
)


@dataclass(frozen=True)
class CriticalValueTable:
    """Upper-tail critical values keyed by test level.

    ``source`` is ``{"kind": "hardcoded"}`` or
    ``{"kind": "simulated", "n_paths": .., "grid_size": .., "seed": ..}``.
    """

    p: int
    trimming: float
    values: Mapping[float, float]
    source: dict = field(default_factory=lambda: {"kind": "hardcoded"})

    def __post_init__(self) -> None:
        vals = {float(k): float(v) for k, v in self.values.items()}
        object.__setattr__(self, "values", vals)
        levels = sorted(vals, reverse=True)
        cvs = [vals[lv] for lv in levels]
        if any(b < a for a, b in zip(cvs, cvs[1:])):
            raise ValidationError(f"critical values must increase as the level falls: {vals}")

    def value(self, level: float) -> float:
        for lv, cv in self.values.items():
            if math.isclose(lv, level, rel_tol=1e-9, abs_tol=1e-15):
                return cv
        raise KeyError(f"level {level} not in table (have {sorted(self.values)})")

    def has(self, level: float) -> bool:
        try:
            self.value(level)
        except KeyError:
            return False
        return True

    def to_dict(self) -> dict:
        return {"p": self.p, "trimming": self.trimming,
                "values": {str(k): v for k, v in sorted(self.values.items())},
                "source": self.source}


def grid_bounds(grid_size: int, trimming: float) -> tuple[int, int]:
    """1-based grid indices ``[ceil(eps g), floor((1 - eps) g)]``."""
    lo = math.ceil(trimming * grid_size - 1e-9)
    hi = math.floor((1.0 - trimming) * grid_size + 1e-9)
    return lo, hi


def sup_functional(increments: np.ndarray, trimming: float) -> np.ndarray:
    """Per-path supremum of the normalized squared Brownian bridge.

    Parameters
    ----------
    increments : ndarray, shape (n_paths, grid_size, p)
        Gaussian increments with variance ``1 / grid_size``.
    trimming : float
    """
    n, g, p = increments.shape
    B = np.cumsum(increments, axis=1)
    lo, hi = grid_bounds(g, trimming)
    s = np.arange(lo, hi + 1) / g
    bridge = B[:, lo - 1:hi, :] - s[None, :, None] * B[:, -1:, :]
    stat = np.einsum("nkp,nkp->nk", bridge, bridge) / (s * (1.0 - s))[None, :]
    return stat.max(axis=1)


def _chunk_sups(p: int, trimming: float, n: int, grid_size: int, seed: int, chunk: int) -> np.ndarray:
    rng = np.random.default_rng([seed, chunk])
    inc = rng.standard_normal((n, grid_size, p)) / math.sqrt(grid_size)
    return sup_functional(inc, trimming)


def simulate_sups(p: int, trimming: float, n_paths: int, grid_size: int, seed: int,
                  n_jobs: int = 1) -> np.ndarray:
    sizes = [min(CHUNK, n_paths - s) for s in range(0, n_paths, CHUNK)]
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_chunk_sups)(p, trimming, n, grid_size, seed, c) for c, n in enumerate(sizes))
    return np.concatenate(parts)


def _cache_dir() -> Path:
    return Path(os.environ.get("BREAKIV_CACHE_DIR", Path.home() / ".cache" / "breakiv"))


def _cache_key(p: int, trimming: float, n_paths: int, grid_size: int, seed: int) -> str:
    return f"{p}/{trimming:g}/{n_paths}/{grid_size}/{seed}"


def _read_cache() -> dict:
    path = _cache_dir() / "critvals.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return {}


def _write_cache(key: str, values: Mapping[float, float]) -> None:
    folder = _cache_dir()
    try:
        folder.mkdir(parents=True, exist_ok=True)
        data = _read_cache()
        entry = data.get(key, {})
        entry.update({repr(float(k)): float(v) for k, v in values.items()})
        data[key] = entry
        fd, tmp = tempfile.mkstemp(dir=folder, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=1, sort_keys=True)
        os.replace(tmp, folder / "critvals.json")
    except OSError:
        pass


def simulate_sup_wald_critvals(p: int, trimming: float, n_paths: int = 20_000,
                               grid_size: int = 1000, seed: int = 0,
                               levels: Iterable[float] = DEFAULT_LEVELS,
                               n_jobs: int = 1, use_cache: bool = True) -> CriticalValueTable:
    """Simulated sup-Wald critical values for ``p`` tested coefficients.

    Results are cached on disk (``$BREAKIV_CACHE_DIR/critvals.json``) keyed
    by ``p/trimming/n_paths/grid_size/seed``.
    """
    if p < 1:
        raise ValidationError(f"p must be positive, got {p}")
    if not 0 < trimming < 0.5:
        raise ValidationError(f"trimming must lie in (0, 0.5), got {trimming}")
    if n_paths < 1000:
        raise ValidationError(f"need at least 1000 paths, got {n_paths}")
    if grid_size < 200:
        raise ValidationError(f"need a grid of at least 200 points, got {grid_size}")
    levels = tuple(float(lv) for lv in levels)
    if any(not 0 < lv < 1 for lv in levels):
        raise ValidationError(f"levels must lie in (0, 1): {levels}")
    source = {"kind": "simulated", "n_paths": n_paths, "grid_size": grid_size, "seed": seed}
    key = _cache_key(p, trimming, n_paths, grid_size, seed)
    if use_cache:
        cached = {float(k): v for k, v in _read_cache().get(key, {}).items()}
        table = CriticalValueTable(p, trimming, cached, source)
        if all(table.has(lv) for lv in levels):
            return CriticalValueTable(p, trimming, {lv: table.value(lv) for lv in levels}, source)
    sups = simulate_sups(p, trimming, n_paths, grid_size, seed, n_jobs)
    values = {lv: float(np.quantile(sups, 1.0 - lv)) for lv in levels}
    if use_cache:
        _write_cache(key, values)
    return CriticalValueTable(p, trimming, values, source)


def sup_wald_critical_value(p: int, trimming: float, level: float, **sim) -> float:
    """Published value when one exists for ``(p, trimming, level)``, else simulated."""
    hard = hardcoded_table(p, trimming)
    if hard is not None and hard.has(level):
        return hard.value(level)
    return simulate_sup_wald_critvals(p, trimming, levels=(level,), **sim).value(level)


def hardcoded_table(p: int, trimming: float) -> CriticalValueTable | None:
    table = SUP_WALD_TABLE.get((p, round(trimming, 10)))
    return None if table is None else CriticalValueTable(p, trimming, table)


@dataclass(frozen=True)
class BaiPerronTable:
    """Critical values of the sequential ``F(l+1 | l)`` tests, one table per ``l``."""

    q: int
    trimming: float
    per_break: tuple[CriticalValueTable, ...]

    def value(self, n_breaks: int, level: float) -> float:
        if n_breaks >= len(self.per_break):
            raise KeyError(f"no critical values for F({n_breaks + 1}|{n_breaks})")
        return self.per_break[n_breaks].value(level)

    def to_dict(self) -> dict:
        return {"q": self.q, "trimming": self.trimming,
                "per_break": [t.to_dict() for t in self.per_break]}


def published_bai_perron_table(q: int) -> BaiPerronTable:
    """The published 20%-trimming sup-F values, applied as they are."""
    return BaiPerronTable(q, 0.2, tuple(CriticalValueTable(q, 0.2, v) for v in BAI_PERRON_TABLE_020))


def simulated_bai_perron_table(q: int, trimming: float, max_breaks: int,
                               levels: Iterable[float] = DEFAULT_LEVELS, **sim) -> BaiPerronTable:
    """Sequential sup-F critical values from the sup-Wald limit.

    ``F(1|0)`` uses the ``q``-regressor sup-Wald quantile divided by ``q``.
    ``F(l+1|l)`` takes the maximum over ``l + 1`` segments, treated as
    independent, so its level-``a`` value is the sup-Wald quantile at
    ``1 - (1 - a)^(1/(l+1))``, again divided by ``q``.
    """
    levels = tuple(levels)
    tables = []
    for l in range(max_breaks):
        adj = {lv: 1.0 - (1.0 - lv) ** (1.0 / (l + 1)) for lv in levels}
        sim_table = simulate_sup_wald_critvals(q, trimming, levels=tuple(adj.values()), **sim)
        vals = {lv: sim_table.value(a) / q for lv, a in adj.items()}
        tables.append(CriticalValueTable(q, trimming, vals, sim_table.source))
    return BaiPerronTable(q, trimming, tuple(tables))
