"""Break location estimation and break tests.

* :func:`estimate_break_2sls` picks the split minimizing the two-regime
  second-stage sum of squared residuals on fitted regressors.
* :func:`sup_wald_scan` computes the Wald statistic for equal structural
  coefficients across every admissible split.
* :func:`common_change_wald` tests for a structural change at a known
  first-stage break.
* :func:`bp_ols_breaks` finds multiple breaks in a least-squares regression
  by dynamic programming and sequential sup-F tests.
* :func:`sequential_sf_breaks` applies the sup-Wald test recursively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from ._linalg import COND_MAX, quadratic_form_inv, quadratic_form_inv_batch, sym
from .covariance import HacConfig, hac_lrv
from .critvals import BaiPerronTable, CriticalValueTable, sup_wald_critical_value
from .data import Dataset
from .errors import (NumericalError, SegmentTooShort, SingularDesign, TooFewRows,
                     ValidationError)
from .estimators import augmented_pi, ols, ols_first_stage

CHUNK = 256
DELTA_RTOL = 1e-9
SSR_RTOL = 1e-12


def candidate_breaks(T: int, trimming: float, p: int = 1) -> np.ndarray:
    """Admissible 1-based break indices ``[ceil(eps T), floor((1 - eps) T)]``.

    Each side of a split also keeps at least ``p`` observations.
    """
    lo = max(math.ceil(trimming * T - 1e-9), p)
    hi = min(math.floor((1.0 - trimming) * T + 1e-9), T - p)
    if hi < lo:
        raise SegmentTooShort(f"no admissible break for T={T}, trimming={trimming}, p={p}")
    return np.arange(lo, hi + 1)


def fitted_regressors(data: Dataset) -> np.ndarray:
    """``[Z1, Z Pi_hat]`` with ``Pi_hat`` from full-sample OLS."""
    pi = ols_first_stage(data).pi_per_segment[0]
    return data.Z @ augmented_pi(pi, data.p1)


def _cum(a: np.ndarray) -> np.ndarray:
    """Prefix sums with a leading zero slice."""
    out = np.zeros((a.shape[0] + 1, *a.shape[1:]))
    np.cumsum(a, axis=0, out=out[1:])
    return out


def _batched_fits(X: np.ndarray, y: np.ndarray, ks: np.ndarray):
    """Coefficients of OLS on rows ``[:k]`` and ``[k:]`` for each ``k``.

    Returns ``(theta1, theta2, ok)`` where ``ok`` flags candidates whose two
    design matrices are acceptably conditioned.
    """
    XX = _cum(np.einsum("ti,tj->tij", X, X))
    Xy = _cum(X * y[:, None])
    A1, b1 = XX[ks], Xy[ks]
    A2, b2 = XX[-1] - A1, Xy[-1] - b1
    ok = (np.linalg.cond(A1) <= COND_MAX) & (np.linalg.cond(A2) <= COND_MAX)
    p = X.shape[1]
    eye = np.eye(p)
    A1 = np.where(ok[:, None, None], A1, eye)
    A2 = np.where(ok[:, None, None], A2, eye)
    th1 = np.linalg.solve(A1, b1[..., None])[..., 0]
    th2 = np.linalg.solve(A2, b2[..., None])[..., 0]
    return th1, th2, ok


@dataclass(frozen=True)
class BreakEstimate:
    break_idx: int
    lambda_hat: float
    candidates: np.ndarray
    ssr_profile: np.ndarray

    def to_dict(self) -> dict:
        return {"break_idx": self.break_idx, "lambda_hat": self.lambda_hat}


def _ssr_profile(X: np.ndarray, y: np.ndarray, ks: np.ndarray) -> np.ndarray:
    th1, th2, ok = _batched_fits(X, y, ks)
    out = np.full(ks.size, np.inf)
    T = y.size
    t = np.arange(T)
    for s in range(0, ks.size, CHUNK):
        sl = slice(s, s + CHUNK)
        first = t[None, :] < ks[sl, None]
        fit = np.where(first, th1[sl] @ X.T, th2[sl] @ X.T)
        ssr = np.sum((y[None, :] - fit) ** 2, axis=1)
        out[sl] = np.where(ok[sl], ssr, np.inf)
    return out


def estimate_break_2sls(data: Dataset, trimming: float = 0.15) -> BreakEstimate:
    """Least-squares break date of the second stage on fitted regressors.

    The first stage is estimated once on the full sample. Ties go to the
    smallest index; candidates with a singular split design are skipped.
    """
    ks = candidate_breaks(data.T, trimming, data.p)
    What = fitted_regressors(data)
    ssr = _ssr_profile(What, data.y, ks)
    if not np.any(np.isfinite(ssr)):
        raise SingularDesign("every candidate split has a singular design")
    j = int(np.argmin(ssr))
    k = int(ks[j])
    return BreakEstimate(k, k / data.T, ks, ssr)


@dataclass(frozen=True)
class WaldScan:
    """Wald statistics for every admissible split of the sample.

    ``argmax_idx`` is the break index with the largest statistic (smallest
    index on ties). Candidates skipped for a singular design are listed in
    ``skipped``.
    """

    candidates: np.ndarray
    wald_values: np.ndarray
    sup_stat: float
    argmax_idx: int
    trimming: float
    skipped: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {"candidates": self.candidates.tolist(), "wald_values": self.wald_values.tolist(),
                "sup_stat": self.sup_stat, "argmax_idx": self.argmax_idx,
                "trimming": self.trimming, "skipped": list(self.skipped)}


def _wald(delta: np.ndarray, V: np.ndarray, theta_scale: float, T: int) -> float:
    atol = DELTA_RTOL * (1.0 + theta_scale)
    return T * quadratic_form_inv(delta, V, atol=atol)


def _sandwich(A: np.ndarray, H: np.ndarray) -> np.ndarray:
    Ai = np.linalg.inv(A)
    return Ai @ H @ Ai


def sup_wald_scan(data: Dataset, trimming: float = 0.15, cfg: HacConfig | None = None) -> WaldScan:
    """Sup-Wald test for a change in the structural coefficients.

    For each split the coefficients are re-estimated by second-stage OLS on
    full-sample fitted regressors ``What``; the covariance of each regime is
    the sandwich ``A^-1 H A^-1`` with ``A = What'What / T`` and ``H`` the
    long-run variance of ``What_t * (y_t - What_t' theta)`` (normalized by
    regime length, then scaled by the regime share).
    """
    cfg = cfg or HacConfig()
    T, p = data.T, data.p
    ks = candidate_breaks(T, trimming, p)
    X = fitted_regressors(data)
    y = data.y
    th1, th2, ok = _batched_fits(X, y, ks)
    XX = _cum(np.einsum("ti,tj->tij", X, X)) / T
    waldv = np.full(ks.size, np.nan)
    t = np.arange(T)
    outer = np.einsum("ti,tj->tij", X, X).reshape(T, p * p)
    for s in range(0, ks.size, CHUNK):
        sl = np.arange(s, min(s + CHUNK, ks.size))
        if cfg.is_white:
            first = t[None, :] < ks[sl, None]
            r1 = np.where(first, y[None, :] - th1[sl] @ X.T, 0.0)
            r2 = np.where(first, 0.0, y[None, :] - th2[sl] @ X.T)
            H1 = ((r1 ** 2) @ outer).reshape(-1, p, p) / T
            H2 = ((r2 ** 2) @ outer).reshape(-1, p, p) / T
        else:
            H1 = np.empty((sl.size, p, p))
            H2 = np.empty((sl.size, p, p))
            for j, c in enumerate(sl):
                k = ks[c]
                u1 = y[:k] - X[:k] @ th1[c]
                u2 = y[k:] - X[k:] @ th2[c]
                H1[j] = hac_lrv(X[:k] * u1[:, None], cfg) * (k / T)
                H2[j] = hac_lrv(X[k:] * u2[:, None], cfg) * ((T - k) / T)
        A1 = XX[ks[sl]]
        A2 = XX[-1] - A1
        good = ok[sl]
        eye = np.eye(p)
        A1i = np.linalg.inv(np.where(good[:, None, None], A1, eye))
        A2i = np.linalg.inv(np.where(good[:, None, None], A2, eye))
        V = A1i @ H1 @ A1i + A2i @ H2 @ A2i
        scale = np.maximum(np.abs(th1[sl]).max(axis=1), np.abs(th2[sl]).max(axis=1))
        vals = T * quadratic_form_inv_batch(th1[sl] - th2[sl], V, DELTA_RTOL * (1.0 + scale))
        waldv[sl] = np.where(good, vals, np.nan)
    keep = ok & ~np.isnan(waldv)
    if not np.any(keep):
        raise SingularDesign("every candidate split has a singular design")
    cand, vals = ks[keep], waldv[keep]
    j = int(np.argmax(vals))
    return WaldScan(cand, vals, float(vals[j]), int(cand[j]), trimming,
                    tuple(int(k) for k in ks[~keep]))


@dataclass(frozen=True)
class BreakTestReport:
    """Outcome of a break test.

    ``critical_values`` maps each test level to its critical value;
    ``decision_at`` maps each level to whether the null is rejected.
    """

    statistic: float
    critical_values: dict
    decision_at: dict
    estimated_break: int | None = None
    p_value: float | None = None
    reference: str = ""

    def to_dict(self) -> dict:
        return {"statistic": self.statistic,
                "critical_values": {str(k): v for k, v in self.critical_values.items()},
                "decision_at": {str(k): v for k, v in self.decision_at.items()},
                "estimated_break": self.estimated_break, "p_value": self.p_value,
                "reference": self.reference}


def common_change_wald(data: Dataset, first_stage_break: int, cfg: HacConfig | None = None,
                       trimming: float | None = None,
                       levels: tuple[float, ...] = (0.10, 0.05, 0.01)) -> BreakTestReport:
    """Wald test for a structural change at a known first-stage break.

    Both the first stage and the second stage are estimated separately on
    each side of the break; the statistic is chi-squared with ``p`` degrees
    of freedom under the null of equal structural coefficients.
    """
    T, p = data.T, data.p
    k = int(first_stage_break)
    min_len = data.q + 1
    if trimming is not None:
        min_len = max(min_len, math.ceil(trimming * T - 1e-9))
    if k < min_len or T - k < min_len:
        raise SegmentTooShort(f"break {k} leaves a segment shorter than {min_len} rows")
    W = data.W
    thetas, G = [], np.zeros((p, p))
    for a, b in ((0, k), (k, T)):
        seg = data.rows(a, b)
        pi = ols(seg.Z, seg.X, "instrument matrix Z'Z").reshape(data.q, data.p2)
        Xh = seg.Z @ augmented_pi(pi, data.p1)
        th = ols(Xh, seg.y, "fitted regressors")
        u = seg.y - W[a:b] @ th
        A = Xh.T @ Xh / T
        B = hac_lrv(Xh * u[:, None], cfg) * ((b - a) / T)
        G += _sandwich(A, B)
        thetas.append(th)
    scale = float(max(np.abs(thetas[0]).max(), np.abs(thetas[1]).max()))
    stat = _wald(thetas[0] - thetas[1], sym(G), scale, T)
    pval = float(chi2.sf(stat, p)) if np.isfinite(stat) else 0.0
    cvs = {lv: float(chi2.isf(lv, p)) for lv in levels}
    return BreakTestReport(stat, cvs, {lv: bool(stat > cv) for lv, cv in cvs.items()},
                           k, pval, f"chi2({p})")


@dataclass(frozen=True)
class BaiPerronResult:
    """Detected breaks, sequential statistics and the global optima per break count."""

    breaks: list[int]
    seq_stats: list[float]
    critical_values: list[float]
    optimal_breaks: dict = field(default_factory=dict)
    optimal_ssr: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"breaks": self.breaks, "seq_stats": self.seq_stats,
                "critical_values": self.critical_values,
                "optimal_breaks": {str(k): v for k, v in self.optimal_breaks.items()}}


def segment_ssr_table(y: np.ndarray, X: np.ndarray, h: int) -> np.ndarray:
    """``ssr[i, j]`` is the OLS sum of squared residuals on rows ``i..j-1``.

    Only segments of at least ``h`` rows are filled; others are infinite.
    """
    T, q = X.shape
    ssr = np.full((T + 1, T + 1), np.inf)
    for i in range(0, T - h + 1):
        Xs, ys = X[i:], y[i:]
        XX = np.cumsum(np.einsum("ti,tj->tij", Xs, Xs), axis=0)
        Xy = np.cumsum(Xs * ys[:, None], axis=0)
        ends = np.arange(h, T - i + 1)
        A, b = XX[ends - 1], Xy[ends - 1]
        good = np.linalg.cond(A) <= COND_MAX
        A = np.where(good[:, None, None], A, np.eye(q))
        beta = np.linalg.solve(A, b[..., None])[..., 0]
        resid = ys[None, :T - i] - beta @ Xs[:T - i].T
        mask = np.arange(T - i)[None, :] < ends[:, None]
        vals = np.sum(np.where(mask, resid, 0.0) ** 2, axis=1)
        ssr[i, i + ends] = np.where(good, vals, np.inf)
    return ssr


def optimal_partitions(ssr: np.ndarray, T: int, max_breaks: int, h: int) -> tuple[dict, dict]:
    """Global least-squares break dates for ``m = 0..max_breaks`` breaks."""
    best = {0: ssr[0, :].copy()}
    arg: dict[int, np.ndarray] = {}
    for m in range(1, max_breaks + 1):
        cur = np.full(T + 1, np.inf)
        idx = np.full(T + 1, -1)
        for j in range((m + 1) * h, T + 1):
            ks = np.arange(m * h, j - h + 1)
            if ks.size == 0:
                continue
            tot = best[m - 1][ks] + ssr[ks, j]
            r = int(np.argmin(tot))
            cur[j], idx[j] = tot[r], ks[r]
        best[m], arg[m] = cur, idx
    breaks, totals = {0: []}, {0: float(best[0][T])}
    for m in range(1, max_breaks + 1):
        if not np.isfinite(best[m][T]):
            break
        bk, j = [], T
        for level in range(m, 0, -1):
            j = int(arg[level][j])
            bk.append(j)
        breaks[m] = sorted(bk)
        totals[m] = float(best[m][T])
    return breaks, totals


def _ratio(num: float, den: float, atol: float = 0.0) -> float:
    """``num / den`` with values below ``atol`` read as exact zeros."""
    num = 0.0 if num <= atol else num
    if den <= atol:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def bp_ols_breaks(y_col: np.ndarray, regressors: np.ndarray, max_breaks: int, trimming: float,
                  crit_table: BaiPerronTable, level: float = 0.05) -> BaiPerronResult:
    """Multiple breaks in an OLS regression with sequential ``F(l+1|l)`` tests.

    Segments are at least ``max(q, ceil(eps T))`` rows long. ``F(l+1|l)``
    is the largest single-split SSR reduction over the ``l + 1`` segments
    of the global ``l``-break optimum, divided by ``q`` times the residual
    variance after that split.
    """
    y = np.asarray(y_col, dtype=float).reshape(-1)
    X = np.asarray(regressors, dtype=float).reshape(y.size, -1)
    T, q = X.shape
    if not 0 < trimming < 0.5:
        raise ValidationError(f"trimming must lie in (0, 0.5), got {trimming}")
    h = max(q, math.ceil(trimming * T - 1e-9))
    if 2 * h > T:
        raise SegmentTooShort(f"T={T} cannot hold two segments of {h} rows")
    max_breaks = min(max_breaks, T // h - 1)
    ssr = segment_ssr_table(y, X, h)
    if not np.isfinite(ssr[0, T]):
        raise SingularDesign("full-sample regressor matrix is singular")
    opt_breaks, opt_ssr = optimal_partitions(ssr, T, max_breaks, h)
    # SSR reductions below round-off of y'y carry no signal
    tiny = SSR_RTOL * max(float(y @ y), 1.0)
    stats, cvs = [], []
    n = 0
    while n < max_breaks and n + 1 in opt_breaks:
        edges = [0, *opt_breaks[n], T]
        gains = []
        for a, b in zip(edges[:-1], edges[1:]):
            ks = np.arange(a + h, b - h + 1)
            if ks.size:
                gains.append(ssr[a, b] - float(np.min(ssr[a, ks] + ssr[ks, b])))
        if not gains:
            break
        gain = max(gains)
        alt = opt_ssr[n] - gain
        dof = T - (n + 2) * q
        f = _ratio(gain / q, alt / dof if dof > 0 else 0.0, tiny)
        cv = crit_table.value(n, level)
        stats.append(f)
        cvs.append(cv)
        if f > cv:
            n += 1
        else:
            break
    return BaiPerronResult(list(opt_breaks.get(n, [])), stats, cvs, opt_breaks, opt_ssr)


def sequential_sf_breaks(data: Dataset, segment: tuple[int, int] | None = None,
                         trimming: float = 0.15, level: float = 0.05,
                         crit_table: CriticalValueTable | None = None,
                         cfg: HacConfig | None = None, log: list | None = None,
                         **sim) -> list[int]:
    """Breaks found by recursively applying the sup-Wald test.

    ``segment`` is a 0-based ``(start, stop)`` row range. Each rejection
    places a break at the least-squares estimate and both halves are
    tested again. Returned indices refer to the full sample.
    """
    start, stop = segment if segment is not None else (0, data.T)
    sub = data.rows(start, stop)
    n = stop - start
    entry = {"test": "sup_wald", "segment": [start, stop], "level": level}
    try:
        sub.check_length()
        candidate_breaks(n, trimming, data.p)
        scan = sup_wald_scan(sub, trimming, cfg)
    except (SegmentTooShort, TooFewRows, NumericalError) as exc:
        if log is not None:
            entry.update(outcome="not run", reason=str(exc))
            log.append(entry)
        return []
    if crit_table is not None and crit_table.has(level):
        cv = crit_table.value(level)
    else:
        cv = sup_wald_critical_value(data.p, trimming, level, **sim)
    reject = bool(scan.sup_stat > cv)
    entry.update(statistic=scan.sup_stat, critical_value=cv, reject=reject)
    if not reject:
        if log is not None:
            log.append(entry)
        return []
    k = estimate_break_2sls(sub, trimming).break_idx
    entry["break"] = start + k
    if log is not None:
        log.append(entry)
    left = sequential_sf_breaks(data, (start, start + k), trimming, level, crit_table, cfg, log, **sim)
    right = sequential_sf_breaks(data, (start + k, stop), trimming, level, crit_table, cfg, log, **sim)
    return sorted([*left, start + k, *right])
