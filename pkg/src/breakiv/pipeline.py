"""Four-stage break detection and estimation procedure.

1. Breaks in each first-stage equation (least-squares dynamic programming
   with sequential sup-F tests); their union, after merging nearby dates,
   splits the sample into stable first-stage segments.
2. Sequential sup-Wald tests for structural breaks inside each of those
   segments.
3. A common-change Wald test at each first-stage break not already found
   in step 2.
4. Two-sample GMM around every structural break inside a stable
   first-stage segment, else full-segment GMM.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .changepoint import bp_ols_breaks, common_change_wald, sequential_sf_breaks
from .covariance import HacConfig
from .critvals import published_bai_perron_table, simulated_bai_perron_table
from .data import Dataset, Partition
from .errors import BreakIVError, NumericalError, ValidationError
from .estimators import EstimateResult, ols_first_stage, split_sample_gmm, tsgmm


@dataclass(frozen=True)
class PipelineConfig:
    """Settings of :func:`run_four_stage`.

    ``merge_radius`` defaults to ``ceil(rf_trimming * T)``. A first-stage
    break within ``common_radius`` of a structural break found in stage 2
    is not tested again for a common change. ``rf_critvals``
    is ``"simulated"`` or ``"published"`` (the fixed 20%-trimming sup-F
    table, used as printed whatever the number of instruments).
    """

    trimming: float = 0.15
    rf_trimming: float = 0.2
    level: float = 0.05
    max_breaks: int = 2
    hac: HacConfig = field(default_factory=HacConfig)
    bonferroni: bool = False
    merge_radius: int | None = None
    common_radius: int = 0
    rf_critvals: str = "simulated"
    n_paths: int = 20_000
    grid_size: int = 1000
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.level < 1:
            raise ValidationError(f"level must lie in (0, 1), got {self.level}")
        if self.max_breaks < 0:
            raise ValidationError("max_breaks must be nonnegative")
        if self.rf_critvals not in ("simulated", "published"):
            raise ValidationError(f"unknown rf_critvals {self.rf_critvals!r}")
        if isinstance(self.hac, dict):
            object.__setattr__(self, "hac", HacConfig(**self.hac))

    @property
    def sim(self) -> dict:
        return {"n_paths": self.n_paths, "grid_size": self.grid_size, "seed": self.seed,
                "n_jobs": self.n_jobs}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hac"] = self.hac.to_dict()
        return d


@dataclass(frozen=True)
class FinalEstimate:
    segment: tuple[int, int]
    estimator: str
    break_idx: int | None
    context: tuple[int, int]
    result: EstimateResult

    def to_dict(self) -> dict:
        return {"segment": list(self.segment), "estimator": self.estimator,
                "break": self.break_idx, "context": list(self.context),
                "result": self.result.to_dict()}


@dataclass(frozen=True)
class PipelineReport:
    """Break sets of every stage, final estimates and a log of every test.

    Break indices are 1-based last rows of the earlier regime, in the
    coordinates of the full sample.
    """

    first_stage_breaks: list[int]
    second_stage_breaks: list[int]
    common_breaks: list[int]
    final_estimates: list[FinalEstimate]
    decisions_log: list[dict]
    level_used: float
    n_tests: int
    config: dict

    @property
    def structural_breaks(self) -> list[int]:
        return sorted(set(self.second_stage_breaks) | set(self.common_breaks))

    def to_dict(self) -> dict:
        return {
            "first_stage_breaks": self.first_stage_breaks,
            "second_stage_breaks": self.second_stage_breaks,
            "common_breaks": self.common_breaks,
            "structural_breaks": self.structural_breaks,
            "final_estimates": [f.to_dict() for f in self.final_estimates],
            "decisions_log": self.decisions_log,
            "level_used": self.level_used,
            "n_tests": self.n_tests,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_default)

    def summary(self) -> str:
        lines = [
            f"first-stage breaks: {self.first_stage_breaks or 'none'}",
            f"structural breaks (not common): {self.second_stage_breaks or 'none'}",
            f"common breaks: {self.common_breaks or 'none'}",
            f"tests run: {self.n_tests}; level per test: {self.level_used:.4g}",
            "",
        ]
        for f in self.final_estimates:
            a, b = f.segment
            where = f"rows {a + 1}-{b}"
            head = f"{f.estimator} on {where}" + (f", break at {f.break_idx}" if f.break_idx else "")
            lines.append(head)
            th, se = f.result.theta, f.result.std_errors
            for i, (t, s) in enumerate(zip(th, se)):
                lines.append(f"  theta[{i}] = {t: .6f}  (se {s:.6f})")
        return "\n".join(lines)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def merge_close(breaks: list[int], radius: int) -> list[int]:
    """Sorted union with breaks closer than ``radius`` to a kept one dropped."""
    out: list[int] = []
    for b in sorted(set(breaks)):
        if out and b - out[-1] < radius:
            continue
        out.append(b)
    return out


def _stage1(data: Dataset, cfg: PipelineConfig, level: float, log: list) -> list[int]:
    found: list[int] = []
    if cfg.max_breaks == 0:
        return []
    if cfg.rf_critvals == "published":
        table = published_bai_perron_table(data.q)
    else:
        table = simulated_bai_perron_table(data.q, cfg.rf_trimming, cfg.max_breaks,
                                           levels=(level,), **cfg.sim)
    for j in range(data.p2):
        try:
            res = bp_ols_breaks(data.X[:, j], data.Z, cfg.max_breaks, cfg.rf_trimming, table, level)
        except BreakIVError as exc:
            log.append({"stage": 1, "equation": j, "test": "sup_f", "outcome": "failed",
                        "reason": str(exc), "action": "no break"})
            continue
        for n, (f, cv) in enumerate(zip(res.seq_stats, res.critical_values)):
            log.append({"stage": 1, "equation": j, "test": f"sup_f({n + 1}|{n})",
                        "statistic": f, "critical_value": cv, "level": level,
                        "reject": bool(f > cv)})
        found.extend(res.breaks)
    radius = cfg.merge_radius or math.ceil(cfg.rf_trimming * data.T - 1e-9)
    merged = merge_close(found, radius)
    if merged != sorted(set(found)):
        log.append({"stage": 1, "action": "merge", "raw": sorted(set(found)),
                    "merged": merged, "radius": radius})
    return merged


def _stage2(data: Dataset, cfg: PipelineConfig, segments, level: float, log: list) -> list[int]:
    out: list[int] = []
    for a, b in segments:
        entries: list[dict] = []
        out.extend(sequential_sf_breaks(data, (a, b), cfg.trimming, level, None, cfg.hac,
                                        entries, **cfg.sim))
        for i, e in enumerate(entries):
            e["stage"] = 2
            e["conjecture_based"] = i > 0
            log.append(e)
    return sorted(out)


def _stage3(data: Dataset, cfg: PipelineConfig, b_s1, b_s2nc, radius, level, log) -> list[int]:
    common = []
    for k in b_s1:
        if any(abs(k - s) <= radius for s in b_s2nc):
            log.append({"stage": 3, "test": "common_wald", "break": k, "outcome": "not run",
                        "reason": "structural break already found at this location"})
            continue
        others = sorted(set(b_s1) | set(b_s2nc))
        lo = max([s for s in others if s < k], default=0)
        hi = min([s for s in others if s > k], default=data.T)
        try:
            rep = common_change_wald(data.rows(lo, hi), k - lo, cfg.hac, levels=(level,))
        except BreakIVError as exc:
            log.append({"stage": 3, "test": "common_wald", "break": k, "outcome": "failed",
                        "reason": str(exc), "action": "no break"})
            continue
        reject = rep.decision_at[level]
        log.append({"stage": 3, "test": "common_wald", "break": k, "context": [lo, hi],
                    "statistic": rep.statistic, "critical_value": rep.critical_values[level],
                    "p_value": rep.p_value, "level": level, "reject": reject})
        if reject:
            common.append(k)
    return common


def _stage4(data: Dataset, cfg: PipelineConfig, segments, b_s2, log) -> list[FinalEstimate]:
    out = []
    for a, b in segments:
        inner = [k for k in b_s2 if a < k < b]
        if not inner:
            res = split_sample_gmm(data.rows(a, b), None, cfg.hac)
            out.append(FinalEstimate((a, b), "gmm", None, (a, b), res))
            log.append({"stage": 4, "segment": [a, b], "estimator": "gmm"})
            continue
        edges = [a, *inner, b]
        for i, k in enumerate(inner):
            lo, hi = edges[i], edges[i + 2]
            res = tsgmm(data.rows(lo, hi), k - lo, cfg.hac)
            out.append(FinalEstimate((a, b), "tsgmm", k, (lo, hi), res))
            log.append({"stage": 4, "segment": [a, b], "estimator": "tsgmm", "break": k,
                        "context": [lo, hi]})
    return out


def _run(data: Dataset, cfg: PipelineConfig, level: float):
    log: list[dict] = []
    b_s1 = _stage1(data, cfg, level, log)
    try:
        ols_first_stage(data, Partition(tuple(b_s1)))
    except NumericalError as exc:
        log.append({"stage": 1, "action": "drop breaks", "reason": str(exc)})
        b_s1 = []
    segments = Partition(tuple(b_s1)).bounds(data.T)
    b_s2nc = _stage2(data, cfg, segments, level, log)
    b_s2c = _stage3(data, cfg, b_s1, b_s2nc, cfg.common_radius, level, log)
    return b_s1, b_s2nc, b_s2c, segments, log


def _count_tests(log: list[dict]) -> int:
    return sum(1 for e in log if "statistic" in e)


def run_four_stage(data: Dataset, cfg: PipelineConfig | None = None) -> PipelineReport:
    """Run the four stages on ``data``.

    With ``cfg.bonferroni`` a first pass at the nominal level counts the
    tests performed; the reported run then uses ``level / count`` for every
    test. A failed test is logged and treated as finding no break.
    """
    cfg = cfg or PipelineConfig()
    level = cfg.level
    n_dry = None
    if cfg.bonferroni:
        *_, dry_log = _run(data, cfg, level)
        n_dry = max(1, _count_tests(dry_log))
        level = cfg.level / n_dry
    b_s1, b_s2nc, b_s2c, segments, log = _run(data, cfg, level)
    b_s2 = sorted(set(b_s2nc) | set(b_s2c))
    finals = _stage4(data, cfg, segments, b_s2, log)
    n_tests = _count_tests(log)
    conf = cfg.to_dict()
    if n_dry is not None:
        conf["bonferroni_divisor"] = n_dry
    return PipelineReport(b_s1, b_s2nc, b_s2c, finals, log, level, n_tests, conf)
