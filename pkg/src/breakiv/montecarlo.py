"""Monte Carlo experiments for the two-regime IV estimators.

Design: an intercept plus ``n_iv`` standard normal external instruments,
one endogenous regressor ``x = Z' 1 + v`` and
``y = theta_z + x theta_x + sigma_t u`` with a shift of ``change_size``
in both coefficients after ``floor(T lambda0)``. ``(u, v)`` are standard
bivariate normal with correlation ``rho``. ``sigma_t`` is 1 (HOM),
``sqrt((1 + z_t1^2) / 2)`` (HET1), or a GARCH(1,1) volatility (HET2).

Replication ``r`` draws from ``numpy.random.default_rng([seed, r])``, so
results do not depend on the number of workers.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import norm

from .changepoint import estimate_break_2sls, sup_wald_scan
from .covariance import HacConfig
from .critvals import sup_wald_critical_value
from .data import Dataset
from .errors import BreakIVError, ValidationError
from .estimators import Kind, split_sample_gmm, ts2sls, tsgmm

ESTIMATOR_ORDER = (Kind.SPLIT_GMM, Kind.TS2SLS, Kind.TSGMM)
LABELS = {Kind.SPLIT_GMM: "GMM", Kind.TS2SLS: "TS2SLS", Kind.TSGMM: "TSGMM"}
COLUMNS = ("Bias", "MC Std", "As. Std.", "RMSE", "Length", "Coverage")
GARCH = (0.1, 0.6, 0.3)
FAILURE_FLAG = 0.01


class ErrScheme(str, enum.Enum):
    HOM = "HOM"
    HET1 = "HET1"
    HET2 = "HET2"


class Scenario(str, enum.Enum):
    KNOWN_BREAK = "KnownBreak"
    ESTIMATED_BREAK = "EstimatedBreak"
    NO_BREAK_ESTIMATED = "NoBreakEstimated"
    PRE_TEST = "PreTest"


@dataclass(frozen=True)
class McConfig:
    """One Monte Carlo cell.

    ``lambda0=None`` or the ``NoBreakEstimated`` scenario generate data
    without a break. ``zero_noise`` sets ``u = v = 0``.
    """

    T: int = 400
    n_iv: int = 1
    rho: float = -0.5
    lambda0: float | None = 0.4
    change_size: float = 1.0
    err_scheme: ErrScheme = ErrScheme.HOM
    n_reps: int = 1000
    seed: int = 0
    scenario: Scenario = Scenario.KNOWN_BREAK
    trimming: float = 0.15
    level: float = 0.05
    theta1: tuple[float, float] = (0.0, 0.0)
    hac: HacConfig = field(default_factory=HacConfig)
    zero_noise: bool = False
    n_jobs: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "err_scheme", ErrScheme(self.err_scheme))
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if isinstance(self.hac, dict):
            object.__setattr__(self, "hac", HacConfig(**self.hac))
        object.__setattr__(self, "theta1", tuple(float(t) for t in self.theta1))
        if self.T < 20 or self.n_iv < 1 or self.n_reps < 1:
            raise ValidationError("need T >= 20, n_iv >= 1 and n_reps >= 1")
        if not -1 < self.rho < 1:
            raise ValidationError(f"rho must lie in (-1, 1), got {self.rho}")
        if self.lambda0 is not None and not 0 < self.lambda0 < 1:
            raise ValidationError(f"lambda0 must lie in (0, 1), got {self.lambda0}")
        if len(self.theta1) != 2:
            raise ValidationError("theta1 must hold (theta_z, theta_x)")
        if self.scenario is Scenario.KNOWN_BREAK and not self.has_break:
            raise ValidationError("a known-break experiment needs lambda0")

    @property
    def has_break(self) -> bool:
        return self.lambda0 is not None and self.scenario is not Scenario.NO_BREAK_ESTIMATED

    @property
    def true_break(self) -> int | None:
        return int(math.floor(self.T * self.lambda0)) if self.has_break else None

    @property
    def burn_in(self) -> int:
        """GARCH burn-in: 100 rows for T=400 and 200 for T=800."""
        return self.T // 4

    def true_thetas(self) -> tuple[np.ndarray, np.ndarray]:
        t1 = np.array(self.theta1)
        shift = self.change_size if self.has_break else 0.0
        return t1, t1 + shift

    def to_dict(self) -> dict:
        d = asdict(self)
        d["err_scheme"] = self.err_scheme.value
        d["scenario"] = self.scenario.value
        d["hac"] = self.hac.to_dict()
        return d


def _sigma(cfg: McConfig, z1: np.ndarray, u: np.ndarray) -> np.ndarray:
    if cfg.err_scheme is ErrScheme.HOM:
        return np.ones_like(u)
    if cfg.err_scheme is ErrScheme.HET1:
        return np.sqrt((1.0 + z1 ** 2) / 2.0)
    omega, alpha, beta = GARCH
    s2 = np.empty_like(u)
    prev_s2 = omega / (1.0 - alpha - beta)
    prev_e = 0.0
    for t in range(u.size):
        s2[t] = omega + alpha * prev_e ** 2 + beta * prev_s2
        prev_s2 = s2[t]
        prev_e = math.sqrt(s2[t]) * u[t]
    return np.sqrt(s2)


def generate_dgp(cfg: McConfig, rep: int) -> Dataset:
    """Simulated dataset for replication ``rep``."""
    rng = np.random.default_rng([cfg.seed, rep])
    T = cfg.T
    burn = cfg.burn_in if cfg.err_scheme is ErrScheme.HET2 else 0
    n = T + burn
    z = rng.standard_normal((n, cfg.n_iv))
    e = rng.standard_normal((n, 2))
    u = e[:, 0]
    v = cfg.rho * e[:, 0] + math.sqrt(1.0 - cfg.rho ** 2) * e[:, 1]
    if cfg.zero_noise:
        u, v = np.zeros(n), np.zeros(n)
    sigma = _sigma(cfg, z[:, 0], u)
    z, u, v, sigma = z[burn:], u[burn:], v[burn:], sigma[burn:]
    ones = np.ones((T, 1))
    Z = np.hstack([ones, z])
    x = Z @ np.ones(Z.shape[1]) + v
    th1, th2 = cfg.true_thetas()
    k = cfg.true_break if cfg.has_break else T
    W = np.column_stack([np.ones(T), x])
    mean = np.concatenate([W[:k] @ th1, W[k:] @ th2])
    y = mean + sigma * u
    names = {"y": "y", "x": ["x1"], "z1": ["z1_const"],
             "ziv": [f"ziv_{j + 1}" for j in range(cfg.n_iv)]}
    return Dataset.from_arrays(y, x, ones, z, names=names)


@dataclass(frozen=True)
class RepOutcome:
    """Estimates of one replication: ``theta[kind]`` has shape ``(2, p)``."""

    theta: dict
    se: dict
    break_idx: int | None
    rejected: bool | None
    error: str | None = None


def _estimate_all(data: Dataset, k: int | None, cfg: McConfig) -> tuple[dict, dict]:
    theta, se = {}, {}
    for kind, fn in ((Kind.SPLIT_GMM, split_sample_gmm), (Kind.TS2SLS, ts2sls), (Kind.TSGMM, tsgmm)):
        res = fn(data, k, cfg.hac)
        th = np.asarray(res.theta).reshape(-1, data.p)
        s = res.std_errors.reshape(-1, data.p)
        if th.shape[0] == 1:
            th, s = np.vstack([th, th]), np.vstack([s, s])
        theta[kind], se[kind] = th, s
    return theta, se


def run_replication(cfg: McConfig, rep: int, crit: float | None = None) -> RepOutcome:
    try:
        data = generate_dgp(cfg, rep)
        rejected = None
        if cfg.scenario is Scenario.KNOWN_BREAK:
            k = cfg.true_break
        elif cfg.scenario is Scenario.PRE_TEST:
            rejected = bool(sup_wald_scan(data, cfg.trimming, cfg.hac).sup_stat > crit)
            k = estimate_break_2sls(data, cfg.trimming).break_idx
        else:
            k = estimate_break_2sls(data, cfg.trimming).break_idx
        theta, se = _estimate_all(data, k if rejected is not False else None, cfg)
        return RepOutcome(theta, se, k, rejected)
    except BreakIVError as exc:
        return RepOutcome({}, {}, None, None, f"{type(exc).__name__}: {exc}")


@dataclass(frozen=True)
class MetricRow:
    estimator: str
    regime: int
    coef: int
    bias: float
    mc_std: float
    asy_std: float
    rmse: float
    length: float
    coverage: float

    def values(self) -> tuple[float, ...]:
        return (self.bias, self.mc_std, self.asy_std, self.rmse, self.length, self.coverage)


@dataclass(frozen=True)
class McReport:
    """Aggregated metrics per estimator and regime.

    ``rmse`` is ``sqrt(bias^2 + asy_std^2)``. Under the pre-test scenario
    each metric is the frequency-weighted average of its value on the
    replications that split the sample and on those that did not.
    """

    config: McConfig
    rows: list[MetricRow]
    mean_estimated_break: float | None
    detection_prob: float | None
    n_failed: int
    failures: list[str]

    @property
    def flagged(self) -> bool:
        return self.n_failed > FAILURE_FLAG * self.config.n_reps

    def row(self, estimator: str, regime: int) -> MetricRow:
        for r in self.rows:
            if r.estimator == estimator and r.regime == regime:
                return r
        raise KeyError((estimator, regime))

    def header_lines(self) -> list[str]:
        c = self.config
        lines = [f"T={c.T}, n_IV={c.n_iv}, rho={c.rho}, {c.err_scheme.value}, "
                 f"{c.scenario.value}, N={c.n_reps}, seed={c.seed}"]
        if c.err_scheme is ErrScheme.HET1:
            lines.append("HET1 uses sigma_t^2 = (1 + z_t^2)/2 with z_t the first external instrument")
        if self.mean_estimated_break is not None:
            lines.append(f"Estimated change location: {self.mean_estimated_break:.3f}")
        if self.detection_prob is not None:
            lines.append(f"Prob. of detecting the change: {self.detection_prob:.3f}")
        if self.n_failed:
            flag = " (more than 1%: results flagged)" if self.flagged else ""
            lines.append(f"failed replications: {self.n_failed}{flag}")
        return lines

    def to_markdown(self) -> str:
        out = [f"**{line}**  " for line in self.header_lines()]
        out.append("")
        out.append("| Estimator | " + " | ".join(COLUMNS) + " |")
        out.append("|---" * (len(COLUMNS) + 1) + "|")
        for r in self.rows:
            name = f"theta_{r.estimator},{r.regime}"
            out.append(f"| {name} | " + " | ".join(f"{v:.4f}" for v in r.values()) + " |")
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        c = self.config
        w.writerow(["T", "n_iv", "scheme", "scenario", "estimator", "regime", *COLUMNS,
                    "mean_break", "detection_prob", "n_failed"])
        for r in self.rows:
            w.writerow([c.T, c.n_iv, c.err_scheme.value, c.scenario.value, r.estimator, r.regime,
                        *(f"{v:.6f}" for v in r.values()),
                        "" if self.mean_estimated_break is None else f"{self.mean_estimated_break:.3f}",
                        "" if self.detection_prob is None else f"{self.detection_prob:.4f}",
                        self.n_failed])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "rows": [asdict(r) for r in self.rows],
                "mean_estimated_break": self.mean_estimated_break,
                "detection_prob": self.detection_prob, "n_failed": self.n_failed,
                "failures": self.failures, "flagged": self.flagged}


Z975 = float(norm.ppf(0.975))


def _group_metrics(est: np.ndarray, se: np.ndarray, truth: float) -> np.ndarray:
    """``(bias, mc_std, asy_std, length, coverage)`` for one group of replications."""
    err = est - truth
    tol = 1e-10 * max(1.0, abs(truth))
    return np.array([
        err.mean(),
        est.std(ddof=1) if est.size > 1 else 0.0,
        se.mean(),
        (2.0 * Z975 * se).mean(),
        np.mean(np.abs(err) <= Z975 * se + tol),
    ])


def summarize(cfg: McConfig, outcomes: list[RepOutcome], coef: int = 1) -> McReport:
    """Aggregate replications into per-estimator, per-regime metrics.

    ``coef`` picks the coefficient (0 intercept, 1 endogenous regressor).
    """
    ok = [o for o in outcomes if o.error is None]
    failures = [o.error for o in outcomes if o.error is not None]
    truths = cfg.true_thetas()
    if cfg.scenario is Scenario.PRE_TEST:
        groups = [[o for o in ok if o.rejected], [o for o in ok if not o.rejected]]
    else:
        groups = [ok]
    groups = [g for g in groups if g]
    rows = []
    for regime in (0, 1):
        for kind in ESTIMATOR_ORDER:
            agg = np.zeros(5)
            for g in groups:
                est = np.array([o.theta[kind][regime, coef] for o in g])
                se = np.array([o.se[kind][regime, coef] for o in g])
                agg += len(g) / len(ok) * _group_metrics(est, se, truths[regime][coef])
            bias, mc_std, asy, length, cov = (float(v) for v in agg)
            rows.append(MetricRow(LABELS[kind], regime + 1, coef, bias, mc_std, asy,
                                  math.sqrt(bias ** 2 + asy ** 2), length, cov))
    mean_break = None
    if cfg.scenario is not Scenario.KNOWN_BREAK and ok:
        mean_break = float(np.mean([o.break_idx for o in ok]))
    detect = None
    if cfg.scenario is Scenario.PRE_TEST and ok:
        detect = float(np.mean([o.rejected for o in ok]))
    return McReport(cfg, rows, mean_break, detect, len(failures), failures[:20])


def _crit(cfg: McConfig) -> float | None:
    if cfg.scenario is not Scenario.PRE_TEST:
        return None
    return sup_wald_critical_value(2, cfg.trimming, cfg.level, n_jobs=cfg.n_jobs)


def run_mc(cfg: McConfig) -> McReport:
    """Run all replications of one cell and summarize them."""
    crit = _crit(cfg)
    outcomes = Parallel(n_jobs=cfg.n_jobs, batch_size=16)(
        delayed(run_replication)(cfg, r, crit) for r in range(cfg.n_reps))
    if not any(o.error is None for o in outcomes):
        raise BreakIVError(f"all {cfg.n_reps} replications failed: {outcomes[0].error}")
    return summarize(cfg, outcomes)


def _detect_rep(cfg: McConfig, rep: int, crit: float):
    try:
        data = generate_dgp(cfg, rep)
        stat = sup_wald_scan(data, cfg.trimming, cfg.hac).sup_stat
        k = estimate_break_2sls(data, cfg.trimming).break_idx
        return stat > crit, k
    except BreakIVError:
        return None


@dataclass(frozen=True)
class DetectionRow:
    change_size: float
    detection_prob: float
    mean_estimated_break: float
    n_failed: int


def detection_experiment(cfg: McConfig, change_sizes=(1.0, 0.5, 0.3, 0.0)) -> list[DetectionRow]:
    """Rejection frequency of the sup-Wald test and mean estimated break per change size."""
    crit = sup_wald_critical_value(2, cfg.trimming, cfg.level, n_jobs=cfg.n_jobs)
    out = []
    for size in change_sizes:
        c = replace(cfg, change_size=float(size), scenario=Scenario.PRE_TEST)
        res = Parallel(n_jobs=cfg.n_jobs, batch_size=16)(
            delayed(_detect_rep)(c, r, crit) for r in range(cfg.n_reps))
        good = [r for r in res if r is not None]
        if not good:
            raise BreakIVError(f"all replications failed for change size {size}")
        out.append(DetectionRow(float(size), float(np.mean([g[0] for g in good])),
                                float(np.mean([g[1] for g in good])), len(res) - len(good)))
    return out


def detection_markdown(cfg: McConfig, rows: list[DetectionRow]) -> str:
    out = [f"**{cfg.err_scheme.value}, T={cfg.T}, n_IV={cfg.n_iv}, N={cfg.n_reps}**", "",
           "| Change size | Prob. of detecting change | Estimated change point |",
           "|---|---|---|"]
    for r in rows:
        out.append(f"| {r.change_size:g} | {r.detection_prob:.3f} | {r.mean_estimated_break:.3f} |")
    return "\n".join(out) + "\n"


def detection_csv(cfg: McConfig, rows: list[DetectionRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "T", "n_iv", "change_size", "detection_prob", "mean_break", "n_failed"])
    for r in rows:
        w.writerow([cfg.err_scheme.value, cfg.T, cfg.n_iv, r.change_size,
                    f"{r.detection_prob:.4f}", f"{r.mean_estimated_break:.3f}", r.n_failed])
    return buf.getvalue()


GRID = ((400, 1), (400, 4), (800, 1), (800, 4))
SCHEMES = (ErrScheme.HOM, ErrScheme.HET1, ErrScheme.HET2)


def table_preset(table: int, n_reps: int = 1000, seed: int = 0, n_jobs: int = 1) -> list[McConfig]:
    """Monte Carlo cells of simulation tables 1 to 9.

    Tables 1-3 (known break) and 4-6 (estimated break) cover HOM, HET1 and
    HET2 over ``T in {400, 800}`` and one or four instruments; table 7 has
    no break (T=400, four instruments); table 8 is the detection experiment
    (T=400, one instrument); table 9 pre-tests (T=400, four instruments).
    """
    base = {"n_reps": n_reps, "seed": seed, "n_jobs": n_jobs}
    if 1 <= table <= 6:
        scenario = Scenario.KNOWN_BREAK if table <= 3 else Scenario.ESTIMATED_BREAK
        scheme = SCHEMES[(table - 1) % 3]
        return [McConfig(T=T, n_iv=k, err_scheme=scheme, scenario=scenario, **base) for T, k in GRID]
    if table == 7:
        return [McConfig(T=400, n_iv=4, err_scheme=s, scenario=Scenario.NO_BREAK_ESTIMATED,
                         change_size=0.0, **base) for s in SCHEMES]
    if table == 8:
        return [McConfig(T=400, n_iv=1, err_scheme=s, scenario=Scenario.PRE_TEST, **base)
                for s in SCHEMES]
    if table == 9:
        return [McConfig(T=400, n_iv=4, err_scheme=s, scenario=Scenario.PRE_TEST, **base)
                for s in SCHEMES]
    raise ValidationError(f"no preset for table {table}; choose 1-9")
