"""Closed-form IV estimators for a structural equation with one break.

Three estimators of ``(theta_1, theta_2)`` are provided:

* split-sample two-step GMM, each regime on its own data;
* two-sample 2SLS, a full-sample OLS first stage plugged into per-regime
  second-stage OLS;
* two-sample GMM, one linear GMM system stacking the structural moments
  of both regimes with the first-stage OLS moments of both segments under
  a common first-stage matrix.

Reported covariances are plug-in estimates already divided by ``T``, so
standard errors are directly usable.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.stats import norm

from ._linalg import check_cond, inv_spd, psd_repair, solve_spd, sym
from .asymptotics import TheoreticalInputs, avar_ts2sls, stacked_covariance
from .covariance import CovBlocks, HacConfig, hac_lrv, segment_blocks
from .data import Dataset, ParamSet, Partition
from .errors import SegmentTooShort, SingularDesign, SingularWeighting

EXACT_FIT_RTOL = 1e-10


class Kind(str, enum.Enum):
    SPLIT_GMM = "gmm"
    TS2SLS = "ts2sls"
    TSGMM = "tsgmm"


@dataclass(frozen=True)
class FirstStage:
    """OLS first-stage coefficients per segment and the stacked residuals."""

    pi_per_segment: tuple[np.ndarray, ...]
    residuals: np.ndarray
    partition: Partition


@dataclass(frozen=True)
class EstimateResult:
    """Estimates and plug-in covariance for one estimator.

    ``avar_theta`` covers ``vec(theta_1, ..., theta_m)``; ``avar_pi`` covers
    ``vec(Pi)`` when the estimator produces one.
    """

    kind: Kind
    params: ParamSet
    avar_theta: np.ndarray
    avar_pi: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate(self.params.theta_per_regime)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.avar_theta), 0.0, None))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "params": self.params.to_dict(),
            "avar_theta": self.avar_theta.tolist(),
            "avar_pi": None if self.avar_pi is None else self.avar_pi.tolist(),
            "std_errors": self.std_errors.tolist(),
            "diagnostics": self.diagnostics,
        }


def _exact_fit(resid: np.ndarray, ref: np.ndarray) -> bool:
    scale = max(1.0, float(np.max(np.abs(ref), initial=0.0)))
    return float(np.max(np.abs(resid), initial=0.0)) <= EXACT_FIT_RTOL * scale


def ols(X: np.ndarray, y: np.ndarray, what: str = "regressor matrix") -> np.ndarray:
    """Least squares via the normal equations."""
    return solve_spd(X.T @ X, X.T @ y, SingularDesign, what)


def tsls(Z: np.ndarray, W: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Two-stage least squares of ``y`` on ``W`` with instruments ``Z``."""
    ZW = Z.T @ W
    proj = solve_spd(Z.T @ Z, np.column_stack([ZW, Z.T @ y]), SingularDesign, "Z'Z")
    return solve_spd(ZW.T @ proj[:, :-1], ZW.T @ proj[:, -1], SingularDesign, "2SLS design")


def augmented_pi(pi: np.ndarray, p1: int) -> np.ndarray:
    """``[E, Pi]`` where ``E`` selects the first ``p1`` instruments."""
    q = pi.shape[0]
    return np.hstack([np.eye(q)[:, :p1], pi])


def ols_first_stage(data: Dataset, part: Partition | None = None) -> FirstStage:
    """Regress every endogenous regressor on the instruments.

    Over the full sample when ``part`` is None or has no breaks, else
    separately within each segment.
    """
    part = part or Partition()
    V = np.empty_like(data.X)
    pis = []
    for a, b in part.bounds(data.T):
        Z, X = data.Z[a:b], data.X[a:b]
        pi = ols(Z, X, "instrument matrix Z'Z").reshape(data.q, data.p2)
        if np.linalg.matrix_rank(pi) < data.p2:
            raise SingularDesign("first-stage coefficient matrix is rank deficient")
        pis.append(pi)
        V[a:b] = X - Z @ pi
    return FirstStage(pi_per_segment=tuple(pis), residuals=V, partition=part)


def _partition(data: Dataset, break_idx: int | None, trimming: float | None) -> Partition:
    if break_idx is None:
        return Partition()
    if trimming is not None:
        part = Partition((break_idx,), trimming)
        part.validate(data.T, data.p)
        return part
    part = Partition((break_idx,))
    for a, b in part.bounds(data.T):
        if b - a <= data.q:
            raise SegmentTooShort(
                f"segment [{a + 1}, {b}] has {b - a} rows; need more than q={data.q}")
    return part


def _gmm_segment(Z, W, y, T, cfg):
    """Two-step GMM on one segment; returns ``(theta, avar, objective, cond)``."""
    theta1 = tsls(Z, W, y)
    u = y - W @ theta1
    p = W.shape[1]
    if _exact_fit(u, y):
        return theta1, np.zeros((p, p)), 0.0, float("nan")
    n = Z.shape[0]
    Su = hac_lrv(Z * u[:, None], cfg) * (n / T)
    check_cond(Su, SingularWeighting, "structural moment covariance")
    ZW, Zy = Z.T @ W / T, Z.T @ y / T
    SiZW = solve_spd(Su, ZW, SingularWeighting, "structural moment covariance")
    info = ZW.T @ SiZW
    theta = solve_spd(info, SiZW.T @ Zy, SingularDesign, "GMM information")
    gbar = Zy - ZW @ theta
    obj = float(T * gbar @ solve_spd(Su, gbar, SingularWeighting))
    return theta, inv_spd(info, SingularDesign, "GMM information") / T, obj, float(np.linalg.cond(Su))


def split_sample_gmm(data: Dataset, break_idx: int | None, cfg: HacConfig | None = None,
                     trimming: float | None = None) -> EstimateResult:
    """Efficient two-step GMM estimated separately on each regime.

    The first step is 2SLS; its residuals give the long-run covariance used
    as the inverse weighting matrix. ``break_idx=None`` gives full-sample
    GMM.
    """
    part = _partition(data, break_idx, trimming)
    T, W = data.T, data.W
    thetas, avars, obj, conds = [], [], 0.0, []
    for a, b in part.bounds(T):
        th, av, o, c = _gmm_segment(data.Z[a:b], W[a:b], data.y[a:b], T, cfg)
        thetas.append(th)
        avars.append(av)
        obj += o
        conds.append(c)
    fs = ols_first_stage(data)
    params = ParamSet(tuple(thetas), fs.pi_per_segment, part)
    return EstimateResult(Kind.SPLIT_GMM, params, sym(sla.block_diag(*avars)),
                          diagnostics={"objective": obj, "cond_weighting": conds})


def ts2sls(data: Dataset, break_idx: int | None, cfg: HacConfig | None = None,
           trimming: float | None = None) -> EstimateResult:
    """Two-sample 2SLS with a full-sample first stage.

    The covariance accounts for first-stage estimation error shared by the
    two regimes, so its off-diagonal block is generally nonzero.
    """
    part = _partition(data, break_idx, trimming)
    T = data.T
    fs = ols_first_stage(data)
    pi = fs.pi_per_segment[0]
    pi_a = augmented_pi(pi, data.p1)
    What = data.Z @ pi_a
    W = data.W
    thetas, blocks, Qs = [], [], []
    for a, b in part.bounds(T):
        th = ols(What[a:b], data.y[a:b], "fitted regressors")
        thetas.append(th)
        u = data.y[a:b] - W[a:b] @ th
        Z = data.Z[a:b]
        blocks.append(segment_blocks(Z, u, fs.residuals[a:b], T, cfg))
        Qs.append(sym(Z.T @ Z / T))
    if part.n_regimes == 1:
        A = pi_a.T @ Qs[0] @ pi_a
        D = solve_spd(A, pi_a.T, SingularDesign, "fitted regressors")
        avar = D @ blocks[0].su @ D.T
    else:
        b1, b2 = blocks
        inp = TheoreticalInputs(Qs[0], Qs[1], b1.su, b2.su, b1.suv, b2.suv, b1.sv, b2.sv,
                                pi_a, thetas[0][data.p1:], thetas[1][data.p1:])
        avar = avar_ts2sls(inp)
    params = ParamSet(tuple(thetas), (pi,), part)
    return EstimateResult(Kind.TS2SLS, params, sym(avar) / T)


def _vec(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, order="F")


def tsgmm_system(data: Dataset, part: Partition) -> tuple[np.ndarray, np.ndarray]:
    """Jacobian ``G`` and data vector ``b`` of the stacked moments ``b - G beta``.

    ``beta = (theta_1, theta_2, vec(Pi))`` and moments are ordered
    ``[Z_1'u_1, Z_2'u_2, vec(Z_1'V_1), vec(Z_2'V_2)]``, all divided by ``T``.
    """
    T, p2 = data.T, data.p2
    W = data.W
    Ip = np.eye(p2)
    (a1, b1), (a2, b2) = part.bounds(T)
    Z1, Z2 = data.Z[a1:b1], data.Z[a2:b2]
    gamma1 = sla.block_diag(Z1.T @ W[a1:b1], Z2.T @ W[a2:b2])
    gamma2 = np.vstack([np.kron(Ip, Z1.T @ Z1), np.kron(Ip, Z2.T @ Z2)])
    G = sla.block_diag(gamma1, gamma2) / T
    b = np.concatenate([Z1.T @ data.y[a1:b1], Z2.T @ data.y[a2:b2],
                        _vec(Z1.T @ data.X[a1:b1]), _vec(Z2.T @ data.X[a2:b2])]) / T
    return G, b


def _weighted_ls(G: np.ndarray, b: np.ndarray, S: np.ndarray, T: int):
    check_cond(S, SingularWeighting, "stacked moment covariance")
    SiG = solve_spd(S, G, SingularWeighting, "stacked moment covariance")
    info = G.T @ SiG
    beta = solve_spd(info, SiG.T @ b, SingularDesign, "two-sample GMM information")
    m = b - G @ beta
    obj = float(T * m @ solve_spd(S, m, SingularWeighting))
    return beta, inv_spd(info, SingularDesign, "two-sample GMM information") / T, obj


def tsgmm(data: Dataset, break_idx: int | None, cfg: HacConfig | None = None,
          trimming: float | None = None, zero_cross: bool = False) -> EstimateResult:
    """Two-sample GMM with a common first stage.

    First-step residuals come from split-sample 2SLS (structural moments)
    and per-segment OLS (first-stage moments). ``zero_cross`` drops the
    covariance between the two kinds of moments from the weighting, which
    makes the structural part separate from the first-stage part.

    With ``break_idx=None`` the first-stage moments are exactly identified
    and the structural estimate coincides with full-sample GMM.
    """
    part = _partition(data, break_idx, trimming)
    T, p, q, p2 = data.T, data.p, data.q, data.p2
    if part.n_regimes == 1:
        g = split_sample_gmm(data, None, cfg)
        return EstimateResult(Kind.TSGMM, g.params, g.avar_theta, None, g.diagnostics)
    W = data.W
    fs = ols_first_stage(data, part)
    bounds = part.bounds(T)
    theta1 = [tsls(data.Z[a:b], W[a:b], data.y[a:b]) for a, b in bounds]
    u = np.concatenate([data.y[a:b] - W[a:b] @ th for (a, b), th in zip(bounds, theta1)])
    V = fs.residuals
    blocks = []
    for a, b in bounds:
        blk = segment_blocks(data.Z[a:b], u[a:b], V[a:b], T, cfg)
        if zero_cross:
            blk = CovBlocks(blk.su, np.zeros_like(blk.suv), blk.sv)
        blocks.append(blk)
    G, bvec = tsgmm_system(data, part)
    nu = 2 * q
    u_exact, v_exact = _exact_fit(u, data.y), _exact_fit(V, data.X)
    diagnostics: dict = {"objective": 0.0}
    if u_exact or v_exact:
        beta = np.empty(2 * p + p2 * q)
        avar = np.zeros((beta.size, beta.size))
        if u_exact:
            beta[:2 * p] = np.concatenate(theta1)
        else:
            g = split_sample_gmm(data, break_idx, cfg, trimming)
            beta[:2 * p] = g.theta
            avar[:2 * p, :2 * p] = g.avar_theta
        if v_exact:
            beta[2 * p:] = _vec(ols_first_stage(data).pi_per_segment[0])
        else:
            Sv = sla.block_diag(*[blk.sv for blk in blocks])
            bp, ap, _ = _weighted_ls(G[nu:, 2 * p:], bvec[nu:], Sv, T)
            beta[2 * p:] = bp
            avar[2 * p:, 2 * p:] = ap
        diagnostics["exact_fit"] = {"structural": u_exact, "first_stage": v_exact}
    else:
        S = psd_repair(stacked_covariance(*blocks))
        beta, avar, obj = _weighted_ls(G, bvec, S, T)
        diagnostics = {"objective": obj, "cond_weighting": float(np.linalg.cond(S))}
    thetas = (beta[:p], beta[p:2 * p])
    pi = beta[2 * p:].reshape(q, p2, order="F")
    params = ParamSet(thetas, (pi,), part)
    avar = sym(avar)
    return EstimateResult(Kind.TSGMM, params, avar[:2 * p, :2 * p], avar[2 * p:, 2 * p:],
                          diagnostics)


ESTIMATORS = {
    Kind.SPLIT_GMM: split_sample_gmm,
    Kind.TS2SLS: ts2sls,
    Kind.TSGMM: tsgmm,
}


def estimate(kind: Kind | str, data: Dataset, break_idx: int | None,
             cfg: HacConfig | None = None, trimming: float | None = None) -> EstimateResult:
    return ESTIMATORS[Kind(kind)](data, break_idx, cfg, trimming)


def efficiency_gap(gmm: EstimateResult, other: EstimateResult) -> np.ndarray:
    """Eigenvalues of ``avar(gmm) - avar(other)``, ascending."""
    return np.linalg.eigvalsh(sym(gmm.avar_theta - other.avar_theta))


def confidence_interval(res: EstimateResult, level: float = 0.95) -> np.ndarray:
    """Normal-approximation intervals, one row ``(lo, hi)`` per coefficient."""
    z = norm.ppf(0.5 + level / 2.0)
    se = res.std_errors
    return np.column_stack([res.theta - z * se, res.theta + z * se])
