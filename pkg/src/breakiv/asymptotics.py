"""Population asymptotic variances of the two-regime IV estimators.

All functions take population moments (second moments of the instruments
per regime and the long-run covariance blocks of the stacked moments) and
return unscaled asymptotic covariance matrices. Ordering of the stacked
parameter vector is ``(theta_1, theta_2)`` with each ``theta_i`` ordered
``(theta_z, theta_x)``; the first-stage coefficients are stacked as
``vec(Pi)`` (column-major, one block of ``q`` rows per endogenous
regressor).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from ._linalg import check_pd, inv_spd, inv_sqrt_spd, solve_spd, sym
from .covariance import CovBlocks
from .errors import DimensionMismatch, NotPd, SingularDesign, SingularWeighting


@dataclass(frozen=True)
class TheoreticalInputs:
    """Population quantities for a single break.

    ``pi_a`` is the ``q x p`` augmented first-stage matrix whose first
    ``p1`` columns select the exogenous regressors from the instruments.
    """

    Q1: np.ndarray
    Q2: np.ndarray
    Su1: np.ndarray
    Su2: np.ndarray
    Suv1: np.ndarray
    Suv2: np.ndarray
    Sv1: np.ndarray
    Sv2: np.ndarray
    pi_a: np.ndarray
    theta_x1: np.ndarray
    theta_x2: np.ndarray
    lambda0: float = 0.5

    def __post_init__(self) -> None:
        for name in ("Q1", "Q2", "Su1", "Su2", "Suv1", "Suv2", "Sv1", "Sv2", "pi_a"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        for name in ("theta_x1", "theta_x2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        q, p = self.pi_a.shape
        p2 = self.theta_x1.size
        if self.Q1.shape != (q, q) or self.Su1.shape != (q, q) or self.Suv1.shape != (p2 * q, q):
            raise DimensionMismatch("inconsistent dimensions among theoretical inputs")
        if self.Sv1.shape != (p2 * q, p2 * q) or self.theta_x2.size != p2 or p2 > p:
            raise DimensionMismatch("inconsistent dimensions among theoretical inputs")

    @property
    def q(self) -> int:
        return self.pi_a.shape[0]

    @property
    def p(self) -> int:
        return self.pi_a.shape[1]

    @property
    def p2(self) -> int:
        return self.theta_x1.size

    def blocks(self) -> tuple[CovBlocks, CovBlocks]:
        return (CovBlocks(self.Su1, self.Suv1, self.Sv1), CovBlocks(self.Su2, self.Suv2, self.Sv2))


def homogeneous_inputs(Q: np.ndarray, phi_u: float, phi_uv, phi_v, pi_a: np.ndarray,
                       theta_x1, theta_x2, lambda0: float) -> TheoreticalInputs:
    """Inputs with ``Q_i = lambda_i Q`` and Kronecker covariance blocks.

    ``Su_i = phi_u Q_i``, ``Suv_i = phi_uv (x) Q_i`` and ``Sv_i = phi_v (x) Q_i``,
    which is what conditionally homoskedastic, serially uncorrelated errors
    with a stationary instrument process produce.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    phi_uv = np.asarray(phi_uv, dtype=float).reshape(-1, 1)
    phi_v = np.atleast_2d(np.asarray(phi_v, dtype=float))
    lam = (lambda0, 1.0 - lambda0)
    Qs = [l * Q for l in lam]
    return TheoreticalInputs(
        Q1=Qs[0], Q2=Qs[1],
        Su1=phi_u * Qs[0], Su2=phi_u * Qs[1],
        Suv1=np.kron(phi_uv, Qs[0]), Suv2=np.kron(phi_uv, Qs[1]),
        Sv1=np.kron(phi_v, Qs[0]), Sv2=np.kron(phi_v, Qs[1]),
        pi_a=pi_a, theta_x1=theta_x1, theta_x2=theta_x2, lambda0=lambda0)


def _a(theta_x: np.ndarray, q: int) -> np.ndarray:
    return np.kron(theta_x.reshape(-1, 1), np.eye(q))


def avar_ts2sls(inp: TheoreticalInputs) -> np.ndarray:
    """Joint asymptotic covariance of the two-sample 2SLS estimator.

    Each regime's estimator is linear in three independent-by-segment
    pieces: its own structural moments, its own first-stage moments and
    the other segment's first-stage moments. The cross-regime block is
    populated.
    """
    q = inp.q
    Q = inp.Q1 + inp.Q2
    Qinv = inv_spd(Q, SingularDesign, "pooled instrument second moments")
    I = np.eye(q)
    a1, a2 = _a(inp.theta_x1, q), _a(inp.theta_x2, q)
    Sv = inp.Sv1 + inp.Sv2
    Z = np.zeros((q, q))

    def D(Qi: np.ndarray, Mt: np.ndarray) -> np.ndarray:
        A = inp.pi_a.T @ Qi @ inp.pi_a
        return solve_spd(A, inp.pi_a.T @ Mt, SingularDesign, "regime design")

    D1 = D(inp.Q1, np.hstack([I, inp.Q2 @ Qinv, -inp.Q1 @ Qinv]))
    D2 = D(inp.Q2, np.hstack([I, inp.Q1 @ Qinv, -inp.Q2 @ Qinv]))

    def omega(Su, Suv, Svi, a):
        return np.block([
            [Su, Suv.T @ a, Z],
            [a.T @ Suv, a.T @ Svi @ a, Z],
            [Z, Z, a.T @ (Sv - Svi) @ a],
        ])

    O1 = omega(inp.Su1, inp.Suv1, inp.Sv1, a1)
    O2 = omega(inp.Su2, inp.Suv2, inp.Sv2, a2)
    O12 = np.block([
        [Z, Z, inp.Suv1.T @ a2],
        [Z, Z, a1.T @ inp.Sv1 @ a2],
        [a1.T @ inp.Suv2, a1.T @ inp.Sv2 @ a2, Z],
    ])
    V11 = D1 @ O1 @ D1.T
    V22 = D2 @ O2 @ D2.T
    V12 = D1 @ O12 @ D2.T
    return sym(np.block([[V11, V12], [V12.T, V22]]))


def avar_gmm(inp: TheoreticalInputs) -> np.ndarray:
    """Block-diagonal asymptotic covariance of split-sample efficient GMM."""
    blocks = []
    for Qi, Su in ((inp.Q1, inp.Su1), (inp.Q2, inp.Su2)):
        G = Qi @ inp.pi_a
        blocks.append(inv_spd(G.T @ inv_spd(Su, SingularWeighting, "Su") @ G,
                              SingularDesign, "GMM information"))
    return sla.block_diag(*blocks)


def stacked_covariance(b1: CovBlocks, b2: CovBlocks) -> np.ndarray:
    """Covariance of the moments ordered ``[Zu_1, Zu_2, vec(Zv')_1, vec(Zv')_2]``."""
    q = b1.su.shape[0]
    k = b1.sv.shape[0]
    S = np.zeros((2 * q + 2 * k, 2 * q + 2 * k))
    for i, b in enumerate((b1, b2)):
        u = slice(i * q, (i + 1) * q)
        v = slice(2 * q + i * k, 2 * q + (i + 1) * k)
        S[u, u] = b.su
        S[v, v] = b.sv
        S[v, u] = b.suv
        S[u, v] = b.suv.T
    return S


def jacobians(inp: TheoreticalInputs) -> tuple[np.ndarray, np.ndarray]:
    """Structural and first-stage Jacobian blocks (signs dropped)."""
    p2 = inp.p2
    gamma1 = sla.block_diag(inp.Q1 @ inp.pi_a, inp.Q2 @ inp.pi_a)
    Ip = np.eye(p2)
    gamma2 = np.vstack([np.kron(Ip, inp.Q1), np.kron(Ip, inp.Q2)])
    return gamma1, gamma2


@dataclass(frozen=True)
class TsgmmAvar:
    """Asymptotic covariances of split-sample GMM and two-sample GMM.

    ``Vtsgmm`` comes from the decomposition ``(Vgmm^-1 + G'G)^-1``;
    ``VtsgmmFull`` is the direct inverse of the joint information matrix,
    whose leading block is the same quantity computed another way.
    """

    Vgmm: np.ndarray
    G: np.ndarray
    Vtsgmm: np.ndarray
    VtsgmmFull: np.ndarray


def _psd_inverse_sqrt_blocks(mats: list[np.ndarray], what: str) -> np.ndarray:
    return sla.block_diag(*[inv_sqrt_spd(m, SingularWeighting, what) for m in mats])


def avar_tsgmm(inp: TheoreticalInputs) -> TsgmmAvar:
    S = stacked_covariance(*inp.blocks())
    check_pd(S, "stacked moment covariance")
    gamma1, gamma2 = jacobians(inp)
    Vgmm = avar_gmm(inp)

    su_inv = [inv_spd(b.su, SingularWeighting, "Su") for b in inp.blocks()]
    schur = [sym(b.sv - b.suv @ si @ b.suv.T) for b, si in zip(inp.blocks(), su_inv)]
    E_ih = _psd_inverse_sqrt_blocks(schur, "first-stage Schur complement")
    J = E_ih @ gamma2
    MJ = np.eye(J.shape[0]) - J @ np.linalg.solve(J.T @ J, J.T)
    H = sla.block_diag(*[b.suv @ si for b, si in zip(inp.blocks(), su_inv)]) @ gamma1
    G = MJ @ E_ih @ H
    Vtsgmm = inv_spd(inv_spd(Vgmm) + G.T @ G, SingularDesign, "two-sample GMM information")

    Gam = sla.block_diag(gamma1, gamma2)
    full = inv_spd(Gam.T @ np.linalg.solve(S, Gam), SingularDesign, "joint information")
    return TsgmmAvar(Vgmm=Vgmm, G=G, Vtsgmm=Vtsgmm, VtsgmmFull=full)


class Order(str, enum.Enum):
    BETTER = "Better"
    EQUAL = "Equal"
    WORSE = "Worse"


@dataclass(frozen=True)
class EfficiencyConditions:
    lhs: float
    delta: float
    rhs6: float
    order_ts2sls_vs_gmm: Order
    order_tsgmm_vs_ts2sls: Order


def _compare(a: float, b: float, better_if_less: bool, tol: float) -> Order:
    if abs(a - b) <= tol:
        return Order.EQUAL
    return Order.BETTER if (a < b) == better_if_less else Order.WORSE


def efficiency_conditions(phi_u: float, phi_uv, phi_v, theta_x, tol: float = 1e-12) -> EfficiencyConditions:
    """Scalar conditions ranking the estimators under homogeneous moments.

    ``lhs = 2 phi_uv' theta_x + theta_x' phi_v theta_x``. Two-sample 2SLS
    beats split-sample GMM when ``lhs < 0`` and ties at ``lhs = 0``;
    two-sample GMM beats two-sample 2SLS when ``lhs > rhs6``.
    """
    phi_uv = np.asarray(phi_uv, dtype=float).reshape(-1)
    phi_v = np.atleast_2d(np.asarray(phi_v, dtype=float))
    theta_x = np.asarray(theta_x, dtype=float).reshape(-1)
    if phi_u <= 0:
        raise NotPd(f"phi_u must be positive, got {phi_u}")
    lhs = float(2.0 * phi_uv @ theta_x + theta_x @ phi_v @ theta_x)
    schur = sym(phi_v - np.outer(phi_uv, phi_uv) / phi_u)
    check_pd(schur, "phi_v - phi_uv phi_uv'/phi_u")
    delta = float(phi_uv @ np.linalg.solve(schur, phi_uv) / phi_u ** 2)
    rhs6 = -delta * phi_u ** 2 / (1.0 + delta * phi_u)
    scale = tol * max(1.0, abs(lhs), abs(rhs6))
    return EfficiencyConditions(
        lhs=lhs, delta=delta, rhs6=rhs6,
        order_ts2sls_vs_gmm=_compare(lhs, 0.0, True, scale),
        order_tsgmm_vs_ts2sls=_compare(rhs6, lhs, True, scale),
    )


@dataclass(frozen=True)
class FirstStageVariances:
    Vols: np.ndarray
    Vgmm: np.ndarray
    Vtsgmm: np.ndarray


def first_stage_variances(Q1, Q2, Su1, Su2, Suv1, Suv2, Sv1, Sv2, pi_a) -> FirstStageVariances:
    """Asymptotic covariances of three estimators of ``vec(Pi)``.

    Pooled OLS, efficient GMM on the per-segment first-stage moments, and
    the first-stage part of two-sample GMM. The last one depends on the
    structural Jacobian and therefore on ``pi_a``.
    """
    pi_a = np.atleast_2d(np.asarray(pi_a, dtype=float))
    q = pi_a.shape[0]
    p2 = np.atleast_2d(Sv1).shape[0] // q
    inp = TheoreticalInputs(Q1, Q2, Su1, Su2, Suv1, Suv2, Sv1, Sv2, pi_a,
                            np.zeros(p2), np.zeros(p2))
    S = stacked_covariance(*inp.blocks())
    check_pd(S, "stacked moment covariance")
    Ip = np.eye(p2)
    K1, K2 = np.kron(Ip, inp.Q1), np.kron(Ip, inp.Q2)
    Kinv = inv_spd(K1 + K2, NotPd, "pooled instrument second moments")
    Vols = sym(Kinv @ (inp.Sv1 + inp.Sv2) @ Kinv)
    info_gmm = sum(K @ inv_spd(Sv, NotPd, "Sv") @ K for K, Sv in ((K1, inp.Sv1), (K2, inp.Sv2)))
    Vgmm = inv_spd(info_gmm, NotPd, "first-stage GMM information")

    gamma1, gamma2 = jacobians(inp)
    sv_inv = [inv_spd(b.sv, NotPd, "Sv") for b in inp.blocks()]
    schur = [sym(b.su - b.suv.T @ si @ b.suv) for b, si in zip(inp.blocks(), sv_inv)]
    E_ih = sla.block_diag(*[inv_sqrt_spd(s, NotPd, "structural Schur complement") for s in schur])
    J = E_ih @ gamma1
    MJ = np.eye(J.shape[0]) - J @ np.linalg.solve(J.T @ J, J.T)
    H = sla.block_diag(*[b.suv.T @ si for b, si in zip(inp.blocks(), sv_inv)]) @ gamma2
    G = MJ @ E_ih @ H
    Vtsgmm = inv_spd(info_gmm + G.T @ G, NotPd, "two-sample GMM first-stage information")
    return FirstStageVariances(Vols=Vols, Vgmm=Vgmm, Vtsgmm=Vtsgmm)
