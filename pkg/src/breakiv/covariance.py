"""Long-run variance estimation and segment-wise moment covariance blocks."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from ._linalg import psd_repair, sym
from .data import Dataset, ParamSet, Partition
from .errors import BandwidthTooLarge, EmptyInput, ValidationError


class Kernel(str, enum.Enum):
    TRUNCATED = "truncated"
    BARTLETT = "bartlett"


AUTO = "auto"


@dataclass(frozen=True)
class HacConfig:
    """Kernel and bandwidth of a long-run variance estimator.

    ``bandwidth`` is a fixed lag count or ``"auto"`` for the Newey-West
    rule ``floor(4 (n/100)^(2/9))``. The default (truncated kernel, zero
    lags) is the heteroskedasticity-robust outer-product estimator.
    """

    kernel: Kernel = Kernel.TRUNCATED
    bandwidth: int | str = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kernel", Kernel(self.kernel))
        bw = self.bandwidth
        if isinstance(bw, str):
            if bw != AUTO:
                raise ValidationError(f"bandwidth must be an integer or 'auto', got {bw!r}")
        elif int(bw) != bw or bw < 0:
            raise ValidationError(f"bandwidth must be a nonnegative integer, got {bw!r}")
        else:
            object.__setattr__(self, "bandwidth", int(bw))

    @property
    def is_white(self) -> bool:
        """True when the estimator reduces to the zero-lag outer product."""
        return self.bandwidth == 0

    def lags(self, n: int) -> int:
        if self.bandwidth == AUTO:
            return min(int(math.floor(4.0 * (n / 100.0) ** (2.0 / 9.0))), n - 1)
        return int(self.bandwidth)

    def weights(self, m: int) -> np.ndarray:
        j = np.arange(1, m + 1)
        if self.kernel is Kernel.BARTLETT:
            return 1.0 - j / (m + 1.0)
        return np.ones(m)

    def to_dict(self) -> dict:
        return {"kernel": self.kernel.value, "bandwidth": self.bandwidth}


def hac_lrv(moments: np.ndarray, cfg: HacConfig | None = None) -> np.ndarray:
    """Kernel-weighted long-run variance of a moment series.

    Parameters
    ----------
    moments : ndarray, shape (n, d)
        One moment vector per period. Not demeaned.
    cfg : HacConfig, optional

    Returns
    -------
    ndarray, shape (d, d)
        ``G0 + sum_j w_j (G_j + G_j')`` with ``G_j = n^-1 sum_t m_t m_{t-j}'``.
    """
    cfg = cfg or HacConfig()
    m = np.asarray(moments, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    n = m.shape[0]
    if n < 2:
        raise EmptyInput(f"need at least 2 moment observations, got {n}")
    lags = cfg.lags(n)
    if lags >= n:
        raise BandwidthTooLarge(f"bandwidth {lags} must be below the sample size {n}")
    out = m.T @ m
    for j, w in zip(range(1, lags + 1), cfg.weights(lags)):
        g = m[j:].T @ m[:-j]
        out += w * (g + g.T)
    return sym(out / n)


@dataclass(frozen=True)
class CovBlocks:
    """Covariance blocks of ``[Z u ; vec(Z v')]`` for one segment.

    ``suv`` is the covariance of the ``vec(Z v')`` part with the ``Z u``
    part, shape ``(p2*q, q)``.
    """

    su: np.ndarray
    suv: np.ndarray
    sv: np.ndarray

    def assembled(self) -> np.ndarray:
        return np.block([[self.su, self.suv.T], [self.suv, self.sv]])


@dataclass(frozen=True)
class MomentCovariance:
    """Segment blocks scaled by segment share, and ``Q_i = T^-1 sum_i Z Z'``."""

    per_segment: tuple[CovBlocks, ...]
    Q: tuple[np.ndarray, ...]


def stacked_moments(Z: np.ndarray, u: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Rows ``h_t = [Z_t u_t ; Z_t v_t1 ; ... ; Z_t v_tp2]``."""
    V = V.reshape(Z.shape[0], -1)
    parts = [Z * u[:, None]] + [Z * V[:, [k]] for k in range(V.shape[1])]
    return np.hstack(parts)


def segment_blocks(Z: np.ndarray, u: np.ndarray, V: np.ndarray, T: int,
                   cfg: HacConfig | None = None) -> CovBlocks:
    """Blocks for one segment, normalized by its length then scaled by ``n/T``."""
    n, q = Z.shape
    S = hac_lrv(stacked_moments(Z, u, V), cfg) * (n / T)
    S = psd_repair(S)
    return CovBlocks(su=S[:q, :q], suv=S[q:, :q], sv=S[q:, q:])


def residuals(data: Dataset, params: ParamSet, part: Partition) -> tuple[np.ndarray, np.ndarray]:
    """Structural and first-stage residuals implied by ``params``.

    A single first-stage matrix applies to every row; otherwise one matrix
    per segment of ``part``.
    """
    T = data.T
    W = data.W
    u = np.empty(T)
    for (a, b), th in zip(params.regime_boundaries.bounds(T), params.theta_per_regime):
        u[a:b] = data.y[a:b] - W[a:b] @ th
    pis = params.pi_per_segment
    V = np.empty((T, data.p2))
    if len(pis) == 1:
        V[:] = data.X - data.Z @ pis[0]
    elif len(pis) == part.n_regimes:
        for (a, b), pi in zip(part.bounds(T), pis):
            V[a:b] = data.X[a:b] - data.Z[a:b] @ pi
    else:
        raise ValidationError(
            f"{len(pis)} first-stage matrices for {part.n_regimes} segments")
    return u, V


def moment_blocks(data: Dataset, params: ParamSet, part: Partition,
                  cfg: HacConfig | None = None) -> MomentCovariance:
    """Per-segment long-run covariance blocks of the stacked IV moments.

    Cross-segment covariances are taken to be zero.
    """
    part.validate(data.T, data.p)
    u, V = residuals(data, params, part)
    T = data.T
    blocks, Q = [], []
    for a, b in part.bounds(T):
        Zs = data.Z[a:b]
        blocks.append(segment_blocks(Zs, u[a:b], V[a:b], T, cfg))
        Q.append(sym(Zs.T @ Zs / T))
    return MomentCovariance(per_segment=tuple(blocks), Q=tuple(Q))
