"""Small dense linear-algebra helpers with deterministic failure modes."""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .errors import NotPd, NotPsd, SingularDesign

COND_MAX = 1e12
PINV_RCOND = 1e-12


def sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def check_cond(a: np.ndarray, error: type[Exception] = SingularDesign, what: str = "matrix") -> None:
    if not np.all(np.isfinite(a)):
        raise error(f"{what} has non-finite entries")
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > COND_MAX:
        raise error(f"{what} is singular or ill-conditioned (condition number {cond:.3g})")


def solve_spd(a: np.ndarray, b: np.ndarray, error: type[Exception] = SingularDesign,
              what: str = "matrix") -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a``.

    Cholesky first; an SVD pseudo-inverse is the fallback when the
    factorisation fails but the condition number is acceptable.
    """
    a = sym(np.asarray(a, dtype=float))
    check_cond(a, error, what)
    try:
        c = sla.cho_factor(a, lower=True, check_finite=False)
        return sla.cho_solve(c, b, check_finite=False)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(a, rcond=PINV_RCOND, hermitian=True) @ b


def inv_spd(a: np.ndarray, error: type[Exception] = SingularDesign, what: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return sym(solve_spd(a, np.eye(a.shape[0]), error, what))


def inv_sqrt_spd(a: np.ndarray, error: type[Exception] = NotPd, what: str = "matrix") -> np.ndarray:
    """Symmetric inverse square root of a positive definite matrix."""
    w, v = np.linalg.eigh(sym(a))
    if w.min() <= 0 or w.max() / w.min() > COND_MAX:
        raise error(f"{what} is not positive definite (eigenvalues {w.min():.3g}..{w.max():.3g})")
    return sym((v / np.sqrt(w)) @ v.T)


def psd_repair(a: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Clip tiny negative eigenvalues of a symmetric matrix to zero.

    Eigenvalues below ``-tol * ||a||`` raise :class:`NotPsd`.
    """
    a = sym(a)
    w, v = np.linalg.eigh(a)
    scale = max(np.abs(w).max(initial=0.0), np.finfo(float).tiny)
    if w.min() >= 0:
        return a
    if w.min() < -tol * scale:
        raise NotPsd(f"matrix has eigenvalue {w.min():.3g} (norm {scale:.3g})")
    w = np.clip(w, 0.0, None)
    return sym((v * w) @ v.T)


def check_pd(a: np.ndarray, what: str = "matrix") -> None:
    w = np.linalg.eigvalsh(sym(a))
    if w.min() <= 0:
        raise NotPd(f"{what} is not positive definite (min eigenvalue {w.min():.3g})")


def quadratic_form_inv(delta: np.ndarray, v: np.ndarray, atol: float = 0.0) -> float:
    """``delta' v^{-1} delta`` with a degenerate-covariance convention.

    ``delta`` with norm at most ``atol`` gives zero. When ``v`` is singular
    the form is evaluated on the range of ``v``; a component of ``delta``
    outside that range makes the form infinite.
    """
    delta = np.asarray(delta, dtype=float)
    dnorm = float(np.linalg.norm(delta))
    if dnorm <= atol:
        return 0.0
    w, vec = np.linalg.eigh(sym(np.asarray(v, dtype=float)))
    scale = float(np.abs(w).max(initial=0.0))
    if scale == 0.0:
        return float("inf")
    keep = w > scale * PINV_RCOND
    coords = vec.T @ delta
    if np.linalg.norm(coords[~keep]) > 1e-9 * dnorm:
        return float("inf")
    return float(np.sum(coords[keep] ** 2 / w[keep]))


def quadratic_form_inv_batch(delta: np.ndarray, v: np.ndarray, atol: np.ndarray) -> np.ndarray:
    """Row-wise :func:`quadratic_form_inv` for stacks ``delta (n, p)``, ``v (n, p, p)``."""
    delta = np.asarray(delta, dtype=float)
    v = 0.5 * (v + np.swapaxes(v, -1, -2))
    w, vec = np.linalg.eigh(v)
    scale = np.abs(w).max(axis=1)
    dnorm = np.linalg.norm(delta, axis=1)
    keep = w > (scale * PINV_RCOND)[:, None]
    coords = np.einsum("npk,np->nk", vec, delta)
    outside = np.linalg.norm(np.where(keep, 0.0, coords), axis=1)
    safe_w = np.where(keep, w, 1.0)
    form = np.sum(np.where(keep, coords ** 2 / safe_w, 0.0), axis=1)
    form = np.where((scale == 0.0) | (outside > 1e-9 * dnorm), np.inf, form)
    return np.where(dnorm <= atol, 0.0, form)
