"""Shared generators for the test suite."""

from __future__ import annotations

import numpy as np

from breakiv.asymptotics import TheoreticalInputs


def random_pd(rng: np.random.Generator, n: int, ridge: float = 0.2) -> np.ndarray:
    a = rng.standard_normal((n, n))
    return a @ a.T / n + ridge * np.eye(n)


def selector_pi(rng: np.random.Generator, q: int, p1: int, p2: int) -> np.ndarray:
    """``[E, Pi]`` with ``E`` picking the first ``p1`` instruments."""
    E = np.eye(q)[:, :p1]
    return np.hstack([E, rng.standard_normal((q, p2))])


def random_inputs(rng: np.random.Generator, q: int = 3, p1: int = 1, p2: int = 2,
                  lambda0: float = 0.4) -> TheoreticalInputs:
    """Population inputs with generic, full-rank covariance blocks."""
    blocks = []
    for _ in range(2):
        M = random_pd(rng, q * (1 + p2))
        blocks.append((M[:q, :q], M[q:, :q], M[q:, q:]))
    (su1, suv1, sv1), (su2, suv2, sv2) = blocks
    return TheoreticalInputs(
        Q1=lambda0 * random_pd(rng, q), Q2=(1 - lambda0) * random_pd(rng, q),
        Su1=su1, Su2=su2, Suv1=suv1, Suv2=suv2, Sv1=sv1, Sv2=sv2,
        pi_a=selector_pi(rng, q, p1, p2),
        theta_x1=rng.standard_normal(p2), theta_x2=rng.standard_normal(p2), lambda0=lambda0)
