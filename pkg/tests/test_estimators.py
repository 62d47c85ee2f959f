from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import minimize

from breakiv.covariance import HacConfig
from breakiv.data import Dataset
from breakiv.errors import SegmentTooShort, SingularDesign
from breakiv.estimators import (Kind, confidence_interval, efficiency_gap, estimate,
                                ols_first_stage, split_sample_gmm, ts2sls, tsgmm, tsls)
from breakiv.montecarlo import McConfig, generate_dgp


def _iv_data(T: int, n_iv: int, seed: int, k: int | None = None, noise: float = 1.0) -> Dataset:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((T, n_iv))
    e = rng.standard_normal((T, 2)) * noise
    Z = np.column_stack([np.ones(T), z])
    x = Z.sum(axis=1) + e[:, 1] - 0.5 * e[:, 0]
    k = T if k is None else k
    theta = np.where(np.arange(T)[:, None] < k, [0.5, 1.0], [1.0, 2.0])
    y = theta[:, 0] + theta[:, 1] * x + e[:, 0]
    return Dataset.from_arrays(y, x, np.ones((T, 1)), z)


def _proj(Z: np.ndarray) -> np.ndarray:
    return Z @ np.linalg.pinv(Z)


class TestTwoStageLeastSquares:
    def test_eight_rows_normal_equations(self):
        Z = np.array([[1, 0.5, -1], [1, 1.5, 0.2], [1, -0.3, 0.8], [1, 2.0, 1.1],
                      [1, -1.2, -0.4], [1, 0.7, 0.3], [1, 0.1, -0.9], [1, 1.1, 0.6]])
        x = np.array([0.9, 2.2, 0.4, 3.1, -1.0, 1.3, 0.2, 1.9])
        y = np.array([1.1, 2.9, 0.3, 4.2, -0.8, 1.5, 0.6, 2.4])
        W = np.column_stack([np.ones(8), x])
        P = _proj(Z)
        expected = np.linalg.solve(W.T @ P @ W, W.T @ P @ y)
        np.testing.assert_allclose(tsls(Z, W, y), expected, rtol=1e-12)

    def test_exact_identification_is_simple_iv(self):
        d = _iv_data(120, 1, 0, k=50)
        res = split_sample_gmm(d, 50)
        for (a, b), th in zip(((0, 50), (50, 120)), res.params.theta_per_regime):
            Z, W, y = d.Z[a:b], d.W[a:b], d.y[a:b]
            np.testing.assert_allclose(th, np.linalg.solve(Z.T @ W, Z.T @ y), rtol=1e-10)


class TestTs2sls:
    def test_twelve_rows_hat_matrix(self):
        rng = np.random.default_rng(5)
        T = 12
        z = rng.standard_normal((T, 2))
        x = z.sum(axis=1) + 0.3 * rng.standard_normal(T)
        y = 0.2 + x + rng.standard_normal(T)
        d = Dataset(y, x, np.ones((T, 1)), np.column_stack([np.ones(T), z]))
        res = ts2sls(d, 6)
        What = _proj(d.Z) @ d.W
        for (a, b), th in zip(((0, 6), (6, 12)), res.params.theta_per_regime):
            expected = np.linalg.lstsq(What[a:b], y[a:b], rcond=None)[0]
            np.testing.assert_allclose(th, expected, rtol=1e-10, atol=1e-12)

    def test_no_break_is_full_sample_2sls(self):
        d = _iv_data(200, 3, 1)
        res = ts2sls(d, None)
        np.testing.assert_allclose(res.theta, tsls(d.Z, d.W, d.y), rtol=1e-12)

    def test_cross_regime_covariance_present(self):
        d = _iv_data(400, 1, 2, k=160)
        V = ts2sls(d, 160).avar_theta
        assert np.abs(V[:2, 2:]).max() > 1e-6
        np.testing.assert_allclose(V, V.T)


def _independent_weight(d: Dataset, k: int) -> np.ndarray:
    """Moment covariance built from scratch with the white estimator."""
    T, q = d.T, d.q
    blocks = []
    for a, b in ((0, k), (k, T)):
        Z, W, y, X = d.Z[a:b], d.W[a:b], d.y[a:b], d.X[a:b]
        P = _proj(Z)
        th = np.linalg.lstsq(P @ W, y, rcond=None)[0]
        u = y - W @ th
        V = X - P @ X
        h = np.hstack([Z * u[:, None]] + [Z * V[:, [j]] for j in range(d.p2)])
        blocks.append(h.T @ h / T)
    ku = q
    kv = q * d.p2
    S = np.zeros((2 * ku + 2 * kv, 2 * ku + 2 * kv))
    for i, B in enumerate(blocks):
        iu = slice(i * ku, (i + 1) * ku)
        iv = slice(2 * ku + i * kv, 2 * ku + (i + 1) * kv)
        S[iu, iu] = B[:ku, :ku]
        S[iv, iv] = B[ku:, ku:]
        S[iu, iv] = B[:ku, ku:]
        S[iv, iu] = B[ku:, :ku]
    return S


def _moments(d: Dataset, k: int, beta: np.ndarray) -> np.ndarray:
    p, q, p2 = d.p, d.q, d.p2
    th1, th2 = beta[:p], beta[p:2 * p]
    pi = beta[2 * p:].reshape(q, p2, order="F")
    out = []
    for (a, b), th in (((0, k), th1), ((k, d.T), th2)):
        out.append(d.Z[a:b].T @ (d.y[a:b] - d.W[a:b] @ th))
    for a, b in ((0, k), (k, d.T)):
        out.append((d.Z[a:b].T @ (d.X[a:b] - d.Z[a:b] @ pi)).reshape(-1, order="F"))
    return np.concatenate(out) / d.T


class TestTsgmm:
    def test_closed_form_matches_numerical_minimizer(self):
        d = _iv_data(20, 2, 7, k=10)
        res = tsgmm(d, 10)
        Sinv = np.linalg.inv(_independent_weight(d, 10))

        def obj(beta):
            m = _moments(d, 10, beta)
            return 1e4 * m @ Sinv @ m

        # objective is quadratic, so its exact Hessian is constant
        size = 2 * d.p + d.q * d.p2
        eye = np.eye(size)
        base = _moments(d, 10, np.zeros(size))
        J = np.column_stack([_moments(d, 10, eye[j]) - base for j in range(size)])
        hess = 2e4 * J.T @ Sinv @ J
        sol = minimize(obj, np.zeros(size), jac=lambda b: 2e4 * J.T @ Sinv @ _moments(d, 10, b),
                       hess=lambda b: hess, method="trust-exact", options={"gtol": 1e-13})
        beta = np.concatenate([res.theta, res.params.pi_per_segment[0].reshape(-1, order="F")])
        np.testing.assert_allclose(sol.x, beta, rtol=1e-8, atol=1e-8)

    def test_zero_cross_separates_structural_part(self):
        d = _iv_data(300, 3, 8, k=120)
        sep = tsgmm(d, 120, zero_cross=True)
        np.testing.assert_allclose(sep.theta, split_sample_gmm(d, 120).theta, rtol=1e-10)
        np.testing.assert_allclose(sep.avar_theta, split_sample_gmm(d, 120).avar_theta, rtol=1e-8)

    def test_no_break_is_full_sample_gmm(self):
        d = _iv_data(200, 3, 9)
        np.testing.assert_allclose(tsgmm(d, None).theta, split_sample_gmm(d, None).theta)

    @pytest.mark.parametrize("kind", list(Kind))
    def test_invariant_to_instrument_rotation(self, kind):
        d = _iv_data(250, 3, 10, k=100)
        rng = np.random.default_rng(0)
        C = np.eye(d.q)
        C[0, 1:] = rng.standard_normal(d.q - 1)
        C[1:, 1:] = rng.standard_normal((d.q - 1, d.q - 1)) + 3 * np.eye(d.q - 1)
        rotated = d.with_instruments(d.Z @ C)
        a = estimate(kind, d, 100)
        b = estimate(kind, rotated, 100)
        np.testing.assert_allclose(a.theta, b.theta, rtol=1e-8)
        np.testing.assert_allclose(a.std_errors, b.std_errors, rtol=1e-7)

    def test_more_precise_than_split_gmm_on_mc_design(self):
        d = generate_dgp(McConfig(n_iv=4, seed=11), 0)
        g, t = split_sample_gmm(d, 160), tsgmm(d, 160)
        assert efficiency_gap(g, t).min() > 0
        assert np.all(t.std_errors <= g.std_errors)

    def test_first_stage_variance_reported(self):
        d = _iv_data(300, 2, 12, k=150)
        res = tsgmm(d, 150)
        assert res.avar_pi.shape == (d.q * d.p2, d.q * d.p2)
        assert np.linalg.eigvalsh(res.avar_pi).min() > 0


class TestExactFit:
    @pytest.mark.parametrize("kind", list(Kind))
    def test_noiseless_data_recovered(self, kind):
        d = _iv_data(100, 2, 13, k=40, noise=0.0)
        res = estimate(kind, d, 40)
        np.testing.assert_allclose(res.theta, [0.5, 1.0, 1.0, 2.0], atol=1e-9)
        assert np.all(res.std_errors < 1e-6)


class TestValidation:
    def test_break_too_close_to_edge(self):
        d = _iv_data(100, 2, 14)
        with pytest.raises(SegmentTooShort):
            tsgmm(d, 3)
        with pytest.raises(SegmentTooShort):
            split_sample_gmm(d, 10, trimming=0.15)

    def test_collinear_instruments(self):
        T = 80
        rng = np.random.default_rng(0)
        z = rng.standard_normal(T)
        d = Dataset.from_arrays(rng.standard_normal(T), z + rng.standard_normal(T),
                                np.ones((T, 1)), np.column_stack([z, 2 * z]))
        with pytest.raises(SingularDesign):
            ols_first_stage(d)

    def test_hac_changes_only_the_variance(self):
        d = _iv_data(300, 2, 15, k=120)
        white = ts2sls(d, 120)
        nw = ts2sls(d, 120, HacConfig("bartlett", "auto"))
        np.testing.assert_allclose(white.theta, nw.theta)
        assert not np.allclose(white.avar_theta, nw.avar_theta)


def test_confidence_interval_width():
    d = _iv_data(200, 1, 16, k=80)
    res = split_sample_gmm(d, 80)
    ci = confidence_interval(res)
    np.testing.assert_allclose(ci[:, 1] - ci[:, 0], 2 * 1.959963984540054 * res.std_errors)
