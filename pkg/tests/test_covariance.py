from __future__ import annotations

import numpy as np
import pytest

from breakiv._linalg import psd_repair
from breakiv.covariance import HacConfig, Kernel, hac_lrv, moment_blocks, segment_blocks
from breakiv.data import Dataset, ParamSet, Partition
from breakiv.errors import BandwidthTooLarge, EmptyInput, NotPsd, ValidationError


def _brute_lrv(m: np.ndarray, lags: int, bartlett: bool) -> np.ndarray:
    n, d = m.shape
    out = np.zeros((d, d))
    for j in range(-lags, lags + 1):
        w = 1.0 - abs(j) / (lags + 1.0) if bartlett else 1.0
        for t in range(n):
            s = t - j
            if 0 <= s < n:
                out += w * np.outer(m[t], m[s])
    return out / n


class TestHacConfig:
    def test_auto_rule(self):
        cfg = HacConfig(Kernel.BARTLETT, "auto")
        assert cfg.lags(100) == 4
        assert cfg.lags(400) == 5
        assert cfg.lags(2) == 1

    @pytest.mark.parametrize("bw", [-1, 1.5, "six"])
    def test_bad_bandwidth(self, bw):
        with pytest.raises(ValidationError):
            HacConfig(bandwidth=bw)

    def test_bartlett_weights(self):
        np.testing.assert_allclose(HacConfig("bartlett", 3).weights(3), [0.75, 0.5, 0.25])


class TestHacLrv:
    @pytest.mark.parametrize("kernel,lags", [("truncated", 0), ("truncated", 2), ("bartlett", 3)])
    def test_matches_double_sum(self, kernel, lags):
        m = np.random.default_rng(0).standard_normal((25, 3))
        got = hac_lrv(m, HacConfig(kernel, lags))
        np.testing.assert_allclose(got, _brute_lrv(m, lags, kernel == "bartlett"), rtol=1e-12)

    def test_ma1_long_run_variance(self):
        # m_t = e_t + 0.5 e_{t-1} has long-run variance 1.25 + 2 * 0.5 = 2.25
        e = np.random.default_rng(1).standard_normal(400_001)
        m = e[1:] + 0.5 * e[:-1]
        assert abs(hac_lrv(m, HacConfig("truncated", 1))[0, 0] - 2.25) < 0.03
        cfg = HacConfig("bartlett", "auto")
        # Bartlett shrinks the lag-1 term by its weight
        target = 1.25 + cfg.weights(cfg.lags(m.size))[0]
        assert abs(hac_lrv(m, cfg)[0, 0] - target) < 0.07
        assert abs(target - 2.25) < 0.05
        assert abs(hac_lrv(m)[0, 0] - 1.25) < 0.02

    def test_bartlett_is_psd(self):
        m = np.random.default_rng(2).standard_normal((30, 6))
        ev = np.linalg.eigvalsh(hac_lrv(m, HacConfig("bartlett", 10)))
        assert ev.min() >= -1e-12 * ev.max()

    def test_errors(self):
        with pytest.raises(EmptyInput):
            hac_lrv(np.ones((1, 2)))
        with pytest.raises(BandwidthTooLarge):
            hac_lrv(np.ones((5, 2)), HacConfig("bartlett", 5))


class TestPsdRepair:
    def test_clips_tiny_negative(self):
        a = np.diag([1.0, -1e-13])
        fixed = psd_repair(a)
        assert np.linalg.eigvalsh(fixed).min() >= 0.0

    def test_rejects_indefinite(self):
        with pytest.raises(NotPsd):
            psd_repair(np.diag([1.0, -1e-3]))


def _mc_like(T: int, rho: float, seed: int) -> tuple[Dataset, ParamSet]:
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(T)
    e = rng.standard_normal((T, 2))
    u = e[:, 0]
    v = rho * e[:, 0] + np.sqrt(1 - rho ** 2) * e[:, 1]
    x = 1.0 + z + v
    y = x + u
    data = Dataset.from_arrays(y, x, np.ones((T, 1)), z)
    part = Partition((int(0.4 * T),))
    params = ParamSet((np.array([0.0, 1.0]), np.array([0.0, 1.0])), (np.ones((2, 1)),), part)
    return data, params


class TestMomentBlocks:
    def test_cross_block_tracks_error_correlation(self):
        T = 20_000
        data, params = _mc_like(T, -0.5, 3)
        cov = moment_blocks(data, params, params.regime_boundaries)
        for share, blk, Q in zip((0.4, 0.6), cov.per_segment, cov.Q):
            np.testing.assert_allclose(Q, share * np.eye(2), atol=0.02)
            np.testing.assert_allclose(blk.suv, -0.5 * share * np.eye(2), atol=0.025)
            np.testing.assert_allclose(blk.su, share * np.eye(2), atol=0.03)

    def test_white_blocks_add_up(self):
        data, params = _mc_like(300, -0.5, 4)
        cov = moment_blocks(data, params, params.regime_boundaries)
        whole = segment_blocks(data.Z, data.y - data.W @ np.array([0.0, 1.0]),
                               data.X - data.Z @ np.ones((2, 1)), data.T)
        total = sum(b.assembled() for b in cov.per_segment)
        np.testing.assert_allclose(total, whole.assembled(), rtol=1e-12)

    def test_assembled_psd(self):
        data, params = _mc_like(200, 0.9, 5)
        cov = moment_blocks(data, params, params.regime_boundaries, HacConfig("bartlett", "auto"))
        for blk in cov.per_segment:
            S = blk.assembled()
            np.testing.assert_allclose(S, S.T)
            assert np.linalg.eigvalsh(S).min() >= 0.0
