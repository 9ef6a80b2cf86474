import math

import numpy as np
import pytest

from splatstream.errors import InvalidParameterError
from splatstream.evalkit import (
    MetricSeries,
    _gaussian_kernel,
    fscore,
    psnr,
    ssim,
    ssim_with_grad,
)


def scalar_ssim_oracle(a, b):
    """Direct sliding-window reimplementation, one window at a time."""
    win = np.outer(_gaussian_kernel(), _gaussian_kernel())
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w, c = a.shape
    vals = []
    for ch in range(c):
        for i in range(h - 10):
            for j in range(w - 10):
                pa = a[i:i + 11, j:j + 11, ch]
                pb = b[i:i + 11, j:j + 11, ch]
                mu_a = (win * pa).sum()
                mu_b = (win * pb).sum()
                var_a = (win * pa * pa).sum() - mu_a**2
                var_b = (win * pb * pb).sum() - mu_b**2
                cov = (win * pa * pb).sum() - mu_a * mu_b
                num = (2 * mu_a * mu_b + 0.01**2) * (2 * cov + 0.03**2)
                den = (mu_a**2 + mu_b**2 + 0.01**2) * (var_a + var_b + 0.03**2)
                vals.append(num / den)
    return float(np.mean(vals))


class TestPsnr:
    def test_identical_is_infinite(self):
        a = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(a, a) == math.inf

    def test_uniform_difference_closed_form(self):
        a = np.zeros((16, 16, 3))
        b = a + 1.0 / 255.0
        assert psnr(a, b, peak=1.0) == pytest.approx(20 * math.log10(255), abs=1e-3)

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(1)
        a = rng.random((12, 9, 3))
        b = rng.random((12, 9, 3))
        mse = np.mean((a - b) ** 2)
        assert psnr(a, b) == pytest.approx(10 * math.log10(1.0 / mse), abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((7, 7)), rng.random((7, 7))
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidParameterError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSsim:
    def test_identical_is_one(self):
        a = np.random.default_rng(3).random((16, 16, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_binary_matches_oracle(self):
        rng = np.random.default_rng(4)
        a = (rng.random((14, 14)) > 0.5).astype(np.float64)
        b = 1.0 - a
        assert ssim(a, b) == pytest.approx(scalar_ssim_oracle(a, b), abs=1e-9)

    def test_shifted_matches_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.random((13, 15, 3))
        b = np.clip(a + 0.5, 0.0, 1.0)
        val = ssim(a, b)
        assert val < 1.0
        assert val == pytest.approx(scalar_ssim_oracle(a, b), abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((12, 12)), rng.random((12, 12))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_too_small_rejected(self):
        with pytest.raises(InvalidParameterError):
            ssim(np.zeros((10, 30)), np.zeros((10, 30)))

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        a = rng.random((12, 13, 3))
        b = rng.random((12, 13, 3))
        val, grad = ssim_with_grad(a, b)
        assert val == pytest.approx(ssim(a, b), abs=1e-12)
        eps = 1e-6
        for _ in range(20):
            i, j, c = rng.integers(12), rng.integers(13), rng.integers(3)
            ap = a.copy(); ap[i, j, c] += eps
            am = a.copy(); am[i, j, c] -= eps
            fd = (ssim(ap, b) - ssim(am, b)) / (2 * eps)
            assert grad[i, j, c] == pytest.approx(fd, rel=1e-4, abs=1e-10)


class TestFscore:
    def test_identical_sets(self):
        pts = np.random.default_rng(8).random((50, 3))
        out = fscore(pts, pts, tau=0.01)
        assert out == {"precision": 1.0, "recall": 1.0, "f": 1.0}

    def test_disjoint_sets(self):
        a = np.zeros((5, 3))
        b = np.ones((5, 3)) * 100
        out = fscore(a, b, tau=0.5)
        assert out == {"precision": 0.0, "recall": 0.0, "f": 0.0}

    def test_outlier_fraction(self):
        # est = ref plus 50% far outliers: precision 2/3, recall 1
        rng = np.random.default_rng(9)
        ref = rng.random((10000, 3))
        outliers = rng.random((5000, 3)) + 50.0
        est = np.concatenate([ref, outliers])
        out = fscore(est, ref, tau=0.05)
        assert out["precision"] == pytest.approx(2 / 3, abs=0.02)
        assert out["recall"] == 1.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(10)
        est = rng.random((200, 3))
        ref = rng.random((150, 3))
        tau = 0.07
        out = fscore(est, ref, tau)
        d = np.linalg.norm(est[:, None, :] - ref[None, :, :], axis=-1)
        prec = float(np.mean(d.min(axis=1) <= tau))
        rec = float(np.mean(d.min(axis=0) <= tau))
        assert out["precision"] == pytest.approx(prec, abs=1e-12)
        assert out["recall"] == pytest.approx(rec, abs=1e-12)

    def test_precision_recall_duality(self):
        rng = np.random.default_rng(11)
        a = rng.random((80, 3))
        b = rng.random((60, 3))
        assert fscore(a, b, 0.1)["precision"] == fscore(b, a, 0.1)["recall"]

    def test_empty_rejected(self):
        with pytest.raises(InvalidParameterError):
            fscore(np.zeros((0, 3)), np.zeros((3, 3)), 0.1)


class TestMetricSeries:
    def test_running_mean_matches_batch(self):
        rng = np.random.default_rng(12)
        series = MetricSeries()
        vals = [(f"v{i}", rng.uniform(10, 40), rng.uniform(0, 1)) for i in range(50)]
        for v, p, s in vals:
            series.add(v, p, s)
        assert series.mean_psnr() == pytest.approx(
            np.mean([p for _, p, _ in vals]), abs=1e-12)
        assert series.mean_ssim() == pytest.approx(
            np.mean([s for _, _, s in vals]), abs=1e-12)

    def test_infinite_psnr_excluded_from_mean(self):
        series = MetricSeries()
        series.add("a", math.inf, 1.0)
        series.add("b", 30.0, 0.9)
        assert series.mean_psnr() == 30.0

    def test_line_roundtrip(self):
        series = MetricSeries()
        series.add("view_0", 23.456789, 0.87654321)
        series.add("view_1", math.inf, 1.0)
        again = MetricSeries.from_lines(series.to_lines())
        assert again.records == series.records
