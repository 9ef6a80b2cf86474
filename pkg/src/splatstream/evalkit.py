"""Image- and geometry-quality metrics: PSNR, SSIM, distance-threshold
F-score, and a per-view metric series for drift monitoring.

SSIM follows the standard 11x11 Gaussian window (sigma 1.5) with
C1 = 0.01^2, C2 = 0.03^2 on the [0, 1] range. Windows are evaluated in
"valid" mode only (fully inside the image), so the minimum image dimension
is 11. `ssim_with_grad` also returns the analytic derivative of the mean
SSIM with respect to the first image, which the training loss consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InvalidParameterError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; math.inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise InvalidParameterError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _window_mean(img):
    """Gaussian-weighted local means, cropped to valid window centers.

    img: (H, W) or (H, W, C); output loses `half` pixels on each border.
    """
    half = SSIM_WINDOW // 2
    out = correlate1d(img, _KERNEL, axis=0)
    out = correlate1d(out, _KERNEL, axis=1)
    return out[half:-half, half:-half]


def _scatter_window(grad_valid, shape):
    """Transpose of _window_mean: spread per-window gradients back to pixels."""
    half = SSIM_WINDOW // 2
    full = np.zeros(shape, dtype=np.float64)
    full[half:-half, half:-half] = grad_valid
    full = correlate1d(full, _KERNEL, axis=0)
    full = correlate1d(full, _KERNEL, axis=1)
    return full


def _check_ssim_inputs(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise InvalidParameterError(
            f"image too small for {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    return a, b


def ssim(a, b) -> float:
    """Mean local SSIM over valid window positions and channels."""
    a, b = _check_ssim_inputs(a, b)
    mu_a = _window_mean(a)
    mu_b = _window_mean(b)
    var_a = _window_mean(a * a) - mu_a**2
    var_b = _window_mean(b * b) - mu_b**2
    cov = _window_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim_with_grad(a, b):
    """(mean SSIM, d meanSSIM / d a). Gradient has the shape of `a`."""
    a, b = _check_ssim_inputs(a, b)
    mu_a = _window_mean(a)
    mu_b = _window_mean(b)
    var_a = _window_mean(a * a) - mu_a**2
    var_b = _window_mean(b * b) - mu_b**2
    cov = _window_mean(a * b) - mu_a * mu_b

    a1 = 2 * mu_a * mu_b + SSIM_C1
    a2 = 2 * cov + SSIM_C2
    b1 = mu_a**2 + mu_b**2 + SSIM_C1
    b2 = var_a + var_b + SSIM_C2
    r1 = a1 / b1
    r2 = a2 / b2
    s = r1 * r2
    count = s.size

    # partials of S at each window position, factored so that every term
    # cancels exactly (bitwise) when the images are identical
    d_mu_a = 2.0 * r2 / b1 * (mu_b - mu_a * r1)
    d_var_a = -s / b2
    d_cov = 2.0 * r1 / b2

    # chain through mu_a = w*a, var_a = w*a^2 - mu_a^2, cov = w*(ab) - mu_a mu_b
    base = d_mu_a - 2 * mu_a * d_var_a - mu_b * d_cov
    grad = (_scatter_window(base, a.shape)
            + 2 * a * _scatter_window(d_var_a, a.shape)
            + b * _scatter_window(d_cov, a.shape)) / count

    grad = grad.reshape(a.shape)
    if grad.shape[-1] == 1:
        grad = grad[..., 0]
    return float(np.mean(s)), grad


def fscore(est_points, ref_points, tau: float) -> dict:
    """Distance-threshold precision/recall/F between two point sets.

    precision: fraction of est within tau of some ref point; recall the
    symmetric quantity; f the harmonic mean (0 when both are 0).
    """
    est = np.asarray(est_points, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(ref_points, dtype=np.float64).reshape(-1, 3)
    if est.shape[0] == 0 or ref.shape[0] == 0:
        raise InvalidParameterError("point sets must be non-empty")
    if tau <= 0:
        raise InvalidParameterError("tau must be positive")
    precision = float(np.mean(_within_tau(est, ref, tau)))
    recall = float(np.mean(_within_tau(ref, est, tau)))
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "f": f}


def _within_tau(query, targets, tau: float) -> np.ndarray:
    """Boolean per query point: any target within tau. Grid hash at cell=tau;
    neighbors can only live in the 27 adjacent cells."""
    cells: dict[tuple, list] = {}
    t_idx = np.floor(targets / tau).astype(np.int64)
    for i, key in enumerate(map(tuple, t_idx)):
        cells.setdefault(key, []).append(i)
    q_idx = np.floor(query / tau).astype(np.int64)
    out = np.zeros(len(query), dtype=bool)
    tau2 = tau * tau
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
               for dz in (-1, 0, 1)]
    for qi, (key, q) in enumerate(zip(map(tuple, q_idx), query)):
        for off in offsets:
            cand = cells.get((key[0] + off[0], key[1] + off[1], key[2] + off[2]))
            if not cand:
                continue
            d = targets[cand] - q
            if (np.einsum("ij,ij->i", d, d) <= tau2).any():
                out[qi] = True
                break
    return out


@dataclass
class MetricSeries:
    """Per-view PSNR/SSIM records with running means for drift monitoring."""

    records: list = field(default_factory=list)
    _psnr_sum: float = 0.0
    _ssim_sum: float = 0.0
    _finite_psnr: int = 0

    def add(self, view_id, psnr_db: float, ssim_val: float):
        if not (ssim_val >= -1.0 and ssim_val <= 1.0):
            raise InvalidParameterError(f"ssim out of range: {ssim_val}")
        if not (psnr_db >= 0.0 or math.isinf(psnr_db)):
            raise InvalidParameterError(f"psnr out of range: {psnr_db}")
        self.records.append((view_id, float(psnr_db), float(ssim_val)))
        if math.isfinite(psnr_db):
            self._psnr_sum += psnr_db
            self._finite_psnr += 1
        self._ssim_sum += ssim_val

    def mean_psnr(self) -> float:
        """Mean over finite PSNR records (identical views are excluded)."""
        if self._finite_psnr == 0:
            return math.inf if self.records else 0.0
        return self._psnr_sum / self._finite_psnr

    def mean_ssim(self) -> float:
        return self._ssim_sum / len(self.records) if self.records else 0.0

    def to_lines(self) -> list[str]:
        return [f"view={v} psnr={p!r} ssim={s!r}" for v, p, s in self.records]

    @classmethod
    def from_lines(cls, lines) -> "MetricSeries":
        series = cls()
        for line in lines:
            line = line.strip()
            if not line:
                continue
            fields = dict(part.split("=", 1) for part in line.split())
            series.add(fields["view"], float(fields["psnr"]), float(fields["ssim"]))
        return series
