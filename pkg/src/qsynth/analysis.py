"""DTI fitting, FA/MD maps and image-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .qspace import SamplingScheme

SIGNAL_FLOOR = 1e-8
EIG_FLOOR = 1e-7
PSNR_CAP = 100.0
RMSE_ZERO = 1e-10
COND_LIMIT = 1e10

# standard 5-scale MS-SSIM exponents; truncated to the scale count and renormalized
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW, SSIM_SIGMA, SSIM_K1, SSIM_K2 = 11, 1.5, 0.01, 0.03


class ConditioningError(ValueError):
    """Design matrix is rank-deficient (e.g. collinear gradient directions)."""


@dataclass
class DtiFit:
    tensors: np.ndarray  # (H, W, 3, 3)
    fa: np.ndarray
    md: np.ndarray
    residual: np.ndarray
    mask: np.ndarray


@dataclass
class MetricReport:
    rmse: float
    psnr: float
    ms_ssim: float
    per_map: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "psnr": self.psnr, "ms_ssim": self.ms_ssim,
                "per_map": self.per_map}


def fa_md(tensor) -> tuple[float, float]:
    """Fractional anisotropy and mean diffusivity of one symmetric 3x3 tensor."""
    T = np.asarray(tensor, dtype=np.float64)
    md = np.trace(T) / 3.0
    norm = np.linalg.norm(T)
    if norm == 0:
        return 0.0, float(md)
    fa = np.sqrt(1.5) * np.linalg.norm(T - md * np.eye(3)) / norm
    return float(np.clip(fa, 0.0, 1.0)), float(md)


def design_matrix(scheme: SamplingScheme) -> np.ndarray:
    """Rows ``[1, -b gx^2, -b gy^2, -b gz^2, -2b gx gy, -2b gx gz, -2b gy gz]``."""
    b = scheme.bvals
    g = scheme.bvecs
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    return np.column_stack([
        np.ones_like(b),
        -b * gx * gx, -b * gy * gy, -b * gz * gz,
        -2 * b * gx * gy, -2 * b * gx * gz, -2 * b * gy * gz,
    ])


def fit_dti(dwis: np.ndarray, scheme: SamplingScheme, mask: np.ndarray | None = None) -> DtiFit:
    """Ordinary least squares on the log signal, one solve for all masked voxels.

    Negative eigenvalues are clamped to ``EIG_FLOOR`` after symmetrization.
    ``residual`` is the RMS log-signal residual of the linear fit.
    """
    dwis = np.asarray(dwis, dtype=np.float64)
    if dwis.ndim != 3 or dwis.shape[0] != len(scheme):
        raise ValueError(f"dwis {dwis.shape} do not match a {len(scheme)}-point scheme")
    shells = set(scheme.bvals[scheme.bvals > 0].tolist())
    if len(shells) > 1:
        raise ValueError(f"DTI fit expects b=0 plus one shell, got shells {sorted(shells)}")
    if len(scheme) < 7:
        raise ValueError(f"need at least 7 measurements, got {len(scheme)}")
    H, W = dwis.shape[1:]
    if mask is None:
        mask = np.ones((H, W), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    X = design_matrix(scheme)
    if np.linalg.matrix_rank(X) < 7 or np.linalg.cond(X) > COND_LIMIT:
        raise ConditioningError("gradient directions do not determine a tensor")

    y = np.log(np.maximum(dwis[:, mask], SIGNAL_FLOOR))  # (N, V)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)  # (7, V)
    resid = np.sqrt(np.mean((X @ coef - y) ** 2, axis=0))
    dxx, dyy, dzz, dxy, dxz, dyz = coef[1:]
    D = np.stack([
        np.stack([dxx, dxy, dxz], -1),
        np.stack([dxy, dyy, dyz], -1),
        np.stack([dxz, dyz, dzz], -1),
    ], -2)
    D = 0.5 * (D + np.swapaxes(D, -1, -2))
    evals, evecs = np.linalg.eigh(D)
    if np.any(evals < EIG_FLOOR):
        clamped = np.maximum(evals, EIG_FLOOR)
        bad = np.any(evals < EIG_FLOOR, axis=1)
        D[bad] = np.einsum("vij,vj,vkj->vik", evecs[bad], clamped[bad], evecs[bad])

    tensors = np.zeros((H, W, 3, 3))
    tensors[mask] = D
    fa = np.zeros((H, W))
    md = np.zeros((H, W))
    md_v = np.trace(D, axis1=-2, axis2=-1) / 3.0
    dev = np.linalg.norm(D - md_v[:, None, None] * np.eye(3), axis=(-2, -1))
    nrm = np.linalg.norm(D, axis=(-2, -1))
    fa[mask] = np.clip(np.sqrt(1.5) * dev / np.where(nrm > 0, nrm, 1.0), 0.0, 1.0)
    md[mask] = md_v
    residual = np.zeros((H, W))
    residual[mask] = resid
    return DtiFit(tensors=tensors, fa=fa, md=md, residual=residual, mask=mask)


def shell_subset(scheme: SamplingScheme, b: float, tol: float = 1.0) -> list[int]:
    """Indices of b=0 points plus the points on shell ``b`` (within ``tol``)."""
    return [i for i, p in enumerate(scheme) if p.b == 0 or abs(p.b - b) <= tol]


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b, mask=None) -> float:
    a, b = _check_pair(a, b)
    d = a - b
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
    return float(np.sqrt(np.mean(d * d)))


def psnr(a, b, data_range: float = 1.0, mask=None) -> float:
    e = rmse(a, b, mask)
    if e < RMSE_ZERO:
        return PSNR_CAP
    return float(min(20.0 * np.log10(data_range / e), PSNR_CAP))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    out = correlate1d(correlate1d(img, win, axis=0, mode="reflect"), win, axis=1, mode="reflect")
    pad = (len(win) - 1) // 2
    return out[pad:img.shape[0] - pad, pad:img.shape[1] - pad]


def _ssim_terms(a, b, data_range):
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale Gaussian-window SSIM (valid region only)."""
    a, b = _check_pair(a, b)
    return _ssim_terms(a, b, data_range)[0]


def ms_ssim(a, b, data_range: float = 1.0, scales: int = 3) -> float:
    """Multi-scale SSIM with 2x2 average-pool downsampling between scales."""
    a, b = _check_pair(a, b)
    if a.ndim != 2:
        raise ValueError("ms_ssim expects 2D maps")
    min_size = SSIM_WINDOW * 2 ** (scales - 1)
    if min(a.shape) < max(min_size, 32):
        raise ValueError(f"image {a.shape} too small for {scales}-scale MS-SSIM")
    weights = np.array(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    values = []
    for s in range(scales):
        full, cs = _ssim_terms(a, b, data_range)
        values.append(max(full if s == scales - 1 else cs, 0.0))
        if s < scales - 1:
            h, w = (a.shape[0] // 2) * 2, (a.shape[1] // 2) * 2
            a = a[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
            b = b[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    return float(np.prod(np.power(values, weights)))


def metric_report(maps_a: dict, maps_b: dict, mask=None, data_ranges: dict | None = None) -> MetricReport:
    """Per-map RMSE/PSNR (within ``mask``) and MS-SSIM; top-level values are means over maps."""
    data_ranges = data_ranges or {}
    per = {}
    for name in maps_a:
        if name not in maps_b:
            raise ValueError(f"map {name!r} missing from second input")
        a, b = maps_a[name], maps_b[name]
        dr = data_ranges.get(name, 1.0)
        per[name] = {
            "rmse": rmse(a, b, mask),
            "psnr": psnr(a, b, dr, mask),
            "ms_ssim": ms_ssim(a, b, dr),
        }
    keys = ("rmse", "psnr", "ms_ssim")
    agg = {k: float(np.mean([v[k] for v in per.values()])) for k in keys}
    return MetricReport(per_map=per, **agg)
