"""Error metrics and the bicubic baseline."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class MetricReport:
    rmse: float
    nrmse: float
    mae: float
    mape: float | None  # None when no ground-truth cell is positive
    corr: float
    n_cells: int
    n_slots: int

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, truth) -> MetricReport:
    """Metrics over every cell of every slot.

    MAPE only counts cells whose ground truth is positive.  Corr is Pearson
    over the flattened arrays and 0.0 when either side is constant.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    if truth.ndim == 2:
        pred, truth = pred[None], truth[None]
    p, t = pred.reshape(-1), truth.reshape(-1)
    err = p - t
    rmse = float(np.sqrt(np.mean(err * err)))
    mean_truth = float(np.mean(t))
    nrmse = rmse / mean_truth if mean_truth > 0 else float("nan")
    mae = float(np.mean(np.abs(err)))
    pos = t > 0
    mape = float(np.mean(np.abs(err[pos]) / t[pos])) if pos.any() else None
    pc, tc = p - p.mean(), t - t.mean()
    denom = np.sqrt(np.sum(pc * pc) * np.sum(tc * tc))
    corr = float(np.clip(np.sum(pc * tc) / denom, -1.0, 1.0)) if denom > 0 else 0.0
    return MetricReport(rmse, nrmse, mae, mape, corr, int(t.size), int(truth.shape[0]))


def cubic_kernel(x, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _interp_matrix(size: int, n: int, cubic: bool) -> np.ndarray:
    """Rows map ``size`` source samples to ``n * size`` targets (pixel centers aligned)."""
    M = np.zeros((n * size, size))
    for i in range(n * size):
        src = (i + 0.5) / n - 0.5
        base = int(np.floor(src))
        frac = src - base
        taps = range(-1, 3) if cubic else range(0, 2)
        for k in taps:
            w = cubic_kernel(k - frac) if cubic else 1.0 - abs(k - frac)
            M[i, min(max(base + k, 0), size - 1)] += w
    return M


def bicubic_upsample(coarse, n: int) -> np.ndarray:
    """Interpolate per-cell density (coarse / n^2) onto the fine grid, clamped at 0.

    Accepts ``[..., H, W]``.  Grids smaller than 4 cells on a side fall back
    to bilinear interpolation.
    """
    coarse = np.asarray(coarse, dtype=np.float64)
    H, W = coarse.shape[-2:]
    cubic = min(H, W) >= 4
    if not cubic:
        warnings.warn(f"{H}x{W} grid is too small for bicubic; using bilinear", stacklevel=2)
    Mh = _interp_matrix(H, n, cubic)
    Mw = _interp_matrix(W, n, cubic)
    density = coarse / (n * n)
    out = np.einsum("ih,...hw,jw->...ij", Mh, density, Mw)
    return np.maximum(out, 0.0)
