"""Image-quality metrics: PSNR, SSIM (with gradient) and affine normalization."""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractViolationError

logger = logging.getLogger(__name__)

PEAK = 1.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractViolationError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim != 2:
        raise ContractViolationError(f"expected 2D images, got {pred.ndim}D")
    return pred, gt


# ==========================================
# PSNR
# ==========================================

def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10·log10(PEAK² / MSE); +inf when the images are identical."""
    pred, gt = _check_pair(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


# ==========================================
# SSIM
# ==========================================

def gaussian_window(size: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian taps of odd length."""
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


@lru_cache(maxsize=64)
def blur_operator(n: int, size: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """(n, n) matrix applying the 1D window with symmetric edge reflection."""
    radius = size // 2
    taps = gaussian_window(size, sigma)
    padded = np.pad(np.eye(n), ((radius, radius), (0, 0)), mode="symmetric")
    op = np.zeros((n, n))
    for k, w in enumerate(taps):
        op += w * padded[k:k + n]
    op.setflags(write=False)
    return op


def loss_window(height: int, width: int) -> int:
    """Largest odd window ≤ 11 that fits the image."""
    size = min(SSIM_WINDOW, height, width)
    return size if size % 2 == 1 else size - 1


@dataclass
class _SsimTerms:
    rows: np.ndarray
    cols: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray

    @property
    def ssim_map(self) -> np.ndarray:
        return (self.a1 * self.a2) / (self.b1 * self.b2)


def _ssim_terms(x: np.ndarray, y: np.ndarray, window: int, sigma: float) -> _SsimTerms:
    h, w = x.shape
    if window > min(h, w) or window < 1 or window % 2 == 0:
        raise ContractViolationError(f"SSIM window {window} does not fit a {h}x{w} image")
    rows = blur_operator(h, window, sigma)
    cols = blur_operator(w, window, sigma)

    def blur(img: np.ndarray) -> np.ndarray:
        return rows @ img @ cols.T

    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov_xy = blur(x * y) - mu_x * mu_y
    return _SsimTerms(
        rows=rows,
        cols=cols,
        mu_x=mu_x,
        mu_y=mu_y,
        a1=2.0 * mu_x * mu_y + SSIM_C1,
        a2=2.0 * cov_xy + SSIM_C2,
        b1=mu_x * mu_x + mu_y * mu_y + SSIM_C1,
        b2=var_x + var_y + SSIM_C2,
    )


def ssim(pred: np.ndarray, gt: np.ndarray, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean local SSIM with a Gaussian window and symmetric edges."""
    pred, gt = _check_pair(pred, gt)
    return float(np.mean(_ssim_terms(pred, gt, window, sigma).ssim_map))


def ssim_with_grad(
    pred: np.ndarray, gt: np.ndarray, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA
) -> tuple[float, np.ndarray]:
    """SSIM(pred, gt) and its gradient with respect to pred."""
    pred, gt = _check_pair(pred, gt)
    t = _ssim_terms(pred, gt, window, sigma)
    s = t.ssim_map
    denom = t.b1 * t.b2

    # S as a function of m = blur(x), p = blur(x²), q = blur(xy)
    d_m = (
        2.0 * t.mu_y * t.a2 / denom
        - 2.0 * t.mu_y * t.a1 / denom
        - 2.0 * t.mu_x * s / t.b1
        + 2.0 * t.mu_x * s / t.b2
    )
    d_p = -s / t.b2
    d_q = 2.0 * t.a1 / denom

    def blur_t(g: np.ndarray) -> np.ndarray:
        return t.rows.T @ g @ t.cols

    grad = blur_t(d_m) + 2.0 * pred * blur_t(d_p) + gt * blur_t(d_q)
    return float(np.mean(s)), grad / s.size


# ==========================================
# AFFINE NORMALIZATION
# ==========================================

def affine_normalize(pred: np.ndarray, gt: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Match pred's mean and standard deviation to gt's, clamped to [0, 1]."""
    pred, gt = _check_pair(pred, gt)
    std_pred = float(pred.std())
    # a constant image has std of a few ulps, not 0
    if np.ptp(pred) == 0.0 or std_pred <= 1e-12 * max(1.0, abs(float(pred.mean()))):
        out = np.full_like(pred, float(gt.mean()))
    else:
        out = (pred - pred.mean()) * (float(gt.std()) / std_pred) + gt.mean()
    return np.clip(out, 0.0, 1.0) if clamp else out


# ==========================================
# REPORTS
# ==========================================

@dataclass
class SliceMetric:
    slice_id: int
    axis: str
    index: int
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    """Per-slice PSNR/SSIM with per-axis and overall means."""
    slices: list[SliceMetric] = field(default_factory=list)
    per_axis: dict[str, dict[str, float]] = field(default_factory=dict)
    overall: dict[str, float] = field(default_factory=dict)
    metadata: dict[str, object] = field(default_factory=lambda: {"psnr_peak": PEAK})

    def add(self, metric: SliceMetric) -> None:
        self.slices.append(metric)

    def summarize(self) -> "MetricReport":
        """Fill per-axis and overall means from the slice rows."""
        self.per_axis = {}
        for axis in sorted({m.axis for m in self.slices}):
            rows = [m for m in self.slices if m.axis == axis]
            self.per_axis[axis] = _means(rows)
        self.overall = _means(self.slices)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["slice_id", "axis", "index", "psnr", "ssim"])
            for m in self.slices:
                writer.writerow([m.slice_id, m.axis, m.index, repr(m.psnr), repr(m.ssim)])
            for axis, means in self.per_axis.items():
                writer.writerow(["mean", axis, "", repr(means["psnr"]), repr(means["ssim"])])
            if self.overall:
                writer.writerow(["mean", "all", "", repr(self.overall["psnr"]), repr(self.overall["ssim"])])


def _means(rows: list[SliceMetric]) -> dict[str, float]:
    if not rows:
        return {"psnr": math.nan, "ssim": math.nan}
    return {
        "psnr": float(np.mean([m.psnr for m in rows])),
        "ssim": float(np.mean([m.ssim for m in rows])),
    }


def evaluate_images(
    predictions: list[np.ndarray],
    truths: list[np.ndarray],
    axes: list[str],
    indices: list[int],
    slice_ids: Optional[list[int]] = None,
    normalize: bool = False,
) -> MetricReport:
    """Score rendered slices against ground truth.

    Args:
        predictions: Rendered images
        truths: Ground-truth images, same order
        axes: Axis name per slice
        indices: Voxel index along the axis per slice
        slice_ids: Dataset positions (defaults to 0..n-1)
        normalize: Apply affine_normalize before scoring
    """
    slice_ids = slice_ids if slice_ids is not None else list(range(len(predictions)))
    report = MetricReport()
    report.metadata["affine_normalized"] = normalize
    for sid, pred, gt, axis, index in zip(slice_ids, predictions, truths, axes, indices):
        if normalize:
            pred = affine_normalize(pred, gt)
        report.add(SliceMetric(slice_id=sid, axis=axis, index=index, psnr=psnr(pred, gt), ssim=ssim(pred, gt)))
    report.summarize()
    logger.info(
        "Evaluated %d slices: PSNR %.2f dB, SSIM %.4f (normalized=%s)",
        len(report.slices), report.overall["psnr"], report.overall["ssim"], normalize,
    )
    return report
