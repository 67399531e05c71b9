"""
Evaluation metrics: trajectory error, image quality, depth error, surface error
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from app.errors import InvalidInputError
from app.geometry import Pose, Sim3, umeyama_alignment

LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

Trajectory = Union[Sequence[Pose], np.ndarray]


@dataclass
class TrajectoryAlignment:
    transform: Sim3
    aligned: np.ndarray
    errors: np.ndarray

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.errors**2)))


def positions(trajectory: Trajectory) -> np.ndarray:
    if isinstance(trajectory, np.ndarray):
        return np.asarray(trajectory, dtype=np.float64).reshape(-1, 3)
    return np.array([p.translation for p in trajectory])


def align_trajectory(
    estimated: Trajectory,
    ground_truth: Trajectory,
    align_scale: bool = True,
    est_stamps: Optional[Sequence[float]] = None,
    gt_stamps: Optional[Sequence[float]] = None,
) -> TrajectoryAlignment:
    """Closed-form alignment of the estimate onto ground truth, then per-pose errors"""
    est, gt = positions(estimated), positions(ground_truth)
    if len(est) != len(gt):
        raise InvalidInputError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) < 2:
        raise InvalidInputError("need at least two poses")
    if est_stamps is not None and gt_stamps is not None:
        if not np.allclose(np.asarray(est_stamps, dtype=float), np.asarray(gt_stamps, dtype=float)):
            raise InvalidInputError("trajectories are not associated by timestamp")

    if np.allclose(est, gt, rtol=0.0, atol=0.0):
        transform = Sim3.identity()
    else:
        try:
            transform = umeyama_alignment(est, gt, with_scale=align_scale)
        except InvalidInputError:
            # fewer than three distinct positions: translate only
            transform = Sim3.from_srt(1.0, np.eye(3), gt.mean(axis=0) - est.mean(axis=0))
    aligned = transform.apply(est)
    return TrajectoryAlignment(transform, aligned, np.linalg.norm(aligned - gt, axis=1))


def ate_rmse(estimated: Trajectory, ground_truth: Trajectory, align_scale: bool = True) -> float:
    """RMSE of translational residuals after rigid or similarity alignment"""
    return align_trajectory(estimated, ground_truth, align_scale).rmse


def _check_images(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) over all pixels and channels; inf for identical images"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_images(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image @ LUMA if image.ndim == 3 else image


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM on luma, averaged over fully-covered windows"""
    x, y = to_gray(a), to_gray(b)
    _check_images(x, y)
    if min(x.shape) < SSIM_WINDOW:
        raise InvalidInputError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")

    window = gaussian_window()
    filt = lambda img: ndimage.correlate(img, window, mode="reflect")  # noqa: E731
    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
    pad = (SSIM_WINDOW - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def depth_l1(rendered: np.ndarray, ground_truth: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean |D^ - D| over valid pixels (finite ground truth by default)"""
    rendered = np.asarray(rendered, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    _check_images(rendered, ground_truth)
    valid = np.isfinite(ground_truth) & np.isfinite(rendered)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise InvalidInputError("depth_l1 needs at least one valid pixel")
    return float(np.abs(rendered[valid] - ground_truth[valid]).mean())


def surface_percentiles(distances: np.ndarray, percentiles: Sequence[float] = (50, 90)):
    """Percentiles of |distance to the true surface| at mesh vertices (0 for an empty mesh)"""
    distances = np.abs(np.asarray(distances, dtype=np.float64))
    if distances.size == 0:
        return tuple(0.0 for _ in percentiles)
    return tuple(float(v) for v in np.percentile(distances, percentiles))
