"""Image quality metrics: windowed structural similarity, PSNR, L1, L2.

Structural similarity between two windows x and y is

    SSIM(x, y) = (2*mu_x*mu_y + c1) * (2*cov_xy + c2)
                 -----------------------------------------
                 (mu_x^2 + mu_y^2 + c1) * (var_x + var_y + c2)

evaluated over every square window fully inside the image (stride 1, no
padding, uniform weighting).  Means, variances and the covariance use the
sample (n-1) normalization.  The stabilizers default to c1 = (K1*L)^2 and
c2 = (K2*L)^2 with K1 = 0.01, K2 = 0.03 and L the data range; a config switch
uses K1 and K2 literally instead, for comparison against code bases that
skip the squaring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .micrograph import Micrograph, NormalizedImage

__all__ = [
    "SsimConfig",
    "SsimResult",
    "local_ssim",
    "ssim",
    "ssim_loss",
    "psnr",
    "l1_loss",
    "l2_loss",
]


@dataclass(frozen=True)
class SsimConfig:
    """Window size, stabilizer constants, and data range for SSIM.

    ``window_size`` must be odd and at least 3.  ``literal_constants=True``
    uses k1 and k2 directly as c1 and c2 instead of squaring them against the
    data range.
    """

    window_size: int = 11
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0
    literal_constants: bool = False

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise InputError(
                f"window_size must be an odd integer >= 3, got {self.window_size}"
            )
        if not (self.k1 > 0) or not (self.k2 > 0):
            raise InputError("k1 and k2 must be positive")
        if not (self.data_range > 0):
            raise InputError("data_range must be positive")

    @property
    def c1(self) -> float:
        if self.literal_constants:
            return self.k1
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        if self.literal_constants:
            return self.k2
        return (self.k2 * self.data_range) ** 2


@dataclass(frozen=True)
class SsimResult:
    """Mean similarity plus the per-window map it was averaged from."""

    mean: float
    map: np.ndarray
    n_windows: int


def _image_values(image) -> np.ndarray:
    if isinstance(image, NormalizedImage):
        return image.values
    if isinstance(image, Micrograph):
        raise InputError("metrics operate on normalized images, not raw counts")
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"expected a 2-D image, got shape {arr.shape}")
    return arr


def _sliding_sums(arr: np.ndarray, w: int) -> np.ndarray:
    """Sum of every w-by-w window (stride 1) over the last two axes."""
    rows = np.lib.stride_tricks.sliding_window_view(arr, w, axis=-2).sum(axis=-1)
    return np.lib.stride_tricks.sliding_window_view(rows, w, axis=-1).sum(axis=-1)


def _moment_maps(xa: np.ndarray, ya: np.ndarray, w: int):
    """Windowed means, sample variances, and covariance over the last two axes.

    Second moments are taken on per-plane centered copies so the one-pass
    subtraction cancels at the scale of the variance, not the squared mean.
    """
    n = w * w
    m = n - 1
    mx = _sliding_sums(xa, w) / n
    my = _sliding_sums(ya, w) / n
    xc = xa - xa.mean(axis=(-2, -1), keepdims=True)
    yc = ya - ya.mean(axis=(-2, -1), keepdims=True)
    sx = _sliding_sums(xc, w)
    sy = _sliding_sums(yc, w)
    vx = (_sliding_sums(xc * xc, w) - sx * (sx / n)) / m
    vy = (_sliding_sums(yc * yc, w) - sy * (sy / n)) / m
    cxy = (_sliding_sums(xc * yc, w) - sx * (sy / n)) / m
    return mx, my, vx, vy, cxy


def ssim_map(x, y, config: SsimConfig = SsimConfig()) -> np.ndarray:
    """SSIM of every window fully inside the pair, as an (H-w+1, W-w+1) map."""
    xa = _image_values(x)
    ya = _image_values(y)
    if xa.shape != ya.shape:
        raise InputError(f"image shapes differ: {xa.shape} vs {ya.shape}")
    w = config.window_size
    if xa.shape[0] < w or xa.shape[1] < w:
        raise InputError(
            f"images of shape {xa.shape} are smaller than the {w}x{w} window"
        )
    mx, my, vx, vy, cxy = _moment_maps(xa, ya, w)
    c1 = config.c1
    c2 = config.c2
    return ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / (
        (mx * mx + my * my + c1) * (vx + vy + c2)
    )


def ssim(x, y, config: SsimConfig = SsimConfig()) -> SsimResult:
    """Mean SSIM over all stride-1 windows, with the per-window map attached.

    An image compared against itself scores exactly 1.0.
    """
    smap = ssim_map(x, y, config)
    return SsimResult(mean=float(np.mean(smap)), map=smap, n_windows=smap.size)


def local_ssim(x_window, y_window, config: SsimConfig = SsimConfig()) -> float:
    """Similarity of a single window pair of exactly the configured size."""
    xa = _image_values(x_window)
    w = config.window_size
    if xa.shape != (w, w):
        raise InputError(f"window must be {w}x{w}, got {xa.shape}")
    smap = ssim_map(x_window, y_window, config)
    return float(smap[0, 0])


def ssim_loss(x, y, config: SsimConfig = SsimConfig()) -> float:
    """One minus the mean SSIM; zero for identical images."""
    return 1.0 - ssim(x, y, config).mean


def psnr(x, y, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    if not (data_range > 0):
        raise InputError("data_range must be positive")
    xa = _image_values(x)
    ya = _image_values(y)
    if xa.shape != ya.shape:
        raise InputError(f"image shapes differ: {xa.shape} vs {ya.shape}")
    mse = float(np.mean((xa - ya) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def l1_loss(x, y) -> float:
    """Mean absolute difference."""
    xa = _image_values(x)
    ya = _image_values(y)
    if xa.shape != ya.shape:
        raise InputError(f"image shapes differ: {xa.shape} vs {ya.shape}")
    return float(np.mean(np.abs(xa - ya)))


def l2_loss(x, y) -> float:
    """Mean squared difference."""
    xa = _image_values(x)
    ya = _image_values(y)
    if xa.shape != ya.shape:
        raise InputError(f"image shapes differ: {xa.shape} vs {ya.shape}")
    return float(np.mean((xa - ya) ** 2))
