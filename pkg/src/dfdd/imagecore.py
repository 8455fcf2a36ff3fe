"""Image containers and low-level numeric kernels.

Images are plain 2D ``float64`` numpy arrays indexed ``[row, col]`` (``[y, x]``).
Every filter uses replicate-edge boundaries.  Warps return a validity mask next
to the resampled data instead of extrapolating.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "Kernel",
    "Homography",
    "as_image",
    "convolve",
    "box_kernel",
    "gaussian_kernel",
    "box_filter",
    "gaussian_filter",
    "laplacian",
    "warp",
    "rescale_to_consensus",
    "scaling_homography",
    "pixel_grid",
]


def as_image(img) -> np.ndarray:
    """Coerce to a finite 2D float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains NaN or Inf samples")
    return arr


@dataclass(frozen=True)
class Kernel:
    """Convolution kernel.

    ``taps`` is either a 1D array (applied along both axes, i.e. separable)
    or a full 2D array of shape ``(2r+1, 2r+1)``.
    """

    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim not in (1, 2) or any(n % 2 == 0 for n in taps.shape):
            raise ValueError(f"kernel taps must have odd length(s), got {taps.shape}")
        object.__setattr__(self, "taps", taps)

    @property
    def separable(self) -> bool:
        return self.taps.ndim == 1

    @property
    def radius(self) -> int:
        return self.taps.shape[0] // 2

    def dense(self) -> np.ndarray:
        """Full 2D tap array."""
        if self.separable:
            return np.outer(self.taps, self.taps)
        return self.taps

    def total(self) -> float:
        return float(self.dense().sum())


def box_kernel(size: int) -> Kernel:
    """Normalized ``size`` x ``size`` box (separable)."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"box size must be odd and >= 1, got {size}")
    return Kernel(np.full(size, 1.0 / size))


def gaussian_kernel(std: float, truncate: float = 4.0) -> Kernel:
    """Sampled, renormalized 1D Gaussian with radius ``ceil(truncate * std)``."""
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return Kernel(np.ones(1))
    radius = max(1, int(np.ceil(truncate * std)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / std) ** 2)
    return Kernel(taps / taps.sum())


def convolve(img, k: Kernel, boundary: str = "replicate") -> np.ndarray:
    """Convolve ``img`` with ``k``; separable kernels run as two 1D passes."""
    if boundary != "replicate":
        raise ValueError(f"unsupported boundary mode {boundary!r}")
    img = as_image(img)
    if k.radius > min(img.shape) / 2:
        raise ValueError(
            f"kernel radius {k.radius} exceeds half the image size {img.shape}"
        )
    # ndimage.correlate with a flipped kernel == convolution; symmetric kernels
    # are unaffected by the flip, but asymmetric 2D kernels are honoured.
    if k.separable:
        taps = k.taps[::-1]
        out = ndimage.correlate1d(img, taps, axis=0, mode="nearest")
        return ndimage.correlate1d(out, taps, axis=1, mode="nearest")
    return ndimage.correlate(img, k.taps[::-1, ::-1], mode="nearest")


def box_filter(img, size: int) -> np.ndarray:
    """Normalized box mean over a ``size`` x ``size`` window."""
    return convolve(img, box_kernel(size))


def gaussian_filter(img, std: float) -> np.ndarray:
    if std == 0:
        return as_image(img).copy()
    return convolve(img, gaussian_kernel(std))


_LAPLACE_5 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
# isotropic 9-point stencil (Oono-Puri weights)
_LAPLACE_9 = np.array([[0.25, 0.5, 0.25], [0.5, -3.0, 0.5], [0.25, 0.5, 0.25]])


def laplacian(img, stencil: int = 5, pitch: float = 1.0) -> np.ndarray:
    """Discrete Laplacian with replicate edges, in units of 1/pitch**2."""
    img = as_image(img)
    if min(img.shape) < 3:
        raise ValueError("laplacian needs an image of at least 3x3")
    if stencil == 5:
        p = np.pad(img, 1, mode="edge")
        out = (p[:-2, 1:-1] + p[2:, 1:-1]) + (p[1:-1, :-2] + p[1:-1, 2:]) - 4.0 * img
    elif stencil == 9:
        out = ndimage.correlate(img, _LAPLACE_9, mode="nearest")
    else:
        raise ValueError(f"stencil must be 5 or 9, got {stencil}")
    if pitch != 1.0:
        out = out / pitch**2
    return out


class Homography:
    """Projective map of pixel coordinates ``(x, y)`` (column, row)."""

    def __init__(self, m):
        m = np.array(m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) > 1e-15:
            m = m / m[2, 2]
        if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is not invertible")
        self.m = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def from_affine(cls, R, t) -> "Homography":
        """Build from a 2x2 linear part and a translation."""
        m = np.eye(3)
        m[:2, :2] = np.asarray(R, dtype=np.float64)
        m[:2, 2] = np.asarray(t, dtype=np.float64)
        return cls(m)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.m @ other.m)

    def apply(self, x, y):
        """Map coordinate arrays ``x, y``; returns mapped ``(x', y')``."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        m = self.m
        w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
        return (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w, (
            m[1, 0] * x + m[1, 1] * y + m[1, 2]
        ) / w

    def __repr__(self):
        return f"Homography({self.m.tolist()!r})"

    def __eq__(self, other):
        return isinstance(other, Homography) and np.array_equal(self.m, other.m)


def pixel_grid(shape) -> tuple[np.ndarray, np.ndarray]:
    """Column and row index grids for an image of ``shape``."""
    h, w = shape
    y, x = np.mgrid[0:h, 0:w]
    return x.astype(np.float64), y.astype(np.float64)


def warp(img, h: Homography, interp: str = "bilinear",
         fill: str = "zero") -> tuple[np.ndarray, np.ndarray]:
    """Resample ``out(x) = img(h(x))``.

    Returns ``(out, mask)``; samples whose source falls outside the image are
    flagged False in ``mask`` and set to 0 (``fill="zero"``) or to the
    nearest edge sample (``fill="edge"``).
    """
    if interp != "bilinear":
        raise ValueError(f"unsupported interpolation {interp!r}")
    img = as_image(img)
    if not isinstance(h, Homography):
        h = Homography(h)
    rows, cols = img.shape
    gx, gy = pixel_grid(img.shape)
    sx, sy = h.apply(gx, gy)

    tol = 1e-9
    mask = (sx >= -tol) & (sx <= cols - 1 + tol) & (sy >= -tol) & (sy <= rows - 1 + tol)
    sx = np.clip(sx, 0, cols - 1)
    sy = np.clip(sy, 0, rows - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    x1 = np.minimum(x0 + 1, cols - 1)
    y1 = np.minimum(y0 + 1, rows - 1)

    out = (img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx) * (1.0 - fy) + (
        img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    ) * fy
    if fill == "zero":
        out[~mask] = 0.0
    elif fill != "edge":
        raise ValueError(f"unknown fill mode {fill!r}")
    return out, mask


def scaling_homography(shape, factor: float, center=None) -> Homography:
    """Isotropic scaling about ``center`` (defaults to the image centre)."""
    if center is None:
        center = ((shape[1] - 1) / 2.0, (shape[0] - 1) / 2.0)
    cx, cy = center
    return Homography(
        [[factor, 0.0, cx * (1.0 - factor)], [0.0, factor, cy * (1.0 - factor)], [0.0, 0.0, 1.0]]
    )


def rescale_to_consensus(img, s: float, c: float, center=None) -> tuple[np.ndarray, np.ndarray]:
    """Align an image taken at sensor distance ``s`` to the consensus distance ``c``.

    Computes ``I~(x) = I((s / c) x)`` with ``x`` measured from the principal
    point.
    """
    if s <= 0 or c <= 0:
        raise ValueError("sensor distances must be positive")
    img = as_image(img)
    return warp(img, scaling_homography(img.shape, s / c, center))
