"""Snapshot depth-from-differential-defocus estimation.

Per-pixel depth follows ``Z = a / (b + Is / lap)`` where ``Is`` is the
difference of the two magnification-aligned images and ``lap`` the Laplacian
of their mean.  The windowed variant aggregates both cues over an ``L x L``
box before forming the ratio.  Confidence is ``Is**2``.

The ``Is`` used at runtime is the raw image difference ``I1 - I2``; the sensor
distance step ``s1 - s2`` and its sign are folded into the calibrated
constants ``(a, b)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from scipy import ndimage

from .imagecore import (
    Homography,
    as_image,
    box_filter,
    gaussian_filter,
    laplacian,
    pixel_grid,
    scaling_homography,
    warp,
)

__all__ = [
    "PipelineParams",
    "DepthResult",
    "FlopCounter",
    "to_gray",
    "highpass",
    "denoise",
    "approx_derivatives",
    "depth_pointwise",
    "depth_windowed",
    "depth_old",
    "old_cues",
    "erode_mask",
    "sparsity_filter",
    "confidence_filter",
    "consensus_homographies",
    "preprocess",
    "run_pipeline",
    "derivative_maps",
    "border_mask",
    "FLOP_BUDGET",
]

FLOP_BUDGET = 600


@dataclass
class PipelineParams:
    """Pipeline settings.  ``a`` and ``b`` come from calibration.

    ``h`` maps output pixel coordinates into ``I1``; ``h2`` optionally does
    the same for ``I2`` (both images rescaled to a consensus distance).
    ``sparsity`` discards that fraction of the least-confident valid pixels;
    ``c_thre`` instead applies an absolute confidence threshold.
    ``border=None`` masks a margin equal to the combined filter radii.
    ``align_first`` warps the raw images before filtering so both images are
    filtered on the same (consensus) grid; set it False to filter each image
    on its own sensor grid and warp afterwards.
    """

    a: float = -1.0
    b: float = 0.0
    K: int = 21
    G_std: float = 11.0
    L: int = 21
    d: float = 0.0
    h: Homography | None = None
    h2: Homography | None = None
    sparsity: float = 0.0
    c_thre: float | None = None
    z_max: float = 10.0
    lap_eps_rel: float = 1e-6
    stencil: int = 5
    border: int | None = None
    pointwise_confidence: bool = False
    align_first: bool = True

    def __post_init__(self):
        for name in ("K", "L"):
            v = getattr(self, name)
            if int(v) != v or v < 1 or v % 2 == 0:
                raise ValueError(f"{name} must be an odd integer >= 1, got {v}")
        if self.G_std < 0:
            raise ValueError("G_std must be >= 0")
        if self.a == 0:
            raise ValueError("a must be non-zero")
        if not 0 <= self.sparsity < 1:
            raise ValueError("sparsity must be in [0, 1)")

    @property
    def margin(self) -> int:
        if self.border is not None:
            return int(self.border)
        return self.K // 2 + int(np.ceil(3 * self.G_std)) + self.L // 2


@dataclass
class DepthResult:
    depth: np.ndarray
    confidence: np.ndarray
    valid: np.ndarray
    threshold: float | None = None
    flops: "FlopCounter | None" = None

    def masked(self, keep: np.ndarray) -> "DepthResult":
        return replace(self, valid=self.valid & keep)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


class FlopCounter:
    """Per-stage floating point operation tally.

    Each elementwise add, subtract, multiply or divide counts as one FLOP per
    output sample; comparisons, copies and indexing are free.
    """

    RULES = (
        "counting rules: one FLOP per elementwise add, subtract, multiply or divide; "
        "comparisons, masking, copies and memory moves are free; box sums use "
        "running (cumulative) sums, one add and one subtract per pixel per axis"
    )

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, stage: str, n: int) -> None:
        self.counts[stage] = self.counts.get(stage, 0) + int(n)

    def total(self, prefix: str = "") -> int:
        return sum(v for k, v in self.counts.items() if k.startswith(prefix))

    def per_pixel(self, npix: int, prefix: str = "") -> float:
        return self.total(prefix) / npix

    def report(self, npix: int) -> str:
        lines = [self.RULES, f"pixels={npix}"]
        for k, v in self.counts.items():
            lines.append(f"{k}={v / npix:.2f}")
        lines.append(f"depth_stage_per_pixel={self.per_pixel(npix, 'depth'):.2f}")
        lines.append(f"preprocess_per_pixel={self.per_pixel(npix, 'pre'):.2f}")
        lines.append(f"budget={FLOP_BUDGET}")
        lines.append(f"within_budget={self.per_pixel(npix, 'depth') <= FLOP_BUDGET}")
        return "\n".join(lines) + "\n"


def _count(counter, stage, n):
    if counter is not None:
        counter.add(stage, n)


def to_gray(img) -> np.ndarray:
    """Arithmetic mean of colour channels; 2D input passes through."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return as_image(arr)


def highpass(img, K: int = 21) -> np.ndarray:
    """Subtract the ``K x K`` box mean (background lighting removal)."""
    img = as_image(img)
    if K % 2 == 0 or K < 1 or K > min(img.shape):
        raise ValueError(f"K must be odd and fit in the image, got {K}")
    if K == 1:
        return np.zeros_like(img)
    return img - box_filter(img, K)


def denoise(img, G_std: float = 11.0) -> np.ndarray:
    if G_std < 0:
        raise ValueError("G_std must be >= 0")
    return gaussian_filter(img, G_std)


def preprocess(img, K: int = 21, G_std: float = 11.0, counter: FlopCounter | None = None):
    out = denoise(highpass(img, K), G_std)
    if counter is not None:
        npix = out.size
        counter.add("pre_highpass", (4 + 2) * npix if K > 1 else 0)
        if G_std > 0:
            taps = 2 * int(np.ceil(4 * G_std)) + 1
            counter.add("pre_denoise", 2 * (2 * taps - 1) * npix)
    return out


def consensus_homographies(shape, optics) -> tuple[Homography, Homography]:
    """Warps that rescale ``I1`` and ``I2`` to the consensus sensor distance."""
    return (
        scaling_homography(shape, optics.s1 / optics.c),
        scaling_homography(shape, optics.s2 / optics.c),
    )


def approx_derivatives(I1, I2, h: Homography | None = None, h2: Homography | None = None,
                       stencil: int = 5, counter: FlopCounter | None = None):
    """Finite-difference cues from a preprocessed pair.

    ``Is = I1(h x) - I2(h2 x)`` and ``lap = 0.5 * lap(I1(h x) + I2(h2 x))``.
    Returns ``(Is, lap, mask)`` where ``mask`` flags samples whose warp
    sources lie inside both images.
    """
    I1 = as_image(I1)
    I2 = as_image(I2)
    if I1.shape != I2.shape:
        raise ValueError(f"image shapes differ: {I1.shape} vs {I2.shape}")
    mask = np.ones(I1.shape, dtype=bool)
    if h is not None:
        I1, m = warp(I1, h)
        mask &= m
    if h2 is not None:
        I2, m = warp(I2, h2)
        mask &= m
    npix = I1.size
    Is = I1 - I2
    _count(counter, "depth_difference", npix)
    total = I1 + I2
    _count(counter, "depth_laplacian", npix)
    lap = 0.5 * laplacian(total, stencil=stencil)
    _count(counter, "depth_laplacian", (5 if stencil == 5 else 17) * npix + npix)
    # a sample next to an invalid one has a contaminated stencil
    if not mask.all():
        inner = mask.copy()
        inner[1:, :] &= mask[:-1, :]
        inner[:-1, :] &= mask[1:, :]
        inner[:, 1:] &= mask[:, :-1]
        inner[:, :-1] &= mask[:, 1:]
        mask = inner
    return Is, lap, mask


def _physical(Z, z_max):
    return np.isfinite(Z) & (Z > 0) & (Z <= z_max)


def depth_pointwise(Is, lap, a: float, b: float, lap_eps: float = 0.0,
                    z_max: float = 10.0) -> DepthResult:
    """Per-pixel depth ``a / (b + Is/lap)`` with confidence ``Is**2``."""
    Is = np.asarray(Is, dtype=np.float64)
    lap = np.asarray(lap, dtype=np.float64)
    if Is.shape != lap.shape:
        raise ValueError("Is and lap shapes differ")
    ok = np.abs(lap) > lap_eps
    with np.errstate(divide="ignore", invalid="ignore"):
        Z = a / (b + Is / np.where(ok, lap, 1.0))
    valid = ok & _physical(Z, z_max)
    Z = np.where(valid, Z, 0.0)
    return DepthResult(Z, Is * Is, valid)


def _box_sum(x, L: int, counter=None, stage="depth_aggregate"):
    """Unnormalized ``L x L`` box sum with replicate edges, via running sums."""
    if L == 1:
        return x
    r = L // 2
    out = x
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r + 1, r)
        p = np.pad(out, pad, mode="edge")
        cs = np.cumsum(p, axis=axis)
        if axis == 0:
            out = cs[L:] - cs[:-L]
        else:
            out = cs[:, L:] - cs[:, :-L]
        # first padded sample only seeds the running sum
        _count(counter, stage, 2 * x.size)
    return out


def depth_windowed(Is, lap, a: float, b: float, L: int = 21, lap_eps: float = 0.0,
                   z_max: float = 10.0, pointwise_confidence: bool = False,
                   counter: FlopCounter | None = None) -> DepthResult:
    """Window-aggregated depth.

    ``Z = W*[a lap (b lap + Is)] / W*[(b lap + Is)^2]`` with ``W`` the
    ``L x L`` box; confidence is ``W*Is^2`` (or ``Is^2`` with
    ``pointwise_confidence``).
    """
    Is = np.asarray(Is, dtype=np.float64)
    lap = np.asarray(lap, dtype=np.float64)
    if Is.shape != lap.shape:
        raise ValueError("Is and lap shapes differ")
    if L < 1 or L % 2 == 0:
        raise ValueError("L must be odd and >= 1")
    npix = Is.size
    conf_pt = Is * Is
    _count(counter, "depth_confidence", npix)
    if L == 1:
        # W is a delta: reduce to the pointwise arithmetic exactly
        res = depth_pointwise(Is, lap, a, b, lap_eps, z_max)
        _count(counter, "depth_ratio", 3 * npix)
        return replace(res, flops=counter)

    q = b * lap + Is
    _count(counter, "depth_ratio", 2 * npix)
    num = _box_sum(a * lap * q, L, counter)
    _count(counter, "depth_ratio", 2 * npix)
    den = _box_sum(q * q, L, counter)
    _count(counter, "depth_ratio", npix)
    conf = conf_pt if pointwise_confidence else _box_sum(conf_pt, L, counter)
    den_eps = max(lap_eps**2 * b * b * L * L, 1e-300)
    ok = den > den_eps
    with np.errstate(divide="ignore", invalid="ignore"):
        Z = num / np.where(ok, den, 1.0)
    _count(counter, "depth_ratio", npix)
    # exclude windows whose Laplacian is entirely below the threshold
    if lap_eps > 0:
        ok &= _box_sum((np.abs(lap) > lap_eps).astype(np.float64), L) > 0
    valid = ok & _physical(Z, z_max)
    return DepthResult(np.where(valid, Z, 0.0), conf, valid, flops=counter)


def old_cues(I1, I2, d: float, center=None, stencil: int = 5):
    """Cues of the baseline equation on un-aligned images.

    Returns ``(d (x Ix + y Iy) + Is, lap(I))`` where ``x, y`` are pixel
    offsets from the principal point (image centre unless ``center`` is
    given), ``Is = I1 - I2`` and ``I`` is the mean of the two images.
    """
    I1 = as_image(I1)
    I2 = as_image(I2)
    if I1.shape != I2.shape:
        raise ValueError(f"image shapes differ: {I1.shape} vs {I2.shape}")
    Is = I1 - I2
    mean = 0.5 * (I1 + I2)
    p = np.pad(mean, 1, mode="edge")
    Ix = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    Iy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    gx, gy = pixel_grid(I1.shape)
    if center is None:
        center = ((I1.shape[1] - 1) / 2.0, (I1.shape[0] - 1) / 2.0)
    num = d * ((gx - center[0]) * Ix + (gy - center[1]) * Iy) + Is
    return num, laplacian(mean, stencil=stencil)


def depth_old(I1_raw, I2_raw, a: float, b: float, d: float, L: int | None = None,
              center=None, lap_eps: float = 0.0, z_max: float = 10.0,
              stencil: int = 5) -> DepthResult:
    """Baseline depth from un-aligned images with a magnification term.

    ``Z = a / (b + (d (x Ix + y Iy) + Is) / lap(I))``; see :func:`old_cues`.
    With ``L`` given the cues are aggregated as in :func:`depth_windowed`.
    Confidence is the square of the corrected numerator.
    """
    num, lap = old_cues(I1_raw, I2_raw, d, center, stencil)
    if L is None:
        return depth_pointwise(num, lap, a, b, lap_eps, z_max)
    return depth_windowed(num, lap, a, b, L, lap_eps, z_max)


def sparsity_filter(res: DepthResult, target_sparsity: float) -> DepthResult:
    """Mask the ``floor(target * N_valid)`` least-confident valid pixels.

    Ties are broken in row-major order (earlier pixels are dropped first).
    The returned ``threshold`` is the smallest surviving confidence.
    """
    if not 0 <= target_sparsity < 1:
        raise ValueError("target_sparsity must be in [0, 1)")
    idx = np.flatnonzero(res.valid.ravel())
    n_drop = int(np.floor(target_sparsity * idx.size))
    if n_drop == 0:
        thr = float(res.confidence.ravel()[idx].min()) if idx.size else None
        return replace(res, threshold=thr)
    conf = res.confidence.ravel()[idx]
    order = np.argsort(conf, kind="stable")
    valid = res.valid.copy().ravel()
    valid[idx[order[:n_drop]]] = False
    keep = idx[order[n_drop:]]
    thr = float(res.confidence.ravel()[keep].min()) if keep.size else None
    return replace(res, valid=valid.reshape(res.valid.shape), threshold=thr)


def confidence_filter(res: DepthResult, c_thre: float) -> DepthResult:
    """Keep only pixels whose confidence is at least ``c_thre``."""
    return replace(res, valid=res.valid & (res.confidence >= c_thre), threshold=c_thre)


def border_mask(shape, margin: int) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    if 2 * margin < min(shape):
        m[margin:shape[0] - margin, margin:shape[1] - margin] = True
    return m


def erode_mask(mask, margin: int) -> np.ndarray:
    """Shrink a validity mask by ``margin`` pixels; the image border counts as invalid."""
    if margin <= 0:
        return mask.copy()
    return ndimage.minimum_filter(mask.astype(np.uint8), size=2 * margin + 1,
                                  mode="constant", cval=0).astype(bool)


def derivative_maps(I1, I2, params: PipelineParams, counter: FlopCounter | None = None):
    """Preprocess and align a raw pair; returns ``(Is, lap, mask, lap_eps)``."""
    g1 = to_gray(I1)
    g2 = to_gray(I2)
    if g1.shape != g2.shape:
        raise ValueError(f"image shapes differ: {g1.shape} vs {g2.shape}")
    dyn = max(float(g1.max() - g1.min()), float(g2.max() - g2.min()))
    if params.align_first:
        mask = np.ones(g1.shape, dtype=bool)
        if params.h is not None:
            g1, m = warp(g1, params.h, fill="edge")
            mask &= m
        if params.h2 is not None:
            g2, m = warp(g2, params.h2, fill="edge")
            mask &= m
        p1 = preprocess(g1, params.K, params.G_std, counter)
        p2 = preprocess(g2, params.K, params.G_std, counter)
        Is, lap, _ = approx_derivatives(p1, p2, None, None, params.stencil, counter)
    else:
        p1 = preprocess(g1, params.K, params.G_std, counter)
        p2 = preprocess(g2, params.K, params.G_std, counter)
        Is, lap, mask = approx_derivatives(p1, p2, params.h, params.h2, params.stencil, counter)
    return Is, lap, erode_mask(mask, params.margin), params.lap_eps_rel * dyn


def run_pipeline(I1, I2, params: PipelineParams) -> DepthResult:
    """Grayscale, high-pass, denoise, align, windowed depth, confidence filtering.

    The result carries a :class:`FlopCounter` covering preprocessing
    (``pre_*`` stages) and the per-pixel depth stage (``depth_*``).
    """
    counter = FlopCounter()
    Is, lap, mask, lap_eps = derivative_maps(I1, I2, params, counter)
    res = depth_windowed(Is, lap, params.a, params.b, params.L, lap_eps, params.z_max,
                         params.pointwise_confidence, counter)
    res = res.masked(mask)
    if params.c_thre is not None:
        res = confidence_filter(res, params.c_thre)
    if params.sparsity > 0:
        res = sparsity_filter(res, params.sparsity)
    res.flops = counter
    return res
