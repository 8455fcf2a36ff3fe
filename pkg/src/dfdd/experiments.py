"""Sensitivity sweeps on simulated scenes.

Every sweep follows the same recipe: for each axis value, calibrate ``(a, b)``
on a calibration set of textures placed on the depth grid, then render fresh
test textures at every grid depth, run the pipeline and record the depth
error.  Randomness is derived from ``(seed, stream, indices)`` only, so a
sweep is reproducible bit for bit.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .calib import CalibrationRecord, calibrate_ab, mae, working_range
from .imagecore import warp
from .pipeline import (
    PipelineParams,
    approx_derivatives,
    consensus_homographies,
    depth_pointwise,
    depth_windowed,
    derivative_maps,
    erode_mask,
    old_cues,
    preprocess,
    sparsity_filter,
)
from .sim import (
    Motion,
    NoiseSpec,
    OpticsConfig,
    SceneSpec,
    aligned_derivatives,
    defocus_level,
    band_limited_noise,
    desk_optics,
    object_freq,
    render_pair,
)

__all__ = [
    "Settings",
    "SweepSample",
    "SweepResult",
    "AXES",
    "make_texture",
    "render_trial",
    "calibrate",
    "calibrate_old",
    "evaluate",
    "sweep",
    "snr_curves",
    "depth_curve",
    "confidence_bins",
    "psf_comparison",
    "blur_radius_px",
    "blur_shift_mm",
    "motion_comparison",
]

AXES = (
    "Z", "delta_s", "noise", "sparsity", "lateral_mm", "axial_mm",
    "rot_x_deg", "rot_y_deg", "rot_z_deg", "psf_model", "confidence",
)
PSF_CODES = {0: "gaussian", 1: "pillbox"}

SNR_CAP = 1e12


@dataclass
class Settings:
    """Everything a simulated experiment depends on."""

    optics: OpticsConfig = field(default_factory=desk_optics)
    shape: tuple[int, int] = (256, 256)
    z_grid: tuple[float, ...] = (0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2)
    band: tuple[float, float] = (0.01, 0.08)  # cycles/pixel at the reference depth
    z_ref: float | None = None  # defaults to the consensus focal plane
    n_sinusoids: int = 48
    trials: int = 4
    calib_trials: int = 2
    noise: float = 0.0
    seed: int = 0
    K: int = 21
    G_std: float = 11.0
    L: int = 21
    sparsity: float = 0.0
    motion: Motion = field(default_factory=Motion)

    def reference_depth(self) -> float:
        return self.z_ref if self.z_ref is not None else self.optics.focal_plane()

    def params(self, a: float = -1.0, b: float = 0.0) -> PipelineParams:
        h1, h2 = consensus_homographies(self.shape, self.optics)
        return PipelineParams(a=a, b=b, K=self.K, G_std=self.G_std, L=self.L, h=h1, h2=h2,
                              sparsity=self.sparsity)


def make_texture(s: Settings, *key: int):
    """Band-limited random texture keyed on ``(seed, *key)``."""
    rng = np.random.default_rng([s.seed, *key])
    z = s.reference_depth()
    lo, hi = (object_freq(v, z, s.optics) for v in s.band)
    return band_limited_noise(rng, (lo, hi), n=s.n_sinusoids)


def render_trial(s: Settings, Z: float, key, motion: Motion | None = None):
    """Render ``(I1, I2, truth)`` for the texture and noise keyed on ``key``."""
    tex = make_texture(s, *key)
    scene = SceneSpec(tex, Z, s.shape, motion if motion is not None else Motion())
    noise_seed = int(np.random.default_rng([s.seed, 7, *key]).integers(2**63))
    return render_pair(scene, s.optics, NoiseSpec(s.noise, noise_seed))


def _calib_set(s: Settings, maps_fn):
    data = []
    for i, z in enumerate(s.z_grid):
        for t in range(s.calib_trials):
            I1, I2, _ = render_trial(s, z, (0, i, t))
            data.append((z, *maps_fn(I1, I2)))
    return data


def calibrate(s: Settings) -> CalibrationRecord:
    """Calibrate the windowed estimator on ``calib_trials`` textures per grid depth."""
    p = s.params()

    def maps(I1, I2):
        Is, lap, mask, _ = derivative_maps(I1, I2, p)
        return Is, lap, mask

    return calibrate_ab(_calib_set(s, maps), L=s.L)


def _old_maps(s: Settings, I1, I2):
    o = s.optics
    d = (o.s1 - o.s2) / o.c
    p1 = preprocess(I1, s.K, s.G_std)
    p2 = preprocess(I2, s.K, s.G_std)
    num, lap = old_cues(p1, p2, d)
    margin = s.params().margin
    return num, lap, erode_mask(np.ones(s.shape, dtype=bool), margin)


def calibrate_old(s: Settings) -> CalibrationRecord:
    """Calibrate the un-aligned baseline equation the same way."""
    return calibrate_ab(_calib_set(s, lambda I1, I2: _old_maps(s, I1, I2)), L=s.L)


@dataclass
class TrialError:
    Z: float
    mae_windowed: float
    mae_pointwise: float
    mae_old: float = math.nan


def evaluate(s: Settings, rec: CalibrationRecord, key=(1,), rec_old: CalibrationRecord | None = None,
             motion: Motion | None = None) -> list[TrialError]:
    """Test errors on ``trials`` fresh textures at every grid depth."""
    p = s.params(rec.a, rec.b)
    out = []
    for i, z in enumerate(s.z_grid):
        for t in range(s.trials):
            I1, I2, truth = render_trial(s, z, (*key, i, t), motion if motion is not None else s.motion)
            Is, lap, mask, eps = derivative_maps(I1, I2, p)
            win = depth_windowed(Is, lap, rec.a, rec.b, s.L, eps).masked(mask)
            pt = depth_pointwise(Is, lap, rec.a, rec.b, eps).masked(mask)
            if s.sparsity > 0:
                win = sparsity_filter(win, s.sparsity)
                pt = sparsity_filter(pt, s.sparsity)
            err = TrialError(z, _safe_mae(win, truth), _safe_mae(pt, truth))
            if rec_old is not None:
                num, lapo, m = _old_maps(s, I1, I2)
                old = depth_windowed(num, lapo, rec_old.a, rec_old.b, s.L, eps).masked(m)
                if s.sparsity > 0:
                    old = sparsity_filter(old, s.sparsity)
                err.mae_old = _safe_mae(old, truth)
            out.append(err)
    return out


def _safe_mae(res, truth):
    return mae(res, truth) if res.valid.any() else math.nan


@dataclass
class SweepSample:
    value: float
    mae: float
    mae_pointwise: float
    mae_old: float = math.nan
    working_range: float = math.nan
    wr_lo: float = math.nan
    wr_hi: float = math.nan
    snr_is: float = math.nan
    snr_lap: float = math.nan


@dataclass
class SweepResult:
    axis: str
    samples: list[SweepSample] = field(default_factory=list)

    HEADER = ("axis", "value", "mae_m", "mae_pointwise_m", "mae_old_m",
              "working_range_m", "wr_lo_m", "wr_hi_m", "snr_is", "snr_lap")

    def __post_init__(self):
        vals = [x.value for x in self.samples]
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("sweep axis values must be strictly increasing")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(x, name) for x in self.samples])

    def rows(self):
        for x in self.samples:
            yield (self.axis, x.value, x.mae, x.mae_pointwise, x.mae_old, x.working_range,
                   x.wr_lo, x.wr_hi, x.snr_is, x.snr_lap)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.HEADER)
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def from_csv(cls, path) -> "SweepResult":
        with open(path, newline="") as f:
            r = csv.reader(f)
            header = next(r)
            if tuple(header) != cls.HEADER:
                raise ValueError(f"unexpected sweep CSV header {header}")
            rows = list(r)
        axis = rows[0][0] if rows else ""
        samples = [SweepSample(*(float(v) for v in row[1:])) for row in rows]
        return cls(axis, samples)


def _mean(values):
    v = np.array(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else math.nan


def depth_curve(errors: list[TrialError], attr: str = "mae_windowed") -> list[tuple[float, float]]:
    """Per-depth MAE averaged over trials, sorted by depth."""
    by_z: dict[float, list[float]] = {}
    for e in errors:
        by_z.setdefault(e.Z, []).append(getattr(e, attr))
    return [(z, _mean(v)) for z, v in sorted(by_z.items())]


def _configure(s: Settings, axis: str, value: float) -> Settings:
    if axis == "delta_s":
        return replace(s, optics=s.optics.with_delta_s(value))
    if axis == "noise":
        return replace(s, noise=value)
    if axis == "sparsity":
        return replace(s, sparsity=value)
    if axis in ("lateral_mm", "axial_mm", "rot_x_deg", "rot_y_deg", "rot_z_deg"):
        field_name = "lateral_x_mm" if axis == "lateral_mm" else axis
        return replace(s, motion=replace(s.motion, **{field_name: value}))
    raise ValueError(f"unknown sweep axis {axis!r}")


def sweep(axis: str, values, s: Settings, compare_old: bool | None = None) -> SweepResult:
    """Run a sensitivity sweep along ``axis``.

    ``Z`` sweeps evaluate one calibration over the given depths and attach
    the SNR pair per depth.  ``psf_model`` takes codes 0 (Gaussian) and 1
    (pillbox); ``confidence`` takes quantile levels of the normalized
    ``|Is|`` and reports the per-pixel MAE of each bin.  For every other axis
    each value gets its own calibration (motion axes calibrate on static
    scenes) and reports the MAE pooled over the depth grid plus the working
    range of the per-depth curve.  The baseline equation is evaluated for
    ``delta_s`` sweeps unless ``compare_old`` says otherwise.
    """
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    values = [float(v) for v in values]
    if not values:
        return SweepResult(axis)
    if compare_old is None:
        compare_old = axis == "delta_s"

    if axis == "Z":
        zs = replace(s, z_grid=tuple(values))
        base = replace(s, motion=Motion())
        rec = calibrate(base)
        rec_old = calibrate_old(base) if compare_old else None
        errors = evaluate(zs, rec, rec_old=rec_old)
        snr = snr_curves(s.optics, values, s.noise, settings=s) if s.optics.psf_model == "gaussian" else None
        samples = []
        for k, (z, m) in enumerate(depth_curve(errors)):
            e = [x for x in errors if x.Z == z]
            samples.append(SweepSample(
                z, m, _mean([x.mae_pointwise for x in e]), _mean([x.mae_old for x in e]),
                snr_is=snr.samples[k].snr_is if snr else math.nan,
                snr_lap=snr.samples[k].snr_lap if snr else math.nan,
            ))
        return SweepResult(axis, samples)

    if axis == "psf_model":
        bad = [v for v in values if v not in PSF_CODES]
        if bad:
            raise ValueError(f"psf_model codes are {sorted(PSF_CODES)}, got {bad}")
        per_model = psf_comparison(s, models=[PSF_CODES[int(v)] for v in values])
        return SweepResult(axis, [
            SweepSample(v, _mean(per_model[PSF_CODES[int(v)]]), math.nan) for v in values
        ])

    if axis == "confidence":
        res, _ = confidence_bins(s, calibrate(replace(s, motion=Motion(), sparsity=0.0)),
                                 levels=values)
        return res

    cache: dict[str, CalibrationRecord] = {}

    def cached(settings: Settings, fn) -> CalibrationRecord:
        key = f"{fn.__name__}:{settings!r}"
        if key not in cache:
            cache[key] = fn(settings)
        return cache[key]

    samples = []
    for v in values:
        sv = _configure(s, axis, v)
        static = replace(sv, motion=Motion(), sparsity=0.0)
        rec = cached(static, calibrate)
        rec_old = cached(static, calibrate_old) if compare_old else None
        errors = evaluate(sv, rec, key=(1,), rec_old=rec_old)
        curve = depth_curve(errors)
        if len(curve) >= 3:
            wr = working_range(curve)
            wr_len, lo, hi = wr.length, wr.lo, wr.hi
        else:
            wr_len = lo = hi = math.nan
        samples.append(SweepSample(
            v, _mean([e.mae_windowed for e in errors]), _mean([e.mae_pointwise for e in errors]),
            _mean([e.mae_old for e in errors]), wr_len, lo, hi,
        ))
    return SweepResult(axis, samples)


def confidence_bins(s: Settings, rec: CalibrationRecord, levels=None, key=(3,)):
    """Per-pixel depth error binned by normalized ``|Is|`` quantiles.

    Each test image's ``|Is|`` is divided by its maximum over valid pixels,
    then all pixels from the depth grid and trials are pooled and cut at the
    requested quantile ``levels`` (default deciles).  Depth comes from the
    pointwise estimator.  Returns the binned result and the pixel count.
    """
    levels = np.linspace(0.1, 1.0, 10) if levels is None else np.asarray(levels, dtype=np.float64)
    if levels.size == 0:
        return SweepResult("confidence"), 0
    if np.any(levels <= 0) or np.any(levels > 1) or np.any(np.diff(levels) <= 0):
        raise ValueError("confidence levels must increase within (0, 1]")
    p = s.params(rec.a, rec.b)
    err, conf = [], []
    for i, z in enumerate(s.z_grid):
        for t in range(s.trials):
            I1, I2, truth = render_trial(s, z, (*key, i, t))
            Is, lap, mask, eps = derivative_maps(I1, I2, p)
            r = depth_pointwise(Is, lap, rec.a, rec.b, eps).masked(mask)
            v = r.valid
            if not v.any():
                continue
            c = np.abs(Is[v])
            err.append(np.abs(r.depth[v] - truth[v]))
            conf.append(c / c.max())
    e = np.concatenate(err) if err else np.array([])
    c = np.concatenate(conf) if conf else np.array([])
    # stable order so that ties in c fall into bins deterministically
    order = np.argsort(c, kind="stable")
    ranks = np.empty(c.size)
    ranks[order] = (np.arange(c.size) + 0.5) / max(c.size, 1)
    b = np.searchsorted(levels, ranks, side="left")
    samples = []
    for k, lv in enumerate(levels):
        sel = b == k
        samples.append(SweepSample(float(lv), _mean(e[sel]), _mean(e[sel])))
    return SweepResult("confidence", samples), int(c.size)


def psf_comparison(s: Settings, n_scenes: int = 20, models=("gaussian", "pillbox"),
                   shared_calibration: bool = False, key=(4,)) -> dict[str, list[float]]:
    """Per-scene windowed MAE for each PSF model over a common scene suite.

    Scene ``k`` places texture ``k`` at the ``k``-th of ``n_scenes`` depths
    evenly spanning the depth grid; every model sees the same textures.  Each
    model is calibrated on its own images, unless ``shared_calibration``
    reuses the Gaussian constants for all models.
    """
    depths = np.linspace(min(s.z_grid), max(s.z_grid), n_scenes)
    out = {}
    g_rec = None
    for model in models:
        sm = replace(s, optics=replace(s.optics, psf_model=model), motion=Motion(), sparsity=0.0)
        if shared_calibration:
            if g_rec is None:
                g_rec = calibrate(replace(sm, optics=replace(s.optics, psf_model="gaussian")))
            rec = g_rec
        else:
            rec = calibrate(sm)
        p = sm.params(rec.a, rec.b)
        errs = []
        for k, z in enumerate(depths):
            I1, I2, truth = render_trial(sm, float(z), (*key, k))
            Is, lap, mask, eps = derivative_maps(I1, I2, p)
            errs.append(_safe_mae(depth_windowed(Is, lap, rec.a, rec.b, s.L, eps).masked(mask), truth))
        out[model] = errs
    return out


def blur_radius_px(o: OpticsConfig, Z: float) -> float:
    """Blur radius at depth ``Z``: mean of the two sensors' ``|sigma|`` in pixels."""
    return 0.5 * (abs(defocus_level(Z, o.s1, o)) + abs(defocus_level(Z, o.s2, o))) / o.pitch


def blur_shift_mm(o: OpticsConfig, Z: float) -> float:
    """Object-space lateral shift that moves the image by one blur radius."""
    return blur_radius_px(o, Z) * o.pitch * Z / o.s2 * 1e3


@dataclass
class MotionTrial:
    Z: float
    shift_mm: float
    snapshot: float
    lateral: float
    axial: float


def motion_comparison(s: Settings, rec: CalibrationRecord | None = None) -> list[MotionTrial]:
    """Snapshot MAE against sequential capture with one blur radius of motion.

    At each grid depth the second frame is either shifted laterally by
    :func:`blur_shift_mm` or moved axially by the same distance.  All three
    cases use the same textures and the static calibration.
    """
    static = replace(s, motion=Motion(), sparsity=0.0)
    rec = calibrate(static) if rec is None else rec
    out = []
    for z in s.z_grid:
        mm = blur_shift_mm(s.optics, z)
        sz = replace(static, z_grid=(z,))
        idx = s.z_grid.index(z)

        def run(motion):
            errs = evaluate(sz, rec, key=(5, idx), motion=motion)
            return _mean([e.mae_windowed for e in errs])

        out.append(MotionTrial(z, mm, run(Motion()), run(Motion(lateral_x_mm=mm)),
                               run(Motion(axial_mm=mm))))
    return out


def snr_curves(o: OpticsConfig, z_grid, noise: float = 0.0, settings: Settings | None = None,
               lap_numerator: str = "Is", preprocess_images: bool = True) -> SweepResult:
    """Median per-pixel SNR of the two finite-difference cues at each depth.

    ``SNR(Is) = |Is| / |Is - Is_approx|`` and
    ``SNR(lap) = |Is| / |lap - lap_approx|``, where the exact aligned-image
    derivatives at the consensus distance come from the closed-form renderer
    and the approximations are the pipeline's finite differences normalized
    by ``s1 - s2``.  ``lap_numerator="lap"`` puts ``|lap|`` in the numerator
    of the second ratio instead.  With ``preprocess_images`` the same
    high-pass and denoise filters are applied to both sides.  Zero
    denominators are excluded; an all-excluded depth is reported as NaN and
    an exact match as :data:`SNR_CAP`.
    """
    if lap_numerator not in ("Is", "lap"):
        raise ValueError("lap_numerator must be 'Is' or 'lap'")
    s = settings if settings is not None else Settings()
    s = replace(s, optics=o, noise=noise)
    if o.psf_model != "gaussian":
        raise ValueError("SNR curves need the Gaussian PSF")
    h1, h2 = consensus_homographies(s.shape, o)
    margin = s.params().margin
    ds = o.s1 - o.s2
    samples = []
    for i, z in enumerate(z_grid):
        si, sl = [], []
        for t in range(s.trials):
            tex = make_texture(s, 2, i, t)
            scene = SceneSpec(tex, float(z), s.shape)
            _, Is_true, lap_true = aligned_derivatives(scene, o)
            noise_seed = int(np.random.default_rng([s.seed, 8, i, t]).integers(2**63))
            I1, I2, _ = render_pair(scene, o, NoiseSpec(noise, noise_seed))
            w1, m1 = warp(I1, h1, fill="edge")
            w2, m2 = warp(I2, h2, fill="edge")
            if preprocess_images:
                w1, w2 = preprocess(w1, s.K, s.G_std), preprocess(w2, s.K, s.G_std)
                Is_true = preprocess(Is_true, s.K, s.G_std)
                lap_true = preprocess(lap_true, s.K, s.G_std)
            Is_a, lap_a, _ = approx_derivatives(w1, w2)
            Is_a = Is_a / ds
            mask = erode_mask(m1 & m2, margin if preprocess_images else 1)
            num_lap = np.abs(lap_true) if lap_numerator == "lap" else np.abs(Is_true)
            si.append(_snr(np.abs(Is_true), np.abs(Is_true - Is_a), mask))
            sl.append(_snr(num_lap, np.abs(lap_true - lap_a), mask))
        samples.append(SweepSample(float(z), math.nan, math.nan,
                                   snr_is=_median(si), snr_lap=_median(sl)))
    return SweepResult("Z", samples)


def _snr(num, den, mask):
    keep = mask & (den > 0)
    exact = mask & (den == 0)
    vals = num[keep] / den[keep]
    if exact.any():
        vals = np.concatenate([vals, np.full(int(exact.sum()), SNR_CAP)])
    return vals


def _median(chunks):
    v = np.concatenate(chunks) if chunks else np.array([])
    return float(np.median(v)) if v.size else math.nan
