"""Thin-lens simulator for differentially defocused image pairs.

The simulator is the ground-truth oracle for the estimation pipeline.  A
fronto-parallel textured plane at distance ``Z`` is imaged through a thin lens
onto two sensors at distances ``s1`` and ``s2``.  Each sensor sees the pinhole
image ``P(x; s) = T(-(Z/s) x)`` blurred by a PSF whose width is the defocus
level ``sigma = A (1/Z - rho) s + A``.

Optics are in meters.  Sensor coordinates are meters measured from the
principal point, which sits at the image centre; ``OpticsConfig.pitch``
converts meters on the sensor to pixels.

Procedural textures are sums of sinusoids, so the defocused image can be
rendered exactly in closed form (each sinusoid is only attenuated by the PSF's
transfer function).  Sampled image textures go through the spatial path:
resample the pinhole image, then convolve with a discrete PSF kernel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .imagecore import Kernel, as_image, convolve, laplacian, pixel_grid

__all__ = [
    "OpticsConfig",
    "Motion",
    "SceneSpec",
    "NoiseSpec",
    "SinusoidTexture",
    "ImageTexture",
    "grating",
    "band_limited_noise",
    "checker",
    "defocus_level",
    "make_psf",
    "render_pair",
    "render_image",
    "gaussian_noise",
    "aligned_derivatives",
    "scaled_psf_derivative_check",
    "scaled_psf_derivatives",
    "PSF_MODELS",
]

PSF_MODELS = ("gaussian", "pillbox")


@dataclass(frozen=True)
class OpticsConfig:
    """Lens, aperture code and the two sensor distances.

    ``A`` is the standard deviation of the Gaussian aperture code in meters;
    ``pitch`` is the sensor pixel pitch (meters per pixel).  ``c`` is the
    consensus sensor distance both images are aligned to; it defaults to the
    midpoint of ``s1`` and ``s2``.
    """

    f: float = 0.030
    s1: float = 0.031343
    s2: float = 0.030769
    A: float = 1.0e-3
    pitch: float = 5.0e-6
    c: float | None = None
    psf_model: str = "gaussian"

    def __post_init__(self):
        if self.c is None:
            object.__setattr__(self, "c", 0.5 * (self.s1 + self.s2))
        for name in ("f", "s1", "s2", "A", "pitch", "c"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"optics field {name} must be positive, got {v}")
        if self.s1 == self.s2:
            raise ValueError("s1 and s2 must differ")
        if self.psf_model not in PSF_MODELS:
            raise ValueError(f"psf_model must be one of {PSF_MODELS}, got {self.psf_model!r}")

    @property
    def rho(self) -> float:
        return 1.0 / self.f

    @property
    def delta_s(self) -> float:
        return abs(self.s1 - self.s2)

    def focal_plane(self, s: float | None = None) -> float:
        """Object distance imaged sharply at sensor distance ``s`` (default ``c``)."""
        s = self.c if s is None else s
        inv = self.rho - 1.0 / s
        return math.inf if inv <= 0 else 1.0 / inv

    def closed_form_ab(self, s: float | None = None) -> tuple[float, float]:
        """Depth-equation constants ``a = -A^2``, ``b = -A^2 (1/f - 1/s)``.

        Valid for ``Is`` normalized by ``s1 - s2`` and the Laplacian in 1/m^2.
        """
        s = self.c if s is None else s
        return -self.A**2, -self.A**2 * (self.rho - 1.0 / s)

    def with_delta_s(self, delta_s: float) -> "OpticsConfig":
        """Same consensus distance, sensors placed symmetrically ``delta_s`` apart."""
        sign = 1.0 if self.s1 > self.s2 else -1.0
        return replace(
            self, s1=self.c + sign * delta_s / 2, s2=self.c - sign * delta_s / 2
        )

    @classmethod
    def from_focal_planes(cls, z1: float, z2: float, f: float = 0.030, **kw) -> "OpticsConfig":
        """Place the sensors so that they focus at object distances ``z1`` and ``z2``."""
        s1 = 1.0 / (1.0 / f - 1.0 / z1)
        s2 = 1.0 / (1.0 / f - 1.0 / z2)
        return cls(f=f, s1=s1, s2=s2, **kw)


def desk_optics(**kw) -> OpticsConfig:
    """Prototype-like desk-scale configuration (30 mm lens, planes at 0.7/1.2 m)."""
    return OpticsConfig.from_focal_planes(0.7, 1.2, **kw)


def defocus_level(Z, s, o: OpticsConfig):
    """Signed defocus level ``A (1/Z - rho) s + A`` in meters."""
    Z = np.asarray(Z, dtype=np.float64)
    if np.any(Z <= 0) or s <= 0:
        raise ValueError("Z and s must be positive")
    out = o.A * (1.0 / Z - o.rho) * s + o.A
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- PSF kernels

_DELTA = Kernel(np.ones(1))


def make_psf(sigma: float, model: str = "gaussian", pitch: float = 1.0) -> Kernel:
    """Discrete, normalized PSF for a defocus level ``sigma`` (meters).

    Gaussian: std ``|sigma|/pitch`` px, truncated at ``ceil(4 std)``.  Pillbox:
    disk of radius ``|sigma|/pitch`` px with an anti-aliased rim (coverage
    estimated on a 16x16 sub-grid per pixel).  Blurs narrower than a tenth of
    a pixel (Gaussian) or half a pixel (pillbox) give a delta kernel.
    """
    if sigma == 0:
        raise ValueError("sigma must be non-zero")
    width = abs(sigma) / pitch
    if model == "gaussian":
        if width < 0.1:
            return _DELTA
        r = max(1, int(math.ceil(4.0 * width)))
        x = np.arange(-r, r + 1, dtype=np.float64)
        taps = np.exp(-0.5 * (x / width) ** 2)
        return Kernel(taps / taps.sum())
    if model == "pillbox":
        if width < 0.5:
            return _DELTA
        r = int(math.ceil(width))
        n = 16
        sub = (np.arange(n) + 0.5) / n - 0.5
        off = np.arange(-r, r + 1, dtype=np.float64)
        fine = (off[:, None] + sub[None, :]).ravel()
        inside = (fine[:, None] ** 2 + fine[None, :] ** 2) <= width**2
        cover = inside.reshape(2 * r + 1, n, 2 * r + 1, n).mean(axis=(1, 3))
        return Kernel(cover / cover.sum())
    raise ValueError(f"unknown PSF model {model!r}")


def psf_transfer(nu, sigma, model: str):
    """Continuous transfer function of the PSF at radial frequency ``nu`` (cycles/m)."""
    nu = np.asarray(nu, dtype=np.float64)
    if model == "gaussian":
        return np.exp(-2.0 * np.pi**2 * nu**2 * np.square(sigma))
    if model == "pillbox":
        arg = 2.0 * np.pi * nu * np.abs(sigma)
        safe = np.where(arg == 0, 1.0, arg)
        return np.where(arg == 0, 1.0, 2.0 * special.j1(safe) / safe)
    raise ValueError(f"unknown PSF model {model!r}")


# ------------------------------------------------------------------- textures

@dataclass(frozen=True)
class SinusoidTexture:
    """``T(u) = mean + sum_k amp_k cos(2 pi freq_k . u + phase_k)``, ``u`` in meters.

    ``freqs`` has shape ``(n, 2)`` in cycles per meter on the object plane.
    """

    freqs: np.ndarray
    amps: np.ndarray
    phases: np.ndarray
    mean: float = 0.5

    def __post_init__(self):
        freqs = np.atleast_2d(np.asarray(self.freqs, dtype=np.float64))
        amps = np.atleast_1d(np.asarray(self.amps, dtype=np.float64))
        phases = np.atleast_1d(np.asarray(self.phases, dtype=np.float64))
        if freqs.shape[1] != 2 or not (len(freqs) == len(amps) == len(phases)):
            raise ValueError("freqs must be (n, 2) with matching amps and phases")
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "amps", amps)
        object.__setattr__(self, "phases", phases)

    def __call__(self, u, v):
        u = np.asarray(u, dtype=np.float64)
        out = np.full(u.shape, self.mean)
        for (fu, fv), a, p in zip(self.freqs, self.amps, self.phases):
            out += a * np.cos(2.0 * np.pi * (fu * u + fv * v) + p)
        return out

    @property
    def max_freq(self) -> float:
        return float(np.hypot(self.freqs[:, 0], self.freqs[:, 1]).max())


@dataclass(frozen=True)
class ImageTexture:
    """Sampled texture with object-plane sample spacing ``pitch`` meters, centred on the axis."""

    data: np.ndarray
    pitch: float

    def __post_init__(self):
        object.__setattr__(self, "data", as_image(self.data))
        if self.pitch <= 0:
            raise ValueError("texture pitch must be positive")

    def __call__(self, u, v):
        h, w = self.data.shape
        col = np.clip(u / self.pitch + (w - 1) / 2.0, 0, w - 1)
        row = np.clip(v / self.pitch + (h - 1) / 2.0, 0, h - 1)
        c0 = np.minimum(np.floor(col).astype(np.intp), w - 2)
        r0 = np.minimum(np.floor(row).astype(np.intp), h - 2)
        fc = col - c0
        fr = row - r0
        d = self.data
        return (d[r0, c0] * (1 - fc) + d[r0, c0 + 1] * fc) * (1 - fr) + (
            d[r0 + 1, c0] * (1 - fc) + d[r0 + 1, c0 + 1] * fc
        ) * fr


def object_freq(nu_px: float, Z: float, o: OpticsConfig) -> float:
    """Object-plane frequency (cycles/m) that lands at ``nu_px`` cycles/pixel at depth ``Z``."""
    return nu_px * o.c / (Z * o.pitch)


def grating(freq: float, angle: float = 0.0, amp: float = 0.4, phase: float = 0.0,
            mean: float = 0.5) -> SinusoidTexture:
    """Single sinusoidal grating; ``freq`` in cycles per meter, ``angle`` in radians."""
    return SinusoidTexture(
        [[freq * math.cos(angle), freq * math.sin(angle)]], [amp], [phase], mean
    )


def band_limited_noise(rng: np.random.Generator, band: tuple[float, float], n: int = 48,
                       contrast: float = 0.4, mean: float = 0.5) -> SinusoidTexture:
    """Random sum of ``n`` sinusoids with radial frequencies uniform in ``band`` (cycles/m).

    Amplitudes are normalized so the texture stays within
    ``mean +/- contrast``.
    """
    lo, hi = band
    if not 0 < lo <= hi:
        raise ValueError("band must satisfy 0 < lo <= hi")
    radius = rng.uniform(lo, hi, n)
    theta = rng.uniform(0.0, np.pi, n)
    freqs = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
    amps = rng.uniform(0.5, 1.0, n)
    amps *= contrast / amps.sum()
    phases = rng.uniform(0.0, 2.0 * np.pi, n)
    return SinusoidTexture(freqs, amps, phases, mean)


def checker(freq: float, harmonics: int = 3, contrast: float = 0.4,
            mean: float = 0.5) -> SinusoidTexture:
    """Band-limited checkerboard: product of two truncated square waves.

    ``freq`` is the square-wave fundamental (cycles/m); odd harmonics up to
    ``harmonics`` are kept.
    """
    ks = np.arange(1, harmonics + 1, 2)
    coef = 4.0 / (np.pi * ks)
    freqs, amps, phases = [], [], []
    # sin(a) sin(b) = (cos(a - b) - cos(a + b)) / 2
    for kx, cx in zip(ks, coef):
        for ky, cy in zip(ks, coef):
            w = cx * cy / 2.0
            freqs += [[kx * freq, -ky * freq], [kx * freq, ky * freq]]
            amps += [w, w]
            phases += [0.0, np.pi]
    amps = np.array(amps)
    amps *= contrast / amps.sum()
    return SinusoidTexture(freqs, amps, phases, mean)


# --------------------------------------------------------------------- scenes

@dataclass(frozen=True)
class Motion:
    """Rigid scene perturbation between the two captures.

    Lateral/axial translations in millimetres (object space), rotations in
    degrees about the camera x, y and z (optical) axes.
    """

    lateral_x_mm: float = 0.0
    lateral_y_mm: float = 0.0
    axial_mm: float = 0.0
    rot_x_deg: float = 0.0
    rot_y_deg: float = 0.0
    rot_z_deg: float = 0.0

    @property
    def is_zero(self) -> bool:
        return not any(
            (self.lateral_x_mm, self.lateral_y_mm, self.axial_mm,
             self.rot_x_deg, self.rot_y_deg, self.rot_z_deg)
        )

    @property
    def tilted(self) -> bool:
        return bool(self.rot_x_deg or self.rot_y_deg)

    def rotation(self) -> np.ndarray:
        ax, ay, az = np.deg2rad([self.rot_x_deg, self.rot_y_deg, self.rot_z_deg])
        rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
        ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
        rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
        return rz @ ry @ rx


@dataclass(frozen=True)
class SceneSpec:
    texture: SinusoidTexture | ImageTexture
    Z: float
    shape: tuple[int, int] = (256, 256)
    motion: Motion = field(default_factory=Motion)

    def __post_init__(self):
        if not self.Z > 0:
            raise ValueError("Z must be positive")
        if len(self.shape) != 2 or min(self.shape) < 3:
            raise ValueError(f"bad image shape {self.shape}")


@dataclass(frozen=True)
class NoiseSpec:
    """Additive white Gaussian noise; ``gaussian_std`` is a fraction of the [0, 1] range."""

    gaussian_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_std < 0:
            raise ValueError("gaussian_std must be >= 0")


def gaussian_noise(shape, std: float, seed: int, stream: int = 0,
                   rows: tuple[int, int] | None = None) -> np.ndarray:
    """Position-indexed Gaussian noise field.

    Built on the Philox counter-based generator: pixel ``p`` (row-major) uses
    raw outputs ``2p`` and ``2p+1`` through a Box-Muller transform, so any
    block of rows can be generated independently and matches the full field
    bit for bit.
    """
    h, w = shape
    r0, r1 = (0, h) if rows is None else rows
    p0, p1 = r0 * w, r1 * w
    first = (2 * p0) // 4
    skip = 2 * p0 - 4 * first
    key = (int(seed) % 2**64) | ((int(stream) % 2**64) << 64)
    bg = np.random.Philox(key=key, counter=[first, 0, 0, 0])
    raw = bg.random_raw(skip + 2 * (p1 - p0))[skip:]
    # 53-bit uniforms in (0, 1]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u1, u2 = u[0::2], u[1::2]
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return (std * z).reshape(r1 - r0, w)


def _ray_geometry(shape, s: float, o: OpticsConfig, Z: float, motion: Motion | None):
    """Object-plane coordinates ``(u, v)`` and depth seen by every pixel."""
    gx, gy = pixel_grid(shape)
    h, w = shape
    x = (gx - (w - 1) / 2.0) * o.pitch
    y = (gy - (h - 1) / 2.0) * o.pitch
    if motion is None or motion.is_zero:
        k = -Z / s
        return k * x, k * y, np.full(shape, float(Z))
    origin = np.array([motion.lateral_x_mm, motion.lateral_y_mm, motion.axial_mm]) * 1e-3
    origin[2] += Z
    R = motion.rotation()
    n = R[:, 2]
    # viewing ray through sensor point x: direction (-x/s, -y/s, 1)
    dx, dy = -x / s, -y / s
    lam = (n @ origin) / (n[0] * dx + n[1] * dy + n[2])
    px, py, pz = lam * dx - origin[0], lam * dy - origin[1], lam - origin[2]
    u = R[0, 0] * px + R[1, 0] * py + R[2, 0] * pz
    v = R[0, 1] * px + R[1, 1] * py + R[2, 1] * pz
    return u, v, lam


def render_image(scene: SceneSpec, o: OpticsConfig, s: float, motion: Motion | None = None,
                 method: str = "auto") -> tuple[np.ndarray, np.ndarray]:
    """Noiseless defocused image at sensor distance ``s`` and the per-pixel depth.

    ``method`` is ``"spectral"`` (closed form, sinusoid textures only),
    ``"spatial"`` (pinhole resampling + PSF convolution) or ``"auto"``.
    """
    tex = scene.texture
    if method == "auto":
        method = "spectral" if isinstance(tex, SinusoidTexture) else "spatial"
    u, v, depth = _ray_geometry(scene.shape, s, o, scene.Z, motion)
    zmax = float(depth.max())
    if not np.all(depth > 0):
        raise ValueError("scene plane intersects the camera")

    if isinstance(tex, SinusoidTexture):
        if tex.max_freq * zmax / s * o.pitch >= 0.5:
            raise ValueError(
                "texture aliases: max frequency exceeds Nyquist on the sensor "
                f"({tex.max_freq * zmax / s * o.pitch:.3f} cycles/pixel)"
            )
    elif o.pitch * float(depth.min()) / s > tex.pitch * (1 + 1e-9):
        raise ValueError("texture aliases: texture sampled finer than the pixel footprint")

    if method == "spectral":
        if not isinstance(tex, SinusoidTexture):
            raise ValueError("spectral rendering needs a SinusoidTexture")
        sigma = defocus_level(depth, s, o)
        out = np.full(scene.shape, tex.mean)
        radial = np.hypot(tex.freqs[:, 0], tex.freqs[:, 1])
        for (fu, fv), nu, a, p in zip(tex.freqs, radial, tex.amps, tex.phases):
            # sensor-plane frequency of this component is nu * depth / s
            gain = psf_transfer(nu * depth / s, sigma, o.psf_model)
            out += a * gain * np.cos(2.0 * np.pi * (fu * u + fv * v) + p)
        return out, depth

    if method != "spatial":
        raise ValueError(f"unknown render method {method!r}")
    if motion is not None and motion.tilted:
        raise ValueError("spatial rendering supports fronto-parallel planes only")
    pinhole = tex(u, v)
    sig = defocus_level(scene.Z, s, o)
    k = _DELTA if sig == 0 else make_psf(sig, o.psf_model, o.pitch)
    return convolve(pinhole, k), depth


def render_pair(scene: SceneSpec, o: OpticsConfig, n: NoiseSpec = NoiseSpec(),
                method: str = "auto") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render ``(I1, I2, truth)``.

    ``scene.motion`` perturbs the scene before ``I2`` is captured, emulating
    sequential capture; the truth depth refers to the ``I1`` capture.
    """
    i1, truth = render_image(scene, o, o.s1, None, method)
    i2, _ = render_image(scene, o, o.s2, scene.motion, method)
    if n.gaussian_std > 0:
        i1 = i1 + gaussian_noise(scene.shape, n.gaussian_std, n.seed, stream=1)
        i2 = i2 + gaussian_noise(scene.shape, n.gaussian_std, n.seed, stream=2)
    return i1, i2, truth


# --------------------------------------------------------- analytic derivatives

def aligned_derivatives(scene: SceneSpec, o: OpticsConfig, s: float | None = None):
    """Closed-form aligned image, its s-derivative and Laplacian at sensor distance ``s``.

    Coordinates are consensus-frame pixels; ``Is`` is per meter of sensor
    distance and ``lap`` per square pixel.  Gaussian PSF and sinusoid textures
    only; no motion.
    """
    tex = scene.texture
    if not isinstance(tex, SinusoidTexture):
        raise ValueError("analytic derivatives need a SinusoidTexture")
    if o.psf_model != "gaussian":
        raise ValueError("analytic derivatives are only defined for the Gaussian PSF")
    s = o.c if s is None else s
    Z = scene.Z
    u, v, _ = _ray_geometry(scene.shape, o.c, o, Z, None)
    sigma = defocus_level(Z, s, o)
    blur = Z * sigma / s  # object-space blur
    dblur = -Z * o.A / s**2
    mag2 = (Z / o.c * o.pitch) ** 2  # (object m per consensus px)^2
    img = np.full(scene.shape, tex.mean)
    Is = np.zeros(scene.shape)
    lap = np.zeros(scene.shape)
    for (fu, fv), a, p in zip(tex.freqs, tex.amps, tex.phases):
        w2 = fu * fu + fv * fv
        g = a * math.exp(-2.0 * math.pi**2 * w2 * blur**2)
        term = g * np.cos(2.0 * np.pi * (fu * u + fv * v) + p)
        img += term
        Is += -4.0 * math.pi**2 * w2 * blur * dblur * term
        lap += -4.0 * math.pi**2 * w2 * mag2 * term
    return img, Is, lap


# -------------------------------------------------- scaled-PSF identity check

def _scaled_psf(x2, s, o: OpticsConfig, Z):
    """Scaled PSF ``(s/c)^2 k((s/c) x)`` with ``k = exp(-|x|^2 / 2 sigma^2) / sigma^2``."""
    sig = defocus_level(Z, s, o)
    return (s / o.c) ** 2 / sig**2 * np.exp(-(s / o.c) ** 2 * x2 / (2.0 * sig**2))


def scaled_psf_derivatives(x2, s: float, o: OpticsConfig, Z: float):
    """Closed-form ``(k~_s, lap k~)`` of the scaled Gaussian PSF at squared radius ``x2``.

    With ``psi = -s^2 |x|^2 / (2 c^2 sigma^2)``:
    ``k~_s = (2 + 2 psi) (s A / (c^2 sigma^3)) e^psi`` and
    ``lap k~ = -(2 + 2 psi) (s^4 / (c^4 sigma^4)) e^psi``.
    """
    sigma = defocus_level(Z, s, o)
    psi = -(s**2) * np.asarray(x2, dtype=np.float64) / (2.0 * o.c**2 * sigma**2)
    ks = (2.0 + 2.0 * psi) * s * o.A / (o.c**2 * sigma**3) * np.exp(psi)
    lap = -(2.0 + 2.0 * psi) * s**4 / (o.c**4 * sigma**4) * np.exp(psi)
    return ks, lap


@dataclass
class PsfCheckReport:
    Z: float
    s: float
    A: float
    sigma: float
    fd_vs_identity: float
    closed_forms: float
    fd_laplacian: float

    def passed(self, tol: float = 1e-3, closed_tol: float = 1e-9) -> bool:
        return self.fd_vs_identity < tol and self.closed_forms < closed_tol


def scaled_psf_derivative_check(o: OpticsConfig, Z: float, eps: float | None = None,
                                s: float | None = None, n: int = 129,
                                A_rhs: float | None = None) -> PsfCheckReport:
    """Numerically verify ``k~_s = -(c^2 sigma A / s^3) lap k~`` for the Gaussian PSF.

    ``k~_s`` comes from a central difference in ``s`` with step ``eps``
    (default ``1e-6 s``) and is compared with the right-hand side built from
    the closed-form Laplacian.  Errors are relative to ``max |k~_s|`` over a
    grid covering four standard deviations of the scaled PSF.  The report
    also compares the two closed forms with each other and checks the
    closed-form Laplacian against a spatial five-point difference.

    ``A_rhs`` overrides the aperture used on the right-hand side only, for
    fault-injection tests.
    """
    if o.psf_model != "gaussian":
        raise ValueError("the derivative identity holds for the Gaussian PSF only")
    s = o.c if s is None else s
    eps = 1e-6 * s if eps is None else eps
    sigma = defocus_level(Z, s, o)
    dsig = abs(o.A * (1.0 / Z - o.rho))
    if abs(sigma) < 1e3 * dsig * eps or abs(sigma) < 1e-12:
        raise ValueError(
            f"defocus level {sigma:.3e} m is too small for a stable finite difference; "
            "move Z away from the focal plane or use a larger aperture A"
        )
    width = o.c * abs(sigma) / s
    half = 4.0 * width
    h = 2.0 * half / (n - 1)
    t = np.linspace(-half, half, n)
    X, Y = np.meshgrid(t, t)
    x2 = X**2 + Y**2

    ks_fd = (_scaled_psf(x2, s + eps, o, Z) - _scaled_psf(x2, s - eps, o, Z)) / (2.0 * eps)

    ks_closed, lap_closed = scaled_psf_derivatives(x2, s, o, Z)
    A_r = o.A if A_rhs is None else A_rhs
    rhs = -(o.c**2) * sigma * A_r / s**3 * lap_closed

    scale = np.abs(ks_closed).max()
    lap_fd = laplacian(_scaled_psf(x2, s, o, Z), pitch=h)[1:-1, 1:-1]
    lap_err = np.abs(lap_fd - lap_closed[1:-1, 1:-1]).max() / np.abs(lap_closed).max()
    return PsfCheckReport(
        Z=Z, s=s, A=o.A, sigma=sigma,
        fd_vs_identity=float(np.abs(ks_fd - rhs).max() / scale),
        closed_forms=float(np.abs(ks_closed - (-(o.c**2) * sigma * o.A / s**3) * lap_closed).max() / scale),
        fd_laplacian=float(lap_err),
    )
