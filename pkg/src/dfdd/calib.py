"""Calibration of the depth constants, homography fitting and accuracy metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imagecore import Homography
from .pipeline import DepthResult, _box_sum

__all__ = [
    "CalibrationError",
    "CalibrationRecord",
    "fit_homography",
    "reprojection_rms",
    "calibrate_ab",
    "window_sums",
    "windowed_depth_from_sums",
    "mae",
    "WorkingRange",
    "working_range",
]


class CalibrationError(RuntimeError):
    """Calibration failed; ``last`` holds the final ``(a, b)`` iterate when available."""

    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


# ----------------------------------------------------------------- homography

def _normalizing_transform(pts):
    mean = pts.mean(axis=0)
    d = np.sqrt(((pts - mean) ** 2).sum(axis=1)).mean()
    scale = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[scale, 0, -scale * mean[0]], [0, scale, -scale * mean[1]], [0, 0, 1]])


def fit_homography(src, dst) -> Homography:
    """Least-squares DLT fit of ``H`` with ``dst ~ H src`` (normalized coordinates).

    To align ``I1`` onto ``I2``'s grid pass ``src`` = points in ``I2`` and
    ``dst`` = the corresponding points in ``I1``; the result plugs straight
    into :class:`~dfdd.pipeline.PipelineParams` as ``h``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError("src and dst must both be (n, 2) arrays")
    if len(src) < 4:
        raise ValueError(f"need at least 4 correspondences, got {len(src)}")
    for pts in (src, dst):
        centred = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centred, compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1e-300):
            raise ValueError("correspondences are collinear")
    Ts = _normalizing_transform(src)
    Td = _normalizing_transform(dst)
    hs = np.column_stack([src, np.ones(len(src))]) @ Ts.T
    hd = np.column_stack([dst, np.ones(len(dst))]) @ Td.T
    rows = []
    for (x, y, _), (u, v, _) in zip(hs, hd):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, sv, vt = np.linalg.svd(np.asarray(rows))
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    return Homography(H / H[2, 2])


def reprojection_rms(h: Homography, src, dst) -> float:
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    x, y = h.apply(src[:, 0], src[:, 1])
    return float(np.sqrt(np.mean((x - dst[:, 0]) ** 2 + (y - dst[:, 1]) ** 2)))


# ---------------------------------------------------------------- calibration

@dataclass
class CalibrationRecord:
    a: float
    b: float
    residual_rms: float
    method: str
    depths: list[float] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)
    iterations: int = 0
    L: int = 1

    def __post_init__(self):
        if not math.isfinite(self.residual_rms):
            raise ValueError("residual_rms must be finite")
        if self.a == 0:
            raise ValueError("a must be non-zero")


def window_sums(Is, lap, L: int):
    """Box sums of ``lap^2``, ``lap*Is`` and ``Is^2`` over ``L x L`` windows."""
    Is = np.asarray(Is, dtype=np.float64)
    lap = np.asarray(lap, dtype=np.float64)
    return _box_sum(lap * lap, L), _box_sum(lap * Is, L), _box_sum(Is * Is, L)


def windowed_depth_from_sums(a, b, s_ll, s_li, s_ii):
    """Windowed depth written in terms of the three window sums."""
    return a * (b * s_ll + s_li) / (b * b * s_ll + 2.0 * b * s_li + s_ii)


def _unpack(entry):
    if len(entry) == 3:
        z, Is, lap = entry
        mask = None
    elif len(entry) == 4:
        z, Is, lap, mask = entry
    else:
        raise ValueError("dataset entries are (Z, Is, lap) or (Z, Is, lap, mask)")
    Is = np.asarray(Is, dtype=np.float64)
    lap = np.asarray(lap, dtype=np.float64)
    if Is.shape != lap.shape:
        raise ValueError("Is and lap shapes differ")
    mask = np.ones(Is.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return float(z), Is, lap, mask


def calibrate_ab(dataset, L: int = 1, method: str = "gauss-newton", max_iter: int = 50,
                 tol: float = 1e-10, sources=None) -> CalibrationRecord:
    """Fit the depth constants ``(a, b)`` from images of planes at known depths.

    ``dataset`` holds ``(Z*, Is, lap[, mask])`` entries.  Stage one solves the
    linear least-squares problem ``u Is + v lap = lap / Z*`` for
    ``u = 1/a, v = b/a`` (with ``L > 1`` the products are window-summed first).
    Stage two (``method="gauss-newton"``) refines ``(a, b)`` on the squared
    depth error of the estimator with window ``L`` (``L = 1`` is per pixel),
    with Levenberg damping whenever a step increases the cost.
    """
    if method not in ("linear-inverse-depth", "gauss-newton"):
        raise ValueError(f"unknown calibration method {method!r}")
    entries = [_unpack(e) for e in dataset]
    depths = [e[0] for e in entries]
    if len(set(depths)) < 2:
        raise CalibrationError("calibration needs at least two distinct distances")

    z_all, sll, sli, sii = [], [], [], []
    for z, Is, lap, mask in entries:
        s_ll, s_li, s_ii = window_sums(Is, lap, L)
        keep = mask & (s_ll > 0)
        z_all.append(np.full(int(keep.sum()), z))
        sll.append(s_ll[keep])
        sli.append(s_li[keep])
        sii.append(s_ii[keep])
    z_all = np.concatenate(z_all)
    sll = np.concatenate(sll)
    sli = np.concatenate(sli)
    sii = np.concatenate(sii)
    if len(set(z_all.tolist())) < 2:
        raise CalibrationError("fewer than two distances have usable pixels")

    # stage 1: sum over window of lap * (u Is + v lap) = sum lap^2 / Z
    M = np.column_stack([sli, sll])
    rhs = sll / z_all
    colscale = np.sqrt((M**2).sum(axis=0))
    if np.any(colscale == 0):
        raise CalibrationError("rank-deficient calibration system")
    Mn = M / colscale
    sol, _, rank, sv = np.linalg.lstsq(Mn, rhs, rcond=None)
    if rank < 2 or sv[-1] < 1e-12 * sv[0]:
        raise CalibrationError("rank-deficient calibration system")
    u, v = sol / colscale
    if u == 0:
        raise CalibrationError("degenerate linear solution (1/a = 0)")
    a, b = 1.0 / u, v / u

    def residual(a, b):
        return z_all - windowed_depth_from_sums(a, b, sll, sli, sii)

    iters = 0
    if method == "gauss-newton":
        e = residual(a, b)
        cost = float(e @ e)
        lam = 0.0
        converged = False
        for iters in range(1, max_iter + 1):
            N = b * sll + sli
            D = b * b * sll + 2.0 * b * sli + sii
            Zp = a * N / D
            J = np.column_stack([Zp / a, a * (sll * D - N * (2.0 * b * sll + 2.0 * sli)) / D**2])
            JtJ = J.T @ J
            g = J.T @ e
            while True:
                A_ = JtJ + lam * np.diag(np.diag(JtJ))
                try:
                    step = np.linalg.solve(A_, g)
                except np.linalg.LinAlgError:
                    step = np.linalg.lstsq(A_, g, rcond=None)[0]
                a_new, b_new = a + step[0], b + step[1]
                e_new = residual(a_new, b_new)
                cost_new = float(e_new @ e_new)
                if np.isfinite(cost_new) and cost_new <= cost:
                    lam = lam / 10.0 if lam > 1e-12 else 0.0
                    break
                lam = 1e-3 if lam == 0 else lam * 10.0
                if lam > 1e12:
                    step = np.zeros(2)
                    a_new, b_new, e_new, cost_new = a, b, e, cost
                    break
            rel = abs(step[0]) / max(abs(a), 1e-300) + abs(step[1]) / max(abs(a), abs(b), 1e-300)
            a, b, e, cost = a_new, b_new, e_new, cost_new
            if rel < tol:
                converged = True
                break
        if not converged:
            raise CalibrationError(
                f"Gauss-Newton did not converge in {max_iter} iterations", last=(a, b)
            )

    e = residual(a, b)
    rms = float(np.sqrt(np.mean(e**2)))
    if not math.isfinite(rms):
        raise CalibrationError("non-finite calibration residual", last=(a, b))
    return CalibrationRecord(a=float(a), b=float(b), residual_rms=rms, method=method,
                             depths=depths, sources=list(sources or []), iterations=iters, L=L)


# -------------------------------------------------------------------- metrics

def mae(depth: DepthResult, truth) -> float:
    """Mean absolute depth error over valid pixels."""
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != depth.depth.shape:
        raise ValueError("depth and truth shapes differ")
    if not depth.valid.any():
        raise ValueError("no valid pixels")
    return float(np.mean(np.abs(depth.depth[depth.valid] - truth[depth.valid])))


@dataclass(frozen=True)
class WorkingRange:
    lo: float
    hi: float

    @property
    def length(self) -> float:
        return 0.0 if math.isnan(self.lo) else self.hi - self.lo

    @property
    def empty(self) -> bool:
        return math.isnan(self.lo)


def working_range(curve, rel: float = 0.05) -> WorkingRange:
    """Longest contiguous depth interval with ``MAE(Z) < rel * Z``.

    ``curve`` is a sequence of ``(Z, MAE)``; crossings are located by linear
    interpolation of ``MAE - rel*Z``.  Missing (NaN) MAE values count as
    failing.
    """
    pts = sorted((float(z), float(m)) for z, m in curve)
    if len(pts) < 3:
        raise ValueError("working range needs at least 3 depth samples")
    z = np.array([p[0] for p in pts])
    m = np.array([p[1] for p in pts])
    g = np.where(np.isnan(m), np.inf, m - rel * z)
    ok = g < 0
    best = WorkingRange(math.nan, math.nan)
    i = 0
    n = len(z)
    while i < n:
        if not ok[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and ok[j + 1]:
            j += 1
        lo = z[i] if i == 0 else _crossing(z[i - 1], g[i - 1], z[i], g[i])
        hi = z[j] if j == n - 1 else _crossing(z[j], g[j], z[j + 1], g[j + 1])
        if best.empty or hi - lo > best.length:
            best = WorkingRange(float(lo), float(hi))
        i = j + 1
    return best


def _crossing(z0, g0, z1, g1):
    if not np.isfinite(g0):
        return z1
    if not np.isfinite(g1):
        return z0
    return z0 + (z1 - z0) * g0 / (g0 - g1)
