"""Experiment configuration files.

One INI file (``configparser`` syntax) describes an experiment.  Sections:

``[run]``          seed
``[optics]``       f, s1, s2, A, pitch, c, psf_model
``[scene]``        texture (noise | grating | checker | image), Z, width, height,
                   band_lo, band_hi, n_sinusoids, freq_px, angle_deg, image,
                   image_pitch, lateral_x_mm, lateral_y_mm, axial_mm,
                   rot_x_deg, rot_y_deg, rot_z_deg
``[noise]``        gaussian_std
``[pipeline]``     K, G_std, L, a, b, sparsity, sparsity_sweep, c_thre, z_max,
                   lap_eps_rel, stencil, align_first, pointwise_confidence,
                   homography (consensus | identity | 9 numbers), homography2
``[paths]``        i1, i2, truth, calibration
``[calibration]``  method, L, depths, trials, dataset (one ``Z I1 I2`` per line)
``[sweep]``        axis, values, trials, calib_trials, z_grid, compare_old,
                   snr_lap_numerator, preview
``[check]``        z_values, s_values, A_values, eps_rel, inject_A_scale

Lists are comma separated.  Floats are written with ``repr`` so a
written config parses back to identical values.  Every field has a default,
except that commands check for the sections they need.
"""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .calib import CalibrationRecord
from .imagecore import Homography
from .pipeline import PipelineParams
from .sim import Motion, OpticsConfig, desk_optics

__all__ = [
    "ConfigError",
    "SceneConfig",
    "PipelineConfig",
    "CalibrationConfig",
    "SweepConfig",
    "CheckConfig",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "dump_config",
    "save_calibration",
    "load_calibration",
]

SECTIONS = ("run", "optics", "scene", "noise", "pipeline", "paths", "calibration", "sweep", "check")


class ConfigError(ValueError):
    """Invalid or incomplete configuration; the message names the section and key."""


@dataclass
class SceneConfig:
    texture: str = "noise"
    Z: float = 0.9
    width: int = 256
    height: int = 256
    band_lo: float = 0.01
    band_hi: float = 0.08
    n_sinusoids: int = 48
    freq_px: float = 0.04
    angle_deg: float = 0.0
    image: str = ""
    image_pitch: float = 0.0
    lateral_x_mm: float = 0.0
    lateral_y_mm: float = 0.0
    axial_mm: float = 0.0
    rot_x_deg: float = 0.0
    rot_y_deg: float = 0.0
    rot_z_deg: float = 0.0

    def motion(self) -> Motion:
        return Motion(self.lateral_x_mm, self.lateral_y_mm, self.axial_mm,
                      self.rot_x_deg, self.rot_y_deg, self.rot_z_deg)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass
class PipelineConfig:
    K: int = 21
    G_std: float = 11.0
    L: int = 21
    a: float | None = None
    b: float | None = None
    sparsity: float = 0.0
    sparsity_sweep: tuple[float, ...] = ()
    c_thre: float | None = None
    z_max: float = 10.0
    lap_eps_rel: float = 1e-6
    stencil: int = 5
    align_first: bool = True
    pointwise_confidence: bool = False
    homography: str = "consensus"
    homography2: str = "consensus"

    @property
    def calibrated(self) -> bool:
        return self.a is not None and self.b is not None


@dataclass
class CalibrationConfig:
    method: str = "gauss-newton"
    L: int = 21
    depths: tuple[float, ...] = (0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2)
    trials: int = 2
    dataset: tuple[tuple[float, str, str], ...] = ()


@dataclass
class SweepConfig:
    axis: str = "Z"
    values: tuple[float, ...] = ()
    trials: int = 4
    calib_trials: int = 2
    z_grid: tuple[float, ...] = (0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2)
    compare_old: str = "auto"
    snr_lap_numerator: str = "Is"
    preview: bool = False


@dataclass
class CheckConfig:
    z_values: tuple[float, ...] = (0.5, 1.0, 1.6)
    s_values: tuple[float, ...] = ()  # empty: use s2, c, s1
    A_values: tuple[float, ...] = (0.5e-3, 1.0e-3, 2.0e-3)
    eps_rel: float = 1e-6
    inject_A_scale: float = 1.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    optics: OpticsConfig = field(default_factory=desk_optics)
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise_std: float = 0.0
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    paths: dict[str, str] = field(default_factory=dict)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    check: CheckConfig = field(default_factory=CheckConfig)
    present: tuple[str, ...] = ()  # sections found in the file
    base_dir: str = "."

    def require(self, *sections: str) -> None:
        missing = [s for s in sections if s not in self.present]
        if missing:
            raise ConfigError(f"missing config section(s): {', '.join('[' + s + ']' for s in missing)}")

    def path(self, key: str, default: str | None = None) -> str | None:
        p = self.paths.get(key, default)
        if p is None or p == "":
            return default
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def homographies(self, shape) -> tuple[Homography | None, Homography | None]:
        from .pipeline import consensus_homographies

        out = []
        cons = consensus_homographies(shape, self.optics)
        for key, spec, default in (("homography", self.pipeline.homography, cons[0]),
                                   ("homography2", self.pipeline.homography2, cons[1])):
            spec = spec.strip()
            if spec == "consensus":
                out.append(default)
            elif spec == "identity":
                out.append(None)
            else:
                try:
                    out.append(Homography(np.array(_floats(spec)).reshape(3, 3)))
                except ValueError as e:
                    raise ConfigError(f"[pipeline] {key}: {e}") from None
        return out[0], out[1]

    def pipeline_params(self, shape, a: float | None = None, b: float | None = None,
                        h=None, h2=None) -> PipelineParams:
        p = self.pipeline
        a = p.a if a is None else a
        b = p.b if b is None else b
        if a is None or b is None:
            raise ConfigError("[pipeline] a and b are not calibrated")
        if h is None and h2 is None:
            h, h2 = self.homographies(shape)
        try:
            return PipelineParams(
                a=a, b=b, K=p.K, G_std=p.G_std, L=p.L, h=h, h2=h2, sparsity=p.sparsity,
                c_thre=p.c_thre, z_max=p.z_max,
                lap_eps_rel=p.lap_eps_rel, stencil=p.stencil, align_first=p.align_first,
                pointwise_confidence=p.pointwise_confidence,
            )
        except ValueError as e:
            raise ConfigError(f"[pipeline] {e}") from None


# ---------------------------------------------------------------- conversion

def _floats(text: str) -> tuple[float, ...]:
    parts = [t for t in text.replace("\n", ",").split(",") if t.strip()]
    return tuple(float(t) for t in parts)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _parse(kind, text: str, where: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == "optfloat":
            return None if text.lower() in ("", "none") else float(text)
        if kind == "floats":
            return _floats(text)
        return text
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None


_KINDS = {"int": int, "float": float, "bool": bool, "str": str, "tuple[float, ...]": "floats",
          "float | None": "optfloat"}


def _kind(dc_field):
    t = dc_field.type if isinstance(dc_field.type, str) else getattr(dc_field.type, "__name__", "")
    return _KINDS.get(t, str)


def _read_section(cp, name: str, cls, base=None):
    obj = base if base is not None else cls()
    if not cp.has_section(name):
        return obj
    known = {f.name: f for f in fields(cls)}
    updates = {}
    for key, raw in cp.items(name):
        if key == "dataset" and cls is CalibrationConfig:
            updates[key] = _parse_dataset(raw)
            continue
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        updates[key] = _parse(_kind(known[key]), raw, f"[{name}] {key}")
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from None


def _parse_dataset(raw: str):
    out = []
    for line in raw.strip().splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ConfigError(f"[calibration] dataset lines are 'Z I1 I2', got {line!r}")
        out.append((_parse(float, parts[0], "[calibration] dataset"), parts[1], parts[2]))
    return tuple(out)


def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    """Parse config text; unknown sections or keys are errors."""
    # keys are case sensitive (A and a are different things)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")

    seed = 0
    if cp.has_section("run"):
        for key, raw in cp.items("run"):
            if key != "seed":
                raise ConfigError(f"[run] unknown key {key!r}")
            seed = _parse(int, raw, "[run] seed")
            if not 0 <= seed < 2**64:
                raise ConfigError("[run] seed must be a 64-bit unsigned integer")

    optics = desk_optics()
    if cp.has_section("optics"):
        vals = {f.name: getattr(optics, f.name) for f in fields(OpticsConfig)}
        for key, raw in cp.items("optics"):
            if key not in vals:
                raise ConfigError(f"[optics] unknown key {key!r}")
            vals[key] = raw.strip() if key == "psf_model" else _parse(float, raw, f"[optics] {key}")
        if "c" not in dict(cp.items("optics")):
            vals["c"] = None
        try:
            optics = OpticsConfig(**vals)
        except ValueError as e:
            raise ConfigError(f"[optics] {e}") from None

    noise_std = 0.0
    if cp.has_section("noise"):
        for key, raw in cp.items("noise"):
            if key != "gaussian_std":
                raise ConfigError(f"[noise] unknown key {key!r}")
            noise_std = _parse(float, raw, "[noise] gaussian_std")
        if noise_std < 0:
            raise ConfigError("[noise] gaussian_std must be >= 0")

    paths = dict(cp.items("paths")) if cp.has_section("paths") else {}
    cfg = ExperimentConfig(
        seed=seed,
        optics=optics,
        scene=_read_section(cp, "scene", SceneConfig),
        noise_std=noise_std,
        pipeline=_read_section(cp, "pipeline", PipelineConfig),
        paths=paths,
        calibration=_read_section(cp, "calibration", CalibrationConfig),
        sweep=_read_section(cp, "sweep", SweepConfig),
        check=_read_section(cp, "check", CheckConfig),
        present=tuple(cp.sections()),
        base_dir=base_dir,
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    sc = cfg.scene
    if sc.texture not in ("noise", "grating", "checker", "image"):
        raise ConfigError(f"[scene] texture must be noise, grating, checker or image, got {sc.texture!r}")
    if sc.texture == "image" and not sc.image:
        raise ConfigError("[scene] texture = image needs an image path")
    if not sc.Z > 0:
        raise ConfigError("[scene] Z must be positive")
    if sc.width < 3 or sc.height < 3:
        raise ConfigError("[scene] width and height must be >= 3")
    if cfg.calibration.method not in ("gauss-newton", "linear-inverse-depth"):
        raise ConfigError(f"[calibration] unknown method {cfg.calibration.method!r}")
    if cfg.sweep.snr_lap_numerator not in ("Is", "lap"):
        raise ConfigError("[sweep] snr_lap_numerator must be Is or lap")
    if cfg.sweep.compare_old not in ("auto", "true", "false"):
        raise ConfigError("[sweep] compare_old must be auto, true or false")
    p = cfg.pipeline
    for name in ("K", "L"):
        v = getattr(p, name)
        if v < 1 or v % 2 == 0:
            raise ConfigError(f"[pipeline] {name} must be an odd integer >= 1, got {v}")
    if cfg.calibration.L < 1 or cfg.calibration.L % 2 == 0:
        raise ConfigError(f"[calibration] L must be an odd integer >= 1, got {cfg.calibration.L}")
    if p.G_std < 0:
        raise ConfigError("[pipeline] G_std must be >= 0")
    if p.a == 0:
        raise ConfigError("[pipeline] a must be non-zero")
    if not 0 <= p.sparsity < 1:
        raise ConfigError("[pipeline] sparsity must be in [0, 1)")
    if p.stencil not in (5, 9):
        raise ConfigError("[pipeline] stencil must be 5 or 9")
    for v in cfg.pipeline.sparsity_sweep:
        if not 0 <= v < 1:
            raise ConfigError("[pipeline] sparsity_sweep values must be in [0, 1)")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))


def _write_section(cp, name, obj, skip=()):
    cp.add_section(name)
    for f in fields(obj):
        if f.name in skip:
            continue
        cp.set(name, f.name, _fmt(getattr(obj, f.name)))


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize every field, defaults included."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.add_section("run")
    cp.set("run", "seed", str(cfg.seed))
    _write_section(cp, "optics", cfg.optics)
    _write_section(cp, "scene", cfg.scene)
    cp.add_section("noise")
    cp.set("noise", "gaussian_std", _fmt(cfg.noise_std))
    _write_section(cp, "pipeline", cfg.pipeline)
    cp.add_section("paths")
    for k in sorted(cfg.paths):
        cp.set("paths", k, cfg.paths[k])
    _write_section(cp, "calibration", cfg.calibration, skip=("dataset",))
    if cfg.calibration.dataset:
        lines = [f"{z!r} {i1} {i2}" for z, i1, i2 in cfg.calibration.dataset]
        cp.set("calibration", "dataset", "\n" + "\n".join(lines))
    _write_section(cp, "sweep", cfg.sweep)
    _write_section(cp, "check", cfg.check)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# --------------------------------------------------------- calibration files

def save_calibration(path, rec: CalibrationRecord, h: Homography | None = None,
                     h2: Homography | None = None) -> None:
    """Write a calibration record in the config format.

    The ``[pipeline]`` section holds ``a``, ``b`` and the homographies so the
    file can be passed straight to ``depth`` as ``[paths] calibration``.
    """
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.add_section("pipeline")
    cp.set("pipeline", "a", repr(rec.a))
    cp.set("pipeline", "b", repr(rec.b))
    cp.set("pipeline", "L", str(rec.L))
    for key, hm in (("homography", h), ("homography2", h2)):
        cp.set("pipeline", key, "identity" if hm is None else _fmt(tuple(float(v) for v in hm.m.ravel())))
    cp.add_section("calibration")
    cp.set("calibration", "method", rec.method)
    cp.set("calibration", "residual_rms", repr(rec.residual_rms))
    cp.set("calibration", "iterations", str(rec.iterations))
    cp.set("calibration", "depths", _fmt(tuple(float(z) for z in rec.depths)))
    if rec.sources:
        cp.set("calibration", "sources", "\n" + "\n".join(rec.sources))
    with open(path, "w") as f:
        cp.write(f)


def load_calibration(path) -> tuple[CalibrationRecord, Homography | None, Homography | None]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if not cp.read(path):
        raise ConfigError(f"cannot read calibration file {path}")
    try:
        p = cp["pipeline"]
        c = cp["calibration"]
        rec = CalibrationRecord(
            a=float(p["a"]), b=float(p["b"]), residual_rms=float(c["residual_rms"]),
            method=c["method"], depths=list(_floats(c.get("depths", ""))),
            sources=[s for s in c.get("sources", "").splitlines() if s.strip()],
            iterations=int(c.get("iterations", "0")), L=int(p.get("L", "1")),
        )
        hs = []
        for key in ("homography", "homography2"):
            spec = p.get(key, "identity").strip()
            hs.append(None if spec == "identity" else Homography(np.array(_floats(spec)).reshape(3, 3)))
    except (KeyError, ValueError) as e:
        raise ConfigError(f"bad calibration file {path}: {e}") from None
    return rec, hs[0], hs[1]
