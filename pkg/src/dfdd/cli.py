"""Command-line entry point: ``dfdd {render,depth,calibrate,sweep,check}``.

Every command takes ``--config PATH`` and optional ``--seed N`` (overrides
``[run] seed``) and ``--out DIR`` (default ``./out``).  Results go to files
in ``DIR``; a summary of ``key=value`` lines goes to stdout and diagnostics
go to stderr.

Exit codes
----------
0  success, all artifacts written and all embedded checks passed
1  an embedded check failed (``check``)
2  bad command line or invalid/incomplete config
3  missing or inconsistent inputs (images, calibration)
4  output problem (unwritable directory, another run holds the lock)
5  calibration failed
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np

from . import io as dio
from .calib import CalibrationError, calibrate_ab, mae
from .config import (
    ConfigError,
    ExperimentConfig,
    dump_config,
    load_calibration,
    load_config,
    save_calibration,
)
from .experiments import PSF_CODES, Settings, render_trial, snr_curves, sweep
from .pipeline import derivative_maps, run_pipeline, to_gray
from .sim import (
    ImageTexture,
    NoiseSpec,
    SceneSpec,
    band_limited_noise,
    checker,
    grating,
    object_freq,
    render_pair,
    scaled_psf_derivative_check,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_OUTPUT = 4
EXIT_CALIBRATION = 5

LOCK_NAME = ".dfdd.lock"


class CommandError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def _summary(**kv):
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        print(f"{k}={v}")


@contextmanager
def _locked(out_dir):
    try:
        dio.ensure_dir(out_dir)
    except OSError as e:
        raise CommandError(f"cannot create output directory {out_dir}: {e.strerror}", EXIT_OUTPUT)
    lock = os.path.join(out_dir, LOCK_NAME)
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CommandError(f"{out_dir} is locked by another run (remove {lock} if stale)", EXIT_OUTPUT)
    except OSError as e:
        raise CommandError(f"cannot write to {out_dir}: {e.strerror}", EXIT_OUTPUT)
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        try:
            os.remove(lock)
        except OSError:
            pass


# ------------------------------------------------------------------- scenes

def build_texture(cfg: ExperimentConfig, seed: int):
    sc, o = cfg.scene, cfg.optics
    if sc.texture == "noise":
        rng = np.random.default_rng([seed, 11])
        band = (object_freq(sc.band_lo, sc.Z, o), object_freq(sc.band_hi, sc.Z, o))
        return band_limited_noise(rng, band, n=sc.n_sinusoids)
    if sc.texture == "grating":
        return grating(object_freq(sc.freq_px, sc.Z, o), math.radians(sc.angle_deg))
    if sc.texture == "checker":
        return checker(object_freq(sc.freq_px, sc.Z, o))
    path = sc.image if os.path.isabs(sc.image) else os.path.join(cfg.base_dir, sc.image)
    try:
        data = to_gray(dio.read_image(path))
    except OSError as e:
        raise CommandError(f"cannot read texture image {path}: {e}", EXIT_INPUT)
    # default: one texel per pixel at the coarser of the two sensor samplings
    pitch = sc.image_pitch or o.pitch * sc.Z / min(o.s1, o.s2)
    return ImageTexture(data, pitch)


def render_from_config(cfg: ExperimentConfig, seed: int):
    scene = SceneSpec(build_texture(cfg, seed), cfg.scene.Z, cfg.scene.shape, cfg.scene.motion())
    noise_seed = int(np.random.default_rng([seed, 12]).integers(2**63))
    return render_pair(scene, cfg.optics, NoiseSpec(cfg.noise_std, noise_seed))


def _write_sidecar(path, cfg: ExperimentConfig, seed: int, extra: dict):
    text = dump_config(replace(cfg, seed=seed))
    lines = ["", "[artifact]"] + [f"{k} = {v}" for k, v in extra.items()]
    with open(path, "w") as f:
        f.write(text.rstrip("\n") + "\n" + "\n".join(lines) + "\n")


# ----------------------------------------------------------------- commands

def cmd_render(cfg: ExperimentConfig, seed: int, out: str) -> int:
    cfg.require("optics", "scene")
    try:
        I1, I2, truth = render_from_config(cfg, seed)
    except ValueError as e:
        raise CommandError(f"[scene] {e}", EXIT_CONFIG)
    clipped = int(((I1 < 0) | (I1 > 1)).sum() + ((I2 < 0) | (I2 > 1)).sum())
    with _locked(out):
        dio.write_png(os.path.join(out, "I1.png"), I1)
        dio.write_png(os.path.join(out, "I2.png"), I2)
        dio.write_pfm(os.path.join(out, "truth.pfm"), truth)
        _write_sidecar(os.path.join(out, "render.ini"), cfg, seed, {
            "truth_depth_m": repr(float(cfg.scene.Z)),
            "clipped_samples": clipped,
            "png_bits": 16,
        })
    _summary(command="render", out=out, Z=cfg.scene.Z, clipped=clipped)
    return EXIT_OK


def _load_pair(cfg: ExperimentConfig, out: str):
    p1 = cfg.path("i1") or os.path.join(out, "I1.png")
    p2 = cfg.path("i2") or os.path.join(out, "I2.png")
    try:
        I1, I2 = dio.read_image(p1), dio.read_image(p2)
    except (OSError, ValueError) as e:
        raise CommandError(f"cannot read input images: {e}", EXIT_INPUT)
    if I1.shape[:2] != I2.shape[:2]:
        raise CommandError(f"image sizes differ: {I1.shape} vs {I2.shape}", EXIT_INPUT)
    return I1, I2


def _calibration(cfg: ExperimentConfig, shape):
    """``(a, b, h, h2)`` from the config, or from the calibration file it names."""
    cal_path = cfg.path("calibration")
    if cal_path:
        try:
            rec, h, h2 = load_calibration(cal_path)
        except ConfigError as e:
            raise CommandError(str(e), EXIT_INPUT)
        return rec.a, rec.b, h, h2
    if not cfg.pipeline.calibrated:
        raise CommandError(
            "no calibration: set [pipeline] a and b or [paths] calibration", EXIT_INPUT
        )
    h, h2 = cfg.homographies(shape)
    return cfg.pipeline.a, cfg.pipeline.b, h, h2


def _write_depth_set(out_dir, res, truth):
    dio.ensure_dir(out_dir)
    depth = np.where(res.valid, res.depth, 0.0)
    dio.write_pfm(os.path.join(out_dir, "depth.pfm"), depth)
    dio.write_pfm(os.path.join(out_dir, "confidence.pfm"), res.confidence)
    dio.write_rgb_png(os.path.join(out_dir, "preview.png"), dio.colormap_preview(depth, res.valid))
    dio.write_png(os.path.join(out_dir, "mask.png"), res.valid.astype(np.float64), bits=8)
    npix = res.depth.size
    with open(os.path.join(out_dir, "flops.txt"), "w") as f:
        f.write(res.flops.report(npix))
    stats = {"valid": res.n_valid, "flops_per_pixel": res.flops.per_pixel(npix, "depth")}
    if res.threshold is not None:
        stats["threshold"] = res.threshold
    if truth is not None and res.n_valid:
        m = mae(res, truth)
        stats["mae_m"] = m
        stats["rel_mae"] = m / float(np.mean(truth[res.valid]))
    return stats


def cmd_depth(cfg: ExperimentConfig, seed: int, out: str) -> int:
    I1, I2 = _load_pair(cfg, out)
    shape = I1.shape[:2]
    a, b, h, h2 = _calibration(cfg, shape)
    truth = None
    tpath = cfg.path("truth")
    if tpath:
        try:
            truth = dio.read_pfm(tpath)
        except (OSError, ValueError) as e:
            raise CommandError(f"cannot read truth depth: {e}", EXIT_INPUT)
        if truth.shape != shape:
            raise CommandError("truth depth size differs from the images", EXIT_INPUT)
    base = cfg.pipeline_params(shape, a, b, h, h2)
    levels = cfg.pipeline.sparsity_sweep
    with _locked(out):
        if not levels:
            stats = _write_depth_set(out, run_pipeline(I1, I2, base), truth)
            _summary(command="depth", out=out, **stats)
        else:
            for sp in levels:
                sub = os.path.join(out, f"sparsity_{sp:.2f}")
                stats = _write_depth_set(sub, run_pipeline(I1, I2, replace(base, sparsity=sp)), truth)
                _summary(command="depth", out=sub, sparsity=sp, **stats)
    return EXIT_OK


def _settings(cfg: ExperimentConfig, seed: int, z_grid, trials, calib_trials) -> Settings:
    p = cfg.pipeline
    sc = cfg.scene
    return Settings(
        optics=cfg.optics, shape=sc.shape, z_grid=tuple(z_grid), band=(sc.band_lo, sc.band_hi),
        n_sinusoids=sc.n_sinusoids, trials=trials, calib_trials=calib_trials,
        noise=cfg.noise_std, seed=seed, K=p.K, G_std=p.G_std, L=p.L, sparsity=p.sparsity,
        motion=sc.motion(),
    )


def cmd_calibrate(cfg: ExperimentConfig, seed: int, out: str) -> int:
    cc = cfg.calibration
    dataset, sources = [], []
    params = None
    if cc.dataset:
        for z, f1, f2 in cc.dataset:
            sub = replace(cfg, paths={**cfg.paths, "i1": f1, "i2": f2})
            I1, I2 = _load_pair(sub, out)
            if params is None:
                params = cfg.pipeline_params(I1.shape[:2], a=-1.0, b=0.0)
            try:
                Is, lap, mask, _ = derivative_maps(I1, I2, params)
            except ValueError as e:
                raise CommandError(str(e), EXIT_INPUT)
            dataset.append((z, Is, lap, mask))
            sources.append(f"{z!r} {f1} {f2}")
    else:
        cfg.require("optics")
        s = _settings(cfg, seed, cc.depths, 0, cc.trials)
        params = s.params()
        for i, z in enumerate(cc.depths):
            for t in range(cc.trials):
                I1, I2, _ = render_trial(s, z, (0, i, t))
                Is, lap, mask, _ = derivative_maps(I1, I2, params)
                dataset.append((z, Is, lap, mask))
                sources.append(f"{z!r} simulated seed={seed} texture={t}")
    try:
        rec = calibrate_ab(dataset, L=cc.L, method=cc.method, sources=sources)
    except CalibrationError as e:
        last = f" (last iterate a, b = {e.last})" if e.last is not None else ""
        raise CommandError(f"calibration failed: {e}{last}", EXIT_CALIBRATION)
    with _locked(out):
        path = os.path.join(out, "calibration.ini")
        save_calibration(path, rec, params.h, params.h2)
    _summary(command="calibrate", out=path, a=rec.a, b=rec.b, residual_rms_m=rec.residual_rms,
             iterations=rec.iterations, pairs=len(dataset))
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, seed: int, out: str) -> int:
    sw = cfg.sweep
    s = _settings(cfg, seed, sw.z_grid, sw.trials, sw.calib_trials)
    compare = {"auto": None, "true": True, "false": False}[sw.compare_old]
    try:
        if sw.axis == "Z" and sw.snr_lap_numerator == "lap" and sw.values:
            res = sweep("Z", sw.values, s, compare_old=compare)
            snr = snr_curves(s.optics, sw.values, s.noise, settings=s, lap_numerator="lap")
            for x, y in zip(res.samples, snr.samples):
                x.snr_lap = y.snr_lap
        else:
            res = sweep(sw.axis, sw.values, s, compare_old=compare)
    except ValueError as e:
        raise CommandError(f"[sweep] {e}", EXIT_CONFIG)
    except CalibrationError as e:
        raise CommandError(f"calibration failed: {e}", EXIT_CALIBRATION)
    with _locked(out):
        path = os.path.join(out, "sweep.csv")
        res.to_csv(path)
        if sw.preview and res.samples:
            _plot_sweep(res, os.path.join(out, "sweep.png"))
    if not res.samples:
        print("warning: empty sweep range, nothing to run", file=sys.stderr)
    _summary(command="sweep", axis=sw.axis, samples=len(res.samples), out=path)
    for x in res.samples:
        label = PSF_CODES[int(x.value)] if sw.axis == "psf_model" else x.value
        _summary(value=label, mae_m=x.mae, mae_pointwise_m=x.mae_pointwise, mae_old_m=x.mae_old,
                 working_range_m=x.working_range)
    return EXIT_OK


def _plot_sweep(res, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    v = res.column("value")
    ax.plot(v, res.column("mae"), "o-", label="windowed")
    ax.plot(v, res.column("mae_pointwise"), "s--", label="pointwise")
    if np.isfinite(res.column("mae_old")).any():
        ax.plot(v, res.column("mae_old"), "^:", label="baseline")
    ax.set_xlabel(res.axis)
    ax.set_ylabel("MAE (m)")
    ax.legend()
    fig.tight_layout()
    # fixed metadata keeps the PNG byte-identical across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def check_grid(cfg: ExperimentConfig):
    ck, o = cfg.check, cfg.optics
    s_values = ck.s_values or (o.s2, o.c, o.s1)
    out = []
    for Z in ck.z_values:
        for s in s_values:
            for A in ck.A_values:
                oa = replace(o, A=A, psf_model="gaussian")
                rep = scaled_psf_derivative_check(oa, Z, eps=ck.eps_rel * s, s=s,
                                                  A_rhs=A * ck.inject_A_scale)
                out.append(rep)
    return out


def _self_tests(cfg: ExperimentConfig, seed: int):
    """Small pipeline invariants on a rendered pair: L=1 equivalence and gain invariance."""
    from .pipeline import depth_pointwise, depth_windowed

    small = replace(cfg, scene=replace(cfg.scene, width=128, height=128, Z=0.8,
                                       lateral_x_mm=0.0, lateral_y_mm=0.0, axial_mm=0.0,
                                       rot_x_deg=0.0, rot_y_deg=0.0, rot_z_deg=0.0,
                                       texture="noise"))
    I1, I2, _ = render_from_config(small, seed)
    params = small.pipeline_params((128, 128), a=-1.0, b=-1.0)
    params = replace(params, K=11, G_std=3.0, L=7)
    Is, lap, mask, eps = derivative_maps(I1, I2, params)
    w = depth_windowed(Is, lap, -1.0, -1.0, 1, eps)
    p = depth_pointwise(Is, lap, -1.0, -1.0, eps)
    l1 = bool(np.array_equal(w.valid, p.valid) and np.array_equal(w.depth[w.valid], p.depth[p.valid]))
    g = run_pipeline(3.0 * I1, 3.0 * I2, params)
    r = run_pipeline(I1, I2, params)
    both = g.valid & r.valid
    gain = bool(np.allclose(g.depth[both], r.depth[both], rtol=1e-9, atol=0)
                and np.allclose(g.confidence, 9.0 * r.confidence, rtol=1e-9, atol=1e-300))
    return {"L1_equivalence": l1, "gain_invariance": gain}


def cmd_check(cfg: ExperimentConfig, seed: int, out: str) -> int:
    t0 = time.perf_counter()
    try:
        reports = check_grid(cfg)
    except ValueError as e:
        raise CommandError(f"[check] {e}", EXIT_CONFIG)
    if not reports:
        print("warning: empty check grid, nothing to verify", file=sys.stderr)
    worst_fd = max((r.fd_vs_identity for r in reports), default=0.0)
    worst_cf = max((r.closed_forms for r in reports), default=0.0)
    grid_ok = all(r.passed() for r in reports)
    selftests = _self_tests(cfg, seed)
    ok = grid_ok and all(selftests.values())
    with _locked(out):
        with open(os.path.join(out, "check.txt"), "w") as f:
            f.write("Z_m,s_m,A_m,sigma_m,fd_vs_identity,closed_forms,fd_laplacian,passed\n")
            for r in reports:
                f.write(f"{r.Z!r},{r.s!r},{r.A!r},{r.sigma!r},{r.fd_vs_identity:.3e},"
                        f"{r.closed_forms:.3e},{r.fd_laplacian:.3e},{r.passed()}\n")
            for k, v in selftests.items():
                f.write(f"# {k}={v}\n")
    _summary(command="check", configs=len(reports), max_fd_rel_err=worst_fd,
             max_closed_form_err=worst_cf, **selftests, passed=ok,
             seconds=time.perf_counter() - t0)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


COMMANDS = {
    "render": cmd_render,
    "depth": cmd_depth,
    "calibrate": cmd_calibrate,
    "sweep": cmd_sweep,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dfdd", description="Depth from differential defocus experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", required=True, help="experiment config (INI)")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default="out", help="output directory (default: ./out)")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        cfg = load_config(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        if not 0 <= seed < 2**64:
            raise ConfigError("--seed must be a 64-bit unsigned integer")
        return COMMANDS[args.command](cfg, seed, args.out)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
