import os
import subprocess
import sys

import numpy as np
import pytest

from dfdd import cli
from dfdd.io import read_image, read_pfm, write_png

RENDER = """
[run]
seed = 7

[optics]

[scene]
Z = {Z}
"""

SMALL = """
[run]
seed = 3

[optics]

[scene]
width = 128
height = 128

[pipeline]
K = 11
G_std = 3
L = 7

[calibration]
L = 7
depths = 0.6, 0.9, 1.2
trials = 1
"""


def write(tmp_path, text, name="exp.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def run(*argv):
    return cli.main([str(a) for a in argv])


def files(d):
    return {f: open(os.path.join(d, f), "rb").read() for f in sorted(os.listdir(d))}


@pytest.fixture(scope="module")
def calibrated(tmp_path_factory):
    """A full-size render plus a calibration file, shared by the depth tests."""
    d = tmp_path_factory.mktemp("cal")
    cfg = write(d, RENDER.format(Z=0.75) + "\n[calibration]\ntrials = 1\n")
    assert run("render", "--config", cfg, "--out", d / "scene") == 0
    assert run("calibrate", "--config", cfg, "--out", d / "cal") == 0
    return d


# ------------------------------------------------------------------ render

def test_render_writes_artifacts_and_sidecar(tmp_path, capsys):
    cfg = write(tmp_path, RENDER.format(Z=0.9))
    assert run("render", "--config", cfg, "--out", tmp_path / "o") == 0
    out = files(tmp_path / "o")
    assert set(out) == {"I1.png", "I2.png", "truth.pfm", "render.ini"}
    side = out["render.ini"].decode()
    for key in ("K = 21", "G_std = 11.0", "L = 21", "seed = 7", "[artifact]"):
        assert key in side
    assert np.all(read_pfm(tmp_path / "o" / "truth.pfm") == np.float32(0.9))
    assert "command=render" in capsys.readouterr().out


def test_render_is_byte_identical_and_seeded(tmp_path):
    cfg = write(tmp_path, RENDER.format(Z=0.9) + "\n[noise]\ngaussian_std = 0.01\n")
    run("render", "--config", cfg, "--out", tmp_path / "a")
    run("render", "--config", cfg, "--out", tmp_path / "b")
    run("render", "--config", cfg, "--out", tmp_path / "c", "--seed", 8)
    assert files(tmp_path / "a") == files(tmp_path / "b")
    assert files(tmp_path / "a")["I1.png"] != files(tmp_path / "c")["I1.png"]


def test_missing_optics_section_is_named(tmp_path, capsys):
    cfg = write(tmp_path, "[scene]\nZ = 0.9\n")
    assert run("render", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert "[optics]" in capsys.readouterr().err


def test_invalid_field_is_named(tmp_path, capsys):
    cfg = write(tmp_path, "[optics]\n[scene]\nZ = -1\n")
    assert run("render", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert "[scene] Z" in capsys.readouterr().err


def test_bad_command_line():
    assert run("render") == cli.EXIT_CONFIG
    assert run("fly", "--config", "x") == cli.EXIT_CONFIG


def test_lockfile_guards_output_dir(tmp_path, capsys):
    cfg = write(tmp_path, RENDER.format(Z=0.9))
    out = tmp_path / "o"
    out.mkdir()
    (out / cli.LOCK_NAME).write_text("123")
    assert run("render", "--config", cfg, "--out", out) == cli.EXIT_OUTPUT
    assert "locked" in capsys.readouterr().err
    (out / cli.LOCK_NAME).unlink()
    assert run("render", "--config", cfg, "--out", out) == 0
    assert not (out / cli.LOCK_NAME).exists()


def test_unwritable_output(tmp_path):
    cfg = write(tmp_path, RENDER.format(Z=0.9))
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("render", "--config", cfg, "--out", blocker / "sub") == cli.EXIT_OUTPUT


# ------------------------------------------------------------ calibrate/depth

def test_calibration_file_is_written(calibrated):
    text = (calibrated / "cal" / "calibration.ini").read_text()
    assert "[pipeline]" in text and "residual_rms" in text


def test_depth_near_focus_within_two_percent(calibrated, capsys):
    d = calibrated
    cfg = write(d, f"""
[paths]
i1 = {d}/scene/I1.png
i2 = {d}/scene/I2.png
truth = {d}/scene/truth.pfm
calibration = {d}/cal/calibration.ini
""", "depth.ini")
    assert run("depth", "--config", cfg, "--out", d / "depth") == 0
    out = capsys.readouterr().out
    stats = dict(line.split("=", 1) for line in out.splitlines())
    assert float(stats["rel_mae"]) < 0.02
    assert float(stats["flops_per_pixel"]) <= 600
    produced = set(os.listdir(d / "depth"))
    assert {"depth.pfm", "confidence.pfm", "preview.png", "mask.png", "flops.txt"} <= produced
    flops = (d / "depth" / "flops.txt").read_text()
    assert "counting rules" in flops and "within_budget=True" in flops
    assert read_pfm(d / "depth" / "depth.pfm").shape == (256, 256)


def test_depth_sparsity_sweep_writes_one_set_per_level(calibrated):
    d = calibrated
    cfg = write(d, f"""
[pipeline]
sparsity_sweep = 0.0, 0.4
[paths]
i1 = {d}/scene/I1.png
i2 = {d}/scene/I2.png
calibration = {d}/cal/calibration.ini
""", "sweep_depth.ini")
    assert run("depth", "--config", cfg, "--out", d / "sp") == 0
    assert sorted(os.listdir(d / "sp")) == ["sparsity_0.00", "sparsity_0.40"]
    m0 = read_image(d / "sp" / "sparsity_0.00" / "mask.png") > 0
    m4 = read_image(d / "sp" / "sparsity_0.40" / "mask.png") > 0
    assert np.all(m4 <= m0) and m4.sum() < m0.sum()


def test_depth_without_calibration_fails(calibrated, capsys):
    d = calibrated
    cfg = write(d, f"[paths]\ni1 = {d}/scene/I1.png\ni2 = {d}/scene/I2.png\n", "nocal.ini")
    assert run("depth", "--config", cfg, "--out", d / "x") == cli.EXIT_INPUT
    assert "calibration" in capsys.readouterr().err


def test_depth_with_mismatched_sizes_fails(tmp_path):
    write_png(tmp_path / "a.png", np.zeros((20, 20)))
    write_png(tmp_path / "b.png", np.zeros((20, 24)))
    cfg = write(tmp_path, "[pipeline]\na = -1\nb = 0\n[paths]\ni1 = a.png\ni2 = b.png\n")
    assert run("depth", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_INPUT


def test_depth_with_inline_constants(calibrated):
    d = calibrated
    cfg = write(d, f"""
[pipeline]
a = -22.85
b = -25.85
[paths]
i1 = {d}/scene/I1.png
i2 = {d}/scene/I2.png
""", "inline.ini")
    assert run("depth", "--config", cfg, "--out", d / "inline") == 0


def test_calibrate_from_image_dataset(tmp_path, capsys):
    base = write(tmp_path, SMALL)
    lines = []
    for z in (0.6, 0.9, 1.2):
        sc = write(tmp_path, SMALL.replace("height = 128", f"height = 128\nZ = {z}"), f"r{z}.ini")
        assert run("render", "--config", sc, "--out", tmp_path / f"z{z}") == 0
        lines.append(f"    {z} z{z}/I1.png z{z}/I2.png")
    cfg = write(tmp_path, open(base).read() + "dataset =\n" + "\n".join(lines) + "\n", "ds.ini")
    assert run("calibrate", "--config", cfg, "--out", tmp_path / "cal") == 0
    out = capsys.readouterr().out
    assert "pairs=3" in out
    text = (tmp_path / "cal" / "calibration.ini").read_text()
    assert "z0.6/I1.png" in text


def test_calibrate_needs_two_depths(tmp_path):
    cfg = write(tmp_path, SMALL.replace("depths = 0.6, 0.9, 1.2", "depths = 0.9"))
    assert run("calibrate", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_CALIBRATION


def test_calibrate_missing_dataset_images(tmp_path):
    cfg = write(tmp_path, SMALL + "dataset =\n    0.6 no1.png no2.png\n    0.9 no3.png no4.png\n")
    assert run("calibrate", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_INPUT


# ------------------------------------------------------------------- sweep

def test_empty_sweep_is_vacuous_success(tmp_path, capsys):
    cfg = write(tmp_path, SMALL + "\n[sweep]\naxis = noise\nvalues =\n")
    assert run("sweep", "--config", cfg, "--out", tmp_path / "o") == 0
    assert (tmp_path / "o" / "sweep.csv").read_text().count("\n") == 1
    assert "warning" in capsys.readouterr().err


def test_sweep_artifacts_are_byte_identical(tmp_path):
    text = SMALL + """
[sweep]
axis = noise
values = 0.0, 0.01
trials = 1
calib_trials = 1
z_grid = 0.6, 0.9, 1.2
preview = true
"""
    cfg = write(tmp_path, text)
    assert run("sweep", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("sweep", "--config", cfg, "--out", tmp_path / "b") == 0
    fa, fb = files(tmp_path / "a"), files(tmp_path / "b")
    assert set(fa) == {"sweep.csv", "sweep.png"}
    assert fa == fb


def test_sweep_bad_axis(tmp_path):
    cfg = write(tmp_path, SMALL + "\n[sweep]\naxis = focus\nvalues = 1\n")
    assert run("sweep", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_CONFIG


# ------------------------------------------------------------------- check

def test_check_default_grid_passes(tmp_path, capsys):
    cfg = write(tmp_path, "[optics]\n")
    assert run("check", "--config", cfg, "--out", tmp_path / "o") == 0
    stats = dict(line.split("=", 1) for line in capsys.readouterr().out.splitlines())
    assert int(stats["configs"]) >= 27
    assert float(stats["max_fd_rel_err"]) < 1e-3
    assert float(stats["max_closed_form_err"]) < 1e-9
    assert stats["L1_equivalence"] == "True" and stats["gain_invariance"] == "True"
    report = (tmp_path / "o" / "check.txt").read_text().splitlines()
    assert len([r for r in report if not r.startswith("#")]) == 1 + int(stats["configs"])


def test_check_detects_injected_fault(tmp_path):
    cfg = write(tmp_path, "[optics]\n[check]\ninject_A_scale = 2.0\n")
    assert run("check", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_CHECK_FAILED


def test_check_empty_grid_is_vacuous_pass(tmp_path, capsys):
    cfg = write(tmp_path, "[optics]\n[check]\nz_values =\n")
    assert run("check", "--config", cfg, "--out", tmp_path / "o") == 0
    assert "warning" in capsys.readouterr().err


def test_console_script_entry_point(tmp_path):
    cfg = write(tmp_path, "[optics]\n[check]\nz_values = 0.5\nA_values = 0.001\n")
    proc = subprocess.run([sys.executable, "-m", "dfdd.cli", "check", "--config", cfg,
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "passed=True" in proc.stdout
