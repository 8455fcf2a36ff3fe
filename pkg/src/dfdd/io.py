"""Image file I/O: 8/16-bit PNG and PGM in, PFM and CSV out."""
from __future__ import annotations

import os

import numpy as np
from PIL import Image

__all__ = [
    "read_image",
    "write_png",
    "write_pfm",
    "read_pfm",
    "write_csv",
    "colormap_preview",
]


def read_image(path) -> np.ndarray:
    """Read a grayscale (or RGB) PNG/PGM as float64 scaled to [0, 1].

    RGB inputs are returned as ``(H, W, 3)``; grayscale conversion is the
    pipeline's job.
    """
    with Image.open(path) as im:
        mode = im.mode
        arr = np.array(im)
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        scale = 65535.0
    elif arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ValueError(f"unsupported image mode {mode!r} in {path}")
    return arr.astype(np.float64) / scale


def write_png(path, img, bits: int = 16, lo: float = 0.0, hi: float = 1.0) -> None:
    """Write a grayscale image, mapping ``[lo, hi]`` onto the full integer range."""
    img = np.asarray(img, dtype=np.float64)
    if bits == 16:
        top, dtype = 65535, np.uint16
    elif bits == 8:
        top, dtype = 255, np.uint8
    else:
        raise ValueError("bits must be 8 or 16")
    q = np.clip(np.rint((img - lo) / (hi - lo) * top), 0, top).astype(dtype)
    Image.fromarray(q).save(path, format="PNG")


def write_rgb_png(path, rgb) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def write_pfm(path, img) -> None:
    """Single-channel little-endian PFM (rows stored bottom-up)."""
    img = np.asarray(img, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("PFM writer expects a 2D array")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag != b"Pf":
            raise ValueError(f"{path}: not a single-channel PFM (tag {tag!r})")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * 4), dtype=dtype)
    return data.reshape(h, w)[::-1].astype(np.float64)


def write_csv(path, img, fmt: str = "%.9g") -> None:
    np.savetxt(path, np.asarray(img), delimiter=",", fmt=fmt)


def colormap_preview(depth, mask, lo=None, hi=None, cmap: str = "turbo") -> np.ndarray:
    """8-bit RGB rendering of a depth map; masked pixels are black."""
    from matplotlib import colormaps

    depth = np.asarray(depth, dtype=np.float64)
    valid = np.asarray(mask, dtype=bool)
    if lo is None or hi is None:
        vals = depth[valid]
        lo = float(vals.min()) if vals.size else 0.0
        hi = float(vals.max()) if vals.size else 1.0
    span = hi - lo if hi > lo else 1.0
    t = np.clip((depth - lo) / span, 0.0, 1.0)
    rgb = (colormaps[cmap](t)[..., :3] * 255.0).round().astype(np.uint8)
    rgb[~valid] = 0
    return rgb


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
