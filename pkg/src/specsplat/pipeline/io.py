"""Image and raw-buffer IO. Linear <-> sRGB conversion happens only here."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..camera import PosedView


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def save_png(path: str | Path, linear_rgb) -> None:
    img = np.round(linear_to_srgb(linear_rgb) * 255.0).astype(np.uint8)
    Image.fromarray(img).save(path)


def load_png(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing image: {path}")
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(img)


def write_raw(path: str | Path, arr) -> None:
    """Row-major little-endian float32 with a one-line text header listing the shape."""
    arr = np.asarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write((" ".join(str(s) for s in arr.shape) + "\n").encode())
        fh.write(arr.tobytes())


def read_raw(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing buffer: {path}")
    raw = path.read_bytes()
    nl = raw.index(b"\n")
    shape = tuple(int(v) for v in raw[:nl].split())
    return np.frombuffer(raw[nl + 1:], dtype="<f4").reshape(shape).astype(np.float64)


def write_cameras(path: str | Path, views: list[PosedView]) -> None:
    lines = ["# id fx fy cx cy width height R(row-major 9) t(3)"]
    for i, v in enumerate(views):
        nums = [v.fx, v.fy, v.cx, v.cy, v.width, v.height, *v.R.ravel(), *v.t]
        lines.append(f"{i} " + " ".join(repr(float(x)) if k not in (4, 5) else str(int(x)) for k, x in enumerate(nums)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path: str | Path) -> list[PosedView]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing camera list: {path}")
    views = []
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        v = line.split()
        fx, fy, cx, cy = (float(x) for x in v[1:5])
        w, h = int(v[5]), int(v[6])
        R = np.array([float(x) for x in v[7:16]]).reshape(3, 3)
        t = np.array([float(x) for x in v[16:19]])
        views.append(PosedView(fx, fy, cx, cy, R, t, w, h))
    return views
