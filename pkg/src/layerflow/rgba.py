"""RGBA pixel algebra.

Images are ``(H, W, 4)`` float32 arrays in ``[0, 1]`` with straight
(non-premultiplied) alpha. Premultiplication only happens inside :func:`over`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

QUADRANT_ROLES = ("composite", "layer_a", "layer_b", "background")
CHECKER_LIGHT = 0.8
CHECKER_DARK = 0.6
WHITE = (1.0, 1.0, 1.0)
BLACK = (0.0, 0.0, 0.0)


class ShapeError(ValueError):
    pass


def as_rgba(img) -> np.ndarray:
    """Validate and convert to an ``(H, W, 4)`` float32 array."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 4:
        raise ShapeError(f"expected an (H, W, 4) RGBA array, got shape {arr.shape}")
    return arr


def blank(height: int, width: int) -> np.ndarray:
    """Fully transparent image."""
    return np.zeros((height, width, 4), dtype=np.float32)


def _finish(rgb: np.ndarray, a: np.ndarray) -> np.ndarray:
    out = np.concatenate([rgb, a], axis=-1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def over(fg, bg) -> np.ndarray:
    """Porter-Duff source-over of ``fg`` onto ``bg``."""
    fg = as_rgba(fg)
    bg = as_rgba(bg)
    if fg.shape != bg.shape:
        raise ShapeError(f"over() needs equal shapes, got fg {fg.shape} and bg {bg.shape}")
    # float64 internally so chained folds stay within float32 rounding of each other
    f = fg.astype(np.float64)
    b = bg.astype(np.float64)
    af = f[..., 3:4]
    ab = b[..., 3:4]
    ao = af + ab * (1.0 - af)
    premul = af * f[..., :3] + (1.0 - af) * ab * b[..., :3]
    safe = np.where(ao > 0.0, ao, 1.0)
    rgb = np.where(ao > 0.0, premul / safe, 0.0)
    return _finish(rgb, ao)


def flatten(stack: Sequence) -> np.ndarray:
    """Composite a bottom-first list of layers into one image."""
    if len(stack) == 0:
        raise ValueError("cannot flatten an empty layer stack")
    out = as_rgba(stack[0])
    for layer in stack[1:]:
        out = over(layer, out)
    return out.copy() if len(stack) == 1 else out


def composite_on_matte(img, matte) -> np.ndarray:
    """Flatten onto an opaque backdrop. ``matte`` is an RGB triple or an
    ``(H, W, 3)`` array (e.g. a checkerboard)."""
    img = as_rgba(img)
    m = np.asarray(matte, dtype=np.float64)
    if np.any(m < 0.0) or np.any(m > 1.0):
        raise ValueError("matte values must lie in [0, 1]")
    if m.ndim == 3 and m.shape != img.shape[:2] + (3,):
        raise ShapeError(f"matte shape {m.shape} does not match image {img.shape}")
    a = img[..., 3:4].astype(np.float64)
    rgb = a * img[..., :3] + (1.0 - a) * m
    return _finish(rgb, np.ones_like(a))


def checkerboard(height: int, width: int, cell: int = 8) -> np.ndarray:
    """``(H, W, 3)`` light/dark gray checkerboard; the top-left cell is light."""
    if cell < 1:
        raise ValueError("cell must be >= 1")
    yy, xx = np.mgrid[0:height, 0:width]
    light = ((yy // cell + xx // cell) % 2) == 0
    gray = np.where(light, CHECKER_LIGHT, CHECKER_DARK).astype(np.float32)
    return np.repeat(gray[..., None], 3, axis=-1)


def checkerboard_preview(img, cell: int = 8) -> np.ndarray:
    img = as_rgba(img)
    return composite_on_matte(img, checkerboard(img.shape[0], img.shape[1], cell))


@dataclass(frozen=True)
class GridSample:
    grid: np.ndarray
    quadrants: tuple = QUADRANT_ROLES


def assemble_grid(composite, layer_a, layer_b, background) -> GridSample:
    """Tile four same-size images into a 2x2 grid, composite top-left."""
    parts = [as_rgba(p) for p in (composite, layer_a, layer_b, background)]
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError(f"grid quadrants must share one shape, got {sorted(shapes)}")
    top = np.concatenate(parts[:2], axis=1)
    bottom = np.concatenate(parts[2:], axis=1)
    return GridSample(np.concatenate([top, bottom], axis=0))


def split_grid(grid) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(grid, GridSample):
        grid = grid.grid
    grid = as_rgba(grid)
    h, w = grid.shape[:2]
    if h % 2 or w % 2:
        raise ShapeError(f"grid dimensions must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    return (
        grid[:h2, :w2].copy(),
        grid[:h2, w2:].copy(),
        grid[h2:, :w2].copy(),
        grid[h2:, w2:].copy(),
    )


def quantize(img) -> np.ndarray:
    """8-bit quantization with round-half-up."""
    return np.floor(np.clip(as_rgba(img), 0.0, 1.0).astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def write_png(img, path) -> None:
    Image.fromarray(quantize(img), mode="RGBA").save(Path(path), format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float32)
    return arr / np.float32(255.0)


def png_bytes(img) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(quantize(img), mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


def alpha_bbox(img, threshold: float = 0.0) -> tuple[int, int, int, int]:
    """Tight ``(x, y, w, h)`` box of pixels with alpha above ``threshold``;
    ``(0, 0, 0, 0)`` when there are none."""
    a = as_rgba(img)[..., 3]
    ys, xs = np.nonzero(a > threshold)
    if len(xs) == 0:
        return (0, 0, 0, 0)
    x0, y0 = int(xs.min()), int(ys.min())
    return (x0, y0, int(xs.max()) - x0 + 1, int(ys.max()) - y0 + 1)
