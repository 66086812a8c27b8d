"""Alpha-composited image metrics and a Fréchet distance over frozen random
features.

RGBA images are compared by flattening both onto several opaque mattes,
computing the ordinary RGB metric on each, and averaging.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from . import rgba
from .features import RandomFeatureStack

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_K1, SSIM_K2 = 0.01, 0.03
DEFAULT_MATTES = ("white", "black", "checker")


def matte_array(name, height: int, width: int) -> np.ndarray:
    """``(H, W, 3)`` backdrop for a named matte or an explicit RGB triple."""
    if isinstance(name, str):
        if name == "white":
            return np.ones((height, width, 3), dtype=np.float32)
        if name == "black":
            return np.zeros((height, width, 3), dtype=np.float32)
        if name == "checker":
            return rgba.checkerboard(height, width, 8)
        raise ValueError(f"unknown matte {name!r}")
    return np.broadcast_to(np.asarray(name, dtype=np.float32), (height, width, 3)).copy()


def mse(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((np.asarray(x, np.float64) - np.asarray(y, np.float64)) ** 2))


def psnr_from_mse(m: float) -> float:
    if m < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / m))


def ssim(x: np.ndarray, y: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window``x``window`` uniform windows (stride 1,
    no padding) and channels, dynamic range 1."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.shape != y.shape:
        raise rgba.ShapeError(f"ssim needs equal shapes, got {x.shape} and {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if min(x.shape[:2]) < window:
        raise ValueError(f"image {x.shape[:2]} is smaller than the {window}x{window} window")
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    wx = sliding_window_view(x, (window, window), axis=(0, 1))
    wy = sliding_window_view(y, (window, window), axis=(0, 1))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    dx = wx - mx[..., None, None]
    dy = wy - my[..., None, None]
    vx = (dx * dx).mean(axis=(-2, -1))
    vy = (dy * dy).mean(axis=(-2, -1))
    cov = (dx * dy).mean(axis=(-2, -1))
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx**2 + my**2 + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


_RGB_METRICS = {
    "mse": mse,
    "psnr": lambda a, b: psnr_from_mse(mse(a, b)),
    "ssim": ssim,
}


def rgba_metric_per_matte(a, b, kind: str, mattes=DEFAULT_MATTES) -> list[float]:
    a = rgba.as_rgba(a)
    b = rgba.as_rgba(b)
    if a.shape != b.shape:
        raise rgba.ShapeError(f"metric needs equal shapes, got {a.shape} and {b.shape}")
    if kind not in _RGB_METRICS:
        raise ValueError(f"unknown metric {kind!r}")
    fn = _RGB_METRICS[kind]
    out = []
    for m in mattes:
        bg = matte_array(m, a.shape[0], a.shape[1])
        out.append(fn(rgba.composite_on_matte(a, bg)[..., :3], rgba.composite_on_matte(b, bg)[..., :3]))
    return out


def rgba_metric(a, b, kind: str, mattes=DEFAULT_MATTES) -> float:
    """Mean over mattes of the RGB metric ``kind`` in {mse, psnr, ssim}."""
    vals = rgba_metric_per_matte(a, b, kind, mattes)
    return float(np.mean(vals))


# ---------------------------------------------------------------- Fréchet distance


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues are clamped to zero."""
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    The trace of the product root is computed as the trace of
    ``(S1^(1/2) S2 S1^(1/2))^(1/2)``, which has the same eigenvalues and is
    symmetric.
    """
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    s1, s2 = np.asarray(sigma1, np.float64), np.asarray(sigma2, np.float64)
    r1 = sqrtm_psd(s1)
    inner = r1 @ s2 @ r1
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_cross = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * tr_cross)
    return max(d, 0.0)


def gaussian_fit(feats: np.ndarray, shrinkage: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of ``(N, D)`` features. With ``N <= D`` the
    covariance is shrunk toward ``(tr S / D) I`` by ``shrinkage``."""
    feats = np.asarray(feats, np.float64)
    n, d = feats.shape
    if n == 0:
        raise ValueError("cannot fit a Gaussian to an empty feature set")
    mu = feats.mean(axis=0)
    sigma = np.cov(feats, rowvar=False).reshape(d, d) if n > 1 else np.zeros((d, d))
    if n <= d:
        sigma = (1.0 - shrinkage) * sigma + shrinkage * (np.trace(sigma) / d) * np.eye(d)
    return mu, sigma


def embed(images, seed: int = 0, matte=rgba.WHITE) -> np.ndarray:
    """Pooled random-stack features of matte-composited images."""
    if len(images) == 0:
        raise ValueError("empty image set")
    stack = RandomFeatureStack(seed)
    x = np.stack([rgba.composite_on_matte(im, matte) for im in images]).astype(np.float64)
    with torch.no_grad():
        f = stack.pooled(torch.from_numpy(x).permute(0, 3, 1, 2))
    return f.numpy()


def desk_fid(set_a, set_b, seed: int = 0, matte=rgba.WHITE) -> float:
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("desk_fid needs two non-empty image sets")
    mu1, s1 = gaussian_fit(embed(set_a, seed, matte))
    mu2, s2 = gaussian_fit(embed(set_b, seed, matte))
    return frechet_distance(mu1, s1, mu2, s2)


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    per_sample: list[dict] = field(default_factory=list)
    mattes_used: list = field(default_factory=lambda: list(DEFAULT_MATTES))
    desk_fid: float | None = None
    judge: dict | None = None
    judge_errors: int = 0

    @property
    def aggregate(self) -> dict:
        keys = ("mse", "psnr", "ssim")
        if not self.per_sample:
            return {k: None for k in keys}
        return {k: float(np.mean([s[k] for s in self.per_sample])) for k in keys}

    def add(self, sample_id: str, a, b) -> dict:
        row = {"id": sample_id}
        for kind in ("mse", "psnr", "ssim"):
            row[kind] = rgba_metric(a, b, kind, self.mattes_used)
        self.per_sample.append(row)
        return row

    def to_dict(self) -> dict:
        return {
            "per_sample": self.per_sample,
            "aggregate": self.aggregate,
            "desk_fid": self.desk_fid,
            "judge": self.judge,
            "judge_errors": self.judge_errors,
            "mattes_used": [m if isinstance(m, str) else list(m) for m in self.mattes_used],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def write_csv(self, path) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "mse", "psnr", "ssim"])
        for s in self.per_sample:
            w.writerow([s["id"], *(f"{s[k]:.9g}" for k in ("mse", "psnr", "ssim"))])
        agg = self.aggregate
        if self.per_sample:
            w.writerow(["mean", *(f"{agg[k]:.9g}" for k in ("mse", "psnr", "ssim"))])
        Path(path).write_text(buf.getvalue(), encoding="utf-8")
