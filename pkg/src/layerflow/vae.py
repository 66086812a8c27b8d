"""Alpha-aware VAE with separate color and alpha latents.

Encoder and decoder are small convolutional stacks sharing a trunk; the
posterior splits into a color branch and an alpha branch. Latents are kept
channels-last, ``(..., g, g, C)``, which makes tokenization a reshape.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .features import RandomFeatureStack
from .seeding import numpy_rng, stream_int, torch_generator

CHECKPOINT_FORMAT = "rgba-vae"
CHECKPOINT_VERSION = 1
CURVE_FIELDS = ("step", "pixel", "patch", "perceptual", "kl_rgb", "kl_a", "total")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class VaeConfig:
    image_size: int = 16
    latent_grid: int | None = None
    channels_rgb: int = 4
    channels_a: int = 2
    width: int = 32
    lambda_pix: float = 1.0
    lambda_patch: float = 1.0
    lambda_perc: float = 0.1
    lambda_kl: float = 1e-4
    patch_size: int = 4
    perc_seed: int = 0

    def __post_init__(self):
        if self.latent_grid is None:
            self.latent_grid = self.image_size // 4
        if self.latent_grid < 1 or self.image_size % self.latent_grid:
            raise ValueError(f"latent_grid {self.latent_grid} must divide image_size {self.image_size}")
        f = self.image_size // self.latent_grid
        if f & (f - 1):
            raise ValueError(f"downsample factor {f} must be a power of two")
        for name in ("lambda_pix", "lambda_patch", "lambda_perc", "lambda_kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.image_size % self.patch_size:
            raise ValueError("patch_size must divide image_size")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.image_size // self.latent_grid))

    @property
    def latent_channels(self) -> int:
        return self.channels_rgb + self.channels_a


@dataclass
class LatentPair:
    z_rgb: torch.Tensor
    z_a: torch.Tensor
    mu_rgb: torch.Tensor
    logvar_rgb: torch.Tensor
    mu_a: torch.Tensor
    logvar_a: torch.Tensor
    eps_rgb: torch.Tensor
    eps_a: torch.Tensor

    @property
    def z(self) -> torch.Tensor:
        """Color and alpha latents concatenated on the channel axis."""
        return torch.cat([self.z_rgb, self.z_a], dim=-1)


@dataclass
class VaeLossBreakdown:
    pixel: torch.Tensor
    patch: torch.Tensor
    perceptual: torch.Tensor
    kl_rgb: torch.Tensor
    kl_a: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in CURVE_FIELDS[1:]}


def _to_nchw(img) -> tuple[torch.Tensor, bool]:
    """Accept ``(H, W, 4)`` or ``(B, H, W, 4)`` arrays/tensors."""
    t = torch.as_tensor(np.asarray(img) if not isinstance(img, torch.Tensor) else img)
    single = t.ndim == 3
    if single:
        t = t.unsqueeze(0)
    if t.ndim != 4 or t.shape[-1] != 4:
        raise ValueError(f"expected (..., H, W, 4) RGBA input, got {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2), single


class RgbaVAE(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.enc_in = nn.Conv2d(4, w, 3, padding=1)
        self.enc_down = nn.ModuleList(nn.Conv2d(w, w, 3, stride=2, padding=1) for _ in range(cfg.n_down))
        self.enc_mid = nn.Conv2d(w, w, 3, padding=1)
        self.head_rgb = nn.Conv2d(w, 2 * cfg.channels_rgb, 1)
        self.head_a = nn.Conv2d(w, 2 * cfg.channels_a, 1)

        self.dec_in = nn.Conv2d(cfg.latent_channels, w, 1)
        self.dec_mid = nn.Conv2d(w, w, 3, padding=1)
        self.dec_up = nn.ModuleList(nn.Conv2d(w, w, 3, padding=1) for _ in range(cfg.n_down))
        self.skip_rgb = nn.Conv2d(cfg.channels_rgb, w, 1)
        self.skip_a = nn.Conv2d(cfg.channels_a, w, 1)
        self.out_rgb = nn.Conv2d(w, 3, 3, padding=1)
        self.out_a = nn.Conv2d(w, 1, 3, padding=1)

    def _check_size(self, h: int, w: int, unit: int, what: str):
        if h != w or h not in (unit, 2 * unit):
            raise ValueError(f"{what} size {h}x{w} does not match config ({unit} or grid {2 * unit})")

    def posterior(self, x: torch.Tensor):
        """NCHW image -> channels-last (mu_rgb, logvar_rgb, mu_a, logvar_a)."""
        self._check_size(x.shape[2], x.shape[3], self.cfg.image_size, "image")
        h = F.silu(self.enc_in(x))
        for conv in self.enc_down:
            h = F.silu(conv(h))
        h = F.silu(self.enc_mid(h))
        mu_rgb, lv_rgb = self.head_rgb(h).permute(0, 2, 3, 1).chunk(2, dim=-1)
        mu_a, lv_a = self.head_a(h).permute(0, 2, 3, 1).chunk(2, dim=-1)
        return mu_rgb, lv_rgb, mu_a, lv_a

    def encode(self, img, generator: torch.Generator | None = None) -> LatentPair:
        """Encode RGBA pixels. With ``generator=None`` the noise is zero and
        ``z`` equals the posterior mean; otherwise noise is drawn from it."""
        p = next(self.parameters())
        x, single = _to_nchw(img)
        x = x.to(p.dtype)
        mu_rgb, lv_rgb, mu_a, lv_a = self.posterior(x)
        if generator is None:
            e_rgb, e_a = torch.zeros_like(mu_rgb), torch.zeros_like(mu_a)
        else:
            e_rgb = torch.randn(mu_rgb.shape, generator=generator, dtype=mu_rgb.dtype)
            e_a = torch.randn(mu_a.shape, generator=generator, dtype=mu_a.dtype)
        lat = reparameterize(mu_rgb, lv_rgb, mu_a, lv_a, e_rgb, e_a)
        return squeeze_latent(lat) if single else lat

    def decode(self, lat: LatentPair | tuple) -> torch.Tensor:
        """Latents -> channels-last RGBA in [0, 1]; ``lat`` may be a
        :class:`LatentPair` or a ``(z_rgb, z_a)`` tuple."""
        z_rgb, z_a = (lat.z_rgb, lat.z_a) if isinstance(lat, LatentPair) else lat
        single = z_rgb.ndim == 3
        if single:
            z_rgb, z_a = z_rgb.unsqueeze(0), z_a.unsqueeze(0)
        cfg = self.cfg
        if z_rgb.shape[-1] != cfg.channels_rgb or z_a.shape[-1] != cfg.channels_a:
            raise ValueError(
                f"latent channels ({z_rgb.shape[-1]}, {z_a.shape[-1]}) do not match config "
                f"({cfg.channels_rgb}, {cfg.channels_a})"
            )
        if z_rgb.shape[:-1] != z_a.shape[:-1]:
            raise ValueError(f"color latent {tuple(z_rgb.shape)} and alpha latent {tuple(z_a.shape)} disagree")
        self._check_size(z_rgb.shape[1], z_rgb.shape[2], cfg.latent_grid, "latent")
        zr = z_rgb.permute(0, 3, 1, 2)
        za = z_a.permute(0, 3, 1, 2)
        h = F.silu(self.dec_in(torch.cat([zr, za], dim=1)))
        h = F.silu(self.dec_mid(h))
        for conv in self.dec_up:
            h = F.silu(conv(F.interpolate(h, scale_factor=2, mode="nearest")))
        factor = 2**cfg.n_down
        sr = F.interpolate(self.skip_rgb(zr), scale_factor=factor, mode="nearest")
        sa = F.interpolate(self.skip_a(za), scale_factor=factor, mode="nearest")
        rgb = torch.sigmoid(self.out_rgb(F.silu(h + sr)))
        a = torch.sigmoid(self.out_a(F.silu(h + sa)))
        out = torch.cat([rgb, a], dim=1).permute(0, 2, 3, 1)
        return out[0] if single else out

    def forward(self, img, generator=None):
        lat = self.encode(img, generator)
        return self.decode(lat), lat


def reparameterize(mu_rgb, lv_rgb, mu_a, lv_a, e_rgb, e_a) -> LatentPair:
    return LatentPair(
        z_rgb=mu_rgb + torch.exp(0.5 * lv_rgb) * e_rgb,
        z_a=mu_a + torch.exp(0.5 * lv_a) * e_a,
        mu_rgb=mu_rgb,
        logvar_rgb=lv_rgb,
        mu_a=mu_a,
        logvar_a=lv_a,
        eps_rgb=e_rgb,
        eps_a=e_a,
    )


def squeeze_latent(lat: LatentPair) -> LatentPair:
    return LatentPair(**{k: v[0] for k, v in lat.__dict__.items()})


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, 1)), averaged over elements."""
    return (0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar)).mean()


def patch_means(x: torch.Tensor, patch: int) -> torch.Tensor:
    """Channel means over non-overlapping ``patch`` squares of channels-last ``x``."""
    nchw = x.reshape(-1, *x.shape[-3:]).permute(0, 3, 1, 2)
    return F.avg_pool2d(nchw, patch)


def vae_loss(img, recon: torch.Tensor, lat: LatentPair, cfg: VaeConfig, perc: RandomFeatureStack) -> VaeLossBreakdown:
    img = torch.as_tensor(img, dtype=recon.dtype)
    if img.shape != recon.shape:
        raise ValueError(f"image {tuple(img.shape)} and reconstruction {tuple(recon.shape)} differ")
    pixel = (recon - img).abs().mean()
    patch = (patch_means(recon, cfg.patch_size) - patch_means(img, cfg.patch_size)).abs().mean()
    fr = perc(recon.reshape(-1, *recon.shape[-3:]).permute(0, 3, 1, 2))
    fi = perc(img.reshape(-1, *img.shape[-3:]).permute(0, 3, 1, 2))
    perceptual = sum((a - b).pow(2).mean() for a, b in zip(fr, fi)) / len(fr)
    kl_rgb = gaussian_kl(lat.mu_rgb, lat.logvar_rgb)
    kl_a = gaussian_kl(lat.mu_a, lat.logvar_a)
    total = (
        cfg.lambda_pix * pixel
        + cfg.lambda_patch * patch
        + cfg.lambda_perc * perceptual
        + cfg.lambda_kl * (kl_rgb + kl_a)
    )
    return VaeLossBreakdown(pixel, patch, perceptual, kl_rgb, kl_a, total)


def build_vae(cfg: VaeConfig, seed: int, dtype=torch.float32) -> RgbaVAE:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stream_int(seed, "vae-init"))
        model = RgbaVAE(cfg)
    return model.to(dtype)


def train_vae(
    images: np.ndarray,
    cfg: VaeConfig,
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    model: RgbaVAE | None = None,
    log_every: int = 0,
) -> tuple[RgbaVAE, list[dict]]:
    """Adam training on ``images`` (``(N, H, W, 4)`` floats).

    Returns the model and one loss row per step, logged before that step's
    update so row 0 is the untrained model's loss on the first batch.
    """
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("empty dataset")
    model = model or build_vae(cfg, seed)
    model.train()
    perc = RandomFeatureStack(cfg.perc_seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    data = torch.from_numpy(images)
    idx_rng = numpy_rng(seed, "vae-batches")
    noise = torch_generator(seed, "vae-noise")
    curve = []
    for step in range(steps):
        if batch_size >= len(data):
            batch = data
        else:
            batch = data[idx_rng.choice(len(data), size=batch_size, replace=False)]
        recon, lat = model(batch, noise)
        losses = vae_loss(batch, recon, lat, cfg, perc)
        if not torch.isfinite(losses.total):
            raise TrainingDiverged(step)
        curve.append({"step": step, **losses.as_floats()})
        if log_every and step % log_every == 0:
            print(f"vae step {step}: " + " ".join(f"{k}={v:.4g}" for k, v in curve[-1].items() if k != "step"))
        opt.zero_grad()
        losses.total.backward()
        opt.step()
    model.eval()
    return model, curve


def save_vae(model: RgbaVAE, path) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.cfg),
            "state_dict": model.state_dict(),
        },
        Path(path),
    )


def load_vae(path) -> RgbaVAE:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version {CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} checkpoint")
    model = RgbaVAE(VaeConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model


def write_curve(rows: list[dict], path, fields=CURVE_FIELDS) -> None:
    """CSV loss curve with fixed float formatting."""
    lines = [",".join(fields)]
    for r in rows:
        lines.append(",".join(str(r[f]) if f == "step" else f"{r[f]:.9g}" for f in fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
