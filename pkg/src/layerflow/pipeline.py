"""Glue between documents, the VAE and the flow model: training-set
encoding, text-to-layers generation, and corpus helpers."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import rgba
from .bundle import (
    HierarchicalPrompt,
    LayerDocument,
    document_from_stack,
    load_bundle,
    make_grid_sample,
    make_triplets,
    synth_poster,
)
from .flow import Conditioning, FlowDataset, FlowTransformer, LoraAdapter, prompt_ids, sample_generate
from .seeding import numpy_rng
from .vae import RgbaVAE


def document_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in numpy_rng(seed, "dataset").integers(0, 2**31 - 1, size=count)]


def synth_corpus(seed: int, count: int, size: int) -> list[LayerDocument]:
    return [synth_poster(s, size) for s in document_seeds(seed, count)]


def load_corpus(directory) -> list[tuple[str, LayerDocument]]:
    root = Path(directory)
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").is_file())
    if not dirs:
        raise FileNotFoundError(f"no layer bundles found under {root}")
    return [(p.name, load_bundle(p)) for p in dirs]


def vae_images(docs: list[LayerDocument], limit: int | None = None) -> np.ndarray:
    """Every layer and composite of every document, in order."""
    imgs = []
    for d in docs:
        imgs.extend(l.image for l in d.layers)
        imgs.append(d.composite)
    if limit is not None:
        imgs = imgs[:limit]
    return np.stack(imgs).astype(np.float32)


@torch.no_grad()
def encode_images(vae: RgbaVAE, images, chunk: int = 64) -> torch.Tensor:
    """Posterior means, channels-last ``(N, g, g, C)``."""
    images = np.asarray(images, dtype=np.float32)
    out = [vae.encode(torch.from_numpy(images[i : i + chunk])).z for i in range(0, len(images), chunk)]
    return torch.cat(out).float()


def downsample_masks(masks, factor: int) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(masks, dtype=np.float32))[:, None]
    return F.avg_pool2d(m, factor)[:, 0]


def edit_datasets(docs: list[LayerDocument], vae: RgbaVAE, tasks=None) -> dict[str, FlowDataset]:
    """Encode every document's peel triplets into per-task flow datasets."""
    factor = vae.cfg.image_size // vae.cfg.latent_grid
    groups: dict[str, list] = {t: [] for t in ("text_extract", "text_erase", "fg_extract", "fg_erase")}
    for d in docs:
        for s in make_triplets(d):
            prefix = "text" if s.role == "text" else "fg"
            groups[f"{prefix}_extract"].append((s.input, s.mask, s.fg_target))
            groups[f"{prefix}_erase"].append((s.input, s.mask, s.bg_target))
    out = {}
    for task, items in groups.items():
        if (tasks is not None and task not in tasks) or not items:
            continue
        zc = encode_images(vae, [i[0] for i in items])
        z1 = encode_images(vae, [i[2] for i in items])
        mask = downsample_masks([i[1] for i in items], factor)
        out[task] = FlowDataset(task, z1=z1, z0=zc, cond=Conditioning(latent=zc, mask=mask))
    return out


def grid_dataset(docs: list[LayerDocument], vae: RgbaVAE, max_words: int = 24) -> FlowDataset:
    grids, ids = [], []
    for d in docs:
        if not d.layers_by_role("foreground", "midground"):
            continue
        g, prompt = make_grid_sample(d)
        grids.append(g.grid)
        ids.append(prompt_ids(prompt, max_words))
    z1 = encode_images(vae, grids, chunk=16)
    return FlowDataset("t2psd", z1=z1, cond=Conditioning(text=torch.stack(ids)))


@torch.no_grad()
def generate_document(
    prompt: HierarchicalPrompt,
    vae: RgbaVAE,
    flow: FlowTransformer,
    adapter: LoraAdapter | None,
    steps: int,
    generator: torch.Generator,
    stop_tau: float = 0.01,
) -> LayerDocument:
    """Prompt -> 2x2 grid latent -> decoded grid -> layer document.

    The generated composite quadrant is discarded; the document's composite
    is re-flattened from the generated layers. A second layer whose mean
    alpha is below ``stop_tau`` is treated as the empty placeholder.
    """
    g = 2 * vae.cfg.latent_grid
    dtype = next(flow.parameters()).dtype
    noise = torch.randn((1, g, g, flow.cfg.latent_channels), generator=generator, dtype=dtype)
    ids = prompt_ids(prompt, flow.cfg.max_words)[None]
    z = sample_generate(flow, noise, ids, steps, adapter)
    c = vae.cfg.channels_rgb
    grid = vae.decode((z[..., :c].to(next(vae.parameters()).dtype), z[..., c:].to(next(vae.parameters()).dtype)))
    grid = np.clip(grid[0].numpy().astype(np.float32), 0.0, 1.0)
    _composite, layer_a, layer_b, background = rgba.split_grid(grid)
    stack = [("background", background)]
    if layer_b[..., 3].mean() >= stop_tau:
        stack.append(("midground", layer_b))
    stack.append(("foreground", layer_a))
    return document_from_stack(stack, prompt)
