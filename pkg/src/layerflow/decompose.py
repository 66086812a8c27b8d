"""Iterative extract/erase decomposition of a flat poster into layers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import torch

from . import rgba
from .bundle import (
    HierarchicalPrompt,
    LayerDocument,
    LayerRecord,
    document_from_stack,
    make_triplets,
)
from .flow import FlowTransformer, LoraAdapter, sample_edit
from .vae import RgbaVAE

BBOX_THRESHOLD = 0.05
EDIT_TASKS = ("text_extract", "text_erase", "fg_extract", "fg_erase")


class MissingModelError(KeyError):
    def __init__(self, task: str):
        super().__init__(task)
        self.task = task

    def __str__(self):
        return f"no model available for task {self.task!r}"


class EditModels(Protocol):
    def tasks(self) -> set[str]: ...

    def run(self, task: str, current: np.ndarray) -> np.ndarray:
        """Apply one edit task to the current composite, returning RGBA."""
        ...


class FlowModels:
    """VAE + flow backbone + one LoRA adapter per task."""

    def __init__(self, vae: RgbaVAE, flow: FlowTransformer, adapters: dict[str, LoraAdapter], steps: int = 16):
        self.vae = vae
        self.flow = flow
        self.adapters = adapters
        self.steps = steps

    def tasks(self) -> set[str]:
        return set(self.adapters)

    @torch.no_grad()
    def run(self, task: str, current: np.ndarray) -> np.ndarray:
        if task not in self.adapters:
            raise MissingModelError(task)
        dtype = next(self.vae.parameters()).dtype
        z = self.vae.encode(torch.from_numpy(current[None]).to(dtype)).z
        g = z.shape[1]
        # no ground-truth mask at inference: the adapter picks the region itself
        mask = torch.ones((1, g, g), dtype=z.dtype)
        out = sample_edit(self.flow, z, self.steps, self.adapters[task], mask=mask)
        c = self.vae.cfg.channels_rgb
        img = self.vae.decode((out[..., :c], out[..., c:]))
        return np.clip(img[0].numpy().astype(np.float32), 0.0, 1.0)


class OracleModels:
    """Replays a document's ground-truth triplets in peel order."""

    def __init__(self, doc: LayerDocument):
        self.triplets = make_triplets(doc)
        self._next = {"text": 0, "fg": 0}
        self._last = {}

    def tasks(self) -> set[str]:
        return set(EDIT_TASKS)

    def _group(self, prefix: str):
        return [s for s in self.triplets if (s.role == "text") == (prefix == "text")]

    def run(self, task: str, current: np.ndarray) -> np.ndarray:
        prefix, kind = task.split("_")
        group = self._group(prefix)
        if kind == "extract":
            i = self._next[prefix]
            if i >= len(group):
                return rgba.blank(*current.shape[:2])
            self._last[prefix] = group[i]
            return group[i].fg_target.copy()
        sample = self._last.pop(prefix, None)
        if sample is None:
            return current.copy()
        self._next[prefix] += 1
        return sample.bg_target.copy()


@dataclass
class DecompositionState:
    current: np.ndarray
    extracted: list[tuple[LayerRecord, str]] = field(default_factory=list)
    iteration: int = 0


def _mean_alpha(img: np.ndarray) -> float:
    return float(img[..., 3].mean())


def decompose(
    img,
    models: EditModels,
    k_max: int = 4,
    stop_tau: float = 0.01,
    prompt: HierarchicalPrompt | None = None,
) -> LayerDocument:
    """Peel text once, then up to ``k_max`` foregrounds, top-down.

    An extraction whose mean alpha is below ``stop_tau`` counts as empty: for
    text it skips the text round, for foregrounds it ends the loop. Whatever
    remains becomes the background.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if not 0.0 < stop_tau < 1.0:
        raise ValueError("stop_tau must lie in (0, 1)")
    available = models.tasks()
    for task in EDIT_TASKS:
        if task not in available:
            raise MissingModelError(task)
    state = DecompositionState(current=rgba.as_rgba(img).copy())

    def peel(prefix: str, role: str) -> bool:
        layer = models.run(f"{prefix}_extract", state.current)
        if _mean_alpha(layer) < stop_tau:
            return False
        z = -(len(state.extracted) + 1)  # provisional, top-down; renumbered below
        rec = LayerRecord(role, layer, rgba.alpha_bbox(layer, BBOX_THRESHOLD), True, z)
        state.extracted.append((rec, f"{prefix}_extract"))
        state.current = models.run(f"{prefix}_erase", state.current)
        state.iteration += 1
        return True

    peel("text", "text")
    n_fg = 0
    while n_fg < k_max and peel("fg", "foreground" if n_fg == 0 else "midground"):
        n_fg += 1

    stack = [("background", state.current)] + [(rec.role, rec.image) for rec, _ in reversed(state.extracted)]
    prompt = prompt or HierarchicalPrompt(
        "decomposed poster", "unknown foreground", "unknown midground", "unknown background"
    )
    return document_from_stack(stack, prompt, BBOX_THRESHOLD)


def recompose_error(doc: LayerDocument, original) -> float:
    """MSE over RGB between the flattened layers and ``original``, both on white."""
    original = rgba.as_rgba(original)
    flat = rgba.flatten(doc.visible_stack())
    if flat.shape != original.shape:
        raise rgba.ShapeError(f"document is {flat.shape}, original is {original.shape}")
    a = rgba.composite_on_matte(flat, rgba.WHITE)[..., :3].astype(np.float64)
    b = rgba.composite_on_matte(original, rgba.WHITE)[..., :3].astype(np.float64)
    return float(np.mean((a - b) ** 2))


# ---------------------------------------------------------------- text recovery


@dataclass(frozen=True)
class TextSpan:
    content: str
    bbox: tuple[int, int, int, int]
    font_id: str = "unknown"


class TextRecoveryError(RuntimeError):
    pass


class TextRecovery(Protocol):
    name: str

    def __call__(self, layer: LayerRecord) -> list[TextSpan]: ...


class PassthroughTextRecovery:
    """One span covering the layer's box; content and font unknown."""

    name = "passthrough"

    def __call__(self, layer: LayerRecord) -> list[TextSpan]:
        x, y, w, h = rgba.alpha_bbox(layer.image, BBOX_THRESHOLD)
        if w == 0 or h == 0:
            return []
        return [TextSpan("unknown", tuple(layer.bbox) if layer.bbox[2] and layer.bbox[3] else (x, y, w, h))]


TEXT_ENGINES: dict[str, TextRecovery] = {"passthrough": PassthroughTextRecovery()}


def recover_text(layer: LayerRecord, engine: TextRecovery | str = "passthrough") -> list[TextSpan]:
    if layer.role != "text":
        raise ValueError(f"text recovery needs a text layer, got role {layer.role!r}")
    if isinstance(engine, str):
        if engine not in TEXT_ENGINES:
            raise KeyError(f"unknown text recovery engine {engine!r}")
        engine = TEXT_ENGINES[engine]
    name = getattr(engine, "name", type(engine).__name__)
    try:
        spans = list(engine(layer))
    except Exception as e:
        raise TextRecoveryError(f"text recovery engine {name!r} failed: {e}") from e
    h, w = layer.image.shape[:2]
    for s in spans:
        x, y, bw, bh = s.bbox
        if x < 0 or y < 0 or x + bw > w or y + bh > h:
            raise TextRecoveryError(f"engine {name!r} returned span bbox {s.bbox} outside the {w}x{h} layer")
    return spans
