"""Layered documents, the on-disk layer bundle format, and the procedural
poster generator used as training and evaluation corpus."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rgba

ROLES = ("text", "foreground", "midground", "background")
TASKS = ("text_extract", "text_erase", "fg_extract", "fg_erase")
BUNDLE_FORMAT = "layer-bundle"
BUNDLE_VERSION = 1
MANIFEST = "manifest.json"
COMPOSITE_FILE = "composite.png"

# named palette so prompt words match pixels exactly
PALETTE = {
    "red": (0.86, 0.16, 0.16),
    "orange": (0.96, 0.56, 0.12),
    "yellow": (0.97, 0.86, 0.2),
    "green": (0.2, 0.7, 0.3),
    "teal": (0.1, 0.6, 0.6),
    "blue": (0.18, 0.35, 0.85),
    "purple": (0.55, 0.25, 0.75),
    "pink": (0.95, 0.5, 0.7),
    "navy": (0.08, 0.1, 0.35),
    "cream": (0.96, 0.93, 0.82),
    "gray": (0.5, 0.5, 0.5),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
SHAPE_COLORS = ("red", "orange", "yellow", "green", "teal", "blue", "purple", "pink")
BG_COLORS = ("navy", "cream", "gray", "teal", "orange", "pink", "blue", "green")
SHAPES = ("disk", "square", "ring")
MIN_LAYER_MASS = 0.02  # mean alpha floor for generated non-background layers


class DocumentError(ValueError):
    """A layer document or bundle violates the format's invariants."""


@dataclass(frozen=True)
class HierarchicalPrompt:
    poster: str
    foreground: str
    midground: str
    background: str

    def __post_init__(self):
        for name in ("poster", "foreground", "midground", "background"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise DocumentError(f"prompt field {name!r} must be a non-empty string")

    def to_dict(self) -> dict:
        return {
            "poster": self.poster,
            "foreground": self.foreground,
            "midground": self.midground,
            "background": self.background,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HierarchicalPrompt":
        missing = {"poster", "foreground", "midground", "background"} - set(d)
        if missing:
            raise DocumentError(f"prompt is missing fields {sorted(missing)}")
        return cls(d["poster"], d["foreground"], d["midground"], d["background"])


@dataclass
class LayerRecord:
    role: str
    image: np.ndarray
    bbox: tuple[int, int, int, int]
    visible: bool = True
    z_order: int = 0


@dataclass
class LayerDocument:
    width: int
    height: int
    layers: list[LayerRecord]
    composite: np.ndarray
    prompt: HierarchicalPrompt

    def visible_stack(self) -> list[np.ndarray]:
        return [l.image for l in sorted(self.layers, key=lambda l: l.z_order) if l.visible]

    def layers_by_role(self, *roles: str) -> list[LayerRecord]:
        return [l for l in self.layers if l.role in roles]


@dataclass
class TripletSample:
    input: np.ndarray
    mask: np.ndarray
    fg_target: np.ndarray
    bg_target: np.ndarray
    task: str
    role: str = "foreground"


def check_document(doc: LayerDocument, composite_tol: float | None = 1e-6) -> None:
    """Raise :class:`DocumentError` if ``doc`` breaks a structural invariant.

    ``composite_tol`` bounds the per-channel difference between the stored
    composite and the flattened stack, compared on a white matte so that
    quantized bundles are not penalized where alpha is tiny. ``None`` skips it.
    """
    if not doc.layers:
        raise DocumentError("document has no layers")
    zs = sorted(l.z_order for l in doc.layers)
    if zs != list(range(len(zs))):
        raise DocumentError(f"z_order values must be unique and contiguous from 0, got {zs}")
    bgs = [l for l in doc.layers if l.role == "background"]
    if len(bgs) != 1:
        raise DocumentError(f"expected exactly one background layer, found {len(bgs)}")
    if bgs[0].z_order != 0:
        raise DocumentError(f"background layer must have z_order 0, has {bgs[0].z_order}")
    if [l.z_order for l in doc.layers] != zs:
        raise DocumentError("layers must be stored sorted by z_order")
    for l in doc.layers:
        if l.role not in ROLES:
            raise DocumentError(f"unknown layer role {l.role!r}")
        if l.image.shape != (doc.height, doc.width, 4):
            raise DocumentError(
                f"layer z={l.z_order} has shape {l.image.shape}, document is {doc.height}x{doc.width}"
            )
        x, y, w, h = l.bbox
        if min(x, y, w, h) < 0 or x + w > doc.width or y + h > doc.height:
            raise DocumentError(f"bbox {l.bbox} of layer z={l.z_order} exceeds document bounds")
    if doc.composite.shape != (doc.height, doc.width, 4):
        raise DocumentError(f"composite has shape {doc.composite.shape}")
    if composite_tol is not None:
        flat = rgba.flatten(doc.visible_stack())
        if composite_tol <= 1e-6:
            err = float(np.max(np.abs(flat.astype(np.float64) - doc.composite)))
        else:
            err = float(
                np.max(np.abs(rgba.composite_on_matte(flat, rgba.WHITE) - rgba.composite_on_matte(doc.composite, rgba.WHITE)))
            )
            err = max(err, float(np.max(np.abs(flat[..., 3] - doc.composite[..., 3]))))
        if err > composite_tol:
            raise DocumentError(f"composite differs from flattened layers by {err:.3g} (> {composite_tol:g})")


# ---------------------------------------------------------------- generator


def _smoothstep_alpha(signed_dist: np.ndarray, soft: float) -> np.ndarray:
    # signed_dist < 0 inside; linear ramp of width ``soft`` centered on the edge
    return np.clip(0.5 - signed_dist / soft, 0.0, 1.0)


def _shape_alpha(kind: str, size: int, cx: float, cy: float, r: float, soft: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if kind == "disk":
        d = np.hypot(xx - cx, yy - cy) - r
    elif kind == "square":
        d = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) - r
    elif kind == "ring":
        d = np.abs(np.hypot(xx - cx, yy - cy) - 0.7 * r) - 0.35 * r
    else:
        raise ValueError(kind)
    return _smoothstep_alpha(d, soft)


def _where_words(cx: float, cy: float, size: int) -> str:
    col = "left" if cx < size / 3 else ("right" if cx > 2 * size / 3 else "center")
    row = "top" if cy < size / 3 else ("bottom" if cy > 2 * size / 3 else "middle")
    if col == "center" and row == "middle":
        return "in the center"
    if col == "center":
        return f"at the {row}"
    if row == "middle":
        return f"on the {col}"
    return f"at the {row} {col}"


def _layer(size: int, color, alpha: np.ndarray) -> np.ndarray:
    img = np.zeros((size, size, 4), dtype=np.float32)
    img[..., :3] = np.asarray(color, dtype=np.float32)
    img[..., 3] = alpha.astype(np.float32)
    img[alpha <= 0.0, :3] = 0.0
    return img


def _background(rng: np.random.Generator, size: int) -> tuple[np.ndarray, str]:
    c1, c2 = rng.choice(len(BG_COLORS), size=2, replace=False)
    n1, n2 = BG_COLORS[c1], BG_COLORS[c2]
    a, b = np.asarray(PALETTE[n1]), np.asarray(PALETTE[n2])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    vertical = bool(rng.integers(2))
    coord = (yy if vertical else xx) / size
    if rng.integers(2):
        w = coord[..., None]
        desc = f"a {'vertical' if vertical else 'horizontal'} gradient from {n1} to {n2}"
    else:
        split = rng.uniform(0.3, 0.7)
        w = np.clip((coord - split) * size + 0.5, 0.0, 1.0)[..., None]
        desc = f"a two-tone {'top and bottom' if vertical else 'left and right'} split of {n1} and {n2}"
    rgb = (1.0 - w) * a + w * b
    img = np.ones((size, size, 4), dtype=np.float32)
    img[..., :3] = rgb
    return img, desc


def _shape_layer(rng: np.random.Generator, size: int, avoid: str | None) -> tuple[np.ndarray, str, str]:
    while True:
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        color = SHAPE_COLORS[int(rng.integers(len(SHAPE_COLORS)))]
        if color != avoid:
            break
    r = rng.uniform(0.15, 0.28) * size
    cx = rng.uniform(r, size - r)
    cy = rng.uniform(r, size - r)
    opacity = rng.uniform(0.75, 1.0)
    alpha = _shape_alpha(kind, size, cx, cy, r, soft=max(1.0, size / 16)) * opacity
    return _layer(size, PALETTE[color], alpha), f"a {color} {kind} {_where_words(cx, cy, size)}", color


def _text_layer(rng: np.random.Generator, size: int, under: np.ndarray) -> tuple[np.ndarray, str]:
    # short row of bar glyphs in the color contrasting most with what lies below
    stroke = max(1, size // 16)
    gh = max(3, size // 6)
    gw = 2 * stroke + 1
    gap = stroke
    n_max = max(2, min(5, (size - 2 + gap) // (gw + gap)))
    n = int(rng.integers(2, n_max + 1))
    total = n * gw + (n - 1) * gap
    x0 = int(rng.integers(1, max(2, size - total)))
    y0 = int(rng.integers(1, size - gh - 1))
    alpha = np.zeros((size, size))
    for i in range(n):
        gx = x0 + i * (gw + gap)
        kind = int(rng.integers(3))
        alpha[y0 : y0 + gh, gx : gx + stroke] = 1.0  # stem
        if kind == 0:
            alpha[y0 : y0 + stroke, gx : gx + gw] = 1.0  # top bar
        elif kind == 1:
            alpha[y0 + gh - stroke : y0 + gh, gx : gx + gw] = 1.0  # foot
        else:
            alpha[y0 + gh // 2 : y0 + gh // 2 + stroke, gx : gx + gw] = 1.0
    alpha = alpha[:size, :size]
    region = under[y0 : y0 + gh, x0 : x0 + total, :3]
    lum = float(np.mean(region @ np.array([0.299, 0.587, 0.114]))) if region.size else 0.5
    name = "black" if lum > 0.5 else "white"
    return _layer(size, PALETTE[name], alpha), f"a short {name} caption"


def synth_poster(seed: int, size: int = 32) -> LayerDocument:
    """Deterministic random poster: a background, one or two shapes and an
    optional row of glyph marks on top."""
    if size < 16 or size % 2:
        raise ValueError(f"size must be even and >= 16, got {size}")
    rng = np.random.default_rng(seed)
    bg, bg_desc = _background(rng, size)
    n_shapes = int(rng.integers(1, 3))
    shapes = []
    used = None
    for _ in range(n_shapes):
        for _attempt in range(50):
            img, desc, used_color = _shape_layer(rng, size, used)
            if img[..., 3].mean() >= MIN_LAYER_MASS:
                break
        shapes.append((img, desc))
        used = used_color
    layers = [LayerRecord("background", bg, (0, 0, size, size), True, 0)]
    roles = ["foreground"] if n_shapes == 1 else ["midground", "foreground"]
    for role, (img, _desc) in zip(roles, shapes):
        layers.append(LayerRecord(role, img, rgba.alpha_bbox(img), True, len(layers)))
    has_text = bool(rng.integers(2))
    text_desc = None
    if has_text:
        under = rgba.flatten([l.image for l in layers])
        img, text_desc = _text_layer(rng, size, under)
        layers.append(LayerRecord("text", img, rgba.alpha_bbox(img), True, len(layers)))

    fg_desc = shapes[-1][1]
    mid_desc = shapes[0][1] if n_shapes == 2 else "no midground elements"
    poster = f"{fg_desc}" + (f" and {mid_desc}" if n_shapes == 2 else "") + f" over {bg_desc}"
    if text_desc:
        poster += f" with {text_desc}"
    prompt = HierarchicalPrompt(poster, fg_desc, mid_desc, bg_desc)
    composite = rgba.flatten([l.image for l in layers])
    return LayerDocument(size, size, layers, composite, prompt)


# ---------------------------------------------------------------- bundle io


def _layer_filename(i: int) -> str:
    return f"layer_{i:02d}.png"


def manifest_dict(doc: LayerDocument) -> dict:
    return {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "width": doc.width,
        "height": doc.height,
        "prompt": doc.prompt.to_dict(),
        "composite": COMPOSITE_FILE,
        "layers": [
            {
                "filename": _layer_filename(l.z_order),
                "role": l.role,
                "bbox": [int(v) for v in l.bbox],
                "visible": bool(l.visible),
                "z_order": int(l.z_order),
            }
            for l in doc.layers
        ],
    }


def dump_json(obj, path) -> None:
    """Byte-stable JSON: sorted keys, 2-space indent, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def save_bundle(doc: LayerDocument, path) -> Path:
    check_document(doc, composite_tol=None)
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for l in doc.layers:
        rgba.write_png(l.image, out / _layer_filename(l.z_order))
    rgba.write_png(doc.composite, out / COMPOSITE_FILE)
    dump_json(manifest_dict(doc), out / MANIFEST)
    return out


def load_bundle(path) -> LayerDocument:
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise DocumentError(f"no {MANIFEST} in {root}")
    try:
        m = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DocumentError(f"{mpath} is not valid JSON: {e}") from e
    for key in ("width", "height", "prompt", "layers"):
        if key not in m:
            raise DocumentError(f"{mpath} is missing {key!r}")
    layers = []
    for entry in m["layers"]:
        f = root / entry["filename"]
        if not f.is_file():
            raise DocumentError(f"manifest references missing file {f}")
        layers.append(
            LayerRecord(
                role=entry["role"],
                image=rgba.read_png(f),
                bbox=tuple(int(v) for v in entry["bbox"]),
                visible=bool(entry.get("visible", True)),
                z_order=int(entry["z_order"]),
            )
        )
    zs = [l.z_order for l in layers]
    if len(set(zs)) != len(zs):
        raise DocumentError(f"duplicate z_order values in {mpath}: {zs}")
    layers.sort(key=lambda l: l.z_order)
    cpath = root / m.get("composite", COMPOSITE_FILE)
    if not cpath.is_file():
        raise DocumentError(f"manifest references missing file {cpath}")
    doc = LayerDocument(
        width=int(m["width"]),
        height=int(m["height"]),
        layers=layers,
        composite=rgba.read_png(cpath),
        prompt=HierarchicalPrompt.from_dict(m["prompt"]),
    )
    # 8-bit storage: each stored image may be off by half a level per channel
    check_document(doc, composite_tol=(len(layers) + 1) / 255.0 + 1e-6)
    return doc


# ---------------------------------------------------------------- training views


def _dilate(mask: np.ndarray, px: int = 1) -> np.ndarray:
    out = mask.copy()
    h, w = mask.shape
    padded = np.pad(mask, px)
    for dy in range(-px, px + 1):
        for dx in range(-px, px + 1):
            out |= padded[px + dy : px + dy + h, px + dx : px + dx + w]
    return out


def layer_mask(image: np.ndarray, mode: str = "alpha") -> np.ndarray:
    """Binary mask covering a layer: alpha support dilated by one pixel, or
    the filled bounding box of that support."""
    support = image[..., 3] > 0.0
    if mode == "alpha":
        m = _dilate(support, 1)
    elif mode == "bbox":
        m = np.zeros_like(support)
        x, y, w, h = rgba.alpha_bbox(image)
        m[y : y + h, x : x + w] = True
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    return m.astype(np.float32)


def task_for_role(role: str, kind: str) -> str:
    prefix = "text" if role == "text" else "fg"
    return f"{prefix}_{kind}"


def make_triplets(doc: LayerDocument, mask_mode: str = "alpha") -> list[TripletSample]:
    """Peel visible non-background layers top-down, one triplet per layer.

    The input of each triplet is the flatten of everything at or below the
    layer; the erase target is the flatten of everything strictly below.
    """
    stack = [l for l in sorted(doc.layers, key=lambda l: l.z_order) if l.visible]
    out = []
    for i in range(len(stack) - 1, 0, -1):
        layer = stack[i]
        if layer.role == "background":
            continue
        below = rgba.flatten([l.image for l in stack[:i]])
        out.append(
            TripletSample(
                input=rgba.over(layer.image, below),
                mask=layer_mask(layer.image, mask_mode),
                fg_target=layer.image.copy(),
                bg_target=below,
                task=task_for_role(layer.role, "extract"),
                role=layer.role,
            )
        )
    # text first, then foregrounds; stable keeps top-down order within each group
    out.sort(key=lambda s: 0 if s.role == "text" else 1)
    return out


def make_grid_sample(doc: LayerDocument) -> tuple[rgba.GridSample, HierarchicalPrompt]:
    """Text-free 2x2 training grid: (composite, top shape, next shape or
    transparent placeholder, background)."""
    ordered = sorted(doc.layers, key=lambda l: l.z_order)
    shapes = [l for l in ordered if l.role in ("foreground", "midground") and l.visible]
    if not shapes:
        raise DocumentError("grid samples need at least one foreground layer")
    bg = [l for l in ordered if l.role == "background"][0]
    text_free = [l.image for l in ordered if l.role != "text" and l.visible]
    composite = rgba.flatten(text_free)
    layer_a = shapes[-1].image
    layer_b = shapes[-2].image if len(shapes) > 1 else rgba.blank(doc.height, doc.width)
    return rgba.assemble_grid(composite, layer_a, layer_b, bg.image), doc.prompt


def document_from_stack(
    stack: list[tuple[str, np.ndarray]], prompt: HierarchicalPrompt, bbox_threshold: float = 0.05
) -> LayerDocument:
    """Build a document from ``(role, image)`` pairs ordered bottom-first."""
    if not stack or stack[0][0] != "background":
        raise DocumentError("stack must start with the background layer")
    h, w = stack[0][1].shape[:2]
    layers = []
    for z, (role, img) in enumerate(stack):
        img = rgba.as_rgba(img)
        bbox = (0, 0, w, h) if role == "background" else rgba.alpha_bbox(img, bbox_threshold)
        layers.append(LayerRecord(role, img, bbox, True, z))
    composite = rgba.flatten([l.image for l in layers])
    return LayerDocument(w, h, layers, composite, prompt)
