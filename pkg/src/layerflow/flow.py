"""Flow-matching transformer with in-context token conditioning and LoRA.

The denoiser sees one bidirectional token sequence ``[text; condition;
mask; target]`` and regresses the straight-line velocity ``z1 - z0`` on the
target tokens only. Latents enter channels-last, ``(B, g, g, C)``.
"""

from __future__ import annotations

import contextlib
import copy
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import bundle
from .seeding import numpy_rng, stream_int, torch_generator
from .vae import TrainingDiverged

SEGMENTS = {"condition": 0, "target": 1, "text": 2, "mask": 3}
PROMPT_FIELDS = ("poster", "foreground", "midground", "background")
ADAPTER_TASKS = ("text_extract", "text_erase", "fg_extract", "fg_erase", "t2psd")
PAD_ID, UNK_ID = 0, 1
CHECKPOINT_FORMAT = "flow-transformer"
ADAPTER_FORMAT = "flow-lora"
CHECKPOINT_VERSION = 1


def _build_vocab() -> tuple[str, ...]:
    words = set(bundle.PALETTE) | set(bundle.SHAPES)
    words |= set(
        "a an the and of over with on at in to from short caption no midground elements "
        "left right center top bottom middle vertical horizontal gradient two-tone split "
        "poster background foreground text layer".split()
    )
    return ("<pad>", "<unk>", *sorted(words))


VOCAB = _build_vocab()
_WORD_ID = {w: i for i, w in enumerate(VOCAB)}


def tokenize(text: str, max_words: int = 24) -> list[int]:
    words = re.findall(r"[a-z0-9\-]+", text.lower())[:max_words]
    ids = [_WORD_ID.get(w, UNK_ID) for w in words]
    return ids + [PAD_ID] * (max_words - len(ids))


def prompt_ids(prompt: bundle.HierarchicalPrompt, max_words: int = 24) -> torch.Tensor:
    """``(4, max_words)`` word ids, one row per prompt field."""
    d = prompt.to_dict()
    return torch.tensor([tokenize(d[f], max_words) for f in PROMPT_FIELDS], dtype=torch.long)


@dataclass
class FlowConfig:
    latent_channels: int = 6
    d_model: int = 128
    heads: int = 4
    blocks: int = 4
    mlp_ratio: int = 4
    lora_rank: int = 8
    lora_alpha: float = 8.0
    max_words: int = 24

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} must be divisible by heads {self.heads}")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 for 2-D position encodings")


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (B, N, d)
    segment_ids: torch.Tensor  # (N,)
    positions: torch.Tensor  # (N, 2); rows of text tokens are ignored

    def __post_init__(self):
        if self.tokens.shape[1] != self.segment_ids.shape[0] or self.positions.shape[0] != self.segment_ids.shape[0]:
            raise ValueError("tokens, segment_ids and positions disagree on sequence length")

    def segment(self, name: str) -> torch.Tensor:
        return self.segment_ids == SEGMENTS[name]


@dataclass
class Conditioning:
    """What the denoiser conditions on besides the noisy target."""

    latent: torch.Tensor | None = None  # (B, g, g, C)
    mask: torch.Tensor | None = None  # (B, g, g) in [0, 1]
    text: torch.Tensor | None = None  # (B, 4, max_words) word ids

    def take(self, idx) -> "Conditioning":
        return Conditioning(*(None if v is None else v[idx] for v in (self.latent, self.mask, self.text)))


@dataclass
class FlowBatch:
    z0: torch.Tensor
    z1: torch.Tensor
    t: torch.Tensor
    zt: torch.Tensor
    v_target: torch.Tensor
    cond: Conditioning = field(default_factory=Conditioning)


def interpolate(z0: torch.Tensor, z1: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
    """Straight-line interpolant and its constant velocity. ``t`` is a
    scalar or one value per leading batch entry."""
    if z0.shape != z1.shape:
        raise ValueError(f"z0 {tuple(z0.shape)} and z1 {tuple(z1.shape)} differ")
    t = torch.as_tensor(t, dtype=z0.dtype)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    tb = t.reshape(t.shape + (1,) * (z0.ndim - t.ndim))
    return (1 - tb) * z0 + tb * z1, z1 - z0


def make_batch(z0, z1, t, cond: Conditioning | None = None) -> FlowBatch:
    zt, v = interpolate(z0, z1, t)
    return FlowBatch(z0, z1, torch.as_tensor(t, dtype=z0.dtype), zt, v, cond or Conditioning())


# ---------------------------------------------------------------- layers


class LoRALinear(nn.Linear):
    """Linear layer that can carry an externally owned low-rank update."""

    lora: tuple | None = None

    def forward(self, x):
        y = F.linear(x, self.weight, self.bias)
        if self.lora is not None:
            a, b, scale = self.lora
            y = y + scale * F.linear(F.linear(x, a), b)
        return y


def sinusoidal(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=x.dtype) / half)
    args = x[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def grid_positions(g: int, dtype=torch.float32) -> torch.Tensor:
    yy, xx = torch.meshgrid(torch.arange(g, dtype=dtype), torch.arange(g, dtype=dtype), indexing="ij")
    return torch.stack([yy.reshape(-1), xx.reshape(-1)], dim=-1)


class MultiModalAttention(nn.Module):
    """Full bidirectional multi-head softmax attention over all segments."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = LoRALinear(d, d)
        self.k = LoRALinear(d, d)
        self.v = LoRALinear(d, d)
        self.o = LoRALinear(d, d)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        b, n, d = x.shape
        h = self.heads

        def split(t):
            return t.view(b, n, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        w = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // h), dim=-1)
        out = self.o((w @ v).transpose(1, 2).reshape(b, n, d))
        return (out, w) if return_weights else out


class Block(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiModalAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.fc1 = LoRALinear(d, mlp_ratio * d)
        self.fc2 = LoRALinear(mlp_ratio * d, d)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class FlowTransformer(nn.Module):
    def __init__(self, cfg: FlowConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.latent_in = LoRALinear(cfg.latent_channels, d)
        self.mask_in = nn.Linear(1, d)
        self.word_emb = nn.Embedding(len(VOCAB), d, padding_idx=PAD_ID)
        self.field_emb = nn.Embedding(len(PROMPT_FIELDS), d)
        self.segment_emb = nn.Embedding(len(SEGMENTS), d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.blocks))
        self.norm_out = nn.LayerNorm(d)
        self.latent_out = LoRALinear(d, cfg.latent_channels)
        # latents are divided by this before entering the flow; set from data
        self.register_buffer("latent_scale", torch.ones(()))

    def _image_tokens(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, gh, gw, c = z.shape
        if gh != gw:
            raise ValueError(f"latent grid must be square, got {gh}x{gw}")
        return self.latent_in(z.reshape(b, gh * gw, c)), grid_positions(gh, z.dtype)

    def text_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        """Mean-pool word embeddings per prompt field -> ``(B, 4, d)``."""
        emb = self.word_emb(ids)
        keep = (ids != PAD_ID).to(emb.dtype).unsqueeze(-1)
        pooled = (emb * keep).sum(-2) / keep.sum(-2).clamp(min=1.0)
        return pooled + self.field_emb.weight.to(emb.dtype)

    def build_sequence(self, zt: torch.Tensor, cond: Conditioning) -> TokenSequence:
        parts, segs, poss = [], [], []

        def add(tokens, name, pos):
            parts.append(tokens + self.segment_emb.weight[SEGMENTS[name]])
            segs.append(torch.full((tokens.shape[1],), SEGMENTS[name], dtype=torch.long))
            poss.append(pos)

        if cond.text is not None:
            t = self.text_tokens(cond.text)
            add(t, "text", torch.full((t.shape[1], 2), -1.0, dtype=zt.dtype))
        if cond.latent is not None:
            tok, pos = self._image_tokens(cond.latent)
            add(tok, "condition", pos)
        if cond.mask is not None:
            b, g, _ = cond.mask.shape
            tok = self.mask_in(cond.mask.reshape(b, g * g, 1).to(zt.dtype))
            add(tok, "mask", grid_positions(g, zt.dtype))
        tok, pos = self._image_tokens(zt)
        add(tok, "target", pos)
        return TokenSequence(torch.cat(parts, dim=1), torch.cat(segs), torch.cat(poss))

    def run(self, seq: TokenSequence, t: torch.Tensor) -> torch.Tensor:
        """Transformer over a full sequence; returns velocity for every token."""
        d = self.cfg.d_model
        x = seq.tokens
        is_image = (seq.segment_ids != SEGMENTS["text"]).to(x.dtype).unsqueeze(-1)
        pos = seq.positions.to(x.dtype)
        pe = torch.cat([sinusoidal(pos[:, 0], d // 2, 100.0), sinusoidal(pos[:, 1], d // 2, 100.0)], dim=-1)
        x = x + pe * is_image
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1)
        temb = self.time_mlp(sinusoidal(t * 1000.0, d))
        x = x + temb[:, None, :]
        for blk in self.blocks:
            x = blk(x)
        return self.latent_out(self.norm_out(x))

    def forward(self, zt: torch.Tensor, t, cond: Conditioning | None = None) -> torch.Tensor:
        cond = cond or Conditioning()
        seq = self.build_sequence(zt, cond)
        out = self.run(seq, t)
        target = out[:, seq.segment("target")]
        return target.reshape(zt.shape)


def mma_attention(attn: MultiModalAttention, seq: TokenSequence) -> TokenSequence:
    return TokenSequence(attn(seq.tokens), seq.segment_ids, seq.positions)


# ---------------------------------------------------------------- LoRA


class LoraAdapter(nn.Module):
    """Low-rank updates ``W + (alpha/r) B A`` for every LoRALinear in a
    model, stored apart from the base weights."""

    def __init__(self, model: FlowTransformer, rank: int, alpha: float, seed: int = 0, task: str = ""):
        super().__init__()
        self.rank = rank
        self.alpha = alpha
        self.scale = alpha / rank
        self.task = task
        g = torch_generator(seed, f"lora-{task}")
        self.A = nn.ParameterDict()
        self.B = nn.ParameterDict()
        dtype = next(model.parameters()).dtype
        for name, mod in model.named_modules():
            if isinstance(mod, LoRALinear):
                key = name.replace(".", "__")
                bound = 1.0 / math.sqrt(mod.in_features)
                a = (torch.rand(rank, mod.in_features, generator=g, dtype=torch.float64) * 2 - 1) * bound
                self.A[key] = nn.Parameter(a.to(dtype))
                self.B[key] = nn.Parameter(torch.zeros(mod.out_features, rank, dtype=dtype))

    @contextlib.contextmanager
    def applied(self, model: FlowTransformer):
        mods = {n.replace(".", "__"): m for n, m in model.named_modules() if isinstance(m, LoRALinear)}
        try:
            for key in self.A:
                mods[key].lora = (self.A[key], self.B[key], self.scale)
            yield model
        finally:
            for key in self.A:
                mods[key].lora = None

    def merge_into(self, model: FlowTransformer) -> FlowTransformer:
        """Copy of ``model`` with ``W <- W + scale * B A`` folded in."""
        merged = copy.deepcopy(model)
        mods = {n.replace(".", "__"): m for n, m in merged.named_modules() if isinstance(m, LoRALinear)}
        with torch.no_grad():
            for key in self.A:
                mods[key].weight += self.scale * (self.B[key] @ self.A[key])
        return merged


@contextlib.contextmanager
def _maybe_adapter(model, adapter):
    if adapter is None:
        yield model
    else:
        with adapter.applied(model):
            yield model


def predict_velocity(model: FlowTransformer, zt, t, cond: Conditioning | None = None, adapter: LoraAdapter | None = None):
    with _maybe_adapter(model, adapter):
        return model(zt, t, cond)


def flow_loss(model: FlowTransformer, batch: FlowBatch, adapter: LoraAdapter | None = None) -> torch.Tensor:
    pred = predict_velocity(model, batch.zt, batch.t, batch.cond, adapter)
    return (pred - batch.v_target).pow(2).mean()


# ---------------------------------------------------------------- samplers


def euler(field_fn, z0: torch.Tensor, steps: int) -> torch.Tensor:
    """Integrate ``dz/dt = field_fn(z, t)`` from t=0 to t=1 with Euler steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = z0
    for k in range(steps):
        t = torch.full((z.shape[0],), k / steps, dtype=z.dtype)
        z = z + field_fn(z, t) / steps
    return z


@torch.no_grad()
def sample_edit(
    model: FlowTransformer,
    z_cond: torch.Tensor,
    steps: int,
    adapter: LoraAdapter | None = None,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deterministic edit: start at the condition latent, integrate to t=1.
    Latents are in VAE units; scaling to flow units happens here."""
    s = model.latent_scale.to(z_cond.dtype)
    zc = z_cond / s
    cond = Conditioning(latent=zc, mask=mask)
    out = euler(lambda z, t: predict_velocity(model, z, t, cond, adapter), zc, steps)
    return out * s


@torch.no_grad()
def sample_generate(
    model: FlowTransformer,
    noise: torch.Tensor,
    text: torch.Tensor,
    steps: int,
    adapter: LoraAdapter | None = None,
) -> torch.Tensor:
    """Noise -> grid latent conditioned on prompt word ids ``(B, 4, L)``."""
    cond = Conditioning(text=text)
    out = euler(lambda z, t: predict_velocity(model, z, t, cond, adapter), noise, steps)
    return out * model.latent_scale.to(noise.dtype)


# ---------------------------------------------------------------- training


@dataclass
class FlowDataset:
    """Pre-encoded pairs for one task, in VAE latent units.

    ``z0`` is ``None`` for generation tasks, whose start point is fresh
    Gaussian noise every step.
    """

    task: str
    z1: torch.Tensor
    z0: torch.Tensor | None = None
    cond: Conditioning = field(default_factory=Conditioning)

    def __len__(self):
        return len(self.z1)


def build_flow(cfg: FlowConfig, seed: int, dtype=torch.float32) -> FlowTransformer:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stream_int(seed, "flow-init"))
        model = FlowTransformer(cfg)
    return model.to(dtype)


def latent_scale_from(datasets: list[FlowDataset]) -> float:
    parts = [d.z1.reshape(-1) for d in datasets] + [d.z0.reshape(-1) for d in datasets if d.z0 is not None]
    return float(torch.cat(parts).double().std())


def train_flow(
    datasets: list[FlowDataset],
    cfg: FlowConfig,
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    model: FlowTransformer | None = None,
    adapter: LoraAdapter | None = None,
    log_every: int = 0,
    schedule: str = "cosine",
    mask_dropout: float = 0.0,
) -> tuple[FlowTransformer, LoraAdapter | None, list[dict]]:
    """Flow-matching training with t ~ U[0, 1].

    Datasets are visited round-robin, one batch per step. If ``adapter`` is
    given the base model is frozen and only the adapter is optimized.
    ``mask_dropout`` replaces each sample's mask by all-ones with that
    probability, matching inference where no mask is known.
    """
    datasets = [d for d in datasets if len(d)]
    if not datasets:
        raise ValueError("empty dataset")
    if model is None:
        model = build_flow(cfg, seed)
        model.latent_scale.fill_(latent_scale_from(datasets))
    if adapter is not None:
        for p in model.parameters():
            p.requires_grad_(False)
        params = list(adapter.parameters())
    else:
        params = list(model.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    sched = None
    if schedule == "cosine" and steps > 0:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 0.5 * (1 + math.cos(math.pi * k / steps)))
    idx_rng = numpy_rng(seed, "flow-batches" + (f"-{adapter.task}" if adapter else ""))
    gen = torch_generator(seed, "flow-noise" + (f"-{adapter.task}" if adapter else ""))
    dtype = next(model.parameters()).dtype
    curve = []
    model.train()
    try:
        for step in range(steps):
            ds = datasets[step % len(datasets)]
            n = len(ds)
            idx = np.arange(n) if batch_size >= n else np.sort(idx_rng.choice(n, size=batch_size, replace=False))
            idx = torch.from_numpy(idx)
            batch = training_batch(ds, idx, model.latent_scale.to(dtype), gen, dtype, mask_dropout)
            loss = flow_loss(model, batch, adapter)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step)
            curve.append({"step": step, "task": ds.task, "loss": float(loss.detach())})
            if log_every and step % log_every == 0:
                print(f"flow step {step} [{ds.task}]: loss={curve[-1]['loss']:.4g}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
    finally:
        model.eval()
        if adapter is not None:
            for p in model.parameters():
                p.requires_grad_(True)
    return model, adapter, curve


def training_batch(ds: FlowDataset, idx, scale, gen: torch.Generator, dtype, mask_dropout: float = 0.0) -> FlowBatch:
    z1 = ds.z1[idx].to(dtype) / scale
    if ds.z0 is None:
        z0 = torch.randn(z1.shape, generator=gen, dtype=dtype)
    else:
        z0 = ds.z0[idx].to(dtype) / scale
    t = torch.rand(len(idx), generator=gen, dtype=dtype)
    cond = ds.cond.take(idx)
    if cond.latent is not None:
        cond.latent = cond.latent.to(dtype) / scale
    if cond.mask is not None and mask_dropout > 0:
        drop = torch.rand(len(idx), generator=gen, dtype=dtype) < mask_dropout
        cond.mask = torch.where(drop[:, None, None], torch.ones_like(cond.mask), cond.mask)
    return make_batch(z0, z1, t, cond)


@torch.no_grad()
def evaluate_flow_loss(
    model: FlowTransformer, ds: FlowDataset, adapter: LoraAdapter | None = None, n_t: int = 11, seed: int = 0
) -> float:
    """Flow loss averaged over the whole dataset at ``n_t`` evenly spaced times."""
    dtype = next(model.parameters()).dtype
    scale = model.latent_scale.to(dtype)
    gen = torch_generator(seed, "flow-eval")
    idx = torch.arange(len(ds))
    total = 0.0
    for t in np.linspace(0.0, 1.0, n_t):
        b = training_batch(ds, idx, scale, gen, dtype)
        b = make_batch(b.z0, b.z1, torch.full((len(ds),), float(t), dtype=dtype), b.cond)
        total += float(flow_loss(model, b, adapter))
    return total / n_t


# ---------------------------------------------------------------- checkpoints


def save_flow(model: FlowTransformer, path) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.cfg),
            "state_dict": model.state_dict(),
        },
        Path(path),
    )


def load_flow(path) -> FlowTransformer:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version {CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} checkpoint")
    model = FlowTransformer(FlowConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model


def save_adapter(adapter: LoraAdapter, path) -> None:
    torch.save(
        {
            "format": ADAPTER_FORMAT,
            "version": CHECKPOINT_VERSION,
            "task": adapter.task,
            "rank": adapter.rank,
            "alpha": adapter.alpha,
            "state_dict": adapter.state_dict(),
        },
        Path(path),
    )


def load_adapter(path, model: FlowTransformer) -> LoraAdapter:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
    if ckpt.get("format") != ADAPTER_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version {CHECKPOINT_VERSION} {ADAPTER_FORMAT} file")
    adapter = LoraAdapter(model, ckpt["rank"], ckpt["alpha"], task=ckpt["task"])
    adapter.load_state_dict(ckpt["state_dict"])
    return adapter
