"""Executable acceptance checks.

Each ``check_*`` function returns a :class:`CheckResult`; details hold
only deterministic numbers (no timings) so reports are byte-stable.
"""

from __future__ import annotations

import json
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import bundle, flow, judge, metrics, rgba, vae
from .decompose import OracleModels, decompose, recompose_error
from .features import RandomFeatureStack
from .pipeline import downsample_masks, synth_corpus, vae_images
from .seeding import numpy_rng, torch_generator


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_rgba(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.random(shape, dtype=np.float32)


# ---------------------------------------------------------------- 1. compositing


def check_compositing(n: int = 10_000, seed: int = 0) -> CheckResult:
    """Associativity and fold equivalence on random pixel stacks."""
    rng = numpy_rng(seed, "check-compositing")
    worst = 0.0
    worst_alpha = 0.0
    depths = rng.integers(3, 7, size=n)
    for depth in range(3, 7):
        m = int((depths == depth).sum())
        if m == 0:
            continue
        stack = [_random_rgba(rng, (m, 1, 4)) for _ in range(depth)]
        a, b, c = stack[-1], stack[-2], stack[-3]
        left = rgba.over(rgba.over(a, b), c)
        right = rgba.over(a, rgba.over(b, c))
        worst = max(worst, float(np.abs(left - right).max()))
        # right fold (top-down) must match the bottom-up left fold
        folded = stack[-1]
        for layer in reversed(stack[:-1]):
            folded = rgba.over(folded, layer)
        worst = max(worst, float(np.abs(rgba.flatten(stack) - folded).max()))
        opaque = [s.copy() for s in stack]
        opaque[0][..., 3] = 1.0
        worst_alpha = max(worst_alpha, float(np.abs(rgba.flatten(opaque)[..., 3] - 1.0).max()))
    ok = worst < 1e-6 and worst_alpha < 1e-6
    return CheckResult("compositing", ok, f"max dev {worst:.3g}, opaque-bottom alpha dev {worst_alpha:.3g}")


# ---------------------------------------------------------------- 2. grid


def check_grid_roundtrip(n: int = 100, seed: int = 0, size: int = 16) -> CheckResult:
    rng = numpy_rng(seed, "check-grid")
    bad = 0
    for _ in range(n):
        quads = [_random_rgba(rng, (size, size, 4)) for _ in range(4)]
        back = rgba.split_grid(rgba.assemble_grid(*quads).grid)
        bad += not all(np.array_equal(x, y) for x, y in zip(quads, back))
    return CheckResult("grid_roundtrip", bad == 0, f"{n - bad}/{n} bit-exact")


# ---------------------------------------------------------------- 3. VAE loss


def check_vae_loss(seed: int = 0) -> CheckResult:
    cfg = vae.VaeConfig(image_size=16)
    perc = RandomFeatureStack(cfg.perc_seed)
    g = torch_generator(seed, "check-vae-loss")
    img = torch.rand((2, 16, 16, 4), generator=g, dtype=torch.float64)
    grid = (2, 4, 4)
    zeros_rgb = torch.zeros(grid + (cfg.channels_rgb,), dtype=torch.float64)
    zeros_a = torch.zeros(grid + (cfg.channels_a,), dtype=torch.float64)
    unit = vae.reparameterize(zeros_rgb, zeros_rgb, zeros_a, zeros_a, zeros_rgb, zeros_a)
    zero = vae.vae_loss(img, img.clone(), unit, cfg, perc)
    zero_ok = all(v == 0.0 for v in zero.as_floats().values())

    mu = torch.randn(grid + (cfg.channels_rgb,), generator=g, dtype=torch.float64)
    lv = torch.randn(grid + (cfg.channels_rgb,), generator=g, dtype=torch.float64)
    m, v = mu.numpy(), lv.numpy()
    closed = float(np.mean(0.5 * (m**2 + np.exp(v) - 1.0 - v)))
    kl_err = abs(float(vae.gaussian_kl(mu, lv)) - closed)

    mu_a = torch.randn(grid + (cfg.channels_a,), generator=g, dtype=torch.float64)
    lat = vae.reparameterize(mu, lv, mu_a, zeros_a, zeros_rgb, zeros_a)
    recon = torch.rand(img.shape, generator=g, dtype=torch.float64)
    parts = vae.vae_loss(img, recon, lat, cfg, perc).as_floats()
    weighted = (
        cfg.lambda_pix * parts["pixel"]
        + cfg.lambda_patch * parts["patch"]
        + cfg.lambda_perc * parts["perceptual"]
        + cfg.lambda_kl * (parts["kl_rgb"] + parts["kl_a"])
    )
    sum_err = abs(parts["total"] - weighted)
    ok = zero_ok and kl_err < 1e-6 and sum_err < 1e-6
    return CheckResult("vae_loss", ok, f"zero-case exact={zero_ok}, kl err {kl_err:.3g}, total err {sum_err:.3g}")


# ---------------------------------------------------------------- 4. gradients


def _grad_check(loss_fn, params: list[tuple[str, torch.nn.Parameter]], rng, n_slices: int, width: int = 16, h: float = 1e-6):
    """Worst relative error between autograd and central differences over
    ``n_slices`` random slices of up to ``width`` elements of one parameter.
    Relative error is ``|g_auto - g_fd| / max(|g_auto|, |g_fd|)`` on the slice."""
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    picks = rng.choice(len(params), size=n_slices, replace=len(params) < n_slices)
    for k in picks:
        _, p = params[int(k)]
        flat = p.data.view(-1)
        idx = rng.choice(flat.numel(), size=min(width, flat.numel()), replace=False)
        analytic = p.grad.view(-1)[torch.from_numpy(idx)].numpy()
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = float(flat[i])
            with torch.no_grad():
                flat[i] = old + h
                up = float(loss_fn())
                flat[i] = old - h
                down = float(loss_fn())
                flat[i] = old
            numeric[j] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst


def check_gradients(seed: int = 0, n_slices: int = 3) -> CheckResult:
    rng = numpy_rng(seed, "check-gradients")
    g = torch_generator(seed, "check-gradients")

    fcfg = flow.FlowConfig(latent_channels=6, d_model=32, heads=4, blocks=1, mlp_ratio=2)
    model = flow.build_flow(fcfg, seed, dtype=torch.float64)
    z0 = torch.randn((2, 4, 4, 6), generator=g, dtype=torch.float64)
    z1 = torch.randn((2, 4, 4, 6), generator=g, dtype=torch.float64)
    t = torch.rand(2, generator=g, dtype=torch.float64)
    cond = flow.Conditioning(latent=z0, mask=torch.rand((2, 4, 4), generator=g, dtype=torch.float64))
    batch = flow.make_batch(z0, z1, t, cond)
    fparams = [(n, p) for n, p in model.named_parameters() if n.startswith("blocks.0.")]
    flow_err = _grad_check(lambda: flow.flow_loss(model, batch), fparams, rng, n_slices)

    vcfg = vae.VaeConfig(image_size=8, latent_grid=2, width=8)
    vmodel = vae.build_vae(vcfg, seed, dtype=torch.float64)
    perc = RandomFeatureStack(vcfg.perc_seed)
    img = torch.rand((2, 8, 8, 4), generator=g, dtype=torch.float64)

    def vloss():
        recon, lat = vmodel(img, torch_generator(seed, "check-gradients-eps"))
        return vae.vae_loss(img, recon, lat, vcfg, perc).total

    vparams = list(vmodel.named_parameters())
    vae_err = _grad_check(vloss, vparams, rng, n_slices)
    ok = flow_err < 1e-3 and vae_err < 1e-3
    return CheckResult(
        "gradients", ok, f"flow block rel err {flow_err:.3g}, vae rel err {vae_err:.3g} ({n_slices} slices each)"
    )


# ---------------------------------------------------------------- 5. Euler


def check_euler(seed: int = 0) -> CheckResult:
    g = torch_generator(seed, "check-euler")
    z0 = torch.randn((3, 4, 4, 6), generator=g, dtype=torch.float64)
    z1 = torch.randn((3, 4, 4, 6), generator=g, dtype=torch.float64)
    errs = {}
    for steps in (1, 4, 16):
        out = flow.euler(lambda z, t: z1 - z0, z0, steps)
        errs[steps] = float((out - z1).abs().max())
    ok = all(e < 1e-6 for e in errs.values())
    return CheckResult("euler", ok, ", ".join(f"steps={k}: {v:.3g}" for k, v in errs.items()))


# ---------------------------------------------------------------- 6. LoRA


def check_lora(seed: int = 0) -> CheckResult:
    g = torch_generator(seed, "check-lora")
    cfg = flow.FlowConfig(d_model=32, heads=4, blocks=2)
    model = flow.build_flow(cfg, seed)
    adapter = flow.LoraAdapter(model, rank=4, alpha=8.0, seed=seed, task="fg_extract")
    zt = torch.randn((2, 4, 4, 6), generator=g)
    cond = flow.Conditioning(latent=torch.randn((2, 4, 4, 6), generator=g), mask=torch.ones((2, 4, 4)))
    t = torch.rand(2, generator=g)
    with torch.no_grad():
        base = model(zt, t, cond)
        ident = flow.predict_velocity(model, zt, t, cond, adapter)
        identity = torch.equal(base, ident)
        for key in adapter.B:
            adapter.B[key].copy_(0.1 * torch.randn(adapter.B[key].shape, generator=g))
        unmerged = flow.predict_velocity(model, zt, t, cond, adapter)
        merged = adapter.merge_into(model)(zt, t, cond)
    dev = float((unmerged - merged).abs().max())
    ok = identity and dev < 1e-5
    return CheckResult("lora", ok, f"zero-init identity exact={identity}, merged dev {dev:.3g}")


# ---------------------------------------------------------------- 7. VAE convergence


def check_vae_convergence(seed: int = 0, steps: int = 2000, n: int = 64, size: int = 16) -> CheckResult:
    docs = synth_corpus(seed, n, size)
    images = vae_images(docs, limit=n)
    cfg = vae.VaeConfig(image_size=size)
    runs = []
    for _ in range(2):
        model, curve = vae.train_vae(images, cfg, steps, seed=seed, batch_size=n)
        runs.append((model.state_dict(), curve))
    first, last = runs[0][1][0]["pixel"], runs[0][1][-1]["pixel"]
    same = runs[0][1] == runs[1][1] and all(torch.equal(runs[0][0][k], runs[1][0][k]) for k in runs[0][0])
    ok = last <= 0.5 * first and same
    return CheckResult(
        "vae_convergence", ok, f"pixel L1 {first:.4g} -> {last:.4g} (ratio {last / first:.3f}), deterministic={same}"
    )


# ---------------------------------------------------------------- 8. flow overfit


def check_flow_overfit(
    seed: int = 0, size: int = 32, vae_steps: int = 300, flow_steps: int = 3000, n_pairs: int = 8
) -> CheckResult:
    docs = synth_corpus(seed, 32, size)
    vcfg = vae.VaeConfig(image_size=size)
    vmodel, _ = vae.train_vae(vae_images(docs, limit=64), vcfg, vae_steps, seed=seed)
    trip = [s for d in docs for s in bundle.make_triplets(d) if s.task == "fg_extract"][:n_pairs]
    with torch.no_grad():
        zc = vmodel.encode(np.stack([s.input for s in trip])).z
        z1 = vmodel.encode(np.stack([s.fg_target for s in trip])).z
    mask = downsample_masks([s.mask for s in trip], size // vcfg.latent_grid)
    ds = flow.FlowDataset("fg_extract", z1=z1, z0=zc, cond=flow.Conditioning(latent=zc, mask=mask))
    fcfg = flow.FlowConfig(latent_channels=vcfg.latent_channels, d_model=128, heads=4, blocks=2)
    model, _, _ = flow.train_flow([ds], fcfg, flow_steps, seed=seed)
    loss = flow.evaluate_flow_loss(model, ds)
    out = flow.sample_edit(model, zc, 16, mask=mask)
    rel = float(((out - z1).flatten(1).norm(dim=1) / z1.flatten(1).norm(dim=1)).max())
    ok = loss < 1e-2 and rel < 0.05
    return CheckResult("flow_overfit", ok, f"flow loss {loss:.3g}, max endpoint rel L2 {rel:.4f} on {len(trip)} pairs")


# ---------------------------------------------------------------- 9. oracle closure


def check_oracle_closure(seed: int = 0, n: int = 20, size: int = 32) -> CheckResult:
    worst = 0.0
    stack_ok = True
    for doc in synth_corpus(seed, n, size):
        out = decompose(doc.composite, OracleModels(doc))
        worst = max(worst, recompose_error(out, doc.composite))
        src = [l.image for l in doc.layers]
        got = [l.image for l in out.layers]
        stack_ok &= len(src) == len(got) and all(np.abs(a - b).max() < 1e-6 for a, b in zip(src, got))
    ok = worst < 1e-6 and stack_ok
    return CheckResult("oracle_closure", ok, f"max recompose_error {worst:.3g} over {n} docs, stacks match={stack_ok}")


# ---------------------------------------------------------------- 10. metrics


def check_metrics(seed: int = 0) -> CheckResult:
    psnr_err = abs(metrics.psnr_from_mse(0.01) - 20.0)
    rng = numpy_rng(seed, "check-metrics")
    x = rng.random((16, 16, 3))
    ssim_err = abs(metrics.ssim(x, x) - 1.0)

    d = 8
    a = rng.standard_normal((d, d))
    sigma = a @ a.T / d + 0.1 * np.eye(d)
    mu = rng.standard_normal(d)
    delta = rng.standard_normal(d)
    fd_err = abs(metrics.frechet_distance(mu, sigma, mu + delta, sigma) - float(delta @ delta))
    iso_err = abs(metrics.frechet_distance(np.zeros(d), 4 * np.eye(d), np.zeros(d), np.eye(d)) - d * (2 - 1) ** 2)

    imgs = [doc.composite for doc in synth_corpus(seed, 8, 16)]
    self_fid = metrics.desk_fid(imgs, imgs, seed)
    ok = psnr_err < 1e-12 and ssim_err < 1e-9 and max(fd_err, iso_err) < 1e-3 and abs(self_fid) < 1e-6
    detail = (
        f"psnr err {psnr_err:.3g}, ssim err {ssim_err:.3g}, "
        f"frechet err {max(fd_err, iso_err):.3g}, desk_fid(self) {self_fid:.3g}"
    )
    return CheckResult("metrics", ok, detail)


# ---------------------------------------------------------------- 11. judge


def check_judge() -> CheckResult:
    img = rgba.blank(8, 8)
    with tempfile.TemporaryDirectory() as tmp:
        for i, body in enumerate(['{"M": 4}', '{"M": 5}', '{"M": 4}']):
            Path(tmp, f"case_{i:03d}.json").write_text(body, encoding="utf-8")
        res = judge.judge_score([{"M": [img]}] * 3, judge.FixtureJudgeClient(tmp))
    with tempfile.TemporaryDirectory() as tmp:
        for i, body in enumerate(['{"M": 4}', '{"M": "five"}', "not json", '{"M": 9}', '{"M": 5}']):
            Path(tmp, f"case_{i:03d}.json").write_text(body, encoding="utf-8")
        bad = judge.judge_score([{"M": [img]}] * 5, judge.FixtureJudgeClient(tmp))
    score = res.scores["M"]
    ok = abs(score - 13 / 15) < 1e-4 and abs(score - 0.8667) < 1e-4 and bad.n_errors == 3 and bad.n_valid == 2
    ok = ok and abs(bad.scores["M"] - 0.9) < 1e-12
    return CheckResult(
        "judge", ok, f"score {score:.4f}, malformed excluded {bad.n_errors}/{bad.n_cases}, kept mean {bad.scores['M']:.4f}"
    )


FAST_CHECKS = {
    "compositing": check_compositing,
    "grid_roundtrip": check_grid_roundtrip,
    "vae_loss": check_vae_loss,
    "gradients": check_gradients,
    "euler": check_euler,
    "lora": check_lora,
    "oracle_closure": check_oracle_closure,
    "metrics": check_metrics,
    "judge": check_judge,
}
SLOW_CHECKS = {
    "vae_convergence": check_vae_convergence,
    "flow_overfit": check_flow_overfit,
}


def run_selftest(full: bool = False, log=print) -> list[CheckResult]:
    checks = dict(FAST_CHECKS)
    if full:
        checks.update(SLOW_CHECKS)
    results = []
    for name, fn in checks.items():
        try:
            r = fn()
        except Exception as e:  # a crash is a failed check, not a crashed selftest
            r = CheckResult(name, False, f"raised {type(e).__name__}: {e}")
        log(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
        results.append(r)
    return results


def write_report(results: list[CheckResult], path) -> None:
    body = {"passed": all(r.passed for r in results), "checks": [asdict(r) for r in results]}
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
