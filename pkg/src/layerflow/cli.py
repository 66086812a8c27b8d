"""``layerflow`` command line: data synthesis, training, decomposition,
generation, evaluation, previews and the self-test.

Every command writes only under ``--out`` and is a pure function of its
config, seed and inputs; nothing time-dependent is written.
Exit codes: 0 success, 1 runtime failure, 2 bad config or usage.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import bundle, metrics, rgba
from .config import ConfigError, RunConfig, load_config
from .decompose import EDIT_TASKS, FlowModels, MissingModelError, OracleModels, decompose, recompose_error
from .flow import (
    FlowConfig,
    LoraAdapter,
    load_adapter,
    load_flow,
    save_adapter,
    save_flow,
    train_flow,
)
from .judge import ENDPOINT_ENV, FixtureJudgeClient, HttpJudgeClient, judge_score
from .pipeline import document_seeds, edit_datasets, generate_document, grid_dataset, load_corpus, vae_images
from .seeding import torch_generator
from .selftest import run_selftest, write_report
from .vae import VaeConfig, load_vae, save_vae, train_vae, write_curve

FLOW_CURVE_FIELDS = ("step", "task", "loss")


class UsageError(Exception):
    pass


def _vae_config(cfg: RunConfig) -> VaeConfig:
    v = cfg.vae
    return VaeConfig(
        image_size=cfg.image_size,
        channels_rgb=v.channels_rgb,
        channels_a=v.channels_a,
        width=v.width,
        lambda_pix=v.lambda_pix,
        lambda_patch=v.lambda_patch,
        lambda_perc=v.lambda_perc,
        lambda_kl=v.lambda_kl,
        patch_size=v.patch_size,
        perc_seed=v.perc_seed,
    )


def _write_flow_curve(rows, path):
    lines = [",".join(FLOW_CURVE_FIELDS)] + [f"{r['step']},{r['task']},{r['loss']:.9g}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _bundle_inputs(path: Path) -> list[tuple[str, Path]]:
    """A bundle directory, or a directory of bundle directories."""
    if (path / bundle.MANIFEST).is_file():
        return [(path.name, path)]
    if path.is_dir():
        found = sorted((p.name, p) for p in path.iterdir() if (p / bundle.MANIFEST).is_file())
        if found:
            return found
    raise FileNotFoundError(f"no layer bundles at {path}")


def _model_dir(path: Path) -> Path:
    return path if path.is_dir() else path.parent


# ---------------------------------------------------------------- commands


def _synth_one(args) -> str:
    seed, size, out = args
    doc = bundle.synth_poster(seed, size)
    bundle.save_bundle(doc, out)
    return str(out)


def cmd_synth_data(cfg: RunConfig, args) -> None:
    root = args.out / cfg.dataset.out_dir
    seeds = document_seeds(cfg.seed, cfg.dataset.count)
    jobs = [(s, cfg.image_size, root / f"poster_{i:04d}") for i, s in enumerate(seeds)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            list(pool.map(_synth_one, jobs))
    else:
        for job in jobs:
            _synth_one(job)
    print(f"wrote {len(jobs)} bundles to {root}")


def cmd_train_vae(cfg: RunConfig, args) -> None:
    docs = [d for _, d in load_corpus(args.inp)]
    images = vae_images(docs)
    vcfg = _vae_config(cfg)
    model, curve = train_vae(images, vcfg, cfg.vae.steps, cfg.vae.lr, cfg.vae.batch_size, cfg.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    save_vae(model, args.out / "vae.pt")
    write_curve(curve, args.out / "vae_curve.csv")
    print(f"vae: pixel L1 {curve[0]['pixel']:.4g} -> {curve[-1]['pixel']:.4g} on {len(images)} images")


def cmd_train_flow(cfg: RunConfig, args) -> None:
    if args.checkpoint is None:
        raise UsageError("train-flow needs --checkpoint pointing at vae.pt or its directory")
    src = _model_dir(args.checkpoint)
    vae_path = args.checkpoint if args.checkpoint.is_file() else src / "vae.pt"
    vae = load_vae(vae_path)
    if vae.cfg.image_size != cfg.image_size:
        raise ConfigError(f"checkpoint VAE is {vae.cfg.image_size}px but config image_size is {cfg.image_size}")
    docs = [d for _, d in load_corpus(args.inp)]
    fc = cfg.flow
    tasks = [args.task] if args.task else list(fc.adapter_tasks)
    if args.task and args.task not in fc.adapter_tasks:
        raise ConfigError(f"task {args.task!r} is not listed in flow.adapter_tasks")

    datasets = edit_datasets(docs, vae)
    if "t2psd" in fc.adapter_tasks:
        datasets["t2psd"] = grid_dataset(docs, vae)

    args.out.mkdir(parents=True, exist_ok=True)
    if vae_path.resolve() != (args.out / "vae.pt").resolve():
        shutil.copyfile(vae_path, args.out / "vae.pt")

    base_path = src / "flow.pt"
    if args.task and base_path.is_file():
        model = load_flow(base_path)
        print(f"loaded base model from {base_path}")
    else:
        fcfg = FlowConfig(
            latent_channels=vae.cfg.latent_channels,
            d_model=fc.d_model,
            heads=fc.heads,
            blocks=fc.blocks,
            lora_rank=fc.lora_rank,
            lora_alpha=fc.lora_alpha,
        )
        base_sets = [datasets[k] for k in sorted(datasets)]
        model, _, curve = train_flow(
            base_sets, fcfg, fc.base_steps, fc.lr, fc.batch_size, cfg.seed, mask_dropout=fc.mask_dropout
        )
        _write_flow_curve(curve, args.out / "flow_curve.csv")
        print(f"base flow: {len(curve)} steps over {', '.join(sorted(datasets))}")
    save_flow(model, args.out / "flow.pt")

    for task in tasks:
        if task not in datasets:
            print(f"skipping adapter {task}: no training samples")
            continue
        adapter = LoraAdapter(model, fc.lora_rank, fc.lora_alpha, seed=cfg.seed, task=task)
        _, adapter, curve = train_flow(
            [datasets[task]],
            model.cfg,
            fc.adapter_steps,
            fc.lr,
            fc.batch_size,
            cfg.seed,
            model=model,
            adapter=adapter,
            mask_dropout=fc.mask_dropout,
        )
        save_adapter(adapter, args.out / f"adapter_{task}.pt")
        _write_flow_curve(curve, args.out / f"adapter_{task}_curve.csv")
        print(f"adapter {task}: loss {curve[0]['loss']:.4g} -> {curve[-1]['loss']:.4g}")


def _load_models(path: Path, steps: int, tasks) -> FlowModels:
    d = _model_dir(path)
    vae = load_vae(d / "vae.pt")
    model = load_flow(d / "flow.pt")
    adapters = {}
    for task in tasks:
        f = d / f"adapter_{task}.pt"
        if f.is_file():
            adapters[task] = load_adapter(f, model)
    return FlowModels(vae, model, adapters, steps)


def cmd_decompose(cfg: RunConfig, args) -> None:
    if not args.oracle and args.checkpoint is None:
        raise UsageError("decompose needs --checkpoint (a trained model directory) or --oracle")
    if args.inp.is_file():
        if args.oracle:
            raise UsageError("--oracle replays ground truth and needs a bundle directory as --in")
        items = [(args.inp.stem, rgba.read_png(args.inp), None)]
    else:
        items = []
        for name, p in _bundle_inputs(args.inp):
            doc = bundle.load_bundle(p)
            items.append((name, doc.composite, doc))
    models = None
    if not args.oracle:
        models = _load_models(args.checkpoint, cfg.flow.sampler_steps, EDIT_TASKS)
    errors = {}
    for name, img, doc in items:
        m = OracleModels(doc) if args.oracle else models
        out = decompose(img, m, cfg.decompose.k_max, cfg.decompose.stop_tau)
        bundle.save_bundle(out, args.out / name)
        errors[name] = recompose_error(out, img)
        print(f"{name}: {len(out.layers)} layers, recompose_error {errors[name]:.4g}")
    bundle.dump_json({k: float(f"{v:.9g}") for k, v in errors.items()}, args.out / "recompose_error.json")


def cmd_generate(cfg: RunConfig, args) -> None:
    if args.checkpoint is None:
        raise UsageError("generate needs --checkpoint (a trained model directory)")
    try:
        prompt = bundle.HierarchicalPrompt.from_dict(json.loads(args.inp.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{args.inp} is not a valid prompt file: {e}") from e
    models = _load_models(args.checkpoint, cfg.flow.sampler_steps, ("t2psd",))
    if "t2psd" not in models.adapters:
        raise MissingModelError("t2psd")
    gen = torch_generator(cfg.seed, "generate")
    doc = generate_document(
        prompt, models.vae, models.flow, models.adapters["t2psd"], cfg.flow.sampler_steps, gen, cfg.decompose.stop_tau
    )
    bundle.save_bundle(doc, args.out / args.inp.stem)
    print(f"generated {len(doc.layers)} layers into {args.out / args.inp.stem}")


def _renders(doc: bundle.LayerDocument) -> list[np.ndarray]:
    """Flattened poster first, then layers top-down, all on the checkerboard."""
    flat = rgba.flatten(doc.visible_stack())
    layers = [l.image for l in sorted(doc.layers, key=lambda l: -l.z_order)]
    return [rgba.checkerboard_preview(im) for im in [flat, *layers]]


def _judge_client(cfg: RunConfig):
    if cfg.eval.judge_fixture_dir is not None:
        return FixtureJudgeClient(cfg.resolve(cfg.eval.judge_fixture_dir))
    if cfg.eval.judge_endpoint or os.environ.get(ENDPOINT_ENV):
        return HttpJudgeClient(cfg.eval.judge_endpoint)
    return None


def cmd_eval(cfg: RunConfig, args) -> None:
    if args.ref is None:
        raise UsageError("eval needs --ref with the ground-truth bundle(s)")
    preds = _bundle_inputs(args.inp)
    refs = dict(_bundle_inputs(args.ref))
    if len(preds) == 1 and len(refs) == 1:
        pairs = [(preds[0][0], preds[0][1], next(iter(refs.values())))]
    else:
        missing = [n for n, _ in preds if n not in refs]
        if missing:
            raise FileNotFoundError(f"no reference bundle for: {', '.join(missing)}")
        pairs = [(n, p, refs[n]) for n, p in preds]
    mattes = [m if isinstance(m, str) else tuple(m) for m in cfg.eval.mattes]
    report = metrics.MetricReport(mattes_used=mattes)
    pred_layers, ref_layers, cases = [], [], []
    for name, p, r in pairs:
        pd, rd = bundle.load_bundle(p), bundle.load_bundle(r)
        if (pd.height, pd.width) != (rd.height, rd.width):
            raise rgba.ShapeError(f"{name}: prediction is {pd.width}x{pd.height}, reference {rd.width}x{rd.height}")
        report.add(f"{name}/composite", rgba.flatten(pd.visible_stack()), rgba.flatten(rd.visible_stack()))
        by_role: dict[str, list] = {}
        for l in sorted(pd.layers, key=lambda l: -l.z_order):
            by_role.setdefault(l.role, []).append(l.image)
        seen: dict[str, int] = {}
        for l in sorted(rd.layers, key=lambda l: -l.z_order):
            k = seen.get(l.role, 0)
            seen[l.role] = k + 1
            cand = by_role.get(l.role, [])
            img = cand[k] if k < len(cand) else rgba.blank(rd.height, rd.width)
            report.add(f"{name}/{l.role}{k}", img, l.image)
            pred_layers.append(img)
            ref_layers.append(l.image)
        cases.append({"prediction": _renders(pd), "reference": _renders(rd)})
    report.desk_fid = metrics.desk_fid(pred_layers, ref_layers, cfg.vae.perc_seed)
    client = _judge_client(cfg)
    if client is not None:
        res = judge_score(cases, client)
        report.judge = res.scores
        report.judge_errors = res.n_errors
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_json(args.out / "report.json")
    report.write_csv(args.out / "report.csv")
    agg = report.aggregate
    print(f"{len(report.per_sample)} rows: mse {agg['mse']:.4g}, psnr {agg['psnr']:.2f}, ssim {agg['ssim']:.4f}")


def cmd_preview(cfg: RunConfig, args) -> None:
    args.out.mkdir(parents=True, exist_ok=True)
    for name, p in _bundle_inputs(args.inp):
        doc = bundle.load_bundle(p)
        tiles = [doc.composite] + [l.image for l in doc.layers]
        sep = np.ones((doc.height, 1, 4), dtype=np.float32)
        row = []
        for t in tiles:
            row += [rgba.checkerboard_preview(t), sep]
        rgba.write_png(np.concatenate(row[:-1], axis=1), args.out / f"{name}.png")
    print(f"wrote previews to {args.out}")


def cmd_selftest(cfg: RunConfig, args) -> int:
    results = run_selftest(full=args.full)
    args.out.mkdir(parents=True, exist_ok=True)
    write_report(results, args.out / "selftest.json")
    n_ok = sum(r.passed for r in results)
    print(f"{n_ok}/{len(results)} checks passed")
    return 0 if n_ok == len(results) else 1


COMMANDS = {
    "synth-data": (cmd_synth_data, "write procedural layer bundles"),
    "train-vae": (cmd_train_vae, "train the RGBA VAE on a bundle corpus"),
    "train-flow": (cmd_train_flow, "train the flow backbone and per-task adapters"),
    "decompose": (cmd_decompose, "split flat posters into layer bundles"),
    "generate": (cmd_generate, "prompt file -> layer bundle"),
    "eval": (cmd_eval, "score predicted bundles against references"),
    "preview": (cmd_preview, "checkerboard contact sheets for bundles"),
    "selftest": (cmd_selftest, "run the built-in acceptance checks"),
}
CONFIG_OPTIONAL = {"preview", "selftest"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, required=name not in CONFIG_OPTIONAL, help="run config (JSON)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if name not in ("synth-data", "selftest"):
            p.add_argument("--in", dest="inp", type=Path, required=True, help="input file or directory")
        if name in ("train-flow", "decompose", "generate"):
            p.add_argument("--checkpoint", type=Path, help="model file or directory")
        if name == "train-flow":
            p.add_argument("--task", choices=("text_extract", "text_erase", "fg_extract", "fg_erase", "t2psd"))
        if name == "decompose":
            p.add_argument("--oracle", action="store_true", help="replay the input bundle's ground-truth layers")
        if name == "eval":
            p.add_argument("--ref", type=Path, help="reference bundle or directory of bundles")
        if name == "synth-data":
            p.add_argument("--workers", type=int, default=1)
        if name == "selftest":
            p.add_argument("--full", action="store_true", help="include the slow training checks")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.use_deterministic_algorithms(True)
    fn = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config) if args.config is not None else RunConfig()
        rc = fn(cfg, args)
    except (ConfigError, UsageError) as e:
        print(f"layerflow {args.command}: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"layerflow {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
