"""Command-line entry point.

Subcommands: make-toy-data, pretrain-backbone, train-dspa, train-kcfp,
stylize, sample-styles, augment, evaluate. Options may also come from a JSON
``--config`` file (flags win over the file, the file over built-in
defaults). Relative output paths resolve under ``$PROMPTSTYLE_OUTPUT_ROOT``
when it is set. Every run writes its resolved configuration next to its
outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .bank import MAX_GAMMA, MIN_PROMPTS, DspaTrainConfig, generate_style_samples, init_prompt_bank, train_dspa
from .control import (ContentEncoder, FileCaptionProvider, KcfpTrainConfig, NullCaptionProvider,
                      init_control_adapter, train_kcfp)
from .diffusion import ToyDenoiser, toy_schedule
from .io import (CheckpointError, DatasetSpec, dataset_paths, load_adapter, load_backbone, load_bank,
                 load_image, load_image_dataset, save_adapter, save_backbone, save_bank, save_png)
from .metrics import evaluate_style_run
from .pipeline import StylizeRequest, stylize

log = logging.getLogger("promptstyle")

OUTPUT_ROOT_ENV = "PROMPTSTYLE_OUTPUT_ROOT"


class CliError(Exception):
    pass


def _out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _check_gamma(gamma: float):
    if not 0.0 <= gamma <= MAX_GAMMA:
        raise CliError(f"--gamma {gamma:g} is out of range: the scale factor gamma must satisfy 0 <= gamma <= {MAX_GAMMA:g}")


def _echo(resolved: dict, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str))


def _resolved(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


def _images(path: Path, size: int) -> list:
    path = Path(path)
    if path.is_dir():
        return load_image_dataset(DatasetSpec(path, size))
    return [load_image(path, size)]


def _names(path: Path, size: int) -> list:
    return [p.stem for p in dataset_paths(DatasetSpec(path, size))] if Path(path).is_dir() else [Path(path).stem]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_make_toy_data(args):
    from .toy import STYLES, content_images, texture_images

    out = _out_path(args.out_dir)
    for style in STYLES:
        for split, seed in (("train", args.seed), ("heldout", args.seed + 1)):
            for i, img in enumerate(texture_images(style, args.n, args.size, seed)):
                save_png(img, out / split / style / f"{i:04d}.png")
    for split, seed in (("train", args.seed), ("heldout", args.seed + 1)):
        for i, img in enumerate(content_images(args.n, args.size, seed)):
            save_png(img, out / split / "content" / f"{i:04d}.png")
    _echo(_resolved(args), out / "config.json")
    print(f"wrote synthetic data under {out}")


def cmd_pretrain_backbone(args):
    from .toy import PretrainConfig, pretrain_backbone

    datasets = {}
    for d in args.style_dirs:
        datasets[Path(d).name] = torch.stack(load_image_dataset(DatasetSpec(d, args.size)))
    if args.content_dir:
        datasets["content"] = torch.stack(load_image_dataset(DatasetSpec(args.content_dir, args.size)))
    model = ToyDenoiser(widths=tuple(args.widths), conditioning_dim=args.embed_dim)
    cfg = PretrainConfig(steps=args.steps, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed,
                         tokens=args.tokens)
    bb = pretrain_backbone(datasets, model, toy_schedule(args.T), cfg, log_every=args.log_every)
    out = _out_path(args.out)
    save_backbone(out, bb.model, bb.sched, {"styles": list(datasets), "steps": args.steps, "seed": args.seed})
    _echo(_resolved(args), out.with_suffix(".config.json"))
    print(f"backbone saved to {out} (final loss {bb.losses[-1]:.5f})" if bb.losses else f"backbone saved to {out}")


def cmd_train_dspa(args):
    if args.k < MIN_PROMPTS:
        raise CliError(f"--k {args.k} is invalid: the bank size k should satisfy k >= {MIN_PROMPTS}")
    model, sched, _ = load_backbone(args.backbone)
    images = torch.stack(load_image_dataset(DatasetSpec(args.style_dir, args.size, limit=args.limit)))
    cfg = DspaTrainConfig(lambda_ortho=args.lambda_ortho, learning_rate=args.lr, steps=args.steps,
                          batch_size=args.batch_size, seed=args.seed)
    bank = init_prompt_bank(args.k, args.tokens, model.conditioning_dim, args.seed)
    hist = train_dspa(bank, model, images, cfg, sched, log_every=args.log_every)
    out = _out_path(args.out)
    save_bank(out, bank, step=hist.steps, lambda_ortho=args.lambda_ortho, seed=args.seed,
              extra={"style_dir": str(args.style_dir), "backbone": str(args.backbone)})
    _echo(_resolved(args), out.with_suffix(".config.json"))
    last = hist.losses[-1] if hist.losses else None
    print(f"prompt bank saved to {out}" + (f" (total={last.total:.5f} dspa={last.dspa:.5f} ortho={last.ortho:.5f})" if last else ""))


def cmd_train_kcfp(args):
    model, sched, _ = load_backbone(args.backbone)
    spec = DatasetSpec(args.content_dir, args.size, limit=args.limit)
    images = torch.stack(load_image_dataset(spec))
    ids = [p.stem for p in dataset_paths(spec)]
    tokens = args.tokens
    if args.captions:
        captions = FileCaptionProvider.from_file(args.captions, tokens, model.conditioning_dim)
    else:
        captions = NullCaptionProvider(tokens, model.conditioning_dim)
    adapter = init_control_adapter(model, args.seed)
    cfg = KcfpTrainConfig(learning_rate=args.lr, steps=args.steps, batch_size=args.batch_size, seed=args.seed)
    train_kcfp(adapter, model, images, captions, ContentEncoder(args.content_seed), sched, cfg, ids=ids,
               log_every=args.log_every)
    out = _out_path(args.out)
    save_adapter(out, adapter, model, step=args.steps, seed=args.seed, content_encoder_seed=args.content_seed)
    _echo(_resolved(args), out.with_suffix(".config.json"))
    print(f"control adapter saved to {out}" + (f" (final loss {adapter.final_loss:.5f})" if adapter.final_loss is not None else ""))


def cmd_stylize(args):
    _check_gamma(args.gamma)
    if not 0.0 <= args.strength <= 1.0:
        raise CliError(f"--strength {args.strength:g} must lie in [0, 1]")
    model, sched, _ = load_backbone(args.backbone)
    bank, _ = load_bank(args.bank)
    adapter, amd = (None, {}) if args.no_adapter else load_adapter(args.adapter, model)
    enc = ContentEncoder(amd.get("content_encoder_seed", 0))
    out = _out_path(args.out_dir)
    names = _names(args.content, args.size)
    for name, img in zip(names, _images(args.content, args.size)):
        req = StylizeRequest(img, gamma=args.gamma, strength=args.strength, seed=args.seed, num_samples=args.n)
        res = stylize(req, bank, adapter, model, enc, sched)
        for i, im in enumerate(res.images):
            save_png(im, out / f"{name}_{i:03d}.png")
    _echo(_resolved(args), out / "config.json")
    print(f"wrote {len(names) * args.n} stylised images to {out}")


def _sample_bank(bank_path, model, sched, n, gamma, seed, size, out_dir: Path, prefix="sample"):
    bank, _ = load_bank(bank_path)
    samples = generate_style_samples(bank, model, sched, n, gamma, seed, image_shape=(3, size, size))
    for i, im in enumerate(samples):
        save_png(im, out_dir / f"{prefix}_{i:04d}.png")
    return len(samples)


def cmd_sample_styles(args):
    _check_gamma(args.gamma)
    model, sched, _ = load_backbone(args.backbone)
    out = _out_path(args.out_dir)
    n = _sample_bank(args.bank, model, sched, args.n, args.gamma, args.seed, args.size, out)
    _echo(_resolved(args), out / "config.json")
    print(f"wrote {n} style samples to {out}")


def cmd_augment(args):
    """Table-style augmentation: for each style in the manifest, sample ``count`` images."""
    _check_gamma(args.gamma)
    manifest = json.loads(Path(args.manifest).read_text())
    if not isinstance(manifest, dict) or not manifest:
        raise CliError(f"{args.manifest}: manifest must be a non-empty JSON object of style -> bank entries")
    model, sched, _ = load_backbone(args.backbone)
    out = _out_path(args.out_dir)
    record = {}
    for style, entry in sorted(manifest.items()):
        entry = {"bank": entry} if isinstance(entry, str) else dict(entry)
        count = entry.get("count", args.count_per_style)
        if count is None:
            raise CliError(f"no count for style {style!r}: give it in the manifest or via --count-per-style")
        bank_path = Path(entry["bank"])
        if not bank_path.is_absolute():
            bank_path = Path(args.manifest).parent / bank_path
        n = _sample_bank(bank_path, model, sched, int(count), args.gamma, args.seed, args.size, out / style,
                         prefix=style)
        record[style] = {"bank": str(bank_path), "count": n, "dir": str(out / style)}
    (out / "augment_manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    _echo(_resolved(args), out / "config.json")
    print(f"augmented {len(record)} styles under {out}")


def cmd_evaluate(args):
    gen = load_image_dataset(DatasetSpec(args.gen_dir, args.size))
    ref = load_image_dataset(DatasetSpec(args.ref_dir, args.size))
    contents = load_image_dataset(DatasetSpec(args.contents, args.size)) if args.contents else None
    if contents is not None and len(contents) != len(gen):
        raise CliError(f"--contents has {len(contents)} images but {args.gen_dir} has {len(gen)}")
    resolved = _resolved(args)
    report = evaluate_style_run(gen, ref, contents, config={k: str(v) for k, v in resolved.items()})
    out = _out_path(args.out) if args.out else Path(args.gen_dir) / "eval_report.json"
    report.write(out)
    _echo(resolved, out.with_suffix(".config.json"))
    sys.stdout.write(report.to_text())
    print(f"report written to {out}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptstyle", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="JSON file of option defaults")
        sp.set_defaults(func=func)
        return sp

    sp = add("make-toy-data", cmd_make_toy_data, "write synthetic texture styles and content photos")
    sp.add_argument("out_dir", type=Path)
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("pretrain-backbone", cmd_pretrain_backbone, "pretrain and freeze the toy denoiser")
    sp.add_argument("style_dirs", nargs="+", type=Path)
    sp.add_argument("--content-dir", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--steps", type=int, default=3000)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--lr", type=float, default=2e-3)
    sp.add_argument("--widths", type=int, nargs=3, default=[16, 32, 32])
    sp.add_argument("--embed-dim", type=int, default=32)
    sp.add_argument("--tokens", type=int, default=8)
    sp.add_argument("--T", type=int, default=64)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--log-every", type=int, default=0)

    sp = add("train-dspa", cmd_train_dspa, "train a prompt bank on one style collection")
    sp.add_argument("style_dir", type=Path)
    sp.add_argument("out", type=Path)
    sp.add_argument("--backbone", type=Path, required=True)
    sp.add_argument("--k", type=int, default=32)
    sp.add_argument("--lambda", dest="lambda_ortho", type=float, default=5e-3)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--tokens", type=int, default=8)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--limit", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--log-every", type=int, default=0)

    sp = add("train-kcfp", cmd_train_kcfp, "train the content control adapter")
    sp.add_argument("content_dir", type=Path)
    sp.add_argument("out", type=Path)
    sp.add_argument("--backbone", type=Path, required=True)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--captions", type=Path)
    sp.add_argument("--tokens", type=int, default=8)
    sp.add_argument("--content-seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--limit", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--log-every", type=int, default=0)

    sp = add("stylize", cmd_stylize, "stylise a content image or directory")
    sp.add_argument("content", type=Path)
    sp.add_argument("bank", type=Path)
    sp.add_argument("adapter", type=Path)
    sp.add_argument("out_dir", type=Path)
    sp.add_argument("--backbone", type=Path, required=True)
    sp.add_argument("--gamma", type=float, default=1.0)
    sp.add_argument("--strength", type=float, default=0.75)
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--no-adapter", action="store_true", help="disable content control")

    sp = add("sample-styles", cmd_sample_styles, "unconditional style samples from a bank")
    sp.add_argument("bank", type=Path)
    sp.add_argument("out_dir", type=Path)
    sp.add_argument("--backbone", type=Path, required=True)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--gamma", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=32)

    sp = add("augment", cmd_augment, "sample augmentation sets for several styles from a manifest")
    sp.add_argument("manifest", type=Path, help='JSON: {"style": {"bank": path, "count": n}} or {"style": path}')
    sp.add_argument("out_dir", type=Path)
    sp.add_argument("--backbone", type=Path, required=True)
    sp.add_argument("--count-per-style", type=int)
    sp.add_argument("--gamma", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=32)

    sp = add("evaluate", cmd_evaluate, "Fréchet distance, diversity and content preservation report")
    sp.add_argument("gen_dir", type=Path)
    sp.add_argument("ref_dir", type=Path)
    sp.add_argument("--contents", type=Path)
    sp.add_argument("--out", type=Path)
    sp.add_argument("--size", type=int, default=32)
    return p


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config file {args.config}: {exc}") from exc
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(overrides) - known
        if unknown:
            raise CliError(f"unknown keys in {args.config}: {sorted(unknown)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def run_cli(argv=None) -> int:
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    except CliError as exc:
        print(f"promptstyle: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, CheckpointError, ValueError, KeyError, FileNotFoundError, ArithmeticError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"promptstyle {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
