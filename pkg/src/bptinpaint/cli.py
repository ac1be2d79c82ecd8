"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import CHOICES, Config, ConfigError, load_config

logger = logging.getLogger("bptinpaint")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    casts = {"int": int, "float": float, "str": str}
    for f in fields(Config):
        flag = "--" + f.name.replace("_", "-")
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        p.add_argument(flag, dest=f.name, type=casts[kind], choices=CHOICES.get(f.name), default=None)


def _config_from(args) -> Config:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(Config)}
    return load_config(args.config, **overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bptinpaint", description="Block-wise procedural inpainting trainer")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run the training schedule")
    _add_config_flags(p)
    p.add_argument("--iters", type=int, default=None, help="stop after this many total iterations")
    p.add_argument("--resume", type=Path,
                   help="continue from a checkpoint; its config wins except --data-dir/--out-dir "
                        "(out dir defaults to the checkpoint's directory)")

    p = sub.add_parser("infer", help="inpaint one image")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True, help="PNG, 0 = known, 255 = hole")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="metrics CSV over a directory of PNGs")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=Path)
    src.add_argument("--identity", action="store_true", help="score the source itself (sanity baseline)")
    p.add_argument("--data-dir", type=Path, required=True)
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("synth-data", help="write a procedural PNG corpus")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("-n", type=int, default=500)
    p.add_argument("--extent", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("rf-map", help="receptive-field table of a discriminator as CSV")
    _add_config_flags(p)
    p.add_argument("--scale", type=int, default=1, choices=(1, 2, 3), help="pyramid level (1 = full size)")
    p.add_argument("--out", type=Path, help="CSV path (stdout when omitted)")

    p = sub.add_parser("show-config", help="print the effective configuration")
    _add_config_flags(p)
    return parser


def _load_training_data(cfg: Config) -> np.ndarray:
    from .imageio import load_images
    from .train import to_network_range

    _, images, skipped = load_images(cfg.data_dir, cfg.image_size)
    if skipped:
        logger.warning("%d images skipped", skipped)
    return to_network_range(images.transpose(0, 3, 1, 2))


def cmd_train(args) -> int:
    from .train import Trainer, config_from_sections

    if args.resume:
        from . import checkpoint

        sections = checkpoint.load(args.resume)
        # checkpoints carry no paths; fall back to the run's config.json
        saved = args.resume.parent / "config.json"
        base = Config.from_json(saved.read_text()) if saved.exists() else Config()
        paths = {"data_dir": args.data_dir or base.data_dir, "out_dir": args.out_dir or str(args.resume.parent)}
        cfg = config_from_sections(sections, **paths)
        tr = Trainer.from_sections(sections, _load_training_data(cfg), **paths)
    else:
        cfg = _config_from(args)
        tr = Trainer(cfg, _load_training_data(cfg))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    end = tr.sched.total_iters if args.iters is None else args.iters
    if end < 0:
        raise UsageError("--iters must be >= 0")
    tr.train_until(end, csv_path=out / "loss.csv", checkpoint_dir=out)
    print(f"trained to iteration {tr.iter}; checkpoint {out / 'latest.bpti'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .imageio import read_mask, read_png, write_png
    from .metrics import generator_predictor
    from .train import load_generator

    gen = load_generator(args.ckpt)
    img = read_png(args.image)
    mask = read_mask(args.mask)
    if mask.shape != img.shape[:2]:
        raise ValueError(f"mask {mask.shape} does not match image {img.shape[:2]}")
    out = generator_predictor(gen)(img[None], mask[None])[0]
    write_png(args.out, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import eval_split, generator_predictor, identity_predictor
    from .train import load_generator

    if args.identity:
        predictor, extent = identity_predictor, None
    else:
        gen = load_generator(args.ckpt)
        predictor, extent = generator_predictor(gen), gen.cfg.image_size
    rows, mean, skipped = eval_split(predictor, args.data_dir, args.mask_seed, args.out, extent)
    print(f"{len(rows)} images ({skipped} skipped): l1={mean.l1:.6g} l2={mean.l2:.6g} ssim={mean.ssim:.6g}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import synth_dataset

    paths = synth_dataset(args.out_dir, args.n, args.extent, args.seed)
    print(f"wrote {len(paths)} images to {args.out_dir}")
    return EXIT_OK


def cmd_rf_map(args) -> int:
    from .models import DiscriminatorConfig, build_discriminators
    from .receptive import rf_map

    cfg = _config_from(args)
    ds = build_discriminators(DiscriminatorConfig(
        image_size=cfg.image_size, base_width=cfg.d_base_width, n_strided=cfg.d_strided, seed=cfg.seed,
    ))
    k = args.scale - 1
    extent = cfg.image_size // 2**k
    bounds = rf_map(ds[k].conv_specs(), extent)
    lines = ["row,col,top,left,bottom,right"]
    for i in range(bounds.shape[0]):
        for j in range(bounds.shape[1]):
            lines.append(",".join(str(int(v)) for v in (i, j, *bounds[i, j])))
    text = "\n".join(lines) + "\n"
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_show_config(args) -> int:
    sys.stdout.write(_config_from(args).to_json())
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "synth-data": cmd_synth,
    "rf-map": cmd_rf_map,
    "show-config": cmd_show_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
