"""``noisecodec`` command-line entry point.

Exit status: 0 on success, 1 for usage errors, 2 for data or model errors.
``NOISECODEC_THREADS`` caps the BLAS/OpenMP worker threads.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

log = logging.getLogger("noisecodec")

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _load_data(path: str, patch: int) -> np.ndarray:
    from .data import load_patches

    p = Path(path)
    if p.suffix == ".npy":
        arr = np.load(p)
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ValueError(f"{p}: expected an (N, 3, H, W) array")
        return arr.astype(np.float32)
    return load_patches(p, patch)


def _train_config(args):
    from .training import TrainConfig

    base = {}
    if args.config:
        import json

        base = json.loads(Path(args.config).read_text())
    for key in ("quality", "metric", "seed", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            if key in ("quality", "metric") and base.get(key) not in (None, val):
                base.pop("lambda_d", None)
            base[key] = val
    return TrainConfig.from_dict(base)


def cmd_pretrain(args) -> int:
    from .training import Trainer, new_model

    out = Path(args.out)
    if args.resume:
        trainer = Trainer.resume(out)
    else:
        config = _train_config(args)
        out.mkdir(parents=True, exist_ok=True)
        config.save_json(out / "config.json")
        trainer = Trainer(new_model(config), config, "pretrain")
    return _fit(trainer, args, out)


def cmd_finetune(args) -> int:
    from .codec.checkpoint import load_model
    from .training import Trainer

    out = Path(args.out)
    if args.resume:
        trainer = Trainer.resume(out)
    else:
        if not args.pretrained:
            raise UsageError("finetune needs --pretrained <checkpoint> (or --resume)")
        config = _train_config(args)
        model, _ = load_model(args.pretrained)
        if (model.quality, model.metric) != (config.quality, config.metric):
            raise ValueError(f"pretrained checkpoint is {model.quality}/{model.metric}, "
                             f"config asks for {config.quality}/{config.metric}")
        out.mkdir(parents=True, exist_ok=True)
        config.save_json(out / "config.json")
        trainer = Trainer(model, config, "finetune")
    return _fit(trainer, args, out)


def _fit(trainer, args, out: Path) -> int:
    data = _load_data(args.data, trainer.config.patch_size)

    def report(epoch, rep, skipped):
        log.info("epoch %d  bpp %.4f+%.4f  D %.4g  G %.4g  L %.4f  skipped %d", epoch, rep.bpp_z1, rep.bpp_z2,
                 rep.distortion, rep.guidance, rep.total, skipped)

    trainer.fit(data, out, out / "log.csv", callback=report)
    return 0


def cmd_synth_noise(args) -> int:
    from .evaluate import PRESETS
    from .imageio import read_image, write_image
    from .noise import NoiseParams, synthesize_noise

    if args.preset is not None:
        params = PRESETS[args.preset]
    elif args.sigma_r is not None and args.sigma_s is not None:
        params = NoiseParams(args.sigma_r, args.sigma_s)
    else:
        raise UsageError("give --preset or both --sigma-r and --sigma-s")
    write_image(args.output, synthesize_noise(read_image(args.input), params, args.seed))
    return 0


def cmd_compress(args) -> int:
    from .codec.pipeline import compress_file

    info = compress_file(args.input, args.model, args.output)
    print(f"{args.output}: {info['bytes']} bytes, {info['bpp']:.4f} bpp ({info['width']}x{info['height']})")
    return 0


def cmd_decompress(args) -> int:
    from .codec.pipeline import decompress_file

    decompress_file(args.input, args.model, args.output)
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate_rd

    records = evaluate_rd(args.data, args.models, args.presets.split(","), args.out, args.seed, args.summary)
    failed = [r for r in records if not r.ok]
    for r in failed:
        log.error("%s %s %s: %s", r.quality, r.preset, r.image, r.error)
    return EXIT_DATA if len(failed) == len(records) else 0


def cmd_textures(args) -> int:
    from .data import write_textures

    write_textures(args.out, args.count, args.size, args.seed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="noisecodec", description="Joint denoising and learned image compression.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-noise", help="add synthetic sensor noise to an image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--preset", choices=["gain1", "gain2", "gain4", "gain8", "clean"])
    p.add_argument("--sigma-r", type=float)
    p.add_argument("--sigma-s", type=float)
    p.add_argument("--seed", type=_seed, default=0)
    p.set_defaults(func=cmd_synth_noise)

    for name, func, help_text in (("pretrain", cmd_pretrain, "rate-distortion pretraining on clean data"),
                                  ("finetune", cmd_finetune, "fine-tuning on synthetic noisy/clean pairs")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TrainConfig JSON file")
        p.add_argument("--data", required=True, help="folder of PNG/PPM images or an .npy patch array")
        p.add_argument("--out", required=True, help="checkpoint directory")
        p.add_argument("--quality", choices=[f"q{i}" for i in range(1, 7)])
        p.add_argument("--metric", choices=["mse", "msssim"])
        p.add_argument("--seed", type=_seed)
        p.add_argument("--epochs", type=int)
        p.add_argument("--resume", action="store_true", help="continue from <out>/last.jdcm")
        if name == "finetune":
            p.add_argument("--pretrained", help="pretrained checkpoint")
        p.set_defaults(func=func)

    p = sub.add_parser("compress", help="image -> .jdc")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help=".jdc -> image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="rate-distortion sweep to CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, nargs="+")
    p.add_argument("--presets", default="gain1,gain2,gain4,gain8")
    p.add_argument("--out", required=True)
    p.add_argument("--summary", help="optional JSON file with timings")
    p.add_argument("--seed", type=_seed, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("textures", help="write synthetic texture patches")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=_seed, default=0)
    p.set_defaults(func=cmd_textures)
    return parser


def _threads() -> Optional[int]:
    raw = os.environ.get("NOISECODEC_THREADS")
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError("NOISECODEC_THREADS must be a positive integer")
    return n


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads = _threads()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"noisecodec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        print(f"noisecodec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"noisecodec: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
