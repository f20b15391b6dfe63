"""Command-line entry point: ``keepcore <subcommand> --config run.json``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure (including an oracle that misses the training Dice gate, or a map
that could not be computed).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError
from .formats import read_pnm
from .data import load_image
from .sage import ImportanceMap, SageConfig
from .training import MODES

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("keepcore")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; we reserve 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, metavar="JSON", help="run configuration file")
    p.add_argument("--seed", type=int, default=None, help="top-level seed (overrides the config)")
    p.add_argument("--workers", type=int, default=None, help="worker processes for parallel stages")
    p.add_argument("--out", default=None, metavar="DIR", help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="keepcore", description="Importance-guided segmentation augmentation toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate the synthetic dataset and its manifest")
    _common(p)
    p.add_argument("--n", type=int, default=None, help="number of samples (overrides data.n)")

    p = sub.add_parser("train-oracle", help="train and freeze the segmentation oracle")
    _common(p)

    defaults = SageConfig()
    p = sub.add_parser("sage", help="compute token importance maps with the frozen oracle")
    _common(p)
    p.add_argument("--epsilon", type=float, default=None,
                   help=f"l_inf perturbation budget (default: {defaults.epsilon}, or sage.epsilon from the config)")
    p.add_argument("--steps", type=int, default=None,
                   help=f"optimization steps per image (default: {defaults.steps}, or sage.steps from the config)")

    p = sub.add_parser("keep-aug", help="write importance-guided augmentations of the training images")
    _common(p)
    p.add_argument("--epoch", type=int, default=0, help="epoch whose augmentation draws to reproduce")

    p = sub.add_parser("train", help="train a model in baseline_aug or keep_core mode")
    _common(p)
    p.add_argument("--mode", choices=MODES, default=None)

    p = sub.add_parser("eval", help="evaluate a trained model on the held-out split")
    _common(p)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--weights", default=None, help="model weights (default: outputs/model-<mode>.kco)")

    p = sub.add_parser("render", help="render an importance map as PGM, or as a PPM overlay on an image")
    _common(p, config_required=False)
    p.add_argument("--map", required=True, help="KCW1 importance map")
    p.add_argument("--image", default=None, help="KCT1 or PGM/PPM image to overlay")
    return parser


def _load_config(args) -> pipeline.RunConfig:
    cfg = pipeline.RunConfig.load(args.config, seed=args.seed, outputs=args.out, workers=args.workers)
    if args.command == "sage":
        over = {k: v for k, v in (("epsilon", args.epsilon), ("steps", args.steps)) if v is not None}
        try:
            cfg = replace(cfg, sage=replace(cfg.sage, **over))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def _render(args) -> int:
    imap = ImportanceMap.load(args.map)
    image = None
    if args.image is not None:
        path = Path(args.image)
        image = read_pnm(path) / 255.0 if path.suffix.lower() == ".ppm" else load_image(path)
    default = Path(args.map).with_suffix(".ppm" if image is not None else ".pgm")
    out = Path(args.out) if args.out else default
    pipeline.render_map(imap, out, image)
    print(out)
    return EXIT_OK


def run(args) -> int:
    if args.command == "render":
        return _render(args)
    cfg = _load_config(args)
    if args.command == "synth":
        if args.n is not None:
            cfg = replace(cfg, num_samples=args.n)
        m = pipeline.stage_synth(cfg)
        print(f"wrote {len(m.entries)} samples to {cfg.manifest_path}")
    elif args.command == "train-oracle":
        rep = pipeline.stage_train_oracle(cfg)
        print(f"oracle {cfg.oracle_id}: training Dice {rep.train_dice:.4f} -> {cfg.weights_path}")
        if not rep.converged:
            log.warning("oracle did not reach the training Dice gate; weights saved anyway")
            return EXIT_NUMERIC
    elif args.command == "sage":
        archive = pipeline.stage_sage(cfg)
        print(f"wrote {len(archive.written)} maps to {archive.out_dir}")
        if not archive.ok:
            for image_id, err in sorted(archive.failures.items()):
                print(f"failed: {image_id}: {err}", file=sys.stderr)
            return EXIT_NUMERIC
    elif args.command == "keep-aug":
        ids = pipeline.stage_keep_aug(cfg, args.epoch)
        print(f"wrote {len(ids)} augmented samples to {cfg.outputs / 'keep_aug'}")
    elif args.command == "train":
        rep = pipeline.stage_train(cfg, args.mode)
        print(rep.csv, end="")
    elif args.command == "eval":
        pipeline.stage_eval(cfg, args.mode, Path(args.weights) if args.weights else None)
        print((cfg.reports_dir / f"eval-{args.mode or cfg.mode}.csv").read_text(), end="")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
