"""Command line entry point: gen-data, train, eval, visualize-mask, flops.

Exit codes: 0 success, 1 usage error, 2 invalid configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attnmask import CropRect, GeometryError, StructureError, build_view_plan, crop_resize, render_triptych
from .dataio import COLORS, SHAPES, Corpus, PPMFormatError, gen_synthetic, write_ppm
from .encoders import EncoderFormatError, VisualEncoderConfig, TextEncoderConfig
from .evalkit import EvalArgumentError, dumps_report, evaluate, flop_model
from .losses import ContractError, TrainingDivergenceError
from .ndgrad import DimensionError
from .trainer import ConfigError, TrainConfig, Trainer, load_model, random_resized_crop

log = logging.getLogger("aclip")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_json(path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return d


def _apply_config(args, parser: argparse.ArgumentParser, argv) -> None:
    """Fill options from --config; options given on the command line win."""
    if not args.config:
        return
    conf = _load_json(args.config)
    dests = {a.dest for a in parser._actions}
    unknown = sorted(k.replace("-", "_") for k in conf if k.replace("-", "_") not in dests)
    if unknown:
        raise ConfigError(f"{args.config}: unknown keys {', '.join(unknown)}")
    parser.set_defaults(**{k.replace("-", "_"): v for k, v in conf.items()})
    fresh = parser.parse_args(argv)
    vars(args).update(vars(fresh))


# -- commands ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    colors = args.colors.split(",")
    shapes = args.shapes.split(",")
    bad = [c for c in colors if c not in COLORS] + [s for s in shapes if s not in SHAPES]
    if bad:
        raise ConfigError(f"unknown colors/shapes: {', '.join(bad)}")
    if args.n <= 0:
        raise ConfigError("--n must be positive")
    recs = gen_synthetic(args.n, args.out, image_size=args.image_size, seed=args.seed, colors=colors,
                         shapes=shapes, start_index=args.start_index)
    print(f"wrote {len(recs)} pairs, {len(colors) * len(shapes)} classes, to {args.out}")
    return EXIT_OK


TRAIN_FLAGS = ("data", "batch_size", "total_steps", "lr", "warmup_steps", "weight_decay", "views", "keep_ratio",
               "strategy", "granularity", "ema_resolution", "ema_momentum", "ema_layers", "ssl", "byol",
               "lambda_ssl", "dtype", "seed")


def train_config(args) -> TrainConfig:
    conf = _load_json(args.config) if args.config else {}
    for key in TRAIN_FLAGS:
        val = getattr(args, key)
        if val is not None:
            conf[key] = val
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            conf[key] = json.loads(raw)
        except json.JSONDecodeError:
            conf[key] = raw
    if not conf.get("data"):
        raise ConfigError("no training data: pass --data or set it in the config")
    return TrainConfig.from_dict(conf)


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = Trainer.load(args.resume)
    else:
        cfg = train_config(args)
        trainer = Trainer(cfg, Corpus.load(cfg.data))
    cfg = trainer.cfg
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    log_path = out / "train_log.jsonl"
    if not args.resume and log_path.exists():
        log_path.unlink()

    def progress(rec):
        if rec["step"] % max(cfg.total_steps // 20, 1) == 0:
            log.info("step %d  vl %.4f  total %.4f  tau %.4f", rec["step"], rec["vl_mean"], rec["total"], rec["tau"])

    trainer.run(steps=args.steps, log_path=log_path, ckpt_dir=out, progress=progress)
    print(f"trained to step {trainer.step}; checkpoint {out / 'last.ckpt'}")
    if args.plot:
        from .plotting import plot_training
        records = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
        print(f"figure {plot_training(records, out / 'training.png')}")
    return EXIT_OK


def _checkpoint_path(arg) -> Path:
    p = Path(arg)
    return p / "last.ckpt" if p.is_dir() else p


def cmd_eval(args) -> int:
    params, ema, cfg, vocab = load_model(_checkpoint_path(args.checkpoint))
    if args.use_ema:
        params = {**params, **ema}
    corpus = Corpus.load(args.data or cfg.data)
    report = evaluate(params, cfg, vocab, corpus, retrieval_pairs=args.pairs, seed=args.seed,
                      coverage=not args.no_coverage)
    report["weights"] = "ema" if args.use_ema else "online"
    report["checkpoint"] = str(args.checkpoint)
    text = dumps_report(report)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.plot:
        from .plotting import plot_report
        print(f"figure {plot_report(report, args.plot)}", file=sys.stderr)
    return EXIT_OK


def cmd_visualize(args) -> int:
    _, ema, cfg, _ = load_model(_checkpoint_path(args.checkpoint))
    vcfg = cfg.visual
    corpus = Corpus.load(args.data or cfg.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keep = args.keep if args.keep is not None else 1.0 / args.views
    panels, titles = [], []
    for i in range(min(args.n, len(corpus))):
        rng = np.random.default_rng([args.seed, i])
        views = [CropRect.full()] if args.views == 1 and args.full_view else \
            [random_resized_crop(rng, cfg.crop_scale_min, cfg.crop_scale_max) for _ in range(args.views)]
        image = corpus.images[i]
        plan = build_view_plan(image, views, ema, vcfg, keep_ratio=keep, strategy=args.strategy,
                               granularity=args.granularity or cfg.granularity, ema_resolution=cfg.ema_resolution,
                               layers=cfg.ema_layers, rng_seed=args.seed, image_id=i)
        for v, rect in enumerate(plan.rects):
            pixels = crop_resize(image[None], rect.as_array()[None], cfg.image_size)[0]
            scores = plan.view_scores[v] if plan.view_scores else np.zeros((vcfg.grid, vcfg.grid))
            tri = render_triptych(pixels, scores, plan.kept[v], cfg.patch_size, scale=args.scale)
            path = out / f"{i:04d}_view{v}.ppm"
            write_ppm(path, tri)
            panels.append(tri)
            titles.append(f"image {i} view {v}: kept {len(plan.kept[v])}/{vcfg.num_patches}")
    print(f"wrote {len(panels)} triptychs to {out}")
    if args.plot:
        from .plotting import plot_triptychs
        print(f"figure {plot_triptychs(panels, args.plot, titles)}")
    return EXIT_OK


FLOP_COLUMNS = ("config", "branch", "tokens", "passes", "attn_proj", "attn_quadratic", "attention", "pointwise", "total")


def cmd_flops(args) -> int:
    if args.model_config:
        cfg = TrainConfig.from_dict(_load_json(args.model_config))
        vcfg = cfg.visual
        tcfg = cfg.text(args.vocab_size, 2)
    else:
        vcfg = VisualEncoderConfig(args.image_size, args.patch_size, args.layers, args.heads, args.width, 32)
        tcfg = TextEncoderConfig(args.vocab_size, args.context_length, args.layers, args.heads, args.width, 32)
    if not 0 < args.keep <= 1:
        raise ConfigError("--keep must lie in (0, 1]")
    ema = None if args.ema == "none" else args.ema
    ledger = flop_model(vcfg, args.views, args.keep, ema, tcfg if args.text else None,
                        granularity=args.granularity, training=args.training)
    sep = "\t" if args.format == "tsv" else ","
    print(sep.join(FLOP_COLUMNS))
    for row in ledger.rows():
        print(sep.join(str(int(v)) if isinstance(v, float) else str(v) for v in row))
    for key, val in ledger.ratios().items():
        print(sep.join(("ratio", key, f"{val:.6g}")))
    if args.json:
        Path(args.json).write_text(json.dumps(ledger.to_dict(), indent=2) + "\n")
    if args.plot:
        from .plotting import plot_flops
        print(f"figure {plot_flops(ledger, args.plot)}", file=sys.stderr)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> Parser:
    p = Parser(prog="aclip", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file whose keys set option defaults")
        sp.add_argument("--seed", type=int, default=0)
        return sp

    g = common(sub.add_parser("gen-data", help="write a synthetic shape/caption corpus"))
    g.add_argument("--n", type=int, default=800)
    g.add_argument("--out", required=False, default="corpus")
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--colors", default="red,green,blue,yellow")
    g.add_argument("--shapes", default="circle,square")
    g.add_argument("--start-index", type=int, default=0, help="offset item ids, e.g. for a held-out split")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a JSON config; flags override its keys")
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default="run")
    t.add_argument("--data")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--total-steps", type=int)
    t.add_argument("--steps", type=int, help="stop after this many more steps (resumable)")
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup-steps", type=int)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--views", type=int)
    t.add_argument("--keep-ratio", type=float)
    t.add_argument("--strategy", help="low | high | mixed | mixed:RHO | random")
    t.add_argument("--granularity", type=int)
    t.add_argument("--ema-resolution", choices=("full", "half"))
    t.add_argument("--ema-momentum", type=float)
    t.add_argument("--ema-layers", choices=("all", "last"))
    t.add_argument("--ssl", choices=("none", "simclr", "simsiam"))
    t.add_argument("--byol", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--lambda-ssl", type=float)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--plot", action="store_true", help="also write training.png")
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("eval", help="zero-shot, retrieval and coverage metrics as JSON"))
    e.add_argument("--checkpoint", required=False, default="run")
    e.add_argument("--data", help="held-out corpus (default: the training corpus)")
    e.add_argument("--use-ema", action="store_true", help="evaluate the EMA weights")
    e.add_argument("--pairs", type=int, default=64)
    e.add_argument("--no-coverage", action="store_true")
    e.add_argument("--out")
    e.add_argument("--plot", help="write a recall/coverage figure here")
    e.set_defaults(func=cmd_eval)

    m = common(sub.add_parser("visualize-mask", help="render image | score map | kept tokens triptychs"))
    m.add_argument("--checkpoint", default="run")
    m.add_argument("--data")
    m.add_argument("--out", default="masks")
    m.add_argument("--n", type=int, default=8)
    m.add_argument("--views", type=int, default=2)
    m.add_argument("--full-view", action="store_true", help="with --views 1, use the uncropped image")
    m.add_argument("--keep", type=float)
    m.add_argument("--strategy", default="low")
    m.add_argument("--granularity", type=int)
    m.add_argument("--scale", type=int, default=4)
    m.add_argument("--plot", help="write all triptychs into one figure here")
    m.set_defaults(func=cmd_visualize)

    f = common(sub.add_parser("flops", help="print the FLOP ledger as delimited text"))
    f.add_argument("--model-config", help="TrainConfig JSON giving the encoder sizes")
    f.add_argument("--image-size", type=int, default=32)
    f.add_argument("--patch-size", type=int, default=8)
    f.add_argument("--layers", type=int, default=2)
    f.add_argument("--heads", type=int, default=2)
    f.add_argument("--width", type=int, default=64)
    f.add_argument("--context-length", type=int, default=16)
    f.add_argument("--vocab-size", type=int, default=32)
    f.add_argument("--views", type=int, default=1)
    f.add_argument("--keep", type=float, default=1.0)
    f.add_argument("--granularity", type=int)
    f.add_argument("--ema", choices=("none", "full", "half"), default="none")
    f.add_argument("--text", action="store_true", help="include the text branch")
    f.add_argument("--training", action="store_true", help="count backward passes")
    f.add_argument("--format", choices=("tsv", "csv"), default="tsv")
    f.add_argument("--json")
    f.add_argument("--plot", help="write a stacked bar figure here")
    f.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command != "train":
            sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
            _apply_config(args, sub.choices[args.command], argv[argv.index(args.command) + 1:])
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, EvalArgumentError, ContractError, DimensionError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergenceError, OSError, PPMFormatError, EncoderFormatError, StructureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyError as exc:
        print(f"error: missing {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
