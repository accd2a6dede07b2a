"""Command-line entry point: ``mobileutr {synth,train,eval,gradcheck,complexity}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import complexity, gradcheck
from .data import SynthSpec, load_dataset, resize_sample, save_dataset, split, synth_generate
from .errors import (ConfigurationError, InputError, NumericError, ParseError, StateError,
                     UsageError)
from .model import ModelConfig, build, get_config
from .train import TrainPlan, evaluate, fit, load_checkpoint

GRAD_TOL = {"block": 1e-5, "end_to_end": 1e-4}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_overrides(items: Sequence[str]) -> dict:
    """``key=value`` pairs; values are JSON, falling back to a bare string."""
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw.strip()
    return out


def resolve_config(name: str, overrides: Sequence[str]) -> ModelConfig:
    return get_config(name).with_overrides(**parse_overrides(overrides)).validate()


def _require_dir(path: Optional[str], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_dir():
        raise InputError(f"{flag} path does not exist or is not a directory: {p}")
    return p


def _load_split(data: Path, size: int, ratio: float, seed: int):
    samples = [resize_sample(s, size) for s in load_dataset(data)]
    if len(samples) < 2:
        raise InputError(f"dataset at {data} needs at least two samples to split")
    return split(samples, ratio, seed)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    spec = SynthSpec(count=args.count, size=args.size or 256, mean_diameter=args.diameter,
                     spread=args.spread, noise=args.noise, seed=args.seed)
    samples = synth_generate(spec)
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples ({spec.size}x{spec.size}, mean diameter {spec.mean_diameter}) "
          f"to {args.out}")
    return 0


def cmd_train(args) -> int:
    data = _require_dir(args.data, "--data")
    if args.out is None:
        raise UsageError("--out is required")
    cfg = resolve_config(args.config, args.set)
    size = args.size or cfg.input_size
    if size != cfg.input_size:
        cfg = cfg.with_overrides(input_size=size).validate()
    train_set, val_set = _load_split(data, size, args.ratio, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "model.cfg")
    model = build(cfg, seed=args.seed)
    plan = TrainPlan(epochs=args.epochs, batch_size=args.batch, seed=args.seed,
                     augment=not args.no_augment, checkpoint_every=args.checkpoint_every)
    _, history = fit(model, train_set, val_set, plan, out)
    last = history[-1]
    print(f"trained {plan.epochs} epochs ({last.iteration} iterations) on {len(train_set)} samples; "
          f"final train_loss = {last.train_loss:.6f}, val_miou = {last.val_miou:.6f}")
    print(f"checkpoint: {out / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    data = _require_dir(args.data, "--data")
    ckpt = args.checkpoint or (str(Path(args.out) / "checkpoint") if args.out else None)
    ckpt_dir = _require_dir(ckpt, "--checkpoint")
    model, _, meta = load_checkpoint(ckpt_dir)
    size = args.size or model.config.input_size
    if args.subset == "all":
        samples = [resize_sample(s, size) for s in load_dataset(data)]
    else:
        train_set, val_set = _load_split(data, size, args.ratio, args.seed)
        samples = val_set if args.subset == "val" else train_set
    report = evaluate(model, samples, args.batch)
    text = f"checkpoint = {ckpt_dir}\nsubset = {args.subset}\n" + report.to_text()
    print(text, end="")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / f"metrics_{args.subset}.txt").write_text(text)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args.config, args.set)
    worst: dict = {}
    for seed in range(args.seed, args.seed + args.seeds):
        for rep in gradcheck.block_reports(seed):
            worst[rep.name] = max(worst.get(rep.name, 0.0), rep.max_error)
    ok = True
    for name, err in worst.items():
        good = err < GRAD_TOL["block"]
        ok &= good
        print(f"{name:<16} max_rel_error = {err:.3e}  {'ok' if good else 'FAIL'}  (seeds={args.seeds})")
    if not args.skip_end_to_end:
        size = args.size or 32
        rep = gradcheck.end_to_end_report(cfg, size=size, seed=args.seed)
        good = rep.max_error < GRAD_TOL["end_to_end"]
        ok &= good
        print(f"{'end_to_end':<16} max_rel_error = {rep.max_error:.3e}  {'ok' if good else 'FAIL'}  "
              f"(input {size}x{size})")
    if not ok:
        print("gradient check failed", file=sys.stderr)
        return 2
    return 0


def cmd_complexity(args) -> int:
    names = args.config or ["mobileutr"]
    for i, name in enumerate(names):
        cfg = resolve_config(name, args.set)
        size = args.size or cfg.input_size
        if i:
            print()
        print(f"# config = {name}")
        if args.ablation:
            print(complexity.ablation_text(complexity.ablation_suite(cfg, size)), end="")
        else:
            print(complexity.profile(cfg, size, strict=args.strict).to_text(per_layer=not args.summary), end="")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mobileutr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, config_default="mobileutr"):
        p.add_argument("--config", default=config_default, help="preset name or config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (repeatable)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--size", type=int, default=None, help="square input size")

    p = sub.add_parser("synth", help="write a synthetic lesion dataset")
    p.add_argument("--out", required=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=None, help="image size (default 256)")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--diameter", type=float, default=144.0, help="mean lesion diameter in pixels")
    p.add_argument("--spread", type=float, default=0.25)
    p.add_argument("--noise", type=float, default=0.08)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    common(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--ratio", type=float, default=0.7, help="train fraction of the split")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--data")
    p.add_argument("--checkpoint", help="checkpoint directory (default: OUT/checkpoint)")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--ratio", type=float, default=0.7)
    p.add_argument("--subset", choices=("val", "train", "all"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(p, config_default="tiny")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--skip-end-to-end", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("complexity", help="parameter and MAC report")
    p.add_argument("--config", action="append", help="preset or config file (repeatable)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--strict", action="store_true", help="report 2*MAC as FLOPs")
    p.add_argument("--ablation", action="store_true", help="skip-count x bottleneck grid")
    p.add_argument("--summary", action="store_true", help="totals only")
    p.set_defaults(func=cmd_complexity)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: synth, train, eval, gradcheck or complexity")
        return args.func(args)
    except (UsageError, ConfigurationError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, ParseError, StateError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
