"""Command-line interface: ``lfsal {train,eval,predict,metrics}``.

Settings may also come from a ``key = value`` file given with ``--config``
(``#`` starts a comment); flags on the command line win over the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics as M
from .autodiff import ShapeError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DatasetError,
    generate_synthetic,
    list_images,
    load_dataset,
    read_mask,
    read_saliency_map,
    write_saliency_map,
)
from .network import ABLATIONS, ConfigError, ModelConfig
from .train import TrainingError, TrainSettings, predict, train

# toy defaults are for desk-scale runs; "full" is the full-size training protocol
PROTOCOLS = {
    "toy": {"lr": 1e-3, "input_size": 64, "T": 12},
    "full": {"lr": 1e-5, "input_size": 256, "T": 12},
}

LOSS_HEADER = "step,loss,bce,iou,em"


class CliError(Exception):
    pass


def _read_config(path: str) -> list[tuple[str, str]]:
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    entries = []
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{p}:{n}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        entries.append((key.replace("_", "-"), value))
    return entries


def _model_args(sp):
    sp.add_argument("--ablation", choices=ABLATIONS, default=None)
    sp.add_argument("--T", type=int, default=None, help="focal slices per stack")
    sp.add_argument("--input-size", type=int, default=None)
    sp.add_argument("--base-channels", type=int, default=None)
    sp.add_argument("--c-rfb", type=int, default=None)
    sp.add_argument("--upsample-mode", choices=("bilinear", "nearest"), default=None)


def _data_args(sp):
    sp.add_argument("--data", help="dataset root directory")
    sp.add_argument("--split", default="test")
    sp.add_argument("--synthetic", type=int, default=None, metavar="N", help="use N generated scenes instead of --data")
    sp.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lfsal", description="Light-field salient object detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model and write a checkpoint and loss log")
    _data_args(tr)
    _model_args(tr)
    tr.add_argument("--protocol", choices=sorted(PROTOCOLS), default="toy")
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--steps", type=int, default=500)
    tr.add_argument("--batch-size", type=int, default=2)
    tr.add_argument("--lr-decay", type=float, default=0.9)
    tr.add_argument("--plateau-window", type=int, default=50)
    tr.add_argument("--plateau-tol", type=float, default=1e-4)
    tr.add_argument("--grad-clip", type=float, default=1.0, help="global gradient-norm limit; 0 disables")
    tr.add_argument("--out", default="run", help="output directory")
    tr.add_argument("--checkpoint", default=None, help="checkpoint path (default OUT/model.ckpt)")

    ev = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _data_args(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", default="eval")

    pr = sub.add_parser("predict", help="write 8-bit saliency maps")
    _data_args(pr)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--out", default="pred")

    me = sub.add_parser("metrics", help="score existing saliency maps against masks")
    me.add_argument("--pred", required=True, help="directory of predicted maps")
    me.add_argument("--gt", required=True, help="directory of ground-truth masks")
    me.add_argument("--out", default="metrics")

    for sp in (tr, ev, pr, me):
        sp.add_argument("--config", default=None, help="key = value settings file")
        sp.add_argument("-v", "--verbose", action="store_true")
    parser.set_defaults(_commands=sub.choices)
    return parser


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    """Parse flags, splicing ``--config`` entries in front so explicit flags override them."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    sp = args._commands[args.command]
    known = {opt for action in sp._actions for opt in action.option_strings if opt.startswith("--")}
    spliced: list[str] = []
    for key, value in _read_config(args.config):
        opt = f"--{key}"
        if opt not in known or opt == "--config":
            raise CliError(f"unknown key {key!r} in config file {args.config}")
        spliced += [opt, value]
    return parser.parse_args([args.command] + spliced + list(argv[1:]))


def model_config(args) -> ModelConfig:
    proto = PROTOCOLS[getattr(args, "protocol", "toy")]
    kw = {
        "T": args.T if args.T is not None else proto["T"],
        "input_size": args.input_size if args.input_size is not None else proto["input_size"],
        "ablation": args.ablation or "FULL",
    }
    for name in ("base_channels", "c_rfb", "upsample_mode"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    return ModelConfig(**kw)


def load_samples(args, cfg: ModelConfig):
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise CliError("--synthetic needs a positive count")
        return generate_synthetic(args.seed, args.synthetic, cfg)
    if not args.data:
        raise CliError("either --data or --synthetic is required")
    return load_dataset(args.data, args.split, cfg)


def cmd_train(args) -> int:
    cfg = model_config(args)
    samples = load_samples(args, cfg)
    lr = args.lr if args.lr is not None else PROTOCOLS[args.protocol]["lr"]
    settings = TrainSettings(
        lr=lr,
        steps=args.steps,
        batch_size=args.batch_size,
        seed=args.seed,
        lr_decay=args.lr_decay,
        plateau_window=args.plateau_window,
        plateau_tol=args.plateau_tol,
        grad_clip=args.grad_clip if args.grad_clip > 0 else None,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss.csv", "w") as fh:
        fh.write(LOSS_HEADER + "\n")
        result = train(samples, cfg, settings, on_step=lambda r: fh.write(r.csv() + "\n"))
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    meta = {"steps": settings.steps, "seed": settings.seed, "lr": settings.lr, "final_lr": result.final_lr}
    save_checkpoint(ckpt, result.params, cfg, meta)
    return 0


def _predictions(args):
    cfg, params, _ = load_checkpoint(args.checkpoint)
    samples = load_samples(args, cfg)
    for s in samples:
        yield s, predict(s, params, cfg).final.data[0]


def cmd_eval(args) -> int:
    pairs = [(s.id, np.clip(p, 0.0, 1.0), s.gt) for s, p in _predictions(args)]
    M.write_report(M.evaluate_pairs(pairs), args.out)
    return 0


def cmd_predict(args) -> int:
    out = Path(args.out)
    for s, p in _predictions(args):
        write_saliency_map(np.clip(p, 0.0, 1.0), out / f"{s.id}.png")
    return 0


def cmd_metrics(args) -> int:
    preds, gts = list_images(args.pred), list_images(args.gt)
    if set(preds) != set(gts):
        no_gt = sorted(set(preds) - set(gts))
        no_pred = sorted(set(gts) - set(preds))
        raise CliError(f"id sets differ: missing ground truth for {no_gt}, missing predictions for {no_pred}")
    pairs = []
    for i in sorted(preds):
        p, g = read_saliency_map(preds[i]), read_mask(gts[i])
        if p.shape != g.shape:
            raise CliError(f"{i}: prediction {p.shape} and mask {g.shape} differ in size")
        pairs.append((i, p, g))
    M.write_report(M.evaluate_pairs(pairs), args.out)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "metrics": cmd_metrics}
ERRORS = (CliError, ConfigError, DatasetError, CheckpointError, TrainingError, ShapeError, OSError, ValueError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
        return COMMANDS[args.command](args)
    except ERRORS as exc:
        print(f"lfsal: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
