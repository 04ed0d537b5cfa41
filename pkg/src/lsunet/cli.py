"""Command-line interface.

Subcommands: synth, train, eval, gradcheck, bench, export-plots.
Exit codes: 0 success, 1 validation / bad input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataio import (RunConfig, load_config, load_dataset, load_checkpoint,
                     save_checkpoint, synth_generate)
from .errors import LsuNetError, ValidationFailure
from .losses import AutoWeightedLoss
from .network import LSUNet, count_params_flops
from .plots import export_run_charts, write_pgm
from .tensor import Tensor
from .training import RUN_TSV_HEADER, cosine_lr, evaluate, fit

PAPER_PARAMS_M = 1.08
PAPER_GFLOPS = 1.10


def _resolve_binarize_mode(mode: str, num_classes: int) -> str:
    if mode != "auto":
        return mode
    return "multilabel" if num_classes == 1 else "multiclass"


def cmd_synth(args) -> int:
    out = synth_generate(args.out, n=args.n, size=args.size,
                         num_classes=args.classes, seed=args.seed)
    bundles = load_dataset(out)
    print(f"wrote {len(bundles['train']) + len(bundles['eval'])} samples to {out} "
          f"(train {len(bundles['train'])}, eval {len(bundles['eval'])}, "
          f"classes {bundles['train'].num_classes}, size {args.size})")
    return 0


def _build_from_config(cfg: RunConfig, num_classes: int):
    net_cfg = cfg.network_config(num_classes)
    net = LSUNet(net_cfg)
    awl = AutoWeightedLoss(learnable=not cfg.disable_awl)
    return net, awl, net_cfg


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    data = load_dataset(args.data)
    train, evl = data["train"], data["eval"]
    net, awl, net_cfg = _build_from_config(cfg, train.num_classes)
    binarize = _resolve_binarize_mode(cfg.binarize_mode, net_cfg.num_classes)

    out_ckpt = Path(args.out)
    out_ckpt.parent.mkdir(parents=True, exist_ok=True)
    final_ckpt = out_ckpt.with_suffix(out_ckpt.suffix + ".final") if out_ckpt.suffix != ".final" \
        else out_ckpt
    run_tsv = out_ckpt.parent / "run.tsv"
    run_tsv.write_text(RUN_TSV_HEADER + "\n")

    def on_epoch(report):
        line = report.tsv()
        print(line)
        with run_tsv.open("a") as fh:
            fh.write(line + "\n")

    def on_best(report):
        save_checkpoint(net, awl, out_ckpt)

    run = fit(net, awl, train.images, train.masks, evl.images, evl.masks,
              epochs=cfg.epochs, batch_size=cfg.batch_size, lr0=cfg.lr,
              lr_min=cfg.lr_min, seed=cfg.seed, loss_mode=cfg.loss_mode,
              pooling=cfg.metric_pooling, binarize_mode=binarize,
              on_epoch=on_epoch, on_best=on_best)
    save_checkpoint(net, awl, final_ckpt)
    m, d = evaluate(net, evl.images, evl.masks, batch_size=cfg.batch_size,
                    pooling=cfg.metric_pooling, binarize_mode=binarize)
    print(f"final eval: mIoU={m:.4f} DSC={d:.4f} "
          f"(best DSC {run.best_dsc:.4f} at epoch {run.best_epoch})")
    print(f"checkpoints: best={out_ckpt} final={final_ckpt}; history={run_tsv}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    data = load_dataset(args.data)
    evl = data["eval"] if args.split == "eval" else data["train"]
    net, awl, net_cfg = _build_from_config(cfg, evl.num_classes)
    load_checkpoint(args.ckpt, net, awl)
    binarize = _resolve_binarize_mode(cfg.binarize_mode, net_cfg.num_classes)
    m_d, d_d = evaluate(net, evl.images, evl.masks, batch_size=cfg.batch_size,
                        pooling="dataset", binarize_mode=binarize)
    m_i, d_i = evaluate(net, evl.images, evl.masks, batch_size=cfg.batch_size,
                        pooling="image", binarize_mode=binarize)
    print(f"dataset-pooled: mIoU={m_d:.4f} DSC={d_d:.4f}")
    print(f"image-averaged: mIoU={m_i:.4f} DSC={d_i:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verification import block_suite, network_suite, op_suite

    if args.corrupt_gelu_grad:
        T.GELU_GRAD_SCALE = 1.1
    try:
        suites = {"op": op_suite, "block": block_suite, "network": network_suite}
        reports = suites[args.scope](seed=args.seed)
    finally:
        T.GELU_GRAD_SCALE = 1.0
    worst = 0.0
    ok = True
    for r in reports:
        print(r.line())
        worst = max(worst, r.max_rel_err)
        ok = ok and r.passed
    print(f"{'PASS' if ok else 'FAIL'}: {len(reports)} checks, worst max_rel_err={worst:.3e}")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    num_classes = cfg.num_classes if cfg.num_classes is not None else 1
    net, _, net_cfg = _build_from_config(cfg, num_classes)
    size = args.size
    params, flops = count_params_flops(net, (1, net_cfg.in_channels, size, size),
                                       forward=net.forward_multiscale)
    net.eval()
    x = Tensor(np.zeros((1, net_cfg.in_channels, size, size), dtype=np.float32))
    net.forward_multiscale(x)  # warm caches before timing
    times = []
    for _ in range(args.runs):
        t0 = time.perf_counter()
        net.forward_multiscale(x)
        times.append(time.perf_counter() - t0)
    print(f"params: {params} ({params / 1e6:.3f} M)")
    print(f"flops at {size}x{size}: {flops} ({flops / 1e9:.3f} GFLOPs)")
    print(f"reference full-scale model: {PAPER_PARAMS_M:.2f} M params, "
          f"{PAPER_GFLOPS:.2f} GFLOPs (informational)")
    print(f"forward wall-time over {args.runs} runs: "
          f"mean {np.mean(times) * 1e3:.1f} ms, best {min(times) * 1e3:.1f} ms")
    return 0


def cmd_export_plots(args) -> int:
    run_path = Path(args.run)
    if not run_path.exists():
        raise ValidationFailure(f"run history {run_path} does not exist")
    written = export_run_charts(run_path.read_text(), args.out)
    for p in written:
        print(f"wrote {p}")
    if args.ckpt and args.data:
        cfg = load_config(args.config) if args.config else RunConfig()
        data = load_dataset(args.data)
        evl = data["eval"]
        net, awl, net_cfg = _build_from_config(cfg, evl.num_classes)
        load_checkpoint(args.ckpt, net, awl)
        binarize = _resolve_binarize_mode(cfg.binarize_mode, net_cfg.num_classes)
        net.eval()
        out = Path(args.out)
        count = min(args.predictions, len(evl))
        from .metrics import binarize_logits

        logits = net.forward_multiscale(Tensor(evl.images[:count]))[0]
        preds = binarize_logits(logits, mode=binarize)
        for i in range(count):
            write_pgm(out / f"pred_{evl.stems[i]}.pgm", preds[i].max(axis=0))
            write_pgm(out / f"true_{evl.stems[i]}.pgm", evl.masks[i].max(axis=0))
            write_pgm(out / f"image_{evl.stems[i]}.pgm", evl.images[i].mean(axis=0))
            print(f"wrote prediction panel for {evl.stems[i]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsunet",
                                     description="train/evaluate the lightweight shift U-Net")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="path for the best checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=("op", "block", "network"), default="op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-gelu-grad", action="store_true",
                   help="negative control: corrupt the GELU derivative by 10%%")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="parameter count, FLOPs and forward timing")
    p.add_argument("--config", default=None)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--runs", type=int, default=10)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("export-plots", help="emit SVG charts (and PGM predictions) for a run")
    p.add_argument("--run", required=True, help="path to run.tsv")
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--predictions", type=int, default=4)
    p.set_defaults(fn=cmd_export_plots)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except LsuNetError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())
