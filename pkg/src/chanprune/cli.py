"""Command-line front end.

Exit status: 0 success, 1 usage error, 2 malformed input, 3 a verification
or invariant failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import evaluation, inference
from .cfg import NetworkDef, emit_cfg, load_cfg, save_cfg, validate
from .errors import AlignmentError, ChanpruneError, CfgStructureError, InputFormatError
from .graph import cost_report
from .pruner import PRESETS, PruneConfig, iterative_prune
from .sparsity import SparsityConfig, loss_curve_csv, train_toy
from .transforms import PLACEMENTS, insert_spp, set_classes
from .weights import load_weights, save_weights

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_FAILED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out_dir(args):
    if args.output is None:
        return None
    d = Path(args.output)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_net(path) -> NetworkDef:
    net = load_cfg(path)
    problems = validate(net)
    if problems:
        raise CfgStructureError(f"{path}: " + "; ".join(str(p) for p in problems))
    return net


def _input_hw(values, net):
    if not values:
        return [(net.height, net.width)]
    return [(v, v) for v in values]


# ---------------------------------------------------------------- commands


def cmd_analyze(args):
    net = _load_net(args.cfg)
    out = _out_dir(args)
    chunks = []
    for hw in _input_hw(args.input, net):
        rep = cost_report(net, hw)
        chunks.append(rep.to_csv() if args.csv else rep.to_text())
    text = "\n".join(chunks)
    sys.stdout.write(text)
    if out is not None:
        (out / (Path(args.cfg).stem + (".csv" if args.csv else ".txt"))).write_text(text)
    return EXIT_OK


def cmd_insert_spp(args):
    net = _load_net(args.cfg)
    if args.classes is not None:
        net = set_classes(net, args.classes)
    new = insert_spp(net, args.placement, literal_identity=args.literal_identity)
    text = emit_cfg(new)
    out = _out_dir(args)
    if out is None:
        sys.stdout.write(text)
    else:
        path = out / (Path(args.cfg).stem + "-spp3.cfg")
        path.write_text(text)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_prune(args):
    net = _load_net(args.cfg)
    store = load_weights(args.weights, net)
    if args.preset:
        config = PRESETS[args.preset]
        if args.iterations is not None:
            config = dataclasses.replace(config, iterations=args.iterations)
    else:
        config = PruneConfig(args.ratio, args.local_percentile, args.iterations or 1)
    hw = _input_hw(args.input, net)[0]
    new_net, new_store, reports = iterative_prune(net, store, config, input_hw=hw)
    if len(reports) < config.iterations:
        print(f"stopped after {len(reports)} of {config.iterations} rounds", file=sys.stderr)
    if not reports:
        return EXIT_FAILED
    text = "".join((r.to_csv() if args.csv else f"round {k + 1}\n{r.to_text()}")
                   for k, r in enumerate(reports))
    sys.stdout.write(text)
    out = _out_dir(args)
    if out is not None:
        stem = Path(args.cfg).stem + "-pruned"
        save_cfg(new_net, out / f"{stem}.cfg")
        save_weights(new_store, new_net, out / f"{stem}.weights")
        (out / f"{stem}-report.{'csv' if args.csv else 'txt'}").write_text(text)
    return EXIT_OK


def _compare_outputs(net, out):
    idx = net.yolo_indices() or [len(net.layers) - 1]
    return [out.outputs[i] for i in idx]


def cmd_verify(args):
    net_a = _load_net(args.cfg_a)
    net_b = _load_net(args.cfg_b)
    store_a = load_weights(args.weights_a, net_a)
    store_b = load_weights(args.weights_b, net_b)
    if net_a.channels != net_b.channels:
        raise InputFormatError("the two networks take different input channel counts")
    if args.tensor:
        inputs = [inference.read_tensor(p) for p in args.tensor]
    else:
        h, w = _input_hw(args.input, net_a)[0]
        rng = np.random.default_rng(args.seed)
        inputs = [rng.uniform(-1, 1, (net_a.channels, h, w)).astype(np.float32)
                  for _ in range(args.trials)]
    worst = 0.0
    for x in inputs:
        oa = _compare_outputs(net_a, inference.run_network(net_a, store_a, x, decode=False))
        ob = _compare_outputs(net_b, inference.run_network(net_b, store_b, x, decode=False))
        if len(oa) != len(ob) or any(a.shape != b.shape for a, b in zip(oa, ob)):
            print("output shapes differ")
            return EXIT_FAILED
        for a, b in zip(oa, ob):
            worst = max(worst, float(np.max(np.abs(a.astype(np.float64) - b))))
    ok = worst <= args.tol
    print(f"trials: {len(inputs)}  max deviation: {worst:.3e}  tolerance: {args.tol:g}  "
          f"{'OK' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_sparsity_train(args):
    cfg = SparsityConfig(alpha=args.alpha, lr=args.lr, momentum=args.momentum,
                         weight_decay=args.weight_decay, epochs=args.epochs, seed=args.seed)
    _, history, snaps = train_toy(cfg, checkpoints=args.checkpoints, bins=args.bins, probe=args.probe)
    out = _out_dir(args)
    for step, hist, net, store in snaps:
        print(f"step {step:>6}  total {history[step - 1][1].total:.6g}  "
              f"|gamma| < {args.probe:g}: {100 * hist.fraction_below:.1f}%")
        if out is not None:
            save_cfg(net, out / f"checkpoint-{step}.cfg")
            save_weights(store, net, out / f"checkpoint-{step}.weights")
            (out / f"gamma-hist-{step}.csv").write_text(hist.to_csv())
    if out is not None:
        (out / "loss.csv").write_text(loss_curve_csv(history))
    elif args.csv:
        sys.stdout.write(loss_curve_csv(history))
    return EXIT_OK


def cmd_infer(args):
    net = _load_net(args.cfg)
    store = load_weights(args.weights, net)
    x = inference.read_tensor(args.tensor)
    result = inference.run_network(net, store, x, threshold=args.conf)
    dets = [evaluation.Det("", d.class_id, d.score, (d.x - d.w / 2, d.y - d.h / 2, d.w, d.h))
            for d in result.detections]
    order = {id(d): k for k, d in enumerate(dets)}
    kept = evaluation.nms(dets, args.nms)
    lines = "".join(result.detections[order[id(d)]].line() + "\n" for d in kept)
    sys.stdout.write(lines)
    out = _out_dir(args)
    if out is not None:
        (out / "detections.txt").write_text(lines)
        for k, t in enumerate(result.head_outputs(net) or [result.outputs[-1]]):
            inference.write_tensor(out / f"head{k}.bin", t)
    return EXIT_OK


def cmd_eval(args):
    dets = evaluation.parse_detections(Path(args.detections).read_text())
    ann = Path(args.annotations)
    files = sorted(ann.glob("*.txt")) if ann.is_dir() else [ann]
    gts = []
    for f in files:
        gts.extend(evaluation.parse_visdrone(f.read_text(), f.stem))
    summary = evaluation.evaluate(dets, gts, args.conf, args.nms)
    text = summary.to_csv() if args.csv else summary.to_text()
    sys.stdout.write(text)
    out = _out_dir(args)
    if out is not None:
        (out / ("eval.csv" if args.csv else "eval.txt")).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _unit(text):
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1)")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chanprune", description="Channel pruning toolkit for Darknet YOLO models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, inputs=True):
        sp.add_argument("-o", "--output", metavar="DIR", help="directory for written files")
        sp.add_argument("--csv", action="store_true", help="machine-readable output")
        if inputs:
            sp.add_argument("--input", type=_positive_int, nargs="+", metavar="PX",
                            help="square input size(s); defaults to the cfg header")

    sp = sub.add_parser("analyze", help="parameter / FLOPs / volume report")
    sp.add_argument("cfg")
    common(sp)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("insert-spp", help="add an SPP block before every detection head")
    sp.add_argument("cfg")
    sp.add_argument("--placement", choices=sorted(PLACEMENTS), default="spp3")
    sp.add_argument("--literal-identity", action="store_true",
                    help="emit the identity branch as an explicit 1x1 max pool")
    sp.add_argument("--classes", type=_positive_int, help="also resize the heads to this class count")
    common(sp, inputs=False)
    sp.set_defaults(func=cmd_insert_spp)

    sp = sub.add_parser("prune", help="prune channels by BN scaling factors")
    sp.add_argument("cfg")
    sp.add_argument("weights")
    sp.add_argument("--ratio", type=_unit, default=0.5)
    sp.add_argument("--local-percentile", type=_unit, default=0.9)
    sp.add_argument("--iterations", type=_positive_int, default=None,
                    help="pruning rounds (default 1, or the preset's)")
    sp.add_argument("--preset", choices=sorted(PRESETS))
    common(sp)
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("verify", help="compare two models' head outputs")
    for name in ("cfg_a", "weights_a", "cfg_b", "weights_b"):
        sp.add_argument(name)
    sp.add_argument("--trials", type=_positive_int, default=10)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tensor", nargs="+", help="input blobs instead of random inputs")
    common(sp)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("sparsity-train", help="toy L1 sparsity training run")
    sp.add_argument("--alpha", type=float, default=1e-3)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--weight-decay", type=float, default=5e-4)
    sp.add_argument("--epochs", type=_positive_int, default=25)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--checkpoints", type=_positive_int, default=4)
    sp.add_argument("--bins", type=_positive_int, default=20)
    sp.add_argument("--probe", type=float, default=0.01)
    common(sp, inputs=False)
    sp.set_defaults(func=cmd_sparsity_train)

    sp = sub.add_parser("infer", help="forward pass on a float32 tensor blob")
    sp.add_argument("cfg")
    sp.add_argument("weights")
    sp.add_argument("tensor")
    sp.add_argument("--conf", type=float, default=0.1)
    sp.add_argument("--nms", type=float, default=0.5)
    common(sp, inputs=False)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score detections against VisDrone annotations")
    sp.add_argument("detections")
    sp.add_argument("annotations", help="annotation file or directory of per-image .txt files")
    sp.add_argument("--conf", type=float, default=0.1)
    sp.add_argument("--nms", type=float, default=0.5)
    common(sp, inputs=False)
    sp.set_defaults(func=cmd_eval)
    return p


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        return args.func(args)
    except (InputFormatError, AlignmentError, OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ChanpruneError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


def main():
    sys.exit(run_cli())
