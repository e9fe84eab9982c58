"""Command-line entry point: ``borderdet <command> [options]``.

Exit status is 0 on success, 1 when ``verify`` finds a failure and 2 on
usage errors (bad arguments, unreadable inputs, unknown bench ops).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import Config

EXIT_OK, EXIT_VERIFY_FAILED, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("borderdet")


class UsageError(Exception):
    pass


def _global_options(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="JSON config file")
    parser.add_argument("--seed", type=int, default=default, help="override the run seed")
    parser.add_argument("--out-dir", type=Path, default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="borderdet", description="Border-aligned dense object detector.")
    _global_options(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[common], help="write the synthetic train/val datasets")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--data", type=Path, required=True, help="training dataset directory")
    p.add_argument("--val", type=Path, help="validation dataset for periodic evaluation")
    p.add_argument("--iters", type=int)

    p = sub.add_parser("eval", parents=[common], help="AP of coarse and refined outputs")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("infer", parents=[common], help="detections for a dataset or TNS4 image stack")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--mode", choices=("coarse", "refined"), default="refined")

    p = sub.add_parser("analyze", parents=[common], help="extreme-point or IoU-histogram diagnostics")
    p.add_argument("kind", choices=("extreme", "iou"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--classes", type=int, nargs="*", help="restrict the extreme analysis to these classes")

    p = sub.add_parser("bench", parents=[common], help="time the hot ops")
    p.add_argument("--ops", nargs="*", help="op names (default: all)")
    p.add_argument("--batches", type=int, nargs="+", default=[8])
    p.add_argument("--pool-sizes", type=int, nargs="+", default=None)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("verify", parents=[common], help="oracle and gradient self-checks")
    p.add_argument("--instances", type=int, default=1000, help="random BorderAlign oracle instances")
    return parser


def load_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args, default: str) -> Path:
    out = args.out_dir or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2))
    log.info("wrote %s", path)


# ---------------------------------------------------------------------------
# commands

def cmd_generate_data(args, cfg: Config) -> int:
    from .data import generate_synthetic_dataset, save_dataset
    seed = cfg.data_seed if args.seed is None else args.seed
    out = _out_dir(args, "data")
    n_train = cfg.n_train if args.n_train is None else args.n_train
    n_val = cfg.n_val if args.n_val is None else args.n_val
    for split, n, s in (("train", n_train, seed), ("val", n_val, seed + 1)):
        ds = generate_synthetic_dataset(s, n, cfg.image_size, cfg.num_classes, cfg.in_channels)
        save_dataset(ds, out / split)
        print(f"{split}: {n} images (seed {s}) -> {out / split}")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    from .data import load_dataset
    from .train import train
    if args.iters is not None:
        cfg = cfg.replace(iters=args.iters)
    data = load_dataset(args.data)
    val = load_dataset(args.val) if args.val else None
    out = _out_dir(args, "run")
    result = train(cfg, data, out_dir=out, val=val)
    last = result.log[-1] if result.log else {}
    print(f"trained {cfg.iters} iters, final loss {last.get('loss', float('nan')):.4f} -> {out / 'model.bdet'}")
    return EXIT_OK


def _model_and_data(args, cfg):
    from .data import load_dataset
    from .train import load_checkpoint
    return load_checkpoint(args.checkpoint, cfg), load_dataset(args.data)


def cmd_eval(args, cfg: Config) -> int:
    from .train import evaluate_model
    model, ds = _model_and_data(args, cfg)
    reports = evaluate_model(model, ds)
    out = _out_dir(args, "eval")
    _write_json(out / "eval.json", {m: r.to_dict() for m, r in reports.items()})
    for mode, r in reports.items():
        aps = " ".join(f"AP{int(round(t * 100))} {v:.3f}" for t, v in r.ap.items() if t in (0.5, 0.75, 0.9))
        print(f"{mode:8s} mAP {r.mean_ap:.3f} {aps}")
    return EXIT_OK


def cmd_infer(args, cfg: Config) -> int:
    from .data import load_dataset
    from .tensor import load_tensor
    from .train import load_checkpoint, run_model
    from .detector import postprocess
    model = load_checkpoint(args.checkpoint, cfg)
    if args.input.is_dir():
        images = load_dataset(args.input).images
    else:
        images = load_tensor(args.input)
    dets = postprocess(run_model(model, images), cfg, args.mode)
    payload = [{"image": n, "detections": [{"label": d.label, "score": d.score, "box": list(d.box)}
                                           for d in det.to_list()]}
               for n, det in enumerate(dets)]
    out = _out_dir(args, "infer")
    _write_json(out / "detections.json", payload)
    print(f"{sum(len(d) for d in dets)} detections over {len(dets)} images -> {out / 'detections.json'}")
    return EXIT_OK


def cmd_analyze(args, cfg: Config) -> int:
    from . import analysis
    model, ds = _model_and_data(args, cfg)
    out = _out_dir(args, "analysis")
    if args.kind == "extreme":
        rep = analysis.analyze_extreme_points(model, ds, classes=args.classes)
        analysis.write_extreme_csv(rep, out / "extreme_points.csv")
        s = rep.summary()
        print(f"extreme points: n {s['n']} mean {s['mean']:.4f} mean|d| {s['mean_abs']:.4f}")
    else:
        hist = analysis.analyze_iou_histogram(model, ds)
        analysis.write_iou_csv(hist, out / "iou_histogram.csv")
        for bucket in hist["coarse"]:
            print(f"{bucket}: coarse {hist['coarse'][bucket]:6d} refined {hist['refined'][bucket]:6d}")
    return EXIT_OK


def cmd_bench(args, cfg: Config) -> int:
    from . import bench
    pool_sizes = tuple(args.pool_sizes) if args.pool_sizes else bench.DEFAULT_POOL_SIZES
    try:
        rows = bench.bench(args.ops, tuple(args.batches), args.channels, args.size, pool_sizes, args.repeats)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    out = _out_dir(args, "bench")
    bench.write_csv(rows, out / "bench.csv")
    for r in rows:
        print(f"{r.op:22s} {r.backend:7s} b={r.batch:<3d} N={r.pool_size:<3d} {r.median_ms:9.3f} ms")
    return EXIT_OK


def cmd_verify(args, cfg: Config) -> int:
    from .verify import gradient_suite, oracle_suite, roundtrip_error
    seed = args.seed or 0
    oracle = oracle_suite(args.instances, seed=seed)
    print(("PASS " if oracle.passed else "FAIL ") + str(oracle))
    rt = roundtrip_error(seed=seed, sigma=cfg.sigma)
    rt_ok = rt < 1e-9
    print(f"{'PASS' if rt_ok else 'FAIL'} offset round-trip: max error {rt:.3g}")
    grads = gradient_suite(seed)
    for r in grads.reports:
        if not r.passed:
            print(f"FAIL {r}")
    print(f"{'PASS' if grads.passed else 'FAIL'} gradient suite: {len(grads.reports)} checks, "
          f"worst {grads.worst.name} {grads.worst.max_rel_err:.3g} ({grads.seconds:.1f}s)")
    ok = oracle.passed and rt_ok and grads.passed
    if args.out_dir:
        _write_json(_out_dir(args, "verify") / "verify.json", {
            "passed": ok, "oracle": str(oracle), "roundtrip_error": rt,
            "gradients": [{"name": r.name, "max_rel_err": r.max_rel_err, "passed": r.passed} for r in grads.reports],
        })
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


COMMANDS = {
    "generate-data": cmd_generate_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "analyze": cmd_analyze, "bench": cmd_bench, "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, FileNotFoundError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
