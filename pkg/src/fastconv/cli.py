"""Command-line entry point.

stdout carries one JSON document per run; logs go to stderr. Exit codes:
0 success, 1 a check failed, 2 usage or configuration error. Every command
writes ``resolved_config.json`` to its output directory so the run can be
repeated exactly.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from fastconv import data as dataforge
from fastconv.blocks import BlockKind, block_backward, block_forward, make_block
from fastconv.conv import ConvSpec, conv3d_forward, conv3d_naive, init_weights
from fastconv.network import (
    PRESETS,
    NetConfig,
    accounting,
    build_network,
    save_network,
)
from fastconv.training import LrSchedule, gradcheck, lr_at, train, write_record

log = logging.getLogger("fastconv")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2

# Published ResNet-34 figures per block kind: (depth, params).
REFERENCE = {
    BlockKind.CONV3D: (137, 40.60e6),
    BlockKind.TWO_PLUS_ONE_D: (147, 25.84e6),
    BlockKind.FAST: (157, 43.48e6),
    BlockKind.SPLIT_FAST: (157, 43.48e6),
    BlockKind.FAST_XT_ONLY: (147, 32.89e6),
    BlockKind.FAST_YT_ONLY: (147, 32.89e6),
}
PARAM_BAND = 0.20


class UsageError(Exception):
    pass


def _kind(value: str) -> BlockKind:
    try:
        return BlockKind.parse(value)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


def _kinds(value: str) -> list[BlockKind]:
    if value == "all":
        return list(BlockKind)
    return [_kind(v) for v in value.split(",")]


def _ints(count: int):
    def parse(value: str) -> tuple[int, ...]:
        try:
            parts = tuple(int(v) for v in value.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {count} comma-separated integers, got {value!r}") from None
        if len(parts) != count or min(parts) < 1:
            raise argparse.ArgumentTypeError(f"expected {count} positive integers, got {value!r}")
        return parts

    return parse


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_resolved(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **resolved}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(args, command: str) -> Path:
    return Path(args.out) if args.out else Path(args.run_dir) / command


# ---------------------------------------------------------------------------
# audit


def _build_preset(arch: str, kind: BlockKind, classes: int, input_thw) -> NetConfig:
    if arch not in PRESETS:
        raise UsageError(f"unknown preset {arch!r}; choose from {sorted(PRESETS)}")
    factory = PRESETS[arch]
    kwargs = {"num_classes": classes}
    if input_thw is not None:
        kwargs["input_shape"] = (1, 3, *input_thw)
    return factory(kind, **kwargs)


def audit_report(arch: str, kind: BlockKind, classes: int, input_thw=None) -> dict:
    cfg = _build_preset(arch, kind, classes, input_thw)
    net = build_network(cfg, seed=0)
    report = accounting(net).to_dict()
    out = {
        "arch": arch,
        "kind": kind.value,
        "num_classes": classes,
        "input_shape": list(cfg.input_shape),
        **report,
    }
    if arch == "resnet34":
        out["reference"] = _reference_checks(cfg, kind, report["depth"], report["total_params"])
    return out


def _reference_checks(cfg: NetConfig, kind: BlockKind, ours_depth: int, ours_params: int) -> dict:
    totals = {}
    for k in (BlockKind.TWO_PLUS_ONE_D, BlockKind.CONV3D, BlockKind.FAST):
        rep = accounting(build_network(cfg.replace(block_kind=k), seed=0))
        totals[k] = (rep.depth, rep.total_params)
    ref = {}
    if kind in REFERENCE:
        ref_depth, ref_params = REFERENCE[kind]
        ref.update({
            "reference_depth": ref_depth,
            "depth_delta": ours_depth - ref_depth,
            "reference_params": int(ref_params),
            "param_rel_delta": (ours_params - ref_params) / ref_params,
            "param_within_band": abs(ours_params - ref_params) <= PARAM_BAND * ref_params,
        })
    p = {k: v[1] for k, v in totals.items()}
    d = {k: v[0] for k, v in totals.items()}
    ref["param_order_ok"] = p[BlockKind.TWO_PLUS_ONE_D] < p[BlockKind.CONV3D] < p[BlockKind.FAST]
    ref["depth_order_ok"] = d[BlockKind.FAST] > d[BlockKind.TWO_PLUS_ONE_D] > d[BlockKind.CONV3D]
    return ref


def cmd_audit(args) -> int:
    report = audit_report(args.arch, args.kind, args.classes, args.input)
    _write_resolved(_out_dir(args, "audit"), "audit", {
        "arch": args.arch, "kind": args.kind.value, "classes": args.classes,
        "input": list(args.input) if args.input else None,
    })
    _emit(report)
    ref = report.get("reference")
    if ref and not all(v for key, v in ref.items() if key.endswith("_ok") or key == "param_within_band"):
        return EXIT_CHECK_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


GRADCHECK_INPUT = (1, 2, 5, 7, 7)


def gradcheck_kind(kind: BlockKind, seed: int, tolerance: float, corrupt: float = 1.0) -> dict:
    c = GRADCHECK_INPUT[1]
    block = make_block(kind, c, c, 3, 1, seed)
    rng = np.random.default_rng(seed)
    for layer in block.convs.values():
        layer.weights.bias[...] = rng.uniform(-0.1, 0.1, layer.weights.bias.shape)
    x = rng.standard_normal(GRADCHECK_INPUT)
    report = gradcheck(block, x, tolerance, max_entries=None, seed=seed, corrupt=corrupt)
    return {"kind": kind.value, **report.to_dict()}


def gradcheck_tiny(seed: int, tolerance: float, corrupt: float = 1.0, kind=BlockKind.FAST) -> dict:
    net = build_network(PRESETS["tiny"](kind), seed)
    x = np.random.default_rng(seed).standard_normal(net.config.input_shape)
    report = gradcheck(net, x, tolerance, max_entries=16, seed=seed, corrupt=corrupt)
    return {"kind": f"tiny/{kind.value}", **report.to_dict()}


def cmd_gradcheck(args) -> int:
    results = [gradcheck_kind(k, args.seed, args.tolerance, args.corrupt) for k in args.kind]
    if args.net:
        results.append(gradcheck_tiny(args.seed, args.tolerance, args.corrupt))
    for r in results:
        log.info("%-14s %s max rel err %.3e", r["kind"], "PASS" if r["passed"] else "FAIL", r["max_rel_err"])
    passed = all(r["passed"] for r in results)
    _write_resolved(_out_dir(args, "gradcheck"), "gradcheck", {
        "kind": [k.value for k in args.kind], "seed": args.seed, "tolerance": args.tolerance,
        "corrupt": args.corrupt, "net": args.net,
    })
    _emit({"passed": passed, "results": results})
    return EXIT_OK if passed else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# train


DEFAULT_TRAIN = {
    "net": {"preset": "tiny", "kind": "fast"},
    "data": {
        "synthetic": dataforge.SyntheticSpec().to_dict(),
        "train_per_class": 64,
        "val_per_class": 16,
        "seed": 0,
    },
    "schedule": {"lr_max0": 2e-2, "lr_min": 4e-5, "cycle_epochs": 5.0},
    "epochs": 30,
    "batch_size": 8,
    "momentum": 0.9,
    "weight_decay": 0.0,
    "seed": 0,
    "workers": 4,
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def resolve_train_config(path: str | None, overrides: dict) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_TRAIN))
    if path:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot read config {path}: {err}") from None
    return _merge(cfg, {k: v for k, v in overrides.items() if v is not None})


def _net_config(net_cfg: dict, synthetic: dataforge.SyntheticSpec) -> NetConfig:
    net_cfg = dict(net_cfg)
    classes = len(synthetic.classes)
    shape = (1, synthetic.channels, synthetic.frames, synthetic.height, synthetic.width)
    if "preset" in net_cfg:
        preset = net_cfg.pop("preset")
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}")
        cfg = PRESETS[preset](net_cfg.pop("kind", "fast"), num_classes=classes, input_shape=shape)
        return cfg.replace(**net_cfg) if net_cfg else cfg
    return NetConfig.from_dict(net_cfg)


def run_training(cfg: dict, out: Path) -> dict:
    synthetic = dataforge.SyntheticSpec(**cfg["data"]["synthetic"])
    dataset = dataforge.make_split(synthetic, cfg["data"]["train_per_class"],
                                   cfg["data"]["val_per_class"], cfg["data"]["seed"])
    net = build_network(_net_config(cfg["net"], synthetic), cfg["seed"])
    sched = LrSchedule(**cfg["schedule"])
    record = train(net, dataset, cfg["epochs"], sched, cfg["seed"], batch_size=cfg["batch_size"],
                   momentum=cfg["momentum"], weight_decay=cfg["weight_decay"], workers=cfg["workers"])
    out.mkdir(parents=True, exist_ok=True)
    write_record(record, out)
    save_network(net, out / "weights")
    last = record.epochs[-1] if record.epochs else None
    return {
        "epochs": len(record.epochs),
        "final_train_loss": last.train_loss if last else None,
        "final_val_loss": last.val_loss if last else None,
        "final_val_acc": last.val_acc if last else None,
        "best_val_acc": max((e.val_acc for e in record.epochs), default=None),
        "lr_matches_schedule": all(e.lr == lr_at(sched, e.epoch) for e in record.epochs),
        "out": str(out),
    }


def cmd_train(args) -> int:
    overrides = {"epochs": args.epochs, "seed": args.seed}
    if args.kind is not None:
        overrides["net"] = {"kind": args.kind.value}
    if args.lr_max is not None:
        overrides["schedule"] = {"lr_max0": args.lr_max}
    cfg = resolve_train_config(args.config, overrides)
    out = _out_dir(args, "train")
    _write_resolved(out, "train", cfg)
    summary = run_training(cfg, out)
    _emit(summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def _time_us(fn, repeats: int) -> list[float]:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e6)
    return times


def bench_report(kinds: list[BlockKind], shape, repeats: int, oracle: bool) -> dict:
    n, c, t, h, w = shape
    rng = np.random.default_rng(0)
    x = rng.standard_normal(shape).astype(np.float32)
    rows = []
    for kind in kinds:
        block = make_block(kind, c, c, 3, 1, 0)
        fwd = _time_us(lambda: block_forward(block, x), repeats)
        y, cache = block_forward(block, x)
        bwd = _time_us(lambda: block_backward(block, cache, y), repeats)
        mean_fwd = statistics.fmean(fwd)
        rows.append({
            "kind": kind.value,
            "params": block.param_count(),
            "forward_us_mean": mean_fwd,
            "forward_us_stdev": statistics.stdev(fwd) if len(fwd) > 1 else 0.0,
            "backward_us_mean": statistics.fmean(bwd),
            "backward_us_stdev": statistics.stdev(bwd) if len(bwd) > 1 else 0.0,
            "clips_per_s": n / (mean_fwd * 1e-6),
        })
    report = {"shape": list(shape), "repeats": repeats, "kinds": rows}
    if oracle:
        spec = ConvSpec((3, 3, 3), c, c)
        wts = init_weights(spec, rng)
        report["oracle_us"] = _time_us(lambda: conv3d_naive(x, spec, wts), 1)[0]
        report["optimized_us"] = statistics.fmean(_time_us(lambda: conv3d_forward(x, spec, wts), repeats))
        report["oracle_slower"] = report["oracle_us"] > report["optimized_us"]
    return report


def cmd_bench(args) -> int:
    report = bench_report(args.kind, args.shape, args.repeats, args.oracle)
    _write_resolved(_out_dir(args, "bench"), "bench", {
        "kind": [k.value for k in args.kind], "shape": list(args.shape),
        "repeats": args.repeats, "oracle": args.oracle,
    })
    _emit(report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# slices


def _load_clip(path: str) -> np.ndarray:
    src = dataforge.ClipSource.open(path)
    return np.ascontiguousarray(src.frames.transpose(1, 0, 2, 3)[None])


def cmd_slices(args) -> int:
    try:
        clip = _load_clip(args.input)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read clip {args.input}: {err}") from None
    _, _, t, h, w = clip.shape
    # default to the brightest row / column, where a moving object is most visible
    energy = clip.astype(np.float64).sum(axis=(0, 1, 2))
    row = args.row if args.row is not None else int(np.argmax(energy.sum(axis=1)))
    col = args.col if args.col is not None else int(np.argmax(energy.sum(axis=0)))
    xt = dataforge.extract_slice(clip, "xt", row)
    yt = dataforge.extract_slice(clip, "yt", col)
    scale = args.scale
    if scale is None:
        scale = 255.0 if float(clip.max()) <= 1.0 else 1.0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataforge.write_pgm(out / "xt.pgm", xt, scale)
    dataforge.write_pgm(out / "yt.pgm", yt, scale)
    # keep the slice directory to exactly the two images
    _write_resolved(Path(args.run_dir) / "slices", "slices",
                    {"input": args.input, "row": row, "col": col, "scale": scale, "out": str(out)})
    _emit({
        "xt": {"path": str(out / "xt.pgm"), "shape": list(xt.shape), "row": row,
               "argmax_slope": dataforge.trajectory_slope(xt)},
        "yt": {"path": str(out / "yt.pgm"), "shape": list(yt.shape), "col": col,
               "argmax_slope": dataforge.trajectory_slope(yt)},
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    spec = dataforge.SyntheticSpec(
        classes=[m.value for m in dataforge.Motion], frames=args.frames, height=args.size[0],
        width=args.size[1], channels=args.channels, speed=args.speed, noise=args.noise,
        shape=args.shape,
    )
    out = Path(args.out)
    if args.per_class:
        manifest = dataforge.write_dataset(spec, args.per_class, args.seed, out)
        _write_resolved(out, "gen", {"spec": spec.to_dict(), "per_class": args.per_class, "seed": args.seed})
        _emit({"clips": len(manifest["clips"]), "out": str(out)})
        return EXIT_OK
    clip, label = dataforge.gen_clip(spec, args.motion, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataforge.tensor.save_t5b(out, clip)
    _write_resolved(out.parent, "gen", {"spec": spec.to_dict(), "motion": args.motion, "seed": args.seed,
                                        "out": str(out)})
    _emit({"path": str(out), "shape": list(clip.shape), "motion": args.motion, "label": label})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastconv", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS/worker threads (default: $FASTCONV_THREADS or library default)")
    parser.add_argument("--run-dir", default="runs", help="parent directory for per-command outputs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="parameter / depth / FLOP / memory accounting")
    p.add_argument("--arch", default="tiny", choices=sorted(PRESETS))
    p.add_argument("--kind", type=_kind, default=BlockKind.FAST)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--input", type=_ints(3), default=None, metavar="T,H,W")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--kind", type=_kinds, default=list(BlockKind), help="kind, comma list, or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--corrupt", type=float, default=1.0, help="scale analytic grads (sentinel test)")
    p.add_argument("--net", action="store_true", help="also check the tiny network end to end")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on the synthetic motion benchmark")
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--kind", type=_kind, default=None)
    p.add_argument("--lr-max", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="time block forward/backward")
    p.add_argument("--kind", type=_kinds, default=list(BlockKind))
    p.add_argument("--shape", type=_ints(5), default=(1, 16, 8, 16, 16), metavar="N,C,T,H,W")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--oracle", action="store_true", help="also time the naive 3x3x3 oracle once")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("slices", help="write XT / YT slices of a clip as PGM")
    p.add_argument("--in", dest="input", required=True, help=".t5b clip or frame directory")
    p.add_argument("--row", type=int, default=None)
    p.add_argument("--col", type=int, default=None)
    p.add_argument("--scale", type=float, default=None, help="intensity multiplier (default: auto)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slices)

    p = sub.add_parser("gen", help="render synthetic motion clips")
    p.add_argument("--motion", default="move_right", choices=[m.value for m in dataforge.Motion])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=_ints(2), default=(32, 32), metavar="H,W")
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--speed", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--shape", default="rect", choices=["rect", "blob"])
    p.add_argument("--per-class", type=int, default=0, help="write a dataset directory instead of one clip")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "audit" and args.classes is None:
        args.classes = 101 if args.arch == "resnet34" else 4
    threads = args.threads
    if threads is None and os.environ.get("FASTCONV_THREADS"):
        try:
            threads = int(os.environ["FASTCONV_THREADS"])
        except ValueError:
            print("fastconv: error: FASTCONV_THREADS must be an integer", file=sys.stderr)
            return EXIT_USAGE
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (UsageError, ValueError, IndexError, OSError) as err:
        print(f"fastconv: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
