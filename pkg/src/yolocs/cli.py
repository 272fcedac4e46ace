"""Command-line front end: ``yolocs {summary,compare,verify,forward,toy-train}``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
"""

import argparse
import hashlib
from pathlib import Path
import sys

import numpy as np

from yolocs import analyzer, verify
from yolocs.errors import YolocsError
from yolocs.graph import build, load_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def resolve_config(ref: str, config_dir: str) -> Path:
    """Find a config given a path (with or without ``.yaml``) or a bare name."""
    p = Path(ref)
    candidates = [p, p.with_name(p.name + ".yaml"), Path(config_dir) / p.name, Path(config_dir) / (p.name + ".yaml")]
    for c in candidates:
        if c.is_file():
            return c
    raise UsageError(f"config not found: {ref}")


def _load(args, ref, img_size, seed=None):
    cfg = load_config(resolve_config(ref, args.config_dir))
    return build(cfg, nc=getattr(args, "nc", None), seed=seed, img_size=img_size)


def cmd_summary(args) -> int:
    g = _load(args, args.config, args.img_size)
    report = analyzer.profile(g, args.img_size)
    print(analyzer.format_kv(report) if args.format == "kv" else analyzer.format_table(report))
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = [analyzer.profile(_load(args, ref, args.img_size), args.img_size) for ref in args.configs]
    print(analyzer.format_compare(analyzer.compare(reports), kv=args.format == "kv"))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_suite(args.suite, seed=args.seed)
    for r in results:
        status = "pass" if r.passed else "FAIL"
        if args.format == "kv":
            print(f"suite={r.suite} check={r.name.replace(' ', '_')} status={status} detail={r.detail.replace(' ', '_') or '-'}")
        else:
            print(f"{status:<5} {r.suite:<16} {r.name:<36} {r.detail}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" +
          (": failing " + ", ".join(r.name for r in failed) if failed else ""))
    return EXIT_FAIL if failed else EXIT_OK


def checksum(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


def cmd_forward(args) -> int:
    g = _load(args, args.config, args.img_size, seed=args.seed)
    g.eval()
    x = np.random.default_rng(args.seed).standard_normal((args.batch, g.input_channels, args.img_size, args.img_size))
    outs = g.forward(x.astype(np.float32))
    for i, o in enumerate(outs if isinstance(outs, list) else [outs]):
        shape = "x".join(map(str, o.shape))
        if args.format == "kv":
            print(f"output={i} shape={shape} sum={float(o.sum(dtype=np.float64)):.9e} sha256={checksum(o)}")
        else:
            print(f"output {i}: shape ({', '.join(map(str, o.shape))})  sum {float(o.sum(dtype=np.float64)):.9e}  sha256 {checksum(o)}")
    return EXIT_OK


def cmd_toy_train(args) -> int:
    g = _load(args, args.config, args.img_size, seed=args.seed)
    batch = verify.synthetic_batch(args.seed, size=args.img_size, num_classes=g.head.nc)
    result = verify.toy_overfit(g, batch, args.steps, args.lr)
    for step, loss in enumerate(result.losses):
        print(f"step={step} loss={loss:.6f}" if args.format == "kv" else f"step {step:>4}  loss {loss:.6f}")
    if not result.ok:
        print(f"diverged: non-finite loss at step {result.diverged_at}")
        return EXIT_FAIL
    print(f"final/initial = {result.losses[-1] / result.losses[0]:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="yolocs", description=__doc__.splitlines()[0])
    parser.add_argument("--config-dir", default="./configs", help="directory searched for bare config names")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fmt=True):
        p.add_argument("--config-dir", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        if fmt:
            p.add_argument("--format", choices=["table", "kv"], default="table")

    p = sub.add_parser("summary", help="per-layer params/FLOPs table")
    p.add_argument("config")
    p.add_argument("--img-size", type=int, default=640)
    p.add_argument("--nc", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("compare", help="param/FLOP deltas against the first config")
    p.add_argument("configs", nargs="+")
    p.add_argument("--img-size", type=int, default=640)
    p.add_argument("--nc", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify", help="run oracle and gradient suites")
    p.add_argument("--suite", choices=["kernels", "gradients", "receptive-field", "all"], default="all")
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("forward", help="seeded forward pass; prints output shapes and checksums")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--img-size", type=int, default=640)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--nc", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("toy-train", help="overfit one synthetic batch with plain gradient descent")
    p.add_argument("config", nargs="?", default="micro")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--img-size", type=int, default=96)
    common(p)
    p.set_defaults(func=cmd_toy_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "steps", 1) < 0:
            raise UsageError("--steps must be non-negative")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (YolocsError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
