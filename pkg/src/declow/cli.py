"""Command-line front end: train, cost, partition-report, plot, validate-config.

Exit codes: 0 success, 2 usage/config problems, 3 numerical failure.
Run directories are self-describing: the config snapshot plus manifest
reproduce the run bit-for-bit.
"""

import argparse
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .costmodel import ARCH_NAMES, cost_report_csv
from .engine import (
    ConfigError,
    DivergenceError,
    apply_overrides,
    config_from_file,
    config_to_text,
    metrics_to_csv,
    run_experiment,
    validate_config,
)
from .partition import generate_blobs, load_cifar10_binary, partition_skewed

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

OUTPUT_ROOT_ENV = "DECLOW_OUTPUT_ROOT"


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "declow-runs"))


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def cmd_train(args) -> int:
    try:
        cfg = config_from_file(args.config)
        if args.override:
            cfg = apply_overrides(cfg, args.override)
        validate_config(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out_dir = Path(args.out) if args.out else _output_root() / (
        Path(args.config).stem + f"-seed{cfg.seed}"
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    config_text = config_to_text(cfg)
    (out_dir / "config.ini").write_text(config_text)
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config": config_text,
        "outputs": {
            "metrics": "metrics.csv",
            "ledger": "ledger.csv",
            "models": "models.npz",
            "result": "result.json",
        },
        "started_at": _now(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))

    try:
        result = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        (out_dir / "result.json").write_text(
            json.dumps({"status": "diverged", "error": str(exc), "ended_at": _now()})
        )
        return EXIT_NUMERIC

    (out_dir / "metrics.csv").write_text(metrics_to_csv(result.metrics))
    (out_dir / "ledger.csv").write_text(result.ledger.to_csv())
    accuracy = result.averaged_accuracy()
    models = {f"node_{st.node}": st.x for st in result.states}
    models["averaged"] = np.mean([st.eval_point() for st in result.states], axis=0)
    np.savez(out_dir / "models.npz", **models)
    (out_dir / "result.json").write_text(
        json.dumps(
            {
                "status": "ok",
                "averaged_accuracy": accuracy,
                "rounds": result.metrics[-1].round if result.metrics else 0,
                "bytes_per_node": result.ledger.cumulative,
                "ended_at": _now(),
            },
            indent=2,
        )
    )
    print(f"run complete: averaged accuracy {accuracy:.4f}, artifacts in {out_dir}")
    return EXIT_OK


def cmd_cost(args) -> int:
    try:
        text = cost_report_csv(
            args.arch, norm=args.norm, batch=args.batch, classes=args.classes
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


def cmd_partition_report(args) -> int:
    try:
        if args.cifar:
            labels = load_cifar10_binary(args.cifar).labels
        else:
            labels = generate_blobs(
                args.classes, args.per_class, args.dim, args.separation, args.seed
            ).labels
        plan = partition_skewed(labels, args.nodes, args.skew, args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    classes = int(labels.max()) + 1
    lines = ["node,class,count"]
    hists = []
    for node, idx in enumerate(plan.assignments):
        hist = np.bincount(labels[idx], minlength=classes)
        hists.append(hist)
        lines.extend(f"{node},{c},{hist[c]}" for c in range(classes))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    if args.image:
        _render_partition_chart(np.array(hists), args.skew, Path(args.image))
    return EXIT_OK


def _deterministic_svg_setup():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "declow"
    return plt


def _render_partition_chart(hists: np.ndarray, skew: float, path: Path):
    plt = _deterministic_svg_setup()
    n, classes = hists.shape
    fig, ax = plt.subplots(figsize=(8, 4))
    bottom = np.zeros(n)
    for c in range(classes):
        ax.bar(np.arange(n), hists[:, c], bottom=bottom, label=f"class {c}")
        bottom += hists[:, c]
    ax.set_xlabel("node")
    ax.set_ylabel("samples")
    ax.set_title(f"class distribution per node (skew={skew})")
    ax.legend(fontsize="x-small", ncol=2)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _read_metrics_csv(path: Path):
    text = path.read_text().strip().splitlines()
    if not text or text[0] != "round,node,loss,spread,bytes_cum":
        raise ValueError(f"{path}: not a metrics CSV")
    rows = [line.split(",") for line in text[1:]]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    rounds, losses, spreads = {}, {}, {}
    for r in rows:
        rd = int(r[0])
        losses.setdefault(rd, []).append(float(r[2]))
        spreads[rd] = float(r[3])
    xs = sorted(losses)
    mean_loss = [float(np.mean(losses[x])) for x in xs]
    spread = [spreads[x] for x in xs]
    return xs, mean_loss, spread


def cmd_plot(args) -> int:
    try:
        series = [(Path(p).stem, *_read_metrics_csv(Path(p))) for p in args.metrics]
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    plt = _deterministic_svg_setup()
    fig, (ax_loss, ax_spread) = plt.subplots(1, 2, figsize=(10, 4))
    all_x = [x for _, xs, _, _ in series for x in xs]
    all_loss = [v for _, _, loss, _ in series for v in loss]
    all_spread = [v for _, _, _, sp in series for v in sp]
    for name, xs, loss, sp in series:
        ax_loss.plot(xs, loss, label=name)
        ax_spread.plot(xs, sp, label=name)
    for ax, values, title in (
        (ax_loss, all_loss, "mean train loss"),
        (ax_spread, all_spread, "model spread"),
    ):
        ax.set_xlim(min(all_x), max(all_x) if max(all_x) > min(all_x) else min(all_x) + 1)
        lo, hi = min(values), max(values)
        ax.set_ylim(lo, hi if hi > lo else lo + 1)
        ax.set_xlabel("round")
        ax.set_title(title)
        ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_validate_config(args) -> int:
    try:
        cfg = config_from_file(args.config)
        validate_config(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print("config ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="declow",
        description="Low-precision decentralized training simulator",
    )
    parser.add_argument("--version", action="version", version=f"declow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run an experiment from a config file")
    p.add_argument("config")
    p.add_argument("--override", action="append", help="section.key=value", default=[])
    p.add_argument("--out", help="output directory (default under $DECLOW_OUTPUT_ROOT)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("cost", help="analytic op/energy/memory report")
    p.add_argument("arch", choices=list(ARCH_NAMES))
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--norm", default="range_evonorm", choices=["range_bn", "range_evonorm"])
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("partition-report", help="per-node class histograms")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--skew", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cifar", help="CIFAR-10 binary file (default: synthetic blobs)")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100, dest="per_class")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--out")
    p.add_argument("--image", help="also render a stacked bar chart (SVG)")
    p.set_defaults(fn=cmd_partition_report)

    p = sub.add_parser("plot", help="render loss/spread curves from metrics CSVs")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out", required=True, help="output SVG path")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("validate-config", help="check a config file")
    p.add_argument("config")
    p.set_defaults(fn=cmd_validate_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
