"""Command-line entry point: run, ablate, analyze, null-mc."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analytics
from .config import ConfigError, RunConfig, load_config
from .pipeline import ablate, format_summary, read_log, write_log


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.method is not None:
        changes["method"] = args.method
    if args.ordering is not None:
        changes["ordering"] = args.ordering
    if args.domains is not None:
        changes["domains"] = args.domains
    if args.reproducible:
        changes["reproducible"] = True
    return cfg.with_(**changes) if changes else cfg


def cmd_run(args) -> int:
    from .pipeline import run

    cfg = _config(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    out = Path(args.out)
    log = run(cfg, seed, artifacts_dir=out / "artifacts" if args.artifacts else None)
    path = out / f"{cfg.method}_seed{seed}.json"
    write_log(log, path)
    f = log["final"]
    print(
        f"{cfg.method} seed {seed}: refusal {log['base']['s0'] * 100:.1f} -> {f['refusal']:.1f}, "
        f"safety {f['composite']:.1f}, domain {f['domain']:.1f}, triggers {f['triggers']}  [{path}]"
    )
    return 0


def cmd_ablate(args) -> int:
    grid = json.loads(Path(args.grid).read_text())
    unknown = set(grid) - {"base", "methods", "axes", "seeds"}
    if unknown:
        raise ConfigError(f"unknown grid keys: {', '.join(sorted(unknown))}")
    base = RunConfig.from_dict(grid.get("base", {}))
    out = Path(args.out)
    result = ablate(base, grid.get("methods"), grid.get("axes"), grid.get("seeds"), log_dir=out / "logs")
    text = format_summary(result["summary"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation_summary.txt").write_text(text)
    (out / "ablation_summary.json").write_text(json.dumps(result["summary"], sort_keys=True, indent=1) + "\n")
    sys.stdout.write(text)
    return 0


def analyze(log_paths, out_dir) -> dict:
    """Write trajectory/stability CSVs and a text summary; returns the file map. Idempotent."""
    logs = [read_log(p) for p in sorted(log_paths)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj_csv, summary = analytics.trajectory_report(logs)
    stab = [r for log in logs for r in analytics.stability_rows(log)]
    files = {
        "trajectory.csv": traj_csv,
        "stability.csv": analytics.to_csv(stab, analytics.STABILITY_COLUMNS),
        "summary.txt": summary + _stability_summary(logs),
    }
    for name, text in files.items():
        (out / name).write_text(text)
    return {name: out / name for name in files}


def _stability_summary(logs) -> str:
    lines = []
    for log in logs:
        for st in log["stages"]:
            entry = st.get("stability")
            if not entry or "per_layer" not in entry:
                continue
            null = analytics.matched_null(entry, trials=20)
            lines.append(
                f"{log['config']['method']} seed {log['seed']} {entry['transition']}: mean cos {entry['mean_cos']:.3f}, "
                f"d_G {entry['d_G']:.3f}, matched null {null['mean_cos']:.3f} -> ratio {null['ratio']:.2f}"
            )
    return "\n".join(lines) + "\n" if lines else ""


def cmd_analyze(args) -> int:
    files = analyze(args.logs, args.out)
    sys.stdout.write((Path(files["summary.txt"])).read_text())
    return 0


def cmd_null_mc(args) -> int:
    stats = analytics.random_subspace_null(args.dim, args.k, args.trials, args.seed)
    csv = analytics.to_csv([stats], analytics.NULL_COLUMNS)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(csv)
    sys.stdout.write(csv)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safeanchor", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one seed of one method")
    p.add_argument("--config", help="JSON config file (defaults fill anything missing)")
    p.add_argument("--seed", type=int)
    p.add_argument("--method")
    p.add_argument("--ordering", type=int)
    p.add_argument("--domains", type=int)
    p.add_argument("--reproducible", action="store_true", help="omit wall-clock timings from the log")
    p.add_argument("--artifacts", action="store_true", help="also save subspace snapshots and the final model")
    p.add_argument("--out", default="runs")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run a grid of methods and sensitivity axes")
    p.add_argument("--grid", required=True, help='JSON: {"base": {...}, "methods": [...], "axes": {...}, "seeds": [...]}')
    p.add_argument("--out", default="ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="CSV reports from run logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("null-mc", help="random-subspace null statistics")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_null_mc)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
