"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .agent import ConfigError
from .envs import EnvSpecError, load_env_spec, make_env, random_agent_baseline

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _load_config(path: str | None) -> tuple[dict, Path]:
    if path is None:
        return {}, Path(".")
    p = Path(path)
    return json.loads(p.read_text()), p.parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ratiolab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one agent per seed and write curves and summaries")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, action="append", help="override seeds (repeatable)")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--out")
    p.add_argument("--preset")
    p.add_argument("--resume", action="store_true", help="continue from each run's last checkpoint")

    p = sub.add_parser("sweep", help="run the config at several update ratios")
    p.add_argument("--config", required=True)
    p.add_argument("--ratios", required=True, help="comma-separated, e.g. 1/4,1,8")
    p.add_argument("--out")

    p = sub.add_parser("reproduce-tables", help="re-derive normalized scores from the shipped tables")
    p.add_argument("--fixtures", default=str(harness.DATA_DIR))
    p.add_argument("--out", help="write the JSON report here")

    p = sub.add_parser("baseline-random", help="mean return of the uniform-random policy")
    p.add_argument("--env", required=True)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg, base = _load_config(args.config)
            spec = harness.resolve_spec(cfg, preset_name=args.preset, seeds=args.seed,
                                        max_interactions=args.max_steps, out=args.out, base_dir=base)
            artifacts = harness.run(spec, resume=args.resume)
            for a in artifacts:
                print(f"seed {a.seed}: {a.curve_csv} {a.summary_json} ({a.wall_seconds:.1f}s)")
            return EXIT_RUNTIME if any(a.failed for a in artifacts) else EXIT_OK
        if args.command == "sweep":
            cfg, base = _load_config(args.config)
            spec = harness.resolve_spec(cfg, out=args.out, base_dir=base)
            ratios = [r for r in args.ratios.split(",") if r.strip()]
            for r in ratios:
                harness.realize_ratio(r)
            report = harness.sweep_ratio(spec, ratios)
            for row in report["rows"]:
                print(f"r={row['ratio']:>5} (k={row['k']}, tau_u={row['tau_u']}): "
                      f"median interactions to {report['threshold']} = {row['median_interactions_to_reach']:.0f}")
            return EXIT_OK
        if args.command == "reproduce-tables":
            report = harness.reproduce_tables(args.fixtures)
            if args.out:
                Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
            n_cells, n_med = len(report["cells"]), len(report["medians"])
            print(f"cells: {n_cells - len(report['failed_cells'])}/{n_cells} pass; "
                  f"medians: {n_med - len(report['failed_medians'])}/{n_med} pass")
            for m in report["medians"]:
                print(f"  median {m['algorithm']} ({m['interactions']}): {m['computed']:.2f}% "
                      f"(printed {m['printed']:.2f}%) {'PASS' if m['passed'] else 'FAIL'}")
            for c in report["failed_cells"]:
                print(f"  FAIL {c['game']} {c['algorithm']} ({c['interactions']}): "
                      f"{c['computed']:.4f} vs {c['printed']}")
            return EXIT_OK if report["passed"] else EXIT_RUNTIME
        if args.command == "baseline-random":
            spec = load_env_spec(args.env)
            mean = random_agent_baseline(make_env(spec), args.episodes, args.seed)
            print(json.dumps({"schema_version": harness.SCHEMA_VERSION, "env": spec,
                              "episodes": args.episodes, "mean_return": mean}))
            return EXIT_OK
    except harness.ValidationError as exc:
        print("invalid experiment:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, EnvSpecError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        logging.getLogger(__name__).exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
