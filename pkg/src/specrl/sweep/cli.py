"""Command-line entry point: ``specrl run | validate | list-presets``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
The output directory defaults to ``$SPECRL_OUT_DIR`` or ``./specrl-out``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, list_presets, load_scenario, preset_path, validate_config
from .emit import write_heatmap, write_summary, write_table
from .scenario import run_scenario

log = logging.getLogger("specrl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="specrl", description="Speculative decoding in RL post-training: scenario sweeps")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file or shipped preset")
    run.add_argument("scenario", help="path to a scenario YAML or a preset name")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--out-dir", default=None, help="output directory (env SPECRL_OUT_DIR)")
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--format", choices=["csv", "text", "both"], default="both")
    run.add_argument("--strict", action="store_true", help="exit 2 when a declared check fails")

    val = sub.add_parser("validate", help="validate scenario and profile files")
    val.add_argument("paths", nargs="+")

    sub.add_parser("list-presets", help="list shipped scenario presets")
    return ap


def _out_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get("SPECRL_OUT_DIR") or "specrl-out")


def cmd_run(args: argparse.Namespace) -> int:
    try:
        spec = load_scenario(args.scenario)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        spec.seed = args.seed
    out = _out_dir(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        result = run_scenario(spec, threads=args.threads)
        written = []
        if args.format in ("csv", "both"):
            written.append(write_table(result, out / f"{spec.name}.csv", "csv"))
        if args.format in ("text", "both"):
            written.append(write_table(result, out / f"{spec.name}.txt", "text"))
        written.append(write_summary(result, out / f"{spec.name}.json"))
        if "heatmap" in spec.outputs:
            for i, hm in enumerate(spec.heatmaps):
                suffix = f"_{i}" if hm.get("where") else ""
                p = out / f"{spec.name}_{hm['value']}{suffix}.svg"
                written.append(write_heatmap(result, hm["x"], hm["y"], hm["value"], p,
                                             hm.get("title"), hm.get("where")))
        if "timeline" in spec.outputs:
            for i, cell in enumerate(result.cells):
                for name, text in sorted(cell.artifacts.items()):
                    p = out / f"{spec.name}_{i}_{name}.csv"
                    p.write_text(text)
                    written.append(p)
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit code 2
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for p in written:
        print(f"wrote {p}")
    failed = 0
    for chk in result.checks:
        print(f"[{'PASS' if chk.passed else 'FAIL'}] {chk.name}: {chk.detail}")
        failed += not chk.passed
    return EXIT_RUNTIME if failed and args.strict else EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    errors = validate_config(args.paths)
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    if errors:
        return EXIT_CONFIG
    print(f"ok: {len(args.paths)} file(s) valid")
    return EXIT_OK


def cmd_list(_: argparse.Namespace) -> int:
    for name in list_presets():
        desc = load_scenario(preset_path(name)).description.strip().splitlines()
        print(f"{name:20s} {desc[0] if desc else ''}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    return {"run": cmd_run, "validate": cmd_validate, "list-presets": cmd_list}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
