"""``bta`` command line.

    bta <stage> --config <path> [--out <dir>] [--seed <u64>]
    bta run --config <path> [--out <dir>] [--seed <u64>]     # every stage in order
    bta report --run <dir>                                    # consolidated JSON summary
    bta scale --config <path> --factor <f> --write <path>     # smaller-market variant

Exit codes: 0 success, 2 validation error, 3 dependency error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import _kernels
from .config import STAGES, dump_yaml, load_config, scale_scenario
from .errors import ConfigError, DependencyError
from .pipeline import default_run_dir, read_json, read_timings, run_all, run_stage

EXIT_OK, EXIT_VALIDATION, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bta", description="Adversarial market-attack laboratory")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*[s for s in STAGES if s != "report"], "run"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--seed", type=int)
    rp = sub.add_parser("report")
    rp.add_argument("--run", type=Path)
    rp.add_argument("--config", type=Path)
    rp.add_argument("--out", type=Path)
    rp.add_argument("--seed", type=int)
    sc = sub.add_parser("scale")
    sc.add_argument("--config", required=True, type=Path)
    sc.add_argument("--factor", required=True, type=float)
    sc.add_argument("--write", required=True, type=Path)
    return p


def _report(root: Path, cfg_path: Path | None, seed: int | None) -> dict:
    cfg = load_config(cfg_path or root / "config.yaml", seed)
    run_stage(cfg, root, "report")
    summary = read_json(root / "report.json")
    summary["run_dir"] = str(root)
    summary["wall_clock_s"] = read_timings(root)
    summary["backend"] = _kernels.backend()
    return summary


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "scale":
            cfg = scale_scenario(load_config(args.config), args.factor)
            args.write.write_text(dump_yaml(cfg.raw))
            print(json.dumps({"written": str(args.write), "n_stocks": len(cfg.stocks)}))
            return EXIT_OK
        if args.command == "report":
            root = args.run or args.out
            if root is None:
                if args.config is None:
                    raise ConfigError("report needs --run <dir> or --config <path>")
                root = default_run_dir(load_config(args.config, args.seed))
            if not root.exists():
                raise DependencyError(f"run directory {root} does not exist", "generate")
            print(json.dumps(_report(root, args.config, args.seed), indent=1, sort_keys=True))
            return EXIT_OK
        cfg = load_config(args.config, args.seed)
        creating = args.command in ("generate", "run")
        root = args.out or default_run_dir(cfg, create=creating)
        if args.command == "run":
            results = run_all(cfg, root)
        else:
            if not root.exists() and not creating:
                raise DependencyError("no run directory for this config; run 'generate' first", "generate")
            results = [run_stage(cfg, root, args.command)]
        print(json.dumps({"run_dir": str(root), "stages": results}, indent=1, default=str))
        return EXIT_OK
    except ConfigError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
