"""Command line entry point: ``fleetlab run | presets | validate | report``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from . import __version__
from .experiments import (
    PRESETS, ConfigError, config_from_dict, deep_merge, default_output_dir, preset_dict,
    presets, run_seed, set_dotted, to_dict,
)
from .orchestrator import TRAINING_COLUMNS
from .experiments import PROFILER_COLUMNS
from .report import MANIFEST_FILE, METRICS_FILE, PROFILER_FILE, render_run, write_csv


def _read_config_file(path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: {path} is not valid YAML: {exc}") from None
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    # a manifest wraps the resolved config
    if set(raw) == {"artifact_version", "seed", "config"}:
        raw = raw["config"]
    return raw


def resolve_config(config_path=None, preset=None, seed=None, out=None, overrides=()):
    raw: dict = {}
    file_raw = _read_config_file(config_path) if config_path else {}
    name = preset or file_raw.get("preset")
    if name and name != "custom":
        raw = preset_dict(name)
    raw = deep_merge(raw, file_raw)
    if preset:
        raw["preset"] = preset
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override: expected key=value, got {item!r}")
        raw = set_dotted(raw, key, yaml.safe_load(value))
    if seed is not None:
        raw["seeds"] = [seed]
    if out is not None:
        raw["output_dir"] = str(out)
    return config_from_dict(raw)


def write_outputs(cfg, seed: int, run_dir: Path, plots: bool = True) -> None:
    arms = run_seed(cfg, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics = [row for arm in arms if arm.result is not None for row in arm.result.rows]
    profiler_rows = [row for arm in arms for row in arm.profiler_rows]
    write_csv(run_dir / METRICS_FILE, TRAINING_COLUMNS, metrics)
    write_csv(run_dir / PROFILER_FILE, PROFILER_COLUMNS, profiler_rows)
    resolved = to_dict(cfg)
    resolved["seeds"] = [seed]
    manifest = {"artifact_version": __version__, "seed": seed, "config": resolved}
    (run_dir / MANIFEST_FILE).write_text(yaml.safe_dump(manifest, sort_keys=True))
    if plots:
        render_run(run_dir)


def cmd_run(args) -> int:
    cfg = resolve_config(args.config, args.preset, args.seed, args.out, args.override or ())
    out = Path(cfg.output_dir or default_output_dir())
    for seed in cfg.seeds:
        run_dir = out / f"{cfg.preset}_{seed}"
        try:
            write_outputs(cfg, seed, run_dir, plots=not args.no_plots)
        except OSError as exc:
            print(f"error: cannot write to {run_dir}: {exc.strerror}", file=sys.stderr)
            return 1
        print(run_dir)
    return 0


def cmd_presets(args) -> int:
    for name, desc in presets():
        print(f"{name:<18} {desc}")
    return 0


def cmd_validate(args) -> int:
    cfg = resolve_config(args.config, args.preset, None, None, args.override or ())
    print(f"ok: preset={cfg.preset} kind={cfg.kind} seeds={cfg.seeds}")
    return 0


def cmd_report(args) -> int:
    for run_dir in args.run_dirs:
        for path in render_run(run_dir):
            print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fleetlab", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a config or preset")
    run.add_argument("--config", help="YAML config or a manifest.yaml from an earlier run")
    run.add_argument("--preset", choices=sorted(PRESETS))
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory (default: $FLEETLAB_OUT or ./out)")
    run.add_argument("--override", action="append", metavar="KEY=VALUE",
                     help="dotted key override, value parsed as YAML; repeatable")
    run.add_argument("--no-plots", action="store_true", help="write CSVs and manifest only")
    run.set_defaults(func=cmd_run)

    pre = sub.add_parser("presets", help="list shipped presets")
    pre.set_defaults(func=cmd_presets)

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("--config")
    val.add_argument("--preset", choices=sorted(PRESETS))
    val.add_argument("--override", action="append", metavar="KEY=VALUE")
    val.set_defaults(func=cmd_validate)

    rep = sub.add_parser("report", help="re-render figures from run directories")
    rep.add_argument("run_dirs", nargs="+")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("run", "validate") and not (args.config or args.preset):
        parser.error(f"{args.command} needs --config or --preset")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
