#!/usr/bin/env python3

# Copyright (c) 2025 Robert McKenzie (@M1XZG)
# Repository: forecastad
#
# This software is released under the MIT License.
# See LICENSE.md for details.

import argparse
import copy
import json
import logging
import os
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path

from dotenv import load_dotenv

import pipeline
from errors import EXIT_OK, ConfigError, ForecastADError

# --- Persistent Config Helpers ---
CONFIG_FILE = "myconfig.json"
DEFAULT_CONFIG_FILE = "config.json"
CONFIG_BACKUP_DIR = "config_backups"
LOG_FILE = "forecastad.log"

logger = logging.getLogger("forecastad")


def ensure_config(config_file=CONFIG_FILE, default_file=DEFAULT_CONFIG_FILE):
    """Copy the shipped default to the user config on first run."""
    if not os.path.exists(config_file) and os.path.exists(default_file):
        shutil.copy(default_file, config_file)


def load_config(config_file=CONFIG_FILE):
    if not os.path.exists(config_file):
        raise ConfigError(f"Config file not found: {config_file}")
    try:
        with open(config_file, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{config_file} is not valid JSON: {e}") from e


def save_config(config, config_file=CONFIG_FILE):
    with open(config_file, "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2)
        f.write("\n")


def _backup_config(path, backup_dir=CONFIG_BACKUP_DIR):
    try:
        os.makedirs(backup_dir, exist_ok=True)
        ts = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        base_name = os.path.splitext(os.path.basename(path))[0]
        backup_path = os.path.join(backup_dir, f"{base_name}-{ts}.json")
        shutil.copy(path, backup_path)
        return backup_path
    except OSError as e:
        logger.warning("Config backup failed: %s", e)
        return None


def _merge_missing(custom: dict, default: dict, prefix: str = "") -> list[str]:
    added = []
    for key, value in default.items():
        if key not in custom:
            custom[key] = copy.deepcopy(value)
            added.append(f"{prefix}{key}")
        elif isinstance(value, dict) and isinstance(custom[key], dict):
            added += _merge_missing(custom[key], value, f"{prefix}{key}.")
    return added


def sync_config(config_file=CONFIG_FILE, default_file=DEFAULT_CONFIG_FILE, backup_dir=CONFIG_BACKUP_DIR) -> str:
    """Additively merge keys that are new in the default config into the user config.

    Never overwrites an existing value. Backs up the user config before writing.
    Returns a human-readable summary.
    """
    if not os.path.exists(default_file) or not os.path.exists(config_file):
        return "Default or custom config missing; no sync performed."
    with open(default_file, "r", encoding="utf-8") as f:
        default_cfg = json.load(f)
    custom_cfg = load_config(config_file)
    added = _merge_missing(custom_cfg, default_cfg)
    if not added:
        return "No changes; custom config already up to date."
    backup_path = _backup_config(config_file, backup_dir)
    save_config(custom_cfg, config_file)
    summary = f"Added {len(added)} key(s): {', '.join(added)}"
    if backup_path:
        summary += f" (backup: {backup_path})"
    return summary


def apply_env_overrides(raw: dict) -> dict:
    out = copy.deepcopy(raw)
    seed = os.getenv("FORECASTAD_SEED")
    if seed:
        try:
            out["seed"] = int(seed)
        except ValueError:
            raise ConfigError(f"FORECASTAD_SEED must be an integer, got {seed!r}") from None
    output_dir = os.getenv("FORECASTAD_OUTPUT_DIR")
    if output_dir:
        out["output_dir"] = output_dir
    return out


def parse_override_args(tokens: list[str]) -> list[tuple[str, str]]:
    """`--train.lr 0.001` / `--train.lr=0.001` pairs from leftover argv."""
    pairs = []
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--"):
            raise ConfigError(f"Unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"Missing value for --{key}")
            value = tokens[i + 1]
            i += 1
        pairs.append((key, value))
        i += 1
    return pairs


def apply_cli_overrides(raw: dict, pairs: list[tuple[str, str]]) -> dict:
    out = copy.deepcopy(raw)
    known = pipeline.flatten_config(out)
    for key, text in pairs:
        if key not in known:
            raise ConfigError(f"Unknown config key --{key} (see `main.py config show`)")
        pipeline.set_dotted(out, key, pipeline.parse_override_value(text, known[key]))
    return out


def resolve_config(raw: dict, profile: str | None = None, overrides=()) -> pipeline.ExperimentConfig:
    """File -> profile -> environment -> command line."""
    raw = copy.deepcopy(raw)
    if profile:
        raw["profile"] = profile
    raw = pipeline.apply_profile(raw)
    raw = apply_env_overrides(raw)
    raw = apply_cli_overrides(raw, list(overrides))
    return pipeline.ExperimentConfig.from_dict(raw)


# --- Logging Setup ---

def setup_logging(output_dir: Path | None, verbose: bool = False):
    handlers = [logging.StreamHandler(sys.stdout)]
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(Path(output_dir) / LOG_FILE))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        handlers=handlers,
        force=True,
    )
    # third-party chatter
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)


# --- Command Line ---

def build_parser() -> argparse.ArgumentParser:
    epilog = """
Examples:
  %(prog)s simulate                          # Simulate days into <output_dir>/data
  %(prog)s label && %(prog)s split           # Rule-label, then split into Tr#2 sets
  %(prog)s pretrain && %(prog)s train        # Fit the model for every seed
  %(prog)s evaluate                          # AUROC/AUPR/F1 table for all detectors
  %(prog)s ablate K                          # Sweep the context length
  %(prog)s --profile tiny train --train.lr 0.01
  %(prog)s --dry-run evaluate                # Show inputs/outputs without running

Any config leaf can be overridden with --<section>.<key> <value>.
"""
    parser = argparse.ArgumentParser(
        description="ForecastAD: forecasting-based anomaly detection on irregular thermal image sequences",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=epilog,
    )
    parser.add_argument("--config", default=CONFIG_FILE, help=f"Config file (default: {CONFIG_FILE})")
    parser.add_argument("--profile", choices=sorted({*pipeline.PROFILES, *pipeline.PROFILE_ALIASES}),
                        help="Config profile to apply (paper is an alias of full)")
    parser.add_argument("--jobs", type=int, help="Parallel workers for per-day and per-seed work")
    parser.add_argument("--dry-run", action="store_true", help="Print the command plan and exit")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    for name, command in pipeline.COMMANDS.items():
        p = sub.add_parser(name, help=command.help, description=command.help)
        if name == "ablate":
            p.add_argument("sweep", choices=pipeline.ABLATION_SWEEPS, help="Which sweep to run")
    cfg = sub.add_parser("config", help="Show or sync the configuration")
    cfg.add_argument("action", choices=("show", "sync"))
    return parser


def main(argv=None) -> int:
    load_dotenv()
    parser = build_parser()
    args, leftover = parser.parse_known_args(argv)

    try:
        pairs = parse_override_args(leftover)
        if args.jobs is not None:
            pairs.append(("jobs", str(args.jobs)))

        if args.command == "config" and args.action == "sync":
            ensure_config(args.config)
            print(sync_config(args.config))
            return EXIT_OK

        ensure_config(args.config)
        sync_summary = sync_config(args.config)
        cfg = resolve_config(load_config(args.config), args.profile, pairs)

        if args.command == "config":
            print(json.dumps({"config_hash": cfg.config_hash, **cfg.resolved()}, indent=2))
            return EXIT_OK

        kwargs = {"sweep": args.sweep} if args.command == "ablate" else {}
        if args.dry_run:
            setup_logging(None, args.verbose)
            print(pipeline.plan(cfg, [args.command], **kwargs))
            return EXIT_OK

        setup_logging(cfg.output_dir, args.verbose)
        if sync_summary.startswith("Added"):
            logger.info("Config sync: %s", sync_summary)
        pipeline.run_command(cfg, args.command, **kwargs)
        return EXIT_OK
    except ForecastADError as e:
        if not logging.getLogger().handlers:
            setup_logging(None, args.verbose)
        logger.error("%s failed: %s", args.command, e, exc_info=args.verbose)
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
