"""Command-line front end.

Subcommands: ``calibrate``, ``train``, ``evaluate``, ``baseline``,
``report`` and ``show-config``. Every command that writes a directory
also writes ``manifest.json`` with the arguments, seeds and SHA-256 hashes
of the files it produced. Paths are recorded by file name only and no
timestamps are stored, so reruns give byte-identical output.

Config precedence, lowest first: built-in defaults, ``--config`` JSON,
environment variables, ``--set key=value``. Environment variables are
``CROPAFA_TRAIN_<FIELD>`` for training settings and
``CROPAFA_SCENARIO_<FIELD>`` for scenario settings.

Exit codes: 2 for configuration errors, 3 for data errors, 4 for numeric
failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .agent import ActorCritic, NonFiniteError, file_sha256, sample_action
from .baselines import BASELINES, run_baseline
from .cgm import NonFiniteStateError, load_params
from .env import (SCENARIO_NAMES, CropEnv, NormalizationStats, ScenarioConfig, ScenarioError,
                  calibrate_normalization, make_scenario)
from .evaluation import atomic_write_bytes, episode_rows, export_trace, read_episodes_csv, write_bundle
from .ppo import TrainConfig, TrainingDiverged, train
from .weather import PRESETS, WeatherDataError, load_weather_csv, split_by_parity, synthetic_year_set

log = logging.getLogger("cropafa")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
ENV_PREFIX = "CROPAFA_"
DEFAULT_YEARS = "1990-2022"


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ------------------------------------------------------------------ config

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _env_overrides(section: str, names, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    prefix = f"{ENV_PREFIX}{section.upper()}_"
    out = {}
    for key, val in environ.items():
        if key.startswith(prefix):
            name = key[len(prefix):].lower()
            if name not in names:
                raise ConfigError(f"{key}: unknown {section} setting {name!r}")
            out[name] = _parse_value(val)
    return out


def _set_overrides(pairs, section_names: dict[str, set]) -> dict[str, dict]:
    """Split ``--set`` items (``train.lr=...`` or bare ``lr=...``) by section."""
    out = {s: {} for s in section_names}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        section, _, name = key.rpartition(".")
        candidates = [section] if section else [s for s, ns in section_names.items() if name in ns]
        if len(candidates) != 1 or candidates[0] not in section_names \
                or name not in section_names[candidates[0]]:
            raise ConfigError(f"--set: unknown or ambiguous key {key!r}")
        out[candidates[0]][name] = _parse_value(val)
    return out


def _train_names():
    return {f.name for f in fields(TrainConfig)}


def _scenario_names():
    return {f.name for f in fields(ScenarioConfig)} - {"name"}


def build_configs(args, environ=None) -> tuple[ScenarioConfig, TrainConfig]:
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = _read_json(args.config)
        unknown = set(file_cfg) - {"scenario", "train"}
        if unknown:
            raise ConfigError(f"{args.config}: unknown section(s) {sorted(unknown)}")
    sets = _set_overrides(getattr(args, "set", None),
                          {"train": _train_names(), "scenario": _scenario_names()})
    sc_over = {**file_cfg.get("scenario", {}),
               **_env_overrides("scenario", _scenario_names(), environ), **sets["scenario"]}
    tr_over = {**file_cfg.get("train", {}),
               **_env_overrides("train", _train_names(), environ), **sets["train"]}
    for k in ("cost_vector", "n_levels", "init_clip"):
        if k in sc_over:
            sc_over[k] = tuple(sc_over[k])
    try:
        scenario = make_scenario(args.scenario, **sc_over)
        if getattr(args, "seed", None) is not None:
            tr_over["seed"] = args.seed
        train_cfg = TrainConfig.from_dict(tr_over)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return scenario, train_cfg


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: invalid JSON ({exc})") from None


# ------------------------------------------------------------------ weather

def parse_years(text: str) -> list[int]:
    years = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            years.extend(range(int(a), int(b) + 1))
        elif part:
            years.append(int(part))
    if not years:
        raise ConfigError(f"no years in {text!r}")
    return years


def load_weather(args, split: str):
    """Weather years for ``split`` ('train' = odd years, 'eval' = even, 'all')."""
    if args.weather_dir:
        d = Path(args.weather_dir)
        if not d.is_dir():
            raise DataError(f"weather directory not found: {d}")
        files = sorted(d.glob("*.csv"))
        if not files:
            raise DataError(f"no .csv files in {d}")
        years = [load_weather_csv(f) for f in files]
        if args.years:
            wanted = set(parse_years(args.years))
            years = [y for y in years if y.year_number in wanted]
    else:
        if args.climate not in PRESETS:
            raise ConfigError(f"unknown climate {args.climate!r}; known: {sorted(PRESETS)}")
        years = synthetic_year_set(parse_years(args.years or DEFAULT_YEARS), args.climate,
                                   prefix=f"{args.climate}-")
    if split != "all":
        train_years, eval_years = split_by_parity(years)
        years = train_years if split == "train" else eval_years
    if not years:
        raise DataError(f"no weather years left for the {split} split")
    return years


def _weather_desc(args, years):
    return {"source": "csv" if args.weather_dir else f"synthetic:{args.climate}",
            "labels": [y.label for y in years]}


# ------------------------------------------------------------------ commands

def _manifest_args(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "out"):
            continue
        if k in ("stats", "checkpoint", "config", "weather_dir") and v:
            v = Path(v).name
        if k == "runs" and v:
            v = [Path(r).name for r in v]
        out[k] = v
    return out


def _write_json(path: Path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def cmd_show_config(args) -> int:
    scenario, train_cfg = build_configs(args)
    doc = {"scenario": scenario.to_dict(), "train": train_cfg.to_dict(),
           "crop_params": load_params().to_dict(),
           "scenarios": list(SCENARIO_NAMES), "baselines": list(BASELINES),
           "env_prefix": ENV_PREFIX}
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_calibrate(args) -> int:
    scenario, _ = build_configs(args)
    years = load_weather(args, "train")
    stats = calibrate_normalization(scenario, years, args.episodes, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, stats.to_dict())
    print(f"wrote {out}")
    return 0


def _load_stats(path, scenario, years, seed=0) -> NormalizationStats:
    if path:
        try:
            return NormalizationStats.from_dict(_read_json(path))
        except (KeyError, ValueError, TypeError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{path}: bad normalization stats ({exc})") from None
    log.info("no --stats given; calibrating on the training years")
    return calibrate_normalization(scenario, years, 20, seed)


def cmd_train(args) -> int:
    scenario, cfg = build_configs(args)
    years = load_weather(args, "train")
    stats = _load_stats(args.stats, scenario, years)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    progress = None if args.quiet else sys.stderr
    if progress:
        print(f"training {scenario.name} seed {cfg.seed} for {cfg.total_steps} steps",
              file=progress)
    train(scenario, years, cfg, stats, out_dir=out,
          extra={"weather": _weather_desc(args, years)})
    files = {n: file_sha256(out / n) for n in ("checkpoint.npz", "train_log.csv")}
    _write_json(out / "manifest.json", {
        "command": "train", "args": _manifest_args(args), "seed": cfg.seed,
        "scenario": scenario.to_dict(), "train_config": cfg.to_dict(),
        "stats": stats.to_dict(), "weather": _weather_desc(args, years), "files": files})
    print(f"wrote {out}")
    return 0


def _load_checkpoint(path):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint not found: {p}")
    try:
        return ActorCritic.load(p)
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"{p}: unreadable checkpoint ({exc})") from None


def run_policy(policy: ActorCritic, scenario: ScenarioConfig, stats: NormalizationStats,
               years, seed: int, episodes_per_year: int = 1, stochastic: bool = False):
    """Evaluation episodes: one rng stream gives episode seeds and, with
    ``stochastic``, the action samples."""
    env = CropEnv(scenario, stats)
    rng = np.random.default_rng(seed)
    records = []
    for year in years:
        for _ in range(episodes_per_year):
            obs = env.reset(year, int(rng.integers(2**31 - 1)))
            hidden = policy.initial_hidden(1)
            done = False
            while not done:
                out = policy.forward(obs[None], hidden)
                acts, _, _ = sample_action(out, rng, greedy=not stochastic)
                obs, _, done, _ = env.step(acts.to_agent_actions()[0])
                hidden = out.next_hidden
            records.append(env.record)
    return records


def _traces(records) -> dict[str, str]:
    traces = {}
    for r in records:
        traces.setdefault(r.weather_label, export_trace(r))
    return traces


def cmd_evaluate(args) -> int:
    policy = _load_checkpoint(args.checkpoint)
    meta = policy.checkpoint_meta.get("extra", {})
    if args.scenario:
        scenario, _ = build_configs(args)
    elif "scenario" in meta:
        scenario = ScenarioConfig.from_dict(meta["scenario"])
    else:
        raise ConfigError("checkpoint names no scenario; pass --scenario")
    years = load_weather(args, args.split)
    if args.stats:
        stats = _load_stats(args.stats, scenario, years)
    elif "stats" in meta:
        stats = NormalizationStats.from_dict(meta["stats"])
    else:
        raise ConfigError("checkpoint carries no normalization stats; pass --stats")
    if scenario.n_measure_actions != policy.n_measure or scenario.n_fert != policy.n_fert:
        raise ConfigError("checkpoint action space does not match the scenario")
    records = run_policy(policy, scenario, stats, years, args.seed, args.episodes_per_year,
                         args.stochastic)
    manifest = {"command": "evaluate", "args": _manifest_args(args), "seed": args.seed,
                "scenario": scenario.to_dict(), "policy": "agent",
                "action_selection": "stochastic" if args.stochastic else "greedy",
                "checkpoint_sha256": file_sha256(args.checkpoint),
                "stats": stats.to_dict(), "weather": _weather_desc(args, years)}
    write_bundle(args.out, episode_rows(records, "agent"), _traces(records), manifest,
                 bins=args.bins, resamples=args.resamples, seed=args.seed)
    print(f"wrote {args.out}")
    return 0


def cmd_baseline(args) -> int:
    scenario, _ = build_configs(args)
    years = load_weather(args, args.split)
    records = run_baseline(args.name, scenario, years, args.seed,
                           episodes_per_year=args.episodes_per_year)
    manifest = {"command": "baseline", "args": _manifest_args(args), "seed": args.seed,
                "scenario": scenario.to_dict(), "policy": args.name,
                "weather": _weather_desc(args, years)}
    write_bundle(args.out, episode_rows(records, args.name), _traces(records), manifest,
                 bins=args.bins, resamples=args.resamples, seed=args.seed)
    print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    rows, sources = [], []
    for run in args.runs:
        p = Path(run) / "episodes.csv"
        if not p.is_file():
            raise DataError(f"not an evaluation bundle (no episodes.csv): {run}")
        try:
            rows.extend(read_episodes_csv(p))
        except (ValueError, KeyError) as exc:
            raise DataError(str(exc)) from None
        sources.append({"run": Path(run).name, "episodes_sha256": file_sha256(p)})
    manifest = {"command": "report", "args": _manifest_args(args), "sources": sources}
    write_bundle(args.out, rows, {}, manifest, bins=args.bins, resamples=args.resamples,
                 seed=args.seed)
    print(f"wrote {args.out}")
    return 0


# ------------------------------------------------------------------ parser

def _add_scenario(p, required=True):
    p.add_argument("--scenario", required=required,
                   help=f"one of {', '.join(SCENARIO_NAMES)}")
    p.add_argument("--config", help="JSON file with optional 'scenario' and 'train' sections")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a setting, e.g. train.total_steps=5000 (repeatable)")


def _add_weather(p, split_default=None):
    g = p.add_argument_group("weather")
    g.add_argument("--weather-dir", help="directory of weather CSV files, one year per file")
    g.add_argument("--climate", default="normal", help="synthetic climate preset (normal, cold)")
    g.add_argument("--years", help=f"year list such as 1990-2022 or 1991,1993 "
                                   f"(synthetic default {DEFAULT_YEARS})")
    if split_default:
        g.add_argument("--split", choices=("train", "eval", "all"), default=split_default,
                       help="odd years train, even years eval")


def _add_bundle(p):
    p.add_argument("--bins", type=int, default=None, help="temporal profile bins (default: weeks)")
    p.add_argument("--resamples", type=int, default=10_000, help="bootstrap resamples")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cropafa", description=__doc__.split("\n\n")[0])
    ap.add_argument("--threads", type=int, default=1,
                    help="BLAS threads (1 guarantees reproducible output)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("show-config", help="print the effective configuration as JSON")
    _add_scenario(p, required=False)
    p.set_defaults(func=cmd_show_config, scenario="realistic", seed=None)

    p = sub.add_parser("calibrate", help="derive feature normalization stats")
    _add_scenario(p)
    _add_weather(p)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="stats JSON path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="train an agent on the training years")
    _add_scenario(p)
    _add_weather(p)
    p.add_argument("--stats", help="stats JSON from 'calibrate' (calibrated on the fly if absent)")
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint and write a report bundle")
    p.add_argument("--checkpoint", required=True)
    _add_scenario(p, required=False)
    _add_weather(p, split_default="eval")
    p.add_argument("--stats", help="override the stats stored in the checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes-per-year", type=int, default=1)
    p.add_argument("--stochastic", action="store_true", help="sample actions instead of the mode")
    _add_bundle(p)
    p.add_argument("--out", required=True, help="bundle directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="run a scripted baseline and write a report bundle")
    p.add_argument("--name", required=True, choices=BASELINES)
    _add_scenario(p)
    _add_weather(p, split_default="eval")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes-per-year", type=int, default=1)
    _add_bundle(p)
    p.add_argument("--out", required=True, help="bundle directory")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", help="merge evaluation bundles into aggregate tables")
    p.add_argument("runs", nargs="+", help="bundle directories")
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    _add_bundle(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def _thread_limit(n: int):
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except (ConfigError, ScenarioError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, WeatherDataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError, NonFiniteStateError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
