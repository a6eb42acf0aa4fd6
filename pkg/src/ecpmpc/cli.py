"""Command line entry point: ``ecpmpc run | coverage-audit | ingest | selftest``.

Experiments are described by an INI file; see ``configs/`` for examples and
the README for the full key list.  Command line flags override file keys,
and ``--set section.key=value`` overrides anything.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .datasets import (
    DatasetError,
    FormatSpec,
    ScenarioTimeline,
    load_annotations,
    random_crowd,
    synthetic_scenario,
)
from .geometry import ControlInput, GoalSpec, VehicleState
from .planner import SafetyConfig
from .predictor import BiasedPredictor, ConstantVelocityPredictor, MalformedFileError, load_precomputed_predictions
from .sim import (
    ConfigError,
    EpisodeConfig,
    EpisodeTruncated,
    MetricsReport,
    compute_metrics,
    read_coverage_csv,
    run_episode,
    running_coverage,
)

log = logging.getLogger("ecpmpc")

OUTPUT_ENV = "ECPMPC_OUTPUT_DIR"
DATA_ENV = "ECPMPC_DATA_DIR"
SUMMARY_COLUMNS = ("scenario", "controller", "episodes", "Collis.", "Cost", "Trav.", "Infeas.")

DEFAULTS = {
    "scenario": {
        "source": "synthetic",
        "name": "",
        "path": "",
        "data_dir": ".",
        "delimiter": "whitespace",
        "columns": "frame,id,x,y",
        "frame_rate": "",
        "native_step": "",
        "max_gap": "2",
        "padding": "1.0",
    },
    "synthetic": {
        "n_agents": "12",
        "bounds": "-8,8,-8,8",
        "n_frames": "400",
        "seed": "0",
        "noise_std": "0.0",
        "circular_fraction": "0.3",
        "speed": "0.4,1.2",
    },
    "episode": {
        "controller": "ecp",
        "t_max": "100",
        "history": "8",
        "horizon": "12",
        "n_epochs": "3",
        "window": "30",
        "gamma": "0.03",
        "target_alpha": "0.1",
        "initial_alpha": "",
        "r_safe": "0.3",
        "state_bounds": "scene",
        "start": "-6,-6,0.785",
        "goal": "6,6",
        "arrival_radius": "0.5",
        "start_frame": "",
        "start_stride": "0",
        "calibrate": "all",
        "predictor": "constant_velocity",
        "bias": "0,0",
    },
    "run": {
        "controllers": "",
        "repeat": "1",
        "seed_base": "0",
        "jobs": "1",
    },
}


class CliError(Exception):
    """A user-facing failure: reported on stderr with a nonzero exit."""


def _floats(text: str, n: int | None = None, key: str = "") -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.replace(" ", "").split(",") if t)
    except ValueError:
        raise ConfigError(key, f"expected comma separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ConfigError(key, f"expected {n} numbers, got {len(vals)}")
    return vals


@dataclass
class Experiment:
    """A parsed configuration file plus command line overrides."""

    parser: configparser.ConfigParser
    base_dir: Path

    @classmethod
    def load(cls, path: str | None, overrides: list[str] = ()) -> "Experiment":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        cp.read_dict(DEFAULTS)
        base = Path.cwd()
        if path:
            p = Path(path)
            if not p.is_file():
                raise CliError(f"config file {path} not found")
            try:
                cp.read(p)
            except configparser.Error as exc:
                raise CliError(f"{path}: {exc}") from None
            base = p.resolve().parent
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, option = key.strip().partition(".")
            if not (sep and dot) or section not in DEFAULTS:
                raise CliError(f"override {item!r} must look like section.key=value")
            if option not in DEFAULTS[section]:
                raise ConfigError(key, "unknown key")
            cp.set(section, option, value.strip())
        for section in cp.sections():
            if section not in DEFAULTS:
                raise ConfigError(section, "unknown section")
            unknown = set(cp[section]) - set(DEFAULTS[section])
            if unknown:
                raise ConfigError(f"{section}.{sorted(unknown)[0]}", "unknown key")
        return cls(cp, base)

    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key).strip()

    def num(self, section: str, key: str, kind=float):
        text = self.get(section, key)
        try:
            return kind(text)
        except ValueError:
            raise ConfigError(f"{section}.{key}", f"expected {kind.__name__}, got {text!r}") from None

    def maybe(self, section: str, key: str, kind=float):
        return self.num(section, key, kind) if self.get(section, key) else None

    # -- scenario ------------------------------------------------------------

    def data_path(self) -> Path:
        path = Path(self.get("scenario", "path"))
        if not str(path):
            raise ConfigError("scenario.path", "required for this source")
        if path.is_absolute():
            return path
        root = os.environ.get(DATA_ENV) or (self.base_dir / self.get("scenario", "data_dir"))
        return Path(root) / path

    def format_spec(self) -> FormatSpec:
        try:
            return FormatSpec(
                delimiter=self.get("scenario", "delimiter"),
                columns=tuple(c.strip() for c in self.get("scenario", "columns").split(",")),
                native_step=self.maybe("scenario", "native_step", int),
                frame_rate=self.maybe("scenario", "frame_rate"),
                max_gap=self.num("scenario", "max_gap", int),
                padding=self.num("scenario", "padding"),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError("scenario", str(exc)) from None

    def scenario(self, seed_offset: int = 0) -> ScenarioTimeline:
        source = self.get("scenario", "source")
        name = self.get("scenario", "name") or None
        if source == "synthetic":
            spec = random_crowd(
                self.num("synthetic", "n_agents", int),
                _floats(self.get("synthetic", "bounds"), 4, "synthetic.bounds"),
                self.num("synthetic", "n_frames", int),
                seed=self.num("synthetic", "seed", int) + seed_offset,
                speed=_floats(self.get("synthetic", "speed"), 2, "synthetic.speed"),
                circular_fraction=self.num("synthetic", "circular_fraction"),
                noise_std=self.num("synthetic", "noise_std"),
                name=name or "synthetic",
            )
            return synthetic_scenario(spec)
        path = self.data_path()
        if not path.is_file():
            raise CliError(f"dataset file {path} not found (set {DATA_ENV} or scenario.data_dir)")
        if source == "annotations":
            return load_annotations(path, self.format_spec(), name)
        if source == "cache":
            return ScenarioTimeline.from_jsonl(path, name, padding=self.num("scenario", "padding"))
        raise ConfigError("scenario.source", f"must be synthetic, annotations or cache, got {source!r}")

    # -- episodes ------------------------------------------------------------

    def controllers(self, flag: str | None) -> list[str]:
        text = flag or self.get("run", "controllers") or self.get("episode", "controller")
        return [c.strip() for c in text.split(",") if c.strip()]

    def episode(self, scenario: ScenarioTimeline, controller: str, k: int, seed: int) -> EpisodeConfig:
        e = "episode"
        start = _floats(self.get(e, "start"), None, "episode.start")
        if len(start) not in (2, 3):
            raise ConfigError("episode.start", "expected x,y or x,y,theta")
        goal = _floats(self.get(e, "goal"), 2, "episode.goal")
        bounds_text = self.get(e, "state_bounds")
        if bounds_text == "scene":
            bounds = scenario.scene_bounds
        elif bounds_text == "none":
            bounds = SafetyConfig().state_bounds
        else:
            bounds = _floats(bounds_text, 4, "episode.state_bounds")
        try:
            safety = SafetyConfig(self.num(e, "r_safe"), tuple(bounds), self.num(e, "target_alpha"),
                                  ControlInput(0.0, 0.0))
        except ValueError as exc:
            raise ConfigError("episode.r_safe", str(exc)) from None
        horizon = self.num(e, "horizon", int)
        first = self.maybe(e, "start_frame", int)
        first = scenario.first_frame if first is None else first
        cfg = EpisodeConfig(
            scenario=scenario,
            start_state=VehicleState(*start),
            goal=GoalSpec(goal[0], goal[1], arrival_radius=self.num(e, "arrival_radius")),
            controller=controller,
            t_max=self.num(e, "t_max", int),
            history=self.num(e, "history", int),
            horizon=horizon,
            n_epochs=self.num(e, "n_epochs", int),
            window=self.num(e, "window", int),
            gamma=self.num(e, "gamma"),
            target_alpha=self.num(e, "target_alpha"),
            safety=safety,
            seed=seed,
            start_frame=first + k * self.num(e, "start_stride", int),
            predictor=self.predictor(horizon),
            initial_alpha=self.maybe(e, "initial_alpha"),
            calibrate=self.get(e, "calibrate"),
        )
        cfg.validate()
        return cfg

    def predictor(self, horizon: int):
        name = self.get("episode", "predictor")
        if name == "constant_velocity":
            base = ConstantVelocityPredictor(horizon)
        else:
            path = Path(name) if Path(name).is_absolute() else self.base_dir / name
            if not path.is_file():
                raise CliError(f"prediction file {path} not found")
            base = load_precomputed_predictions(path, horizon)
        bias = _floats(self.get("episode", "bias"), 2, "episode.bias")
        return BiasedPredictor(base, bias) if any(bias) else base


def _episode_dir(out: Path, scenario: str, controller: str, k: int) -> Path:
    return out / scenario / controller / f"episode_{k:03d}"


def _run_one(cfg: EpisodeConfig, dest: Path) -> tuple[Path, MetricsReport, str | None]:
    warning = None
    try:
        episode = run_episode(cfg)
    except EpisodeTruncated as exc:
        episode, warning = exc.log, str(exc)
    if not episode.records:
        raise CliError(f"{dest}: episode produced no steps ({warning or 'arrived at start'})")
    dest.mkdir(parents=True, exist_ok=True)
    episode.write_steps_csv(dest / "steps.csv")
    episode.write_radii_csv(dest / "radii.csv")
    episode.write_coverage_csv(dest / "coverage.csv")
    metrics = compute_metrics(episode, cfg)
    metrics.to_json(dest / "metrics.json")
    return dest, metrics, warning


def write_summary(out: Path) -> Path:
    """Aggregate every ``metrics.json`` below ``out`` into ``summary.csv``."""
    groups: dict[tuple[str, str], list[MetricsReport]] = {}
    for path in sorted(out.glob("*/*/episode_*/metrics.json")):
        m = MetricsReport.from_json(path)
        groups.setdefault((m.scenario, m.controller), []).append(m)
    if not groups:
        raise CliError(f"no metrics.json files under {out}")
    dest = out / "summary.csv"
    with dest.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for (scen, ctrl), ms in sorted(groups.items()):
            n = len(ms)
            w.writerow([
                scen, ctrl, n,
                f"{math.fsum(m.collision_rate for m in ms) / n:.4f}",
                f"{math.fsum(m.average_cost for m in ms) / n:.4f}",
                f"{math.fsum(m.travel_time for m in ms) / n:.2f}",
                f"{math.fsum(m.infeasibility_rate for m in ms) / n:.4f}",
            ])
    return dest


def read_summary(path) -> dict[tuple[str, str], dict[str, float]]:
    with Path(path).open(newline="") as fh:
        return {
            (row["scenario"], row["controller"]): {k: float(row[k]) for k in SUMMARY_COLUMNS[2:]}
            for row in csv.DictReader(fh)
        }


def _output_dir(flag: str | None) -> Path:
    out = flag or os.environ.get(OUTPUT_ENV) or "ecpmpc_out"
    return Path(out)


def cmd_run(args) -> int:
    exp = Experiment.load(args.config, args.set)
    repeat = args.repeat if args.repeat is not None else exp.num("run", "repeat", int)
    seed_base = args.seed_base if args.seed_base is not None else exp.num("run", "seed_base", int)
    jobs = args.jobs if args.jobs is not None else exp.num("run", "jobs", int)
    if repeat < 1:
        raise ConfigError("run.repeat", "must be >= 1")
    out = _output_dir(args.output)
    controllers = exp.controllers(args.controller)

    jobs_list = []
    recorded = None if exp.get("scenario", "source") == "synthetic" else exp.scenario()
    for k in range(repeat):
        seed = seed_base + k
        # synthetic crowds are regenerated per seed; recorded scenes vary by start frame
        scenario = recorded or exp.scenario(seed_offset=seed)
        for ctrl in controllers:
            cfg = exp.episode(scenario, ctrl, k, seed)
            jobs_list.append((cfg, _episode_dir(out, scenario.name, ctrl, k)))
    out.mkdir(parents=True, exist_ok=True)

    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, *zip(*jobs_list)))
    else:
        results = [_run_one(cfg, dest) for cfg, dest in jobs_list]
    for dest, m, warning in results:
        if warning:
            log.warning("%s", warning)
        print(f"{dest}: Collis.={m.collision_rate:.3f} Cost={m.average_cost:.3f} "
              f"Trav.={m.travel_time} Infeas.={m.infeasibility_rate:.3f}")
    summary = write_summary(out)
    print(f"summary written to {summary}")
    return 0


def cmd_coverage_audit(args) -> int:
    out = _output_dir(args.output)
    logs = sorted(out.glob("*/*/episode_*/coverage.csv"))
    if not logs:
        raise CliError(f"no coverage logs under {out}; run episodes first")
    for path in logs:
        controller = path.parent.parent.name
        events = read_coverage_csv(path)
        if not events:
            raise CliError(f"{path}: coverage log is empty")
        series = running_coverage(controller, events)
        dest = path.with_name("coverage_audit.csv")
        with dest.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("step", "series", "running_coverage"))
            for key in sorted(series, key=lambda s: (s[0], int(s[1:]))):
                for step, value in enumerate(series[key], 1):
                    w.writerow((step, key, repr(value)))
        finals = ", ".join(f"{k}={v[-1]:.3f}" for k, v in sorted(series.items(), key=lambda kv: (kv[0][0], int(kv[0][1:]))))
        print(f"{dest}: {finals}")
    return 0


def cmd_ingest(args) -> int:
    fmt = FormatSpec()
    if args.config:
        exp = Experiment.load(args.config, args.set)
        fmt = exp.format_spec()
    path = Path(args.path)
    if not path.is_file():
        raise CliError(f"annotation file {path} not found")
    timeline = load_annotations(path, fmt, args.scene)
    cache = Path(args.cache) if args.cache else _output_dir(args.output) / f"{timeline.name}.jsonl"
    cache.parent.mkdir(parents=True, exist_ok=True)
    timeline.to_jsonl(cache)
    xmin, xmax, ymin, ymax = timeline.scene_bounds
    print(json.dumps({
        "scene": timeline.name,
        "frames": len(timeline),
        "pedestrians": len(timeline.obstacle_ids()),
        "bounds": [xmin, xmax, ymin, ymax],
        "cache": str(cache),
    }))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    failures = 0
    for name, ok, detail in run_all(seed=args.seed, quick=not args.full):
        failures += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecpmpc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("config", nargs="?", help="INI experiment file")
            p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("-o", "--output", help=f"output directory (default ${OUTPUT_ENV} or ./ecpmpc_out)")

    p = sub.add_parser("run", help="run closed-loop episodes")
    common(p)
    p.add_argument("--controller", help="ecp, acp or a comma separated list")
    p.add_argument("--repeat", type=int)
    p.add_argument("--seed-base", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("coverage-audit", help="running coverage series from completed runs")
    common(p, config=False)
    p.set_defaults(func=cmd_coverage_audit)

    p = sub.add_parser("ingest", help="load an annotation file and write its timeline cache")
    p.add_argument("path")
    p.add_argument("scene")
    p.add_argument("--config", help="INI file whose [scenario] section gives the format")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--cache", help="cache file (default OUTPUT/SCENE.jsonl)")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("selftest", help="run the invariant suites on random instances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full", action="store_true", help="acceptance-sized instance counts")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (CliError, DatasetError, MalformedFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
