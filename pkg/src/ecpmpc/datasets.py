"""Pedestrian scenes: annotation loading, resampling, and synthetic crowds."""
from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .geometry import ObstacleSet

FRAME_PERIOD = 0.4  # 2.5 Hz
DELIMITERS = {"tab": "\t", "comma": ",", "space": " ", "whitespace": None}


class DatasetError(ValueError):
    def __init__(self, path, lineno: int | None, reason: str):
        where = f"{path}:{lineno}" if lineno is not None else str(path)
        super().__init__(f"{where}: {reason}")
        self.path = path
        self.lineno = lineno


class ScenarioExhausted(IndexError):
    """A frame past the end (or before the start) of a timeline was requested."""


@dataclass
class ScenarioTimeline:
    name: str
    frames: list[ObstacleSet]
    first_frame: int = 0
    frame_period: float = FRAME_PERIOD
    scene_bounds: tuple[float, float, float, float] = (-10.0, 10.0, -10.0, 10.0)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def last_frame(self) -> int:
        return self.first_frame + len(self.frames) - 1

    def at(self, frame: int) -> ObstacleSet:
        k = frame - self.first_frame
        if not 0 <= k < len(self.frames):
            raise ScenarioExhausted(
                f"frame {frame} outside {self.name} [{self.first_frame}, {self.last_frame}]"
            )
        return self.frames[k]

    def items(self) -> Iterator[tuple[int, ObstacleSet]]:
        for k, obs in enumerate(self.frames):
            yield self.first_frame + k, obs

    def obstacle_ids(self) -> set[str]:
        return {oid for obs in self.frames for oid in obs.ids}

    def to_jsonl(self, path) -> None:
        """Write the canonical cache: one ``{frame, id, x, y}`` object per line."""
        with Path(path).open("w") as fh:
            for frame, obs in self.items():
                for oid, (x, y) in obs:
                    fh.write(json.dumps({"frame": frame, "id": oid, "x": x, "y": y}) + "\n")

    @classmethod
    def from_jsonl(cls, path, name: str | None = None, frame_period: float = FRAME_PERIOD,
                   padding: float = 1.0) -> "ScenarioTimeline":
        path = Path(path)
        rows: dict[int, list[tuple[str, float, float]]] = defaultdict(list)
        with path.open() as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    rows[int(obj["frame"])].append((str(obj["id"]), float(obj["x"]), float(obj["y"])))
                except (ValueError, KeyError, TypeError) as exc:
                    raise DatasetError(path, lineno, f"bad cache row: {exc}") from None
        if not rows:
            raise DatasetError(path, None, "empty timeline cache")
        return _timeline_from_rows(name or path.stem.split(".")[0], rows, frame_period, padding)


def _timeline_from_rows(name, rows, frame_period, padding) -> ScenarioTimeline:
    first, last = min(rows), max(rows)
    frames = []
    for f in range(first, last + 1):
        entries = rows.get(f, [])
        frames.append(ObstacleSet([e[0] for e in entries], [(e[1], e[2]) for e in entries]))
    return ScenarioTimeline(name, frames, first, frame_period, _bounds(frames, padding))


def _bounds(frames: Sequence[ObstacleSet], padding: float, default=(-10.0, 10.0, -10.0, 10.0)):
    pts = [obs.points for obs in frames if len(obs)]
    if not pts:
        return default
    allp = np.concatenate(pts)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    return (float(lo[0] - padding), float(hi[0] + padding), float(lo[1] - padding), float(hi[1] + padding))


# ---------------------------------------------------------------------------
# raw annotations


@dataclass(frozen=True)
class FormatSpec:
    """How to read one raw annotation file.

    ``columns`` names the role of each column (``frame``, ``id``, ``x``,
    ``y``; anything else is ignored).  ``native_step`` is the spacing of
    consecutive annotation samples in frame-index units and is inferred when
    omitted.  ``frame_rate`` (frame-index units per second) fixes the output
    grid spacing at ``frame_rate * frame_period``; without it the native
    sampling is assumed to already be 2.5 Hz.
    """

    delimiter: str = "whitespace"
    columns: tuple[str, ...] = ("frame", "id", "x", "y")
    native_step: int | None = None
    frame_rate: float | None = None
    max_gap: int = 2
    frame_period: float = FRAME_PERIOD
    padding: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        missing = {"frame", "id", "x", "y"} - set(self.columns)
        if missing:
            raise ValueError(f"format columns lack {sorted(missing)}")
        if self.delimiter not in DELIMITERS and len(self.delimiter) != 1:
            raise ValueError(f"unknown delimiter {self.delimiter!r}")


def _as_int(token: str) -> int:
    value = float(token)
    if not value.is_integer():
        raise ValueError(f"expected an integer, got {token!r}")
    return int(value)


def _read_rows(path: Path, fmt: FormatSpec) -> list[tuple[int, int, float, float, int]]:
    sep = DELIMITERS.get(fmt.delimiter, fmt.delimiter)
    col = {name: k for k, name in enumerate(fmt.columns)}
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = [p.strip() for p in line.strip().split(sep)] if sep else line.split()
            try:
                if len(parts) < len(fmt.columns):
                    raise ValueError(f"expected {len(fmt.columns)} columns, got {len(parts)}")
                frame = _as_int(parts[col["frame"]])
                pid = _as_int(parts[col["id"]])
                x = float(parts[col["x"]])
                y = float(parts[col["y"]])
                if not (math.isfinite(x) and math.isfinite(y)):
                    raise ValueError("non-finite position")
            except ValueError as exc:
                raise DatasetError(path, lineno, str(exc)) from None
            rows.append((frame, pid, x, y, lineno))
    if not rows:
        raise DatasetError(path, None, "no annotation rows")
    return rows


def _infer_native_step(rows) -> int:
    frames = sorted({r[0] for r in rows})
    diffs = Counter(b - a for a, b in zip(frames, frames[1:]))
    if not diffs:
        return 1
    return diffs.most_common(1)[0][0]


def load_annotations(path, fmt: FormatSpec | None = None, name: str | None = None) -> ScenarioTimeline:
    """Load ``frame id x y`` rows and resample them onto a uniform 2.5 Hz grid.

    Tracks are linearly interpolated across gaps of up to ``fmt.max_gap``
    missing native samples and split into separate segments beyond that.
    Segment ``j > 0`` of pedestrian ``p`` gets the composite id ``"p#j"``.
    """
    fmt = fmt or FormatSpec()
    path = Path(path)
    rows = _read_rows(path, fmt)
    native = fmt.native_step or _infer_native_step(rows)
    if fmt.frame_rate is not None:
        grid = fmt.frame_rate * fmt.frame_period
        if not math.isclose(grid, round(grid)):
            raise DatasetError(path, None, f"grid spacing {grid} is not a whole number of frames")
        grid = int(round(grid))
    else:
        grid = native
    origin = min(r[0] for r in rows)

    tracks: dict[int, list[tuple[int, float, float, int]]] = defaultdict(list)
    for frame, pid, x, y, lineno in rows:
        tracks[pid].append((frame, x, y, lineno))

    out: dict[int, list[tuple[str, float, float]]] = defaultdict(list)
    for pid in sorted(tracks):
        samples = sorted(tracks[pid])
        for a, b in zip(samples, samples[1:]):
            if a[0] == b[0]:
                raise DatasetError(path, b[3], f"pedestrian {pid} annotated twice at frame {a[0]}")
        segments = [[samples[0]]]
        for prev, cur in zip(samples, samples[1:]):
            if cur[0] - prev[0] > (fmt.max_gap + 1) * native:
                segments.append([])
            segments[-1].append(cur)
        for j, seg in enumerate(segments):
            oid = str(pid) if j == 0 else f"{pid}#{j}"
            fr = np.array([s[0] for s in seg], dtype=float)
            xs = np.array([s[1] for s in seg])
            ys = np.array([s[2] for s in seg])
            k0 = -(-(seg[0][0] - origin) // grid)
            k1 = (seg[-1][0] - origin) // grid
            if k1 < k0:
                continue
            ks = np.arange(k0, k1 + 1)
            t = origin + ks * grid
            px = np.interp(t, fr, xs)
            py = np.interp(t, fr, ys)
            for k, x, y in zip(ks, px, py):
                out[int(k)].append((oid, float(x), float(y)))

    if not out:
        raise DatasetError(path, None, "no track reaches a resampled frame")
    for k in out:
        out[k].sort()
    return _timeline_from_rows(name or path.stem, out, fmt.frame_period, fmt.padding)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class AgentSpec:
    """One parametric agent.

    ``linear``: starts at ``position`` moving with ``velocity`` (m/s); each
    ``jumps`` entry ``(frame, (vx, vy))`` switches the velocity from that
    frame on.  ``circular``: orbits ``position`` at ``radius`` with
    ``angular_speed`` (rad/s) from angle ``phase``.  ``stationary``: stays
    at ``position``.  The agent exists on frames ``[start_frame, end_frame)``.
    """

    kind: str
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    jumps: tuple = ()
    radius: float = 0.0
    angular_speed: float = 0.0
    phase: float = 0.0
    start_frame: int = 0
    end_frame: int | None = None
    wrap: bool = False
    agent_id: str | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "circular", "stationary"):
            raise ValueError(f"unknown agent kind {self.kind!r}")
        object.__setattr__(self, "jumps", tuple((int(f), tuple(v)) for f, v in self.jumps))


@dataclass(frozen=True)
class SyntheticSpec:
    agents: tuple[AgentSpec, ...] = ()
    n_frames: int = 200
    frame_period: float = FRAME_PERIOD
    noise_std: float = 0.0
    seed: int = 0
    bounds: tuple[float, float, float, float] | None = None
    name: str = "synthetic"

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        data = dict(data)
        agents = tuple(AgentSpec(**a) for a in data.pop("agents", ()))
        if data.get("bounds") is not None:
            data["bounds"] = tuple(data["bounds"])
        return cls(agents=agents, **data)


def _agent_track(agent: AgentSpec, n_frames: int, h: float, bounds) -> tuple[np.ndarray, np.ndarray]:
    """Positions per frame plus the number of boundary wraps so far."""
    laps = np.zeros(n_frames, dtype=int)
    t = np.arange(n_frames, dtype=float)
    p0 = np.asarray(agent.position, dtype=float)
    if agent.kind == "stationary":
        track = np.tile(p0, (n_frames, 1))
    elif agent.kind == "circular":
        ang = agent.phase + agent.angular_speed * h * t
        track = p0 + agent.radius * np.column_stack([np.cos(ang), np.sin(ang)])
    else:
        track = np.empty((n_frames, 2))
        anchor_frame, anchor = 0, p0
        vel = np.asarray(agent.velocity, dtype=float)
        pieces = [(f, np.asarray(v, dtype=float)) for f, v in sorted(agent.jumps)] + [(n_frames, None)]
        for switch, new_vel in pieces:
            seg = np.arange(anchor_frame, min(switch, n_frames))
            track[seg] = anchor + ((seg - anchor_frame)[:, None] * h) * vel
            if new_vel is None or switch >= n_frames:
                break
            anchor = anchor + ((switch - anchor_frame) * h) * vel
            anchor_frame, vel = switch, new_vel
        if agent.wrap and bounds is not None:
            xmin, xmax, ymin, ymax = bounds
            kx = np.floor_divide(track[:, 0] - xmin, xmax - xmin)
            ky = np.floor_divide(track[:, 1] - ymin, ymax - ymin)
            track[:, 0] -= kx * (xmax - xmin)
            track[:, 1] -= ky * (ymax - ymin)
            # every wrap counts as a fresh agent entering the scene
            laps = np.concatenate([[0], np.cumsum((np.diff(kx) != 0) | (np.diff(ky) != 0))])
    return track, laps


def synthetic_scenario(spec: SyntheticSpec) -> ScenarioTimeline:
    """Deterministic timeline generated from ``spec`` (and its seed)."""
    n = spec.n_frames
    rng = np.random.default_rng(spec.seed)
    tracks, laps = zip(*[_agent_track(a, n, spec.frame_period, spec.bounds) for a in spec.agents]) if spec.agents else ((), ())
    if spec.noise_std > 0 and tracks:
        jitter = rng.normal(0.0, spec.noise_std, size=(len(tracks), n, 2))
        tracks = [tr + jitter[k] for k, tr in enumerate(tracks)]
    ids = [a.agent_id or f"a{k}" for k, a in enumerate(spec.agents)]
    frames = []
    for f in range(n):
        live = [
            k for k, a in enumerate(spec.agents)
            if a.start_frame <= f and (a.end_frame is None or f < a.end_frame)
        ]
        names = [ids[k] if laps[k][f] == 0 else f"{ids[k]}#{laps[k][f]}" for k in live]
        frames.append(ObstacleSet(names, [tracks[k][f] for k in live]))
    bounds = spec.bounds or _bounds(frames, 1.0)
    return ScenarioTimeline(spec.name, frames, 0, spec.frame_period, bounds)


def random_crowd(n_agents: int, bounds, n_frames: int, seed: int = 0, speed=(0.4, 1.2),
                 circular_fraction: float = 0.3, noise_std: float = 0.0, name: str = "crowd") -> SyntheticSpec:
    """A stationary crowd: wrapping straight walkers plus a few orbiting agents."""
    rng = np.random.default_rng(seed)
    xmin, xmax, ymin, ymax = bounds
    agents = []
    for k in range(n_agents):
        pos = (float(rng.uniform(xmin, xmax)), float(rng.uniform(ymin, ymax)))
        if rng.uniform() < circular_fraction:
            agents.append(AgentSpec(
                "circular", pos,
                radius=float(rng.uniform(0.5, 2.0)),
                angular_speed=float(rng.choice([-1, 1]) * rng.uniform(0.3, 0.8)),
                phase=float(rng.uniform(0, 2 * math.pi)),
            ))
        else:
            heading = rng.uniform(0, 2 * math.pi)
            v = rng.uniform(*speed)
            agents.append(AgentSpec(
                "linear", pos, velocity=(float(v * math.cos(heading)), float(v * math.sin(heading))), wrap=True,
            ))
    return SyntheticSpec(tuple(agents), n_frames, FRAME_PERIOD, noise_std, seed, tuple(bounds), name)
