"""Obstacle motion forecasters.

A predictor maps a :class:`History` of ``H`` observed frames to a
:class:`PredictionSheet` of ``N`` predicted frames.  The constant-velocity
model is the default; :class:`PrecomputedPredictor` serves sheets exported
from any external model.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .geometry import ObstacleSet


class MalformedFileError(ValueError):
    """A prediction file line could not be parsed."""

    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = path
        self.lineno = lineno


class MissingPredictionError(LookupError):
    """No stored prediction for the requested frame/step."""


@dataclass(frozen=True)
class History:
    window: tuple[ObstacleSet, ...]
    frame_of_last: int

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(self.window))
        if not self.window:
            raise ValueError("history window must hold at least one frame")

    @property
    def length(self) -> int:
        return len(self.window)

    @property
    def last(self) -> ObstacleSet:
        return self.window[-1]


@dataclass(frozen=True)
class PredictionSheet:
    steps: tuple[ObstacleSet, ...]
    issued_at: int

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def horizon(self) -> int:
        return len(self.steps)

    def at(self, i: int) -> ObstacleSet:
        """Prediction ``i`` steps ahead (1-based)."""
        if not 1 <= i <= len(self.steps):
            raise IndexError(f"horizon {i} outside 1..{len(self.steps)}")
        return self.steps[i - 1]


class Predictor(Protocol):
    horizon: int

    def predict(self, history: History) -> PredictionSheet: ...


def predict_constant_velocity(history: History, horizon: int) -> PredictionSheet:
    """Extrapolate every obstacle in the last frame along its latest velocity.

    The velocity of an obstacle comes from the two most recent frames of the
    window in which it was observed; obstacles seen only once are held still.
    """
    last = history.last
    if len(last) == 0:
        return PredictionSheet([ObstacleSet.empty()] * horizon, history.frame_of_last)

    step_disp = np.zeros_like(last.points)
    n_frames = len(history.window)
    for k, oid in enumerate(last.ids):
        for back in range(2, n_frames + 1):
            prev = history.window[n_frames - back]
            if oid in prev:
                step_disp[k] = (last.points[k] - prev.position(oid)) / (back - 1)
                break

    steps = [
        ObstacleSet(last.ids, last.points + i * step_disp) for i in range(1, horizon + 1)
    ]
    return PredictionSheet(steps, history.frame_of_last)


class ConstantVelocityPredictor:
    def __init__(self, horizon: int):
        self.horizon = horizon

    def predict(self, history: History) -> PredictionSheet:
        return predict_constant_velocity(history, self.horizon)


class BiasedPredictor:
    """Wraps a predictor and shifts step ``i`` of every obstacle by ``i * bias``.

    Used to inject a systematic, known model error into calibration studies.
    """

    def __init__(self, base: Predictor, bias: Sequence[float]):
        self.base = base
        self.horizon = base.horizon
        self.bias = np.asarray(bias, dtype=float).reshape(2)

    def predict(self, history: History) -> PredictionSheet:
        sheet = self.base.predict(history)
        steps = [
            ObstacleSet(s.ids, s.points + i * self.bias) for i, s in enumerate(sheet.steps, 1)
        ]
        return PredictionSheet(steps, sheet.issued_at)


class PrecomputedPredictor:
    """Serves prediction sheets loaded from a file, keyed by issue frame."""

    def __init__(self, table: dict[int, dict[int, dict[str, tuple[float, float]]]], horizon: int):
        self._table = table
        self.horizon = horizon

    def frames(self) -> list[int]:
        return sorted(self._table)

    def sheet(self, frame: int) -> PredictionSheet:
        by_step = self._table.get(frame)
        if by_step is None:
            raise MissingPredictionError(f"no predictions issued at frame {frame}")
        steps = []
        for i in range(1, self.horizon + 1):
            if i not in by_step:
                raise MissingPredictionError(f"frame {frame} lacks step {i}")
            steps.append(ObstacleSet.from_mapping(by_step[i]))
        return PredictionSheet(steps, frame)

    def predict(self, history: History) -> PredictionSheet:
        return self.sheet(history.frame_of_last)


def load_precomputed_predictions(path, horizon: int | None = None) -> PrecomputedPredictor:
    """Read a JSON-lines prediction file.

    Each line holds ``issue_frame``, ``step`` (1-based), ``obstacle_id``,
    ``x`` and ``y``.  A line whose ``obstacle_id`` is null marks a step that
    predicts no obstacles.  When ``horizon`` is omitted it is the largest
    step seen.
    """
    path = Path(path)
    table: dict[int, dict[int, dict[str, tuple[float, float]]]] = {}
    max_step = 0
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                frame = int(row["issue_frame"])
                step = int(row["step"])
                oid = row["obstacle_id"]
                xy = None if oid is None else (float(row["x"]), float(row["y"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise MalformedFileError(path, lineno, str(exc)) from None
            if step < 1:
                raise MalformedFileError(path, lineno, f"step must be >= 1, got {step}")
            slot = table.setdefault(frame, {}).setdefault(step, {})
            if xy is not None:
                slot[str(oid)] = xy
            max_step = max(max_step, step)
    return PrecomputedPredictor(table, horizon if horizon is not None else max_step)


def export_predictions(sheets: Sequence[PredictionSheet], path) -> None:
    with Path(path).open("w") as fh:
        for sheet in sheets:
            for i, step in enumerate(sheet.steps, 1):
                if len(step) == 0:
                    row = {"issue_frame": sheet.issued_at, "step": i, "obstacle_id": None, "x": None, "y": None}
                    fh.write(json.dumps(row) + "\n")
                for oid, (x, y) in step:
                    fh.write(
                        json.dumps(
                            {"issue_frame": sheet.issued_at, "step": i, "obstacle_id": oid, "x": x, "y": y}
                        )
                        + "\n"
                    )
