"""Conformal calibration: score functions, quantiles, windows and ACP updates.

Two pipelines share this module.  The obstacle-centric one scores a whole
prediction by its worst per-obstacle error and keeps one miscoverage level per
horizon.  The egocentric one scores a prediction relative to a candidate
vehicle position and keeps one level per (plan prefix, horizon).  Both update
their levels with delayed feedback: a confidence set built for ``t + i`` can
only be checked once ``Y_{t+i}`` is observed.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numba
import numpy as np

from .geometry import INF, ObstacleSet, min_distance, min_distances
from .predictor import PredictionSheet

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.03
DEFAULT_WINDOW = 30


class WarmupError(RuntimeError):
    """The calibration window holds no usable record for a horizon yet."""


class ConsistencyError(RuntimeError):
    """Ledger bookkeeping was asked to do something contradictory."""


# ---------------------------------------------------------------------------
# scores and quantiles


def egocentric_score(candidate, predicted: ObstacleSet, realized: ObstacleSet) -> float:
    """How much closer the realized obstacles are to ``candidate`` than predicted."""
    d_pred = min_distance(candidate, predicted)
    d_real = min_distance(candidate, realized)
    if d_pred == INF and d_real == INF:
        return 0.0
    return max(d_pred - d_real, 0.0)


def obstacle_centric_score(predicted: ObstacleSet, realized: ObstacleSet) -> float:
    """Largest position error over obstacles present in both sets.

    Ids present in only one of the sets are ignored, so the score is 0 when
    nothing can be matched.
    """
    worst = 0.0
    for oid, (x, y) in realized:
        if oid in predicted:
            px, py = predicted.position(oid)
            err = math.sqrt((x - px) ** 2 + (y - py) ** 2)
            worst = max(worst, err)
    return worst


def quantile_rank(m: int, q: float) -> int:
    """Smallest ``k`` in 1..m with ``k / m >= q`` (for 0 < q <= 1)."""
    k = min(max(math.ceil(q * m), 1), m)
    while k > 1 and (k - 1) / m >= q:
        k -= 1
    while k < m and k / m < q:
        k += 1
    return k


def empirical_quantile(scores: Iterable[float], q: float) -> float:
    """``inf{s : F(s) >= q}`` for the empirical CDF ``F`` of ``scores``.

    ``q > 1`` gives ``+inf`` and ``q <= 0`` gives ``-inf``.
    """
    values = sorted(float(s) for s in scores)
    if not values:
        raise ValueError("quantile of an empty multiset is undefined")
    if q > 1:
        return INF
    if q <= 0:
        return -INF
    return values[quantile_rank(len(values), q) - 1]


def quantile_radius(scores: Iterable[float], alpha_value: float) -> float:
    """Confidence radius at miscoverage ``alpha_value``: +inf when it is <= 0."""
    if alpha_value <= 0:
        return INF
    return empirical_quantile(scores, 1.0 - alpha_value)


def _quantile_ranks(m: int, q: np.ndarray) -> np.ndarray:
    k = np.clip(np.ceil(q * m), 1, m).astype(np.int64)
    # same float comparisons as quantile_rank, applied row-wise
    for _ in range(2):
        down = (k > 1) & ((k - 1) / m >= q)
        k = np.where(down, k - 1, k)
        up = (k < m) & (k / m < q)
        k = np.where(up, k + 1, k)
    return k


def row_quantiles(scores: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-row :func:`empirical_quantile` of a ``(rows, m)`` score matrix."""
    scores = np.sort(scores, axis=1)
    rows, m = scores.shape
    q = np.broadcast_to(np.asarray(q, dtype=float), (rows,))
    k = _quantile_ranks(m, q)
    out = scores[np.arange(rows), k - 1]
    out = np.where(q > 1, INF, out)
    return np.where(q <= 0, -INF, out)


# ---------------------------------------------------------------------------
# calibration window


@dataclass(frozen=True)
class WindowRecord:
    frame: int
    realized: ObstacleSet
    predicted: tuple  # index i-1 -> ObstacleSet predicted i steps earlier, or None


class CalibrationWindow:
    """The ``M`` most recent (prediction, realization) pairs for every horizon.

    Feed it prediction sheets as they are issued (:meth:`add_sheet`) and
    realized frames as they are observed (:meth:`observe`); each observed frame
    becomes a record pairing ``Y_t`` with ``Y_{t|t-i}`` for all horizons ``i``
    whose sheet is still known.
    """

    def __init__(self, capacity: int = DEFAULT_WINDOW, horizon: int = 12):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.capacity = capacity
        self.horizon = horizon
        self.records: deque[WindowRecord] = deque(maxlen=capacity)
        self._sheets: dict[int, PredictionSheet] = {}
        self._cache: dict[int, tuple] = {}

    def __len__(self) -> int:
        return len(self.records)

    def add_sheet(self, sheet: PredictionSheet) -> None:
        self._sheets[sheet.issued_at] = sheet
        for frame in [f for f in self._sheets if f < sheet.issued_at - self.horizon]:
            del self._sheets[frame]

    def observe(self, frame: int, realized: ObstacleSet) -> WindowRecord:
        predicted = []
        for i in range(1, self.horizon + 1):
            sheet = self._sheets.get(frame - i)
            predicted.append(sheet.at(i) if sheet is not None and sheet.horizon >= i else None)
        rec = WindowRecord(frame, realized, tuple(predicted))
        self.add_record(rec)
        return rec

    def add_record(self, record: WindowRecord) -> None:
        if self.records and record.frame <= self.records[-1].frame:
            raise ConsistencyError(
                f"window records must advance in time ({record.frame} after {self.records[-1].frame})"
            )
        self.records.append(record)
        self._cache.clear()

    def pairs(self, horizon: int) -> list[tuple[ObstacleSet, ObstacleSet]]:
        """(predicted, realized) pairs usable at ``horizon``, oldest first."""
        return [
            (r.predicted[horizon - 1], r.realized)
            for r in self.records
            if r.predicted[horizon - 1] is not None
        ]

    def has_horizon(self, horizon: int) -> bool:
        return any(r.predicted[horizon - 1] is not None for r in self.records)

    def copy(self) -> "CalibrationWindow":
        clone = CalibrationWindow(self.capacity, self.horizon)
        clone.records = deque(self.records, maxlen=self.capacity)
        clone._sheets = dict(self._sheets)
        return clone

    def padded(self, horizon: int) -> tuple[np.ndarray, np.ndarray]:
        """Predicted and realized sets at ``horizon`` as padded ``(m, K, 2)`` arrays.

        Each comes with the per-record member counts; entries past the count
        are ``+inf`` padding.
        """
        hit = self._cache.get(horizon)
        if hit is not None:
            return hit
        pairs = self.pairs(horizon)
        if not pairs:
            raise WarmupError(f"no calibration data for horizon {horizon} yet")
        hit = (_pad([p for p, _ in pairs]), _pad([r for _, r in pairs]))
        self._cache[horizon] = hit
        return hit


def _pad(sets: Sequence[ObstacleSet]) -> tuple[np.ndarray, np.ndarray]:
    width = max(1, max(len(s) for s in sets))
    out = np.full((len(sets), width, 2), INF)
    counts = np.zeros(len(sets), dtype=np.int64)
    for k, s in enumerate(sets):
        out[k, : len(s)] = s.points
        counts[k] = len(s)
    return out, counts


@numba.njit(cache=True)
def _egocentric_kernel(cand, pred, n_pred, real, n_real):
    c = cand.shape[0]
    m = pred.shape[0]
    out = np.empty((c, m))
    for a in range(c):
        x = cand[a, 0]
        y = cand[a, 1]
        for r in range(m):
            best_p = np.inf
            for k in range(n_pred[r]):
                dx = x - pred[r, k, 0]
                dy = y - pred[r, k, 1]
                d2 = dx * dx + dy * dy
                if d2 < best_p:
                    best_p = d2
            best_r = np.inf
            for k in range(n_real[r]):
                dx = x - real[r, k, 0]
                dy = y - real[r, k, 1]
                d2 = dx * dx + dy * dy
                if d2 < best_r:
                    best_r = d2
            if best_p == np.inf:
                # nothing predicted: harmless only if nothing showed up either
                out[a, r] = 0.0 if best_r == np.inf else np.inf
            elif best_r == np.inf:
                out[a, r] = 0.0
            else:
                s = np.sqrt(best_p) - np.sqrt(best_r)
                out[a, r] = s if s > 0.0 else 0.0
    return out


def egocentric_scores(candidates: np.ndarray, window: CalibrationWindow, horizon: int) -> np.ndarray:
    """Scores of every window record at ``horizon``, one row per candidate."""
    (pred, n_pred), (real, n_real) = window.padded(horizon)
    cand = np.ascontiguousarray(candidates, dtype=float).reshape(-1, 2)
    return _egocentric_kernel(cand, pred, n_pred, real, n_real)


def egocentric_radii(candidates, window: CalibrationWindow, horizon: int, alpha) -> np.ndarray:
    """Vectorised :func:`egocentric_radius` for many candidates at once."""
    scores = egocentric_scores(candidates, window, horizon)
    alpha = np.asarray(alpha, dtype=float)
    # a level at or below zero asks for full coverage: the whole plane
    return np.where(alpha <= 0, INF, row_quantiles(scores, 1.0 - alpha))


def egocentric_radius(candidate, horizon: int, window: CalibrationWindow, alpha_value: float) -> float:
    return float(egocentric_radii(np.asarray(candidate, dtype=float).reshape(1, 2), window, horizon, alpha_value)[0])


def obstacle_centric_radius(horizon: int, window: CalibrationWindow, alpha_value: float) -> float:
    pairs = window.pairs(horizon)
    if not pairs:
        raise WarmupError(f"no calibration data for horizon {horizon} yet")
    return quantile_radius([obstacle_centric_score(p, r) for p, r in pairs], alpha_value)


# ---------------------------------------------------------------------------
# adaptive miscoverage levels with delayed feedback


@dataclass(frozen=True)
class PendingCheck:
    due_frame: int
    horizon: int
    prefix: tuple
    candidate_position: tuple[float, float]
    predicted_distance: float
    radius: float

    @property
    def issue_frame(self) -> int:
        return self.due_frame - self.horizon


@dataclass(frozen=True, eq=False)
class PendingBatch:
    """Checks for many plan prefixes at one horizon, issued in the same frame.

    Only outcomes flagged in ``reported`` come back as coverage events; the
    levels of all prefixes are updated regardless.
    """

    due_frame: int
    horizon: int
    prefixes: tuple
    candidate_positions: np.ndarray  # (k, 2)
    predicted_distances: np.ndarray  # (k,)
    radii: np.ndarray  # (k,)
    reported: np.ndarray  # (k,) bool

    def __len__(self) -> int:
        return len(self.prefixes)


@dataclass(frozen=True)
class ObstaclePendingCheck:
    due_frame: int
    horizon: int
    predicted: ObstacleSet
    radius: float


@dataclass(frozen=True)
class CoverageEvent:
    """Outcome of one delayed confidence-set check."""

    frame: int
    horizon: int
    prefix: tuple
    covered: bool
    alpha_before: float
    alpha_after: float


class _DelayedAcp:
    def __init__(self, target_alpha: float, gamma: float, horizon: int, initial_alpha: float | None = None):
        if not 0 < target_alpha < 1:
            raise ValueError("target_alpha must lie in (0, 1)")
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        self.target_alpha = target_alpha
        self.gamma = gamma
        self.horizon = horizon
        self.initial_alpha = target_alpha if initial_alpha is None else initial_alpha
        self.alphas: dict[Hashable, float] = {}
        self._pending: dict[int, dict[Hashable, object]] = {}

    def pending_count(self) -> int:
        return sum(len(c) if isinstance(c, PendingBatch) else 1 for v in self._pending.values() for c in v.values())

    def pending_depth(self) -> int:
        return len(self._pending)

    def pending(self) -> list:
        return [c for frame in sorted(self._pending) for c in self._pending[frame].values()]

    def _update(self, key, covered: bool) -> tuple[float, float]:
        before = self.alphas.get(key, self.initial_alpha)
        after = before + self.gamma * (self.target_alpha - (0.0 if covered else 1.0))
        self.alphas[key] = after
        return before, after

    def _stage(self, key, horizon: int, frame: int, check) -> None:
        if not 1 <= horizon <= self.horizon:
            raise ValueError(f"horizon {horizon} outside 1..{self.horizon}")
        due = frame + horizon
        slot = self._pending.setdefault(due, {})
        if key in slot:
            raise ConsistencyError(f"check {key!r} issued at frame {frame} already staged")
        slot[key] = check

    def _due(self, frame: int) -> dict:
        stale = [f for f in self._pending if f < frame]
        for f in stale:
            log.warning("dropping %d checks due at unobserved frame %d", len(self._pending[f]), f)
            del self._pending[f]
        return self._pending.pop(frame, {})


class AcpLedger(_DelayedAcp):
    """Egocentric miscoverage levels, one per (plan prefix, horizon)."""

    def alpha(self, prefix: Sequence[int], horizon: int) -> float:
        return self.alphas.get((tuple(prefix), horizon), self.initial_alpha)

    def stage_pending(self, prefix, horizon: int, candidate_position, predicted_distance: float,
                      radius: float, frame: int) -> PendingCheck:
        prefix = tuple(int(p) for p in prefix)
        check = PendingCheck(
            frame + horizon,
            horizon,
            prefix,
            (float(candidate_position[0]), float(candidate_position[1])),
            float(predicted_distance),
            float(radius),
        )
        self._stage((prefix, horizon), horizon, frame, check)
        return check

    def stage_batch(self, prefixes: Sequence[tuple], horizon: int, candidate_positions, predicted_distances,
                    radii, frame: int, reported=None) -> PendingBatch:
        """Stage one check per prefix at ``horizon``; see :class:`PendingBatch`."""
        k = len(prefixes)
        batch = PendingBatch(
            frame + horizon,
            horizon,
            tuple(tuple(int(v) for v in p) for p in prefixes),
            np.array(candidate_positions, dtype=float).reshape(k, 2),
            np.array(predicted_distances, dtype=float).reshape(k),
            np.array(radii, dtype=float).reshape(k),
            np.ones(k, dtype=bool) if reported is None else np.array(reported, dtype=bool).reshape(k),
        )
        self._stage((None, horizon), horizon, frame, batch)
        return batch

    def record_frame(self, realized: ObstacleSet, frame: int) -> list[CoverageEvent]:
        """Resolve every check due at ``frame`` and update the matching levels."""
        events = []
        for check in self._due(frame).values():
            if isinstance(check, PendingBatch):
                events.extend(self._resolve_batch(check, realized, frame))
                continue
            score = check.predicted_distance - min_distance(check.candidate_position, realized)
            if math.isnan(score):  # both distances infinite: nothing to be wrong about
                score = 0.0
            covered = max(score, 0.0) <= check.radius
            before, after = self._update((check.prefix, check.horizon), covered)
            events.append(CoverageEvent(frame, check.horizon, check.prefix, covered, before, after))
        events.sort(key=lambda e: (e.horizon, e.prefix))
        return events

    def _resolve_batch(self, batch: PendingBatch, realized: ObstacleSet, frame: int) -> list[CoverageEvent]:
        with np.errstate(invalid="ignore"):
            score = batch.predicted_distances - min_distances(batch.candidate_positions, realized)
        score[np.isnan(score)] = 0.0
        covered = np.maximum(score, 0.0) <= batch.radii
        i = batch.horizon
        events = []
        for prefix, hit, report in zip(batch.prefixes, covered.tolist(), batch.reported.tolist()):
            before, after = self._update((prefix, i), hit)
            if report:
                events.append(CoverageEvent(frame, i, prefix, hit, before, after))
        return events


class ObstacleAcpState(_DelayedAcp):
    """Obstacle-centric miscoverage levels, one per horizon."""

    def alpha(self, horizon: int) -> float:
        return self.alphas.get(horizon, self.initial_alpha)

    def stage_pending(self, horizon: int, predicted: ObstacleSet, radius: float, frame: int) -> ObstaclePendingCheck:
        check = ObstaclePendingCheck(frame + horizon, horizon, predicted, float(radius))
        self._stage(horizon, horizon, frame, check)
        return check

    def record_frame(self, realized: ObstacleSet, frame: int) -> list[CoverageEvent]:
        events = []
        for horizon, check in sorted(self._due(frame).items()):
            covered = obstacle_centric_score(check.predicted, realized) <= check.radius
            before, after = self._update(horizon, covered)
            events.append(CoverageEvent(frame, horizon, (), covered, before, after))
        return events


def record_frame(ledger, realized: ObstacleSet, frame: int) -> list[CoverageEvent]:
    return ledger.record_frame(realized, frame)


def stage_pending(ledger: AcpLedger, prefix, horizon, candidate_position, predicted_distance, radius, frame):
    return ledger.stage_pending(prefix, horizon, candidate_position, predicted_distance, radius, frame)
