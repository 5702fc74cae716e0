"""Spatial step parameters from heel-marker trajectories."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import find_peaks

from ..exceptions import DegenerateGeometryError

logger = logging.getLogger(__name__)

SIDES = ("left", "right")
# heel must be nearly at rest at contact
CONTACT_SPEED = 0.05
REFRACTORY_S = 0.3
MIN_PROMINENCE = 0.01


@dataclass
class HeelStrike:
    side: str
    time: float
    position: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)


@dataclass
class StepRow:
    side: str
    event_time: float
    heel_position: np.ndarray
    step_length: float | None = None
    stride_length: float | None = None
    step_width: float | None = None
    alternating: bool = True

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "event_time": self.event_time,
            "heel_position": self.heel_position.tolist(),
            "step_length": self.step_length,
            "stride_length": self.stride_length,
            "step_width": self.step_width,
            "alternating": self.alternating,
        }


@dataclass
class StepTable:
    rows: list[StepRow] = field(default_factory=list)
    forward_axis: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def values(self, parameter: str) -> np.ndarray:
        """Non-missing values of one parameter, in event order."""
        return np.array([getattr(r, parameter) for r in self.rows if getattr(r, parameter) is not None])

    def to_dict(self) -> list[dict]:
        return [r.to_dict() for r in self.rows]


def detect_heel_strikes(
    heel_trajectory,
    frame_rate: float,
    speed_threshold: float = CONTACT_SPEED,
    refractory: float = REFRACTORY_S,
    prominence: float = MIN_PROMINENCE,
) -> np.ndarray:
    """
    Contact times (s) of one heel: local minima of height where the heel is
    nearly at rest, at least ``refractory`` seconds apart.

    The trajectory is ``(T, 3)`` in meters with z up. Frame ``i`` is at ``i / frame_rate``.
    """
    traj = np.asarray(heel_trajectory, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[1] != 3:
        raise ValueError(f"heel trajectory must be (T, 3), got {traj.shape}")
    if traj.shape[0] < 3:
        return np.zeros(0)
    z = traj[:, 2]
    distance = max(1, int(round(refractory * frame_rate)))
    minima, _ = find_peaks(-z, distance=distance, prominence=prominence)
    vz = np.gradient(z, 1.0 / frame_rate)
    at_rest = minima[np.abs(vz[minima]) < speed_threshold]
    return at_rest / frame_rate


def heel_strikes(heel_trajectories: dict[str, np.ndarray], frame_rate: float, **kwargs) -> list[HeelStrike]:
    """Detected events of every side, merged in time order."""
    events = []
    for side, traj in heel_trajectories.items():
        traj = np.asarray(traj, dtype=np.float64)
        for t in detect_heel_strikes(traj, frame_rate, **kwargs):
            events.append(HeelStrike(side, float(t), traj[int(round(t * frame_rate))]))
    events.sort(key=lambda e: e.time)
    return events


def walking_axes(events: list[HeelStrike]) -> tuple[np.ndarray, np.ndarray]:
    """
    Horizontal forward and lateral unit vectors.

    Forward is the principal axis of the heel positions after removing each
    side's mean, so the left/right offset does not tilt it. It points along
    the direction of travel; lateral is forward rotated +90 deg about z.
    """
    if len(events) < 2:
        raise DegenerateGeometryError("need at least two heel strikes to find the walking direction")
    xy = np.array([e.position[:2] for e in events])
    sides = np.array([e.side for e in events])
    centered = xy.copy()
    counts = {s: int(np.count_nonzero(sides == s)) for s in set(sides)}
    if max(counts.values()) >= 2:
        for s in counts:
            centered[sides == s] -= xy[sides == s].mean(axis=0)
    else:
        centered -= xy.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    forward = vt[0]
    if np.dot(forward, xy[-1] - xy[0]) < 0:
        forward = -forward
    lateral = np.array([-forward[1], forward[0]])
    return forward, lateral


def step_parameters(events: list[HeelStrike]) -> StepTable:
    """
    Step table from time-ordered heel strikes.

    Stride length is the forward distance to the previous strike of the same
    heel. Step length and step width are the forward and lateral distances to
    the previous strike when it belongs to the other heel; a row whose
    previous strike is on the same side is marked non-alternating and has no
    step values.
    """
    events = sorted(events, key=lambda e: e.time)
    if len(events) < 2:
        return StepTable([StepRow(e.side, e.time, e.position) for e in events])
    forward, lateral = walking_axes(events)
    rows = []
    last_by_side: dict[str, HeelStrike] = {}
    previous = None
    for event in events:
        row = StepRow(event.side, event.time, event.position)
        same = last_by_side.get(event.side)
        if same is not None:
            row.stride_length = float(abs(np.dot(event.position[:2] - same.position[:2], forward)))
        if previous is not None:
            delta = event.position[:2] - previous.position[:2]
            if previous.side != event.side:
                row.step_length = float(abs(np.dot(delta, forward)))
                row.step_width = float(abs(np.dot(delta, lateral)))
            else:
                row.alternating = False
        rows.append(row)
        last_by_side[event.side] = event
        previous = event
    flagged = sum(not r.alternating for r in rows)
    if flagged:
        logger.warning("%d heel strikes follow a strike of the same side", flagged)
    return StepTable(rows, forward)


@dataclass
class Alignment:
    """2-D affine map ``b = A a + c`` plus time shift ``t_b = t_a + time_offset``."""
    matrix: np.ndarray
    translation: np.ndarray
    time_offset: float
    residuals: np.ndarray

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.residuals ** 2))) if self.residuals.size else 0.0

    def apply(self, xy) -> np.ndarray:
        return np.asarray(xy, dtype=np.float64) @ self.matrix.T + self.translation

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "translation": self.translation.tolist(),
            "time_offset": self.time_offset,
            "rms": self.rms,
        }


def align_trials(events_a, events_b) -> Alignment:
    """
    Least-squares alignment of matched events.

    Args:
        events_a: ``(N, 3)`` rows of ``(time_s, x_m, y_m)`` in system A.
        events_b: The same N events measured by system B.

    Raises:
        DegenerateGeometryError: fewer than three non-collinear points.
    """
    a = np.asarray(events_a, dtype=np.float64)
    b = np.asarray(events_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"event arrays must both be (N, 3), got {a.shape} and {b.shape}")
    design = np.column_stack([a[:, 1:], np.ones(len(a))])
    solution, _, rank, _ = np.linalg.lstsq(design, b[:, 1:], rcond=None)
    if rank < 3:
        raise DegenerateGeometryError(f"events are collinear or too few (rank {rank})")
    matrix = solution[:2].T
    translation = solution[2]
    time_offset = float(np.mean(b[:, 0] - a[:, 0]))
    residuals = np.linalg.norm(design @ solution - b[:, 1:], axis=1)
    return Alignment(matrix, translation, time_offset, residuals)


def match_events(
    reference: list[HeelStrike], measured: list[HeelStrike], max_dt: float = 0.2, offset: float = 0.0,
) -> list[tuple[HeelStrike, HeelStrike]]:
    """Pair each reference strike with the nearest measured strike of the same side within ``max_dt``.

    Measured times are shifted by ``offset`` seconds before comparing.
    """
    pairs = []
    used = set()
    for ref in reference:
        best, best_dt = None, max_dt
        for i, m in enumerate(measured):
            if i in used or m.side != ref.side:
                continue
            dt = abs(m.time + offset - ref.time)
            if dt <= best_dt:
                best, best_dt = i, dt
        if best is not None:
            used.add(best)
            pairs.append((ref, measured[best]))
    return pairs


def estimate_time_offset(reference: list[HeelStrike], measured: list[HeelStrike], max_dt: float = 0.2) -> float:
    """
    Clock offset ``reference - measured`` that pairs the most strikes.

    Every same-side time difference is a candidate; ties go to the smallest
    shift. Returns 0.0 when no strike sides match.
    """
    candidates = sorted(
        {r.time - m.time for r in reference for m in measured if r.side == m.side},
        key=abs,
    )
    best, best_count = 0.0, 0
    for candidate in candidates:
        count = len(match_events(reference, measured, max_dt, candidate))
        if count > best_count:
            best, best_count = candidate, count
    return best


def step_errors(reference: StepTable, measured: StepTable, max_dt: float = 0.2) -> dict[str, np.ndarray]:
    """Signed ``measured - reference`` per parameter over rows matched by side and time."""
    pairs = match_events(
        [HeelStrike(r.side, r.event_time, r.heel_position) for r in reference.rows],
        [HeelStrike(r.side, r.event_time, r.heel_position) for r in measured.rows],
        max_dt,
    )
    ref_rows = {(r.side, r.event_time): r for r in reference.rows}
    meas_rows = {(r.side, r.event_time): r for r in measured.rows}
    errors: dict[str, list[float]] = {"step_length": [], "stride_length": [], "step_width": []}
    for ref, meas in pairs:
        r, m = ref_rows[(ref.side, ref.time)], meas_rows[(meas.side, meas.time)]
        for key in errors:
            if getattr(r, key) is not None and getattr(m, key) is not None:
                errors[key].append(getattr(m, key) - getattr(r, key))
    return {key: np.array(values) for key, values in errors.items()}


def load_walkway(path) -> list[HeelStrike]:
    """Reference strikes from a JSON array of ``[time_s, x_m, y_m, side]``."""
    data = json.loads(Path(path).read_text())
    events = []
    for entry in data:
        t, x, y, side = entry
        if side not in SIDES:
            raise ValueError(f"{path}: side must be one of {SIDES}, got '{side}'")
        events.append(HeelStrike(side, float(t), [float(x), float(y), 0.0]))
    events.sort(key=lambda e: e.time)
    return events
