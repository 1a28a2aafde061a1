"""Goal-point features from a binarized feasible-area grid.

The pipeline: per-step heading and speed of the target, recency-weighted
smoothing with a forgetting factor, a motion-range disc of radius
``horizon * speed``, and uniform sampling of feasible cells inside that disc,
restricted to a forward cone when the agent is moving.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import AgentTrack, FeasibleGrid


class InsufficientObservationsError(ValueError):
    pass


class NoFeasibleCellsError(RuntimeError):
    pass


@dataclass(frozen=True)
class DynamicState:
    heading: float
    speed: float

    def __post_init__(self):
        if not (np.isfinite(self.heading) and np.isfinite(self.speed)) or self.speed < 0:
            raise ValueError(f"invalid dynamic state {self}")


@dataclass(frozen=True)
class SmoothingConfig:
    lam: float = 0.9
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ValueError("forgetting factor must lie in (0, 1)")


@dataclass(frozen=True)
class GoalSamplerConfig:
    r: int = 32
    horizon_s: float = 3.0
    min_radius_m: float = 2.0
    forward_cone_deg: float = 180.0
    speed_gate_mps: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.horizon_s <= 0:
            raise ValueError("horizon must be > 0")
        if not 0.0 < self.forward_cone_deg <= 360.0:
            raise ValueError("forward cone must lie in (0, 360]")


@dataclass(frozen=True)
class GoalSet:
    center: tuple[float, float]
    radius: float
    heading: float
    points: np.ndarray  # (count, 2) world frame

    def __len__(self) -> int:
        return len(self.points)


def _valid_points(track: AgentTrack) -> np.ndarray:
    pts = track.observed[track.valid_mask]
    if len(pts) < 2:
        raise InsufficientObservationsError(f"track {track.agent_id} has < 2 valid observations")
    return pts


def heading_sequence(track: AgentTrack) -> np.ndarray:
    """Full-quadrant heading of each step between valid observations.

    Zero-length steps repeat the previous heading (0 if there is none).
    """
    d = np.diff(_valid_points(track), axis=0)
    moving = np.any(d != 0, axis=1)
    out = np.arctan2(d[:, 1], d[:, 0])
    prev = 0.0
    for i in range(len(out)):
        if moving[i]:
            prev = out[i]
        else:
            out[i] = prev
    return out


def speed_sequence(track: AgentTrack, sample_rate_hz: float) -> np.ndarray:
    # forward-filled slots contribute zero-length steps, so only valid points are used
    pts = _valid_points(track)
    idx = np.flatnonzero(track.valid_mask)
    steps = np.diff(idx)
    return np.linalg.norm(np.diff(pts, axis=0), axis=1) * sample_rate_hz / steps


def smooth_last(seq, cfg: SmoothingConfig = SmoothingConfig(), circular: bool = False) -> float:
    """Forgetting-factor weighted sum ``sum_t lam**(T-t) * seq[t]``.

    With ``cfg.normalize`` the sum is divided by the total weight. Angles
    (``circular=True``) are smoothed through their sine and cosine.
    """
    x = np.asarray(seq, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot smooth an empty sequence")
    w = cfg.lam ** np.arange(x.size - 1, -1, -1, dtype=np.float64)
    if circular:
        return float(np.arctan2(w @ np.sin(x), w @ np.cos(x)))
    if not cfg.normalize:
        return float(w @ x)
    # centered on the last value so a constant sequence is returned exactly
    return float(x[-1] + (w @ (x - x[-1])) / w.sum())


def estimate_dynamic_state(
    track: AgentTrack, sample_rate_hz: float, cfg: SmoothingConfig = SmoothingConfig()
) -> DynamicState:
    heading = smooth_last(heading_sequence(track), cfg, circular=True)
    speed = max(smooth_last(speed_sequence(track, sample_rate_hz), cfg), 0.0)
    if heading == -np.pi:
        heading = np.pi
    return DynamicState(heading, speed)


def motion_range(state: DynamicState, cfg: GoalSamplerConfig = GoalSamplerConfig()) -> float:
    return max(cfg.horizon_s * state.speed, cfg.min_radius_m)


def _quarter_turn(v_i: np.ndarray, v_j: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray]:
    # integer vector rotated clockwise by q quarter turns
    for _ in range(q % 4):
        v_i, v_j = v_j, -v_i
    return v_i, v_j


def sample_goal_points(
    grid: FeasibleGrid,
    state: DynamicState,
    center,
    cfg: GoalSamplerConfig = GoalSamplerConfig(),
) -> GoalSet:
    """Draw up to ``cfg.r`` distinct feasible cell centers inside the motion range.

    The acceptance region is every feasible cell whose center lies within the
    motion-range radius and, when ``state.speed > speed_gate_mps``, whose
    bearing from ``center`` is within half the forward cone of the heading.
    Cells are drawn uniformly without replacement. Candidates are ordered by
    their integer offset from the center cell expressed in the heading's
    quarter-turn frame, so a scene and grid rotated together by a multiple of
    90 degrees yield the rotated goal set.
    """
    c = np.asarray(center, dtype=np.float64).reshape(2)
    if not grid.in_bounds(c)[0]:
        raise ValueError(f"center {tuple(c)} lies outside the grid")
    radius = motion_range(state, cfg)
    res = grid.resolution
    ci, cj = (int(v[0]) for v in grid.cell_index(c))
    span = int(np.ceil(radius / res)) + 1
    i0, i1 = max(ci - span, 0), min(ci + span, grid.width - 1)
    j0, j1 = max(cj - span, 0), min(cj + span, grid.height - 1)
    jj, ii = np.mgrid[j0 : j1 + 1, i0 : i1 + 1]
    ii, jj = ii.ravel(), jj.ravel()
    pts = grid.cell_centers(ii, jj)
    rel = pts - c
    dist = np.hypot(rel[:, 0], rel[:, 1])
    keep = grid.cells[jj, ii] & (dist <= radius)
    if state.speed > cfg.speed_gate_mps and cfg.forward_cone_deg < 360.0:
        bearing = np.arctan2(rel[:, 1], rel[:, 0])
        dev = np.abs((bearing - state.heading + np.pi) % (2 * np.pi) - np.pi)
        keep &= (dist > 0) & (dev < np.deg2rad(cfg.forward_cone_deg) / 2)
    if not np.any(keep):
        raise NoFeasibleCellsError("no feasible cell inside the motion range and forward cone")
    ii, jj, pts = ii[keep], jj[keep], pts[keep]

    q = int(np.round(state.heading / (np.pi / 2))) % 4
    ki, kj = _quarter_turn(ii - ci, jj - cj, q)
    order = np.lexsort((kj, ki))
    rng = np.random.default_rng(cfg.seed)
    take = rng.choice(len(order), size=min(cfg.r, len(order)), replace=False)
    chosen = pts[order[np.sort(take)]]
    chosen.setflags(write=False)
    return GoalSet((float(c[0]), float(c[1])), radius, state.heading, chosen)


def goal_offsets(goals: GoalSet) -> np.ndarray:
    """Goal points relative to the center, rotated so the heading maps to +x."""
    rel = np.asarray(goals.points, dtype=np.float64).reshape(-1, 2) - np.asarray(goals.center)
    c, s = np.cos(goals.heading), np.sin(goals.heading)
    return np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]], axis=-1)


def format_goals(goals: GoalSet) -> str:
    cx, cy = goals.center
    lines = [f"GOALS {cx:.6f} {cy:.6f} {goals.radius:.6f} {goals.heading:.6f} {len(goals)}"]
    lines += [f"{x:.6f} {y:.6f}" for x, y in goals.points]
    return "\n".join(lines) + "\n"


def parse_goals(text: str) -> GoalSet:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split() if lines else []
    if len(head) != 6 or head[0] != "GOALS":
        raise ValueError("expected 'GOALS cx cy radius heading r' header")
    cx, cy, radius, heading = (float(v) for v in head[1:5])
    count = int(head[5])
    if len(lines) - 1 != count:
        raise ValueError(f"GOALS header announces {count} points, found {len(lines) - 1}")
    pts = np.array([[float(v) for v in ln.split()] for ln in lines[1:]], dtype=np.float64).reshape(-1, 2)
    return GoalSet((cx, cy), radius, heading, pts)
