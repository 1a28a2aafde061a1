"""Scenes, agent tracks, binarized feasible-area grids, and their text formats.

Scene file::

    SCENE <scene_id> m=<int> n=<int> hz=<int>
    TRACK <agent_id> <role> x0 y0 ... x{m-1} y{m-1} mask=<m bits>
    FUTURE x0 y0 ... x{n-1} y{n-1}            (optional)

Grid file: ``GRID ox oy res w h`` then ``h`` rows of ``w`` characters
(``1`` driveable). Row ``j`` of the file is grid row ``j``, i.e. the row of
cells whose y-extent is ``[oy + j*res, oy + (j+1)*res)``.

A ``.bundle`` manifest holds two lines, ``scene <path>`` and ``grid <path>``;
relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

ROLES = ("ego", "target", "other")
COORD_DIGITS = 6


class SceneFormatError(ValueError):
    """A scene, grid or bundle file could not be parsed."""


class SceneValidationError(ValueError):
    """Parsed data violates a scene or grid invariant."""


def _points(arr, length: int | None, what: str) -> np.ndarray:
    pts = np.array(arr, dtype=np.float64).reshape(-1, 2)
    if length is not None and len(pts) != length:
        raise SceneValidationError(f"{what}: expected {length} points, got {len(pts)}")
    if not np.all(np.isfinite(pts)):
        raise SceneValidationError(f"{what}: non-finite coordinate")
    pts.setflags(write=False)
    return pts


def forward_fill(points: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Overwrite masked-out slots with the last valid position.

    Slots before the first valid observation take the first valid position.
    """
    mask = np.asarray(mask, dtype=bool)
    pts = np.array(points, dtype=np.float64)
    valid = np.flatnonzero(mask)
    if valid.size == 0:
        raise SceneValidationError("track has no valid observation")
    idx = np.maximum.accumulate(np.where(mask, np.arange(len(mask)), -1))
    idx[idx < 0] = valid[0]
    return pts[idx]


@dataclass(frozen=True, eq=False)
class AgentTrack:
    agent_id: str
    role: str
    observed: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        if self.role not in ROLES:
            raise SceneValidationError(f"unknown role {self.role!r}")
        if any(c.isspace() for c in self.agent_id) or not self.agent_id:
            raise SceneValidationError(f"invalid agent id {self.agent_id!r}")
        mask = np.array(self.valid_mask, dtype=bool).reshape(-1)
        obs = _points(self.observed, len(mask), f"track {self.agent_id}")
        if mask.sum() < 2:
            raise SceneValidationError(f"track {self.agent_id}: needs >= 2 valid observations")
        filled = forward_fill(obs, mask)
        if not np.array_equal(filled, obs):
            raise SceneValidationError(f"track {self.agent_id}: masked slots must be forward-filled")
        mask.setflags(write=False)
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "valid_mask", mask)

    @classmethod
    def from_raw(cls, agent_id: str, role: str, observed, valid_mask=None) -> "AgentTrack":
        """Build a track, forward-filling masked slots first."""
        obs = np.asarray(observed, dtype=np.float64).reshape(-1, 2)
        mask = np.ones(len(obs), bool) if valid_mask is None else np.asarray(valid_mask, bool)
        return cls(agent_id, role, forward_fill(obs, mask), mask)

    @property
    def m(self) -> int:
        return len(self.observed)

    def __eq__(self, other):
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return (
            self.agent_id == other.agent_id
            and self.role == other.role
            and np.array_equal(self.observed, other.observed)
            and np.array_equal(self.valid_mask, other.valid_mask)
        )


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    tracks: tuple[AgentTrack, ...]
    target_id: str
    future: np.ndarray | None = None
    sample_rate_hz: int = 10
    m: int = 20
    n: int = 30

    def __post_init__(self):
        tracks = tuple(self.tracks)
        object.__setattr__(self, "tracks", tracks)
        if not self.scene_id or any(c.isspace() for c in self.scene_id):
            raise SceneValidationError(f"invalid scene id {self.scene_id!r}")
        if self.sample_rate_hz <= 0 or self.m < 2 or self.n < 1:
            raise SceneValidationError("scene needs hz > 0, m >= 2, n >= 1")
        targets = [t for t in tracks if t.role == "target"]
        if len(targets) != 1:
            raise SceneValidationError(f"scene {self.scene_id}: expected 1 target track, got {len(targets)}")
        if targets[0].agent_id != self.target_id:
            raise SceneValidationError(f"scene {self.scene_id}: target id mismatch")
        if sum(t.role == "ego" for t in tracks) > 1:
            raise SceneValidationError(f"scene {self.scene_id}: more than one ego track")
        ids = [t.agent_id for t in tracks]
        if len(set(ids)) != len(ids):
            raise SceneValidationError(f"scene {self.scene_id}: duplicate agent ids")
        for t in tracks:
            if t.m != self.m:
                raise SceneValidationError(f"track {t.agent_id}: {t.m} observations, scene m={self.m}")
        if self.future is not None:
            object.__setattr__(self, "future", _points(self.future, self.n, "future"))

    @property
    def target(self) -> AgentTrack:
        return next(t for t in self.tracks if t.role == "target")

    @property
    def observed_span_s(self) -> float:
        return (self.m) / self.sample_rate_hz

    @property
    def horizon_s(self) -> float:
        return self.n / self.sample_rate_hz

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        if (self.future is None) != (other.future is None):
            return False
        return (
            self.scene_id == other.scene_id
            and self.target_id == other.target_id
            and (self.m, self.n, self.sample_rate_hz) == (other.m, other.n, other.sample_rate_hz)
            and self.tracks == other.tracks
            and (self.future is None or np.array_equal(self.future, other.future))
        )


@dataclass(frozen=True, eq=False)
class FeasibleGrid:
    """Binary driveable-area raster. ``cells[j, i]`` covers column ``i``, row ``j``."""

    origin: tuple[float, float]
    resolution: float
    cells: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.resolution > 0:
            raise SceneValidationError("grid resolution must be > 0")
        cells = np.array(self.cells, dtype=bool)
        if cells.ndim != 2:
            raise SceneValidationError("grid cells must be 2-d")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def cell_index(self, points) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        i = np.floor((pts[:, 0] - self.origin[0]) / self.resolution).astype(np.int64)
        j = np.floor((pts[:, 1] - self.origin[1]) / self.resolution).astype(np.int64)
        return i, j

    def in_bounds(self, points) -> np.ndarray:
        i, j = self.cell_index(points)
        return (i >= 0) & (i < self.width) & (j >= 0) & (j < self.height)

    def is_feasible(self, points) -> np.ndarray:
        i, j = self.cell_index(points)
        ok = (i >= 0) & (i < self.width) & (j >= 0) & (j < self.height)
        out = np.zeros(len(i), dtype=bool)
        out[ok] = self.cells[j[ok], i[ok]]
        return out

    def cell_centers(self, i, j) -> np.ndarray:
        x = self.origin[0] + (np.asarray(i) + 0.5) * self.resolution
        y = self.origin[1] + (np.asarray(j) + 0.5) * self.resolution
        return np.stack([x, y], axis=-1)

    def rotate90(self, quarter_turns: int, about) -> "FeasibleGrid":
        """Rotate the raster counter-clockwise by ``quarter_turns`` * 90 degrees about a point."""
        q = quarter_turns % 4
        if q == 0:
            return self
        cx, cy = float(about[0]), float(about[1])
        w, h = self.width * self.resolution, self.height * self.resolution
        ox, oy = self.origin
        corners = np.array([[ox, oy], [ox + w, oy], [ox, oy + h], [ox + w, oy + h]]) - (cx, cy)
        rc = rotate_points(corners, q * np.pi / 2) + (cx, cy)
        new_origin = rc.min(axis=0)
        # np.rot90 turns the (row=y, col=x) array counter-clockwise in image
        # coordinates, which is clockwise in our y-up frame, hence the -q
        cells = np.rot90(self.cells, k=-q)
        return FeasibleGrid((new_origin[0], new_origin[1]), self.resolution, cells)

    def __eq__(self, other):
        if not isinstance(other, FeasibleGrid):
            return NotImplemented
        return (
            self.origin == other.origin
            and self.resolution == other.resolution
            and np.array_equal(self.cells, other.cells)
        )


def rotate_points(points, angle: float) -> np.ndarray:
    """Rotate ``(..., 2)`` points counter-clockwise about the origin.

    Multiples of a quarter turn are applied as exact coordinate swaps.
    """
    pts = np.asarray(points, dtype=np.float64)
    q = angle / (np.pi / 2)
    if abs(q - round(q)) < 1e-12:
        k = int(round(q)) % 4
        x, y = pts[..., 0], pts[..., 1]
        if k == 0:
            return pts.copy()
        if k == 1:
            return np.stack([-y, x], axis=-1)
        if k == 2:
            return np.stack([-x, -y], axis=-1)
        return np.stack([y, -x], axis=-1)
    c, s = np.cos(angle), np.sin(angle)
    return pts @ np.array([[c, s], [-s, c]])


@dataclass(frozen=True)
class SceneBundle:
    scene: Scene
    grid: FeasibleGrid

    def __post_init__(self):
        if not np.all(self.grid.in_bounds(self.scene.target.observed)):
            raise SceneValidationError(
                f"scene {self.scene.scene_id}: target observations fall outside the grid"
            )


# -- text formats ------------------------------------------------------------


def _fmt(v: float) -> str:
    s = f"{v:.{COORD_DIGITS}f}"
    return "0.000000" if s == "-0.000000" else s


def _coords(pts: np.ndarray) -> str:
    return " ".join(_fmt(v) for v in np.asarray(pts).reshape(-1))


def format_scene(scene: Scene) -> str:
    lines = [f"SCENE {scene.scene_id} m={scene.m} n={scene.n} hz={scene.sample_rate_hz}"]
    for t in scene.tracks:
        bits = "".join("1" if b else "0" for b in t.valid_mask)
        lines.append(f"TRACK {t.agent_id} {t.role} {_coords(t.observed)} mask={bits}")
    if scene.future is not None:
        lines.append(f"FUTURE {_coords(scene.future)}")
    return "\n".join(lines) + "\n"


def format_grid(grid: FeasibleGrid) -> str:
    ox, oy = grid.origin
    head = f"GRID {_fmt(ox)} {_fmt(oy)} {_fmt(grid.resolution)} {grid.width} {grid.height}"
    rows = ["".join("1" if c else "0" for c in row) for row in grid.cells]
    return "\n".join([head, *rows]) + "\n"


def _kv(token: str, key: str, where: str) -> int:
    if not token.startswith(key + "="):
        raise SceneFormatError(f"{where}: expected {key}=<int>, got {token!r}")
    try:
        return int(token[len(key) + 1:])
    except ValueError as exc:
        raise SceneFormatError(f"{where}: bad integer in {token!r}") from exc


def _floats(tokens: list[str], where: str) -> np.ndarray:
    try:
        return np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as exc:
        raise SceneFormatError(f"{where}: {exc}") from exc


def parse_scene(text: str, source: str = "<scene>") -> Scene:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise SceneFormatError(f"{source}: empty scene file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "SCENE":
        raise SceneFormatError(f"{source}:1: expected 'SCENE <id> m= n= hz='")
    scene_id = head[1]
    m = _kv(head[2], "m", f"{source}:1")
    n = _kv(head[3], "n", f"{source}:1")
    hz = _kv(head[4], "hz", f"{source}:1")
    tracks = []
    future = None
    for lineno, line in enumerate(lines[1:], start=2):
        tok = line.split()
        where = f"{source}:{lineno}"
        if tok[0] == "TRACK":
            if len(tok) < 4 or not tok[-1].startswith("mask="):
                raise SceneFormatError(f"{where}: malformed TRACK record")
            bits = tok[-1][5:]
            if set(bits) - {"0", "1"}:
                raise SceneFormatError(f"{where}: mask must be 0/1 bits")
            coords = _floats(tok[3:-1], where)
            if coords.size != 2 * m or len(bits) != m:
                raise SceneValidationError(f"{where}: track needs {m} points and {m} mask bits")
            mask = np.array([b == "1" for b in bits])
            tracks.append(AgentTrack(tok[1], tok[2], coords.reshape(-1, 2), mask))
        elif tok[0] == "FUTURE":
            if future is not None:
                raise SceneFormatError(f"{where}: duplicate FUTURE record")
            coords = _floats(tok[1:], where)
            if coords.size != 2 * n:
                raise SceneValidationError(f"{where}: future needs {n} points")
            future = coords.reshape(-1, 2)
        else:
            raise SceneFormatError(f"{where}: unknown record {tok[0]!r}")
    targets = [t.agent_id for t in tracks if t.role == "target"]
    target_id = targets[0] if len(targets) == 1 else ""
    if len(targets) != 1:
        raise SceneValidationError(f"{source}: expected exactly one target track, got {len(targets)}")
    return Scene(scene_id, tuple(tracks), target_id, future, hz, m, n)


def parse_grid(text: str, source: str = "<grid>") -> FeasibleGrid:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise SceneFormatError(f"{source}: empty grid file")
    head = lines[0].split()
    if len(head) != 6 or head[0] != "GRID":
        raise SceneFormatError(f"{source}:1: expected 'GRID ox oy res w h'")
    ox, oy, res = _floats(head[1:4], f"{source}:1")
    try:
        w, h = int(head[4]), int(head[5])
    except ValueError as exc:
        raise SceneFormatError(f"{source}:1: bad grid size") from exc
    rows = lines[1:]
    if len(rows) != h or any(len(r) != w for r in rows):
        raise SceneValidationError(f"{source}: expected {h} rows of {w} cells")
    if any(set(r) - {"0", "1"} for r in rows):
        raise SceneFormatError(f"{source}: grid rows must contain only 0/1")
    cells = np.array([[c == "1" for c in r] for r in rows], dtype=bool).reshape(h, w)
    return FeasibleGrid((ox, oy), res, cells)


def save_scene_bundle(bundle: SceneBundle, path: str | Path) -> Path:
    """Write ``<stem>.scene``, ``<stem>.grid`` and the ``.bundle`` manifest at ``path``."""
    path = Path(path)
    if path.suffix != ".bundle":
        path = path.with_suffix(".bundle")
    scene_path = path.with_suffix(".scene")
    grid_path = path.with_suffix(".grid")
    scene_path.write_text(format_scene(bundle.scene))
    grid_path.write_text(format_grid(bundle.grid))
    path.write_text(f"scene {scene_path.name}\ngrid {grid_path.name}\n")
    return path


def load_scene_bundle(path: str | Path) -> SceneBundle:
    path = Path(path)
    entries = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(maxsplit=1)
        if len(parts) != 2 or parts[0] not in ("scene", "grid"):
            raise SceneFormatError(f"{path}:{lineno}: expected 'scene <path>' or 'grid <path>'")
        entries[parts[0]] = parts[1].strip()
    if set(entries) != {"scene", "grid"}:
        raise SceneFormatError(f"{path}: manifest must list a scene and a grid")
    scene_path = path.parent / entries["scene"]
    grid_path = path.parent / entries["grid"]
    scene = parse_scene(scene_path.read_text(), str(scene_path))
    grid = parse_grid(grid_path.read_text(), str(grid_path))
    return SceneBundle(scene, grid)


def list_bundles(directory: str | Path) -> list[Path]:
    return sorted(Path(directory).glob("*.bundle"))


def load_dataset(directory: str | Path) -> list[SceneBundle]:
    return [load_scene_bundle(p) for p in list_bundles(directory)]


def transform_scene(scene: Scene, fn, scene_id: str | None = None) -> Scene:
    """Apply a point map ``fn: (N, 2) -> (N, 2)`` to every stored coordinate."""
    tracks = tuple(
        AgentTrack(t.agent_id, t.role, fn(t.observed), t.valid_mask) for t in scene.tracks
    )
    future = None if scene.future is None else fn(scene.future)
    return Scene(
        scene_id or scene.scene_id, tracks, scene.target_id, future,
        scene.sample_rate_hz, scene.m, scene.n,
    )


def rotate_bundle(bundle: SceneBundle, quarter_turns: int, about=None) -> SceneBundle:
    """Rotate scene and grid together about ``about`` (default: target's last observation)."""
    if about is None:
        about = bundle.scene.target.observed[-1]
    c = np.asarray(about, dtype=np.float64)
    angle = quarter_turns * np.pi / 2
    scene = transform_scene(bundle.scene, lambda p: rotate_points(p - c, angle) + c)
    return SceneBundle(scene, bundle.grid.rotate90(quarter_turns, c))


def iter_points(scene: Scene) -> Iterable[np.ndarray]:
    for t in scene.tracks:
        yield t.observed
    if scene.future is not None:
        yield scene.future
