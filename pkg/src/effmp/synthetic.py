"""Procedural road scenes with ground-truth futures.

Roads are built in a local frame (target approaching along +x), rasterized
into a :class:`FeasibleGrid` cropped around the target, then the whole scene
is rotated and translated into a random world frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .scene import COORD_DIGITS, AgentTrack, FeasibleGrid, Scene, SceneBundle, forward_fill

TEMPLATES = ("straight", "curve", "intersection")
_STEP = 0.2  # polyline sample spacing, meters


@dataclass(frozen=True)
class SyntheticSpec:
    template: str = "straight"
    agents: int = 1
    noise: float = 0.0
    speed: float | None = None
    crop_radius_m: float = 50.0
    resolution: float = 0.5
    road_half_width: float = 4.0
    lane_offset_max: float = 1.0
    late_start_p: float = 0.2
    m: int = 20
    n: int = 30
    hz: int = 10

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(f"template must be one of {TEMPLATES}, got {self.template!r}")
        if self.agents < 1:
            raise ValueError("agents must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.speed is not None and self.speed < 0:
            raise ValueError("speed must be >= 0")
        if self.crop_radius_m <= 0 or self.resolution <= 0:
            raise ValueError("crop radius and resolution must be > 0")
        if self.lane_offset_max + self.resolution >= self.road_half_width:
            raise ValueError("lane offset leaves no margin inside the road")


class _Path:
    """Arc-length parameterized polyline."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return np.stack([np.interp(s, self.s, self.points[:, 0]), np.interp(s, self.s, self.points[:, 1])], -1)

    def offset(self, lateral: float) -> "_Path":
        if lateral == 0:
            return self
        d = np.gradient(self.points, axis=0)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        normal = np.stack([-d[:, 1], d[:, 0]], axis=1)
        return _Path(self.points + lateral * normal)

    def reversed(self) -> "_Path":
        return _Path(self.points[::-1])

    def project(self, point) -> float:
        i = int(np.argmin(np.linalg.norm(self.points - np.asarray(point), axis=1)))
        return float(self.s[i])


def _line(a, b) -> np.ndarray:
    a, b = np.asarray(a, float), np.asarray(b, float)
    count = max(int(np.ceil(np.linalg.norm(b - a) / _STEP)), 1)
    t = np.linspace(0.0, 1.0, count + 1)[:, None]
    return a + t * (b - a)


def _arc(center, radius: float, start_angle: float, sweep: float) -> np.ndarray:
    count = max(int(np.ceil(abs(sweep) * radius / _STEP)), 1)
    ang = start_angle + np.linspace(0.0, sweep, count + 1)
    return np.asarray(center) + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _join(*pieces: np.ndarray) -> np.ndarray:
    out = [pieces[0]]
    for p in pieces[1:]:
        out.append(p[1:] if np.allclose(p[0], out[-1][-1]) else p)
    return np.concatenate(out)


def _fillet_route(junction, out_angle: float, radius: float, far: float = 300.0) -> np.ndarray:
    """Approach along +x to ``junction``, leave along ``out_angle`` through a tangent arc."""
    j = np.asarray(junction, float)
    u_in = np.array([1.0, 0.0])
    u_out = np.array([np.cos(out_angle), np.sin(out_angle)])
    delta = float(np.arctan2(u_out[1], u_out[0]))
    start = j + np.array([-far, 0.0])
    end = j + far * u_out
    if abs(delta) < 1e-9:
        return _line(start, end)
    tangent = radius * np.tan(abs(delta) / 2)
    a = j - tangent * u_in
    e = j + tangent * u_out
    sign = np.sign(delta)
    center = a + sign * radius * np.array([-u_in[1], u_in[0]])
    start_angle = float(np.arctan2(a[1] - center[1], a[0] - center[0]))
    return _join(_line(start, a), _arc(center, radius, start_angle, delta), _line(e, end))


@dataclass
class _Layout:
    road: list[np.ndarray]  # centerline polylines, rasterized with the road half width
    target_route: _Path
    target_s0: float
    agent_routes: list[_Path]


def _straight_layout(rng) -> _Layout:
    road = _line((-400.0, 0.0), (400.0, 0.0))
    route = _Path(road)
    return _Layout([road], route, route.project((0.0, 0.0)), [route])


def _curve_layout(rng) -> _Layout:
    radius = rng.uniform(40.0, 120.0)
    sign = rng.choice([-1.0, 1.0])
    bend_x = rng.uniform(-20.0, 20.0)
    sweep = sign * min(150.0 / radius, np.pi * 0.9)
    center = np.array([bend_x, sign * radius])
    arc = _arc(center, radius, -sign * np.pi / 2, sweep)
    exit_dir = np.array([np.cos(sweep), np.sin(sweep)])
    road = _join(_line((-400.0, 0.0), (bend_x, 0.0)), arc, _line(arc[-1], arc[-1] + 300.0 * exit_dir))
    route = _Path(road)
    return _Layout([road], route, route.project((0.0, 0.0)), [route])


def _intersection_layout(rng, speed: float) -> _Layout:
    arms = {
        "straight": rng.uniform(-np.pi / 12, np.pi / 12),
        "left": rng.uniform(np.pi / 3, 2 * np.pi / 3),
        "right": -rng.uniform(np.pi / 3, 2 * np.pi / 3),
    }
    present = [k for k in arms if rng.random() < 0.7]
    while len(present) < 2:
        present = sorted(set(present) | {rng.choice(list(arms))}, key=list(arms).index)
    turn_radius = rng.uniform(8.0, 15.0)
    # junction lies ahead of the target; reached within roughly the first 2 s
    dist = rng.uniform(2.0, 2.0 + 2.0 * speed)
    junction = np.array([dist, 0.0])
    routes = {k: _fillet_route(junction, arms[k], turn_radius) for k in present}
    choice = present[int(rng.integers(len(present)))]
    approach = _line((-400.0, 0.0), junction)
    arm_lines = [_line(junction, junction + 300.0 * np.array([np.cos(arms[k]), np.sin(arms[k])])) for k in present]
    road = [approach, *arm_lines, *routes.values()]
    target_route = _Path(routes[choice])
    agent_routes = [_Path(approach)] + [_Path(a) for a in arm_lines]
    return _Layout(road, target_route, target_route.project((0.0, 0.0)), agent_routes)


def _rasterize(road: list[np.ndarray], half_width: float, centers_local: np.ndarray) -> np.ndarray:
    samples = np.concatenate(road)
    tree = cKDTree(samples)
    dist, _ = tree.query(centers_local, k=1, distance_upper_bound=half_width + 1.0)
    return dist <= half_width


def _kinematics(rng, spec: SyntheticSpec) -> tuple[float, float]:
    if spec.speed is not None:
        return float(spec.speed), 0.0
    return float(rng.uniform(4.0, 12.0)), float(rng.uniform(-0.5, 0.5))


def generate_synthetic_scene(spec: SyntheticSpec, seed: int, scene_id: str | None = None) -> SceneBundle:
    """Deterministic synthetic bundle for ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    dt = 1.0 / spec.hz
    t_obs = (np.arange(spec.m) - (spec.m - 1)) * dt
    t_fut = np.arange(1, spec.n + 1) * dt

    speed, accel = _kinematics(rng, spec)
    if spec.template == "straight":
        layout = _straight_layout(rng)
    elif spec.template == "curve":
        layout = _curve_layout(rng)
    else:
        layout = _intersection_layout(rng, speed)

    lateral = rng.uniform(-spec.lane_offset_max, spec.lane_offset_max)
    route = layout.target_route.offset(lateral)
    s0 = layout.target_s0
    target_obs = route.at(s0 + speed * t_obs + 0.5 * accel * t_obs**2)
    target_fut = route.at(s0 + speed * t_fut + 0.5 * accel * t_fut**2)

    locals_ = [("target", target_obs, np.ones(spec.m, bool))]
    for a in range(spec.agents - 1):
        path = layout.agent_routes[int(rng.integers(len(layout.agent_routes)))]
        if rng.random() < 0.5:
            path = path.reversed()
        path = path.offset(rng.uniform(-spec.lane_offset_max, spec.lane_offset_max))
        anchor = path.project(target_obs[-1])
        s_now = anchor + rng.uniform(-35.0, 35.0)
        v = rng.uniform(3.0, 12.0)
        obs = path.at(s_now + v * t_obs)
        mask = np.ones(spec.m, bool)
        if rng.random() < spec.late_start_p:
            mask[: int(rng.integers(1, spec.m // 2))] = False
        locals_.append(("ego" if a == 0 else "other", obs, mask))

    # random world placement
    angle = rng.uniform(-np.pi, np.pi)
    shift = rng.uniform(-1000.0, 1000.0, size=2)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, s], [-s, c]])

    def to_world(p):
        return np.asarray(p) @ rot + shift

    tracks = []
    for idx, (role, obs, mask) in enumerate(locals_):
        world = to_world(obs)
        if spec.noise > 0:
            world = world + rng.normal(0.0, spec.noise, size=world.shape)
        world = np.round(forward_fill(world, mask), COORD_DIGITS)
        tracks.append(AgentTrack(f"a{idx}", role, world, mask))
    future = np.round(to_world(target_fut), COORD_DIGITS)

    center = tracks[0].observed[-1]
    res = spec.resolution
    origin = np.floor((center - spec.crop_radius_m) / res) * res
    size = int(np.ceil(2 * spec.crop_radius_m / res))
    ii, jj = np.meshgrid(np.arange(size), np.arange(size))
    centers_world = np.stack([origin[0] + (ii + 0.5) * res, origin[1] + (jj + 0.5) * res], -1).reshape(-1, 2)
    centers_local = (centers_world - shift) @ rot.T
    cells = _rasterize(layout.road, spec.road_half_width, centers_local).reshape(size, size)
    grid = FeasibleGrid((round(origin[0], COORD_DIGITS), round(origin[1], COORD_DIGITS)), res, cells)

    scene = Scene(
        scene_id or f"syn{seed}", tuple(tracks), "a0", future, spec.hz, spec.m, spec.n,
    )
    return SceneBundle(scene, grid)


def generate_dataset(spec: SyntheticSpec, count: int, seed: int) -> list[SceneBundle]:
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)
    return [
        generate_synthetic_scene(spec, int(s), scene_id=f"s{seed}_{i:05d}")
        for i, s in enumerate(seeds)
    ]
