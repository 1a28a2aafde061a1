import numpy as np
import pytest

from effmp.scene import AgentTrack, FeasibleGrid, Scene, SceneBundle
from effmp.tensor import Tensor


def numeric_directional(fn, params, name, direction, eps):
    """Central difference of ``fn`` along ``direction`` in parameter ``name``."""
    p = params[name]
    base = p.data.copy()
    p.data = base + eps * direction
    up = fn().item()
    p.data = base - eps * direction
    down = fn().item()
    p.data = base
    return (up - down) / (2 * eps)


def gradcheck(fn, params, eps=1e-6, rtol=1e-4, atol=1e-9, seed=0, elementwise_max=0):
    """Compare backprop against central differences for every tensor in ``params``.

    Small tensors (size <= ``elementwise_max``) are checked entry by entry;
    larger ones along a random unit direction. Each pair must satisfy
    ``|a - n| <= rtol * max(|a|, |n|) + atol``; the return value is the largest
    ``|a - n|`` seen as a fraction of that allowance, so anything below 1 passes.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    fn().backward()
    analytic = {k: p.grad.copy() for k, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        if p.size <= elementwise_max:
            directions = []
            for idx in range(p.size):
                e = np.zeros(p.size)
                e[idx] = 1.0
                directions.append(e.reshape(p.shape))
        else:
            u = rng.normal(size=p.shape)
            directions = [u / np.linalg.norm(u)]
        for u in directions:
            a = float(np.sum(analytic[name] * u))
            n = numeric_directional(fn, params, name, u, eps)
            allowed = rtol * max(abs(a), abs(n)) + atol
            worst = max(worst, abs(a - n) / allowed)
            assert abs(a - n) <= allowed, (name, a, n)
    return worst


def straight_track(agent_id, role, start=(0.0, 0.0), step=(1.0, 0.0), m=20, mask=None):
    pts = np.asarray(start) + np.arange(m)[:, None] * np.asarray(step)
    return AgentTrack.from_raw(agent_id, role, pts, mask)


def make_scene(tracks, future=None, scene_id="t0", m=20, n=30):
    target = next(t for t in tracks if t.role == "target")
    return Scene(scene_id, tuple(tracks), target.agent_id, future, 10, m, n)


def open_grid(center=(0.0, 0.0), half=60.0, res=0.5, cells=None):
    size = int(round(2 * half / res))
    origin = (center[0] - half, center[1] - half)
    if cells is None:
        cells = np.ones((size, size), bool)
    return FeasibleGrid(origin, res, cells)


def random_scene(rng, agents=3, m=20, n=30, scene_id="r0"):
    tracks = []
    for a in range(agents):
        role = "target" if a == 0 else ("ego" if a == 1 else "other")
        start = rng.uniform(-20, 20, size=2)
        vel = rng.normal(size=2) * 1.2
        pts = start + np.cumsum(np.tile(vel, (m, 1)) + rng.normal(scale=0.1, size=(m, 2)), axis=0)
        mask = np.ones(m, bool)
        if a > 0:
            mask[: rng.integers(0, m - 3)] = False
        tracks.append(AgentTrack.from_raw(f"a{a}", role, pts, mask))
    last = tracks[0].observed[-1]
    future = last + np.cumsum(rng.normal(size=(n, 2)) + 1.0, axis=0)
    return Scene(scene_id, tuple(tracks), "a0", future, 10, m, n)


def random_bundle(rng, agents=3, scene_id="r0"):
    scene = random_scene(rng, agents, scene_id=scene_id)
    return SceneBundle(scene, open_grid(tuple(scene.target.observed[-1]), half=60.0))


def as_params(arrays):
    return {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
