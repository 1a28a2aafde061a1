"""The two predictors: LSTM + MHSA, and a Set Transformer with seed queries.

Scenes are normalized into the target-centric frame (target's last observed
position at the origin, smoothed heading along +x) and batched with padding
masks. Models predict per-step displacements which are cumulatively summed;
:class:`PredictionSet` converts back to the world frame.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import (
    MHSAConfig,
    Params,
    SetBlockConfig,
    cross_attention,
    init_linear,
    init_lstm,
    init_mhsa,
    init_set_block,
    linear,
    lstm_step,
    mhsa,
    set_attention_block,
)
from .features import (
    GoalSamplerConfig,
    GoalSet,
    NoFeasibleCellsError,
    SmoothingConfig,
    estimate_dynamic_state,
    motion_range,
    sample_goal_points,
)
from .scene import FeasibleGrid, Scene, SceneBundle, rotate_points
from .tensor import Tensor, concat, no_grad

VARIANTS = ("lstm_mhsa", "set_transformer")
POS_SCALE = 10.0  # meters per unit of the position input channels
STEP_FEATURES = 5  # dx, dy, x/POS_SCALE, y/POS_SCALE, is_target


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "set_transformer"
    model_dim: int = 64
    heads: int = 4
    b: int = 2
    s: int = 2
    k: int = 6
    use_goal_features: bool = True
    goal_embed_dim: int = 32
    ff_dim: int = 128
    goals_as_queries: bool = False
    lam: float = 0.9
    r: int = 32
    forward_cone_deg: float = 180.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.k < 1 or self.b < 0 or self.s < 0 or self.model_dim < 1:
            raise ConfigError("k >= 1, b >= 0, s >= 0, model_dim >= 1 required")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.goals_as_queries and not self.use_goal_features:
            raise ConfigError("goals_as_queries needs use_goal_features")
        if not 0 < self.lam < 1:
            raise ConfigError("lambda must lie in (0, 1)")

    @property
    def mhsa(self) -> MHSAConfig:
        return MHSAConfig(self.model_dim, self.heads)

    @property
    def set_block(self) -> SetBlockConfig:
        return SetBlockConfig(self.model_dim, self.heads, self.ff_dim)

    @property
    def smoothing(self) -> SmoothingConfig:
        return SmoothingConfig(self.lam)

    def sampler(self, horizon_s: float = 3.0) -> GoalSamplerConfig:
        return GoalSamplerConfig(
            r=self.r, horizon_s=horizon_s, forward_cone_deg=self.forward_cone_deg, seed=self.seed
        )

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{'lambda' if key == 'lam' else key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value")
            key, value = (p.strip() for p in line.split("=", 1))
            key = "lam" if key == "lambda" else key
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kind = types[key]
            try:
                if kind == "bool":
                    if value.lower() not in ("true", "false", "1", "0"):
                        raise ValueError(value)
                    values[key] = value.lower() in ("true", "1")
                elif kind == "int":
                    values[key] = int(value)
                elif kind == "float":
                    values[key] = float(value)
                else:
                    values[key] = value
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
        return cls(**values)

    def compact(self) -> str:
        return ",".join(ln for ln in self.to_text().splitlines())

    def digest(self) -> str:
        """Short stable hash of the config, stored in checkpoints."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def load_model_config(path: str | Path) -> ModelConfig:
    return ModelConfig.from_text(Path(path).read_text())


# -- frames & batching -----------------------------------------------------


@dataclass(frozen=True)
class FrameTransform:
    """Map world points into the target-centric frame and back."""

    origin: tuple[float, float]
    heading: float

    def forward(self, points) -> np.ndarray:
        return rotate_points(np.asarray(points, dtype=np.float64) - self.origin, -self.heading)

    def inverse(self, points) -> np.ndarray:
        return rotate_points(points, self.heading) + np.asarray(self.origin)


@dataclass(frozen=True)
class NormalizedScene:
    features: np.ndarray  # (agents, m-1, STEP_FEATURES); target first
    agent_ids: tuple[str, ...]
    transform: FrameTransform
    future: np.ndarray | None  # (n, 2) in the target frame


def normalize_scene(scene: Scene, lam: float = 0.9) -> NormalizedScene:
    target = scene.target
    state = estimate_dynamic_state(target, scene.sample_rate_hz, SmoothingConfig(lam))
    tf = FrameTransform(tuple(target.observed[-1]), state.heading)
    ordered = [target] + [t for t in scene.tracks if t.role != "target"]
    feats = np.zeros((len(ordered), scene.m - 1, STEP_FEATURES))
    for a, track in enumerate(ordered):
        pts = tf.forward(track.observed)
        feats[a, :, 0:2] = np.diff(pts, axis=0)
        feats[a, :, 2:4] = pts[1:] / POS_SCALE
    feats[0, :, 4] = 1.0
    future = None if scene.future is None else tf.forward(scene.future)
    return NormalizedScene(feats, tuple(t.agent_id for t in ordered), tf, future)


def compute_goals(bundle: SceneBundle, cfg: ModelConfig) -> GoalSet:
    """Goal set for the bundle's target; empty when no feasible cell qualifies."""
    scene = bundle.scene
    state = estimate_dynamic_state(scene.target, scene.sample_rate_hz, cfg.smoothing)
    center = scene.target.observed[-1]
    sampler = cfg.sampler(scene.horizon_s)
    try:
        return sample_goal_points(bundle.grid, state, center, sampler)
    except NoFeasibleCellsError:
        return GoalSet(tuple(map(float, center)), motion_range(state, sampler), state.heading, np.zeros((0, 2)))


@dataclass
class Batch:
    features: np.ndarray  # (B, A, T, F)
    agent_mask: np.ndarray  # (B, A) bool
    goal_offsets: np.ndarray  # (B, r, 2) target frame, meters
    goal_mask: np.ndarray  # (B, r) bool
    transforms: list[FrameTransform]
    future: np.ndarray | None  # (B, n, 2) target frame
    scene_ids: list[str]
    n: int

    @property
    def size(self) -> int:
        return self.features.shape[0]


def collate(
    scenes: Sequence[Scene],
    cfg: ModelConfig,
    grids: Sequence[FeasibleGrid] | None = None,
    goals: Sequence[GoalSet] | None = None,
) -> Batch:
    """Normalize and pad scenes. Goals come from ``goals`` or are sampled from ``grids``.

    The grids are only read when ``cfg.use_goal_features`` is set.
    """
    norms = [normalize_scene(s, cfg.lam) for s in scenes]
    batch = len(norms)
    agents = max(len(nm.agent_ids) for nm in norms)
    steps = norms[0].features.shape[1]
    feats = np.zeros((batch, agents, steps, STEP_FEATURES))
    mask = np.zeros((batch, agents), dtype=bool)
    for i, nm in enumerate(norms):
        feats[i, : len(nm.agent_ids)] = nm.features
        mask[i, : len(nm.agent_ids)] = True

    goal_rows: list[np.ndarray] = []
    if cfg.use_goal_features:
        if goals is None:
            if grids is None:
                raise ValueError("goal features need grids or precomputed goals")
            goals = [compute_goals(SceneBundle(s, g), cfg) for s, g in zip(scenes, grids)]
        goal_rows = [nm.transform.forward(gs.points).reshape(-1, 2) for nm, gs in zip(norms, goals)]
    width = max([cfg.r] + [len(g) for g in goal_rows])
    offsets = np.zeros((batch, width, 2))
    goal_mask = np.zeros((batch, width), dtype=bool)
    for i, g in enumerate(goal_rows):
        offsets[i, : len(g)] = g
        goal_mask[i, : len(g)] = True

    future = None
    if all(nm.future is not None for nm in norms):
        future = np.stack([nm.future for nm in norms])
    return Batch(
        feats, mask, offsets, goal_mask, [nm.transform for nm in norms], future,
        [s.scene_id for s in scenes], scenes[0].n,
    )


# -- parameters ----------------------------------------------------------


def init_params(cfg: ModelConfig, m: int = 20, n: int = 30, seed: int | None = None) -> Params:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p: Params = {}
    d, g = cfg.model_dim, cfg.goal_embed_dim
    steps = m - 1
    goal_width = g if cfg.use_goal_features else 0
    if cfg.use_goal_features:
        init_linear(p, rng, "goal.l1", 2, g)
        init_linear(p, rng, "goal.l2", g, g)
    if cfg.variant == "lstm_mhsa":
        init_lstm(p, rng, "enc", STEP_FEATURES, d)
        for i in range(cfg.b):
            init_mhsa(p, rng, f"att{i}", cfg.mhsa)
        feat = 2 * d + goal_width
        init_linear(p, rng, "dec_init", feat, cfg.k * d)
        init_lstm(p, rng, "dec", 2, d)
        init_linear(p, rng, "dec_out", d, 2)
        if cfg.k > 1:
            init_linear(p, rng, "conf", feat, cfg.k)
    else:
        init_linear(p, rng, "embed", steps * STEP_FEATURES, d)
        for i in range(cfg.b):
            init_set_block(p, rng, f"enc{i}", cfg.set_block)
        if cfg.goals_as_queries:
            init_linear(p, rng, "goal_query", g, cfg.k * d)
        else:
            p["seeds"] = Tensor(rng.normal(0.0, 1.0, size=(cfg.k, d)), requires_grad=True, name="seeds")
        init_mhsa(p, rng, "cross", cfg.mhsa, kv_dim=d + goal_width)
        for i in range(cfg.s):
            init_mhsa(p, rng, f"dec{i}", cfg.mhsa)
        init_linear(p, rng, "head", d, 2 * n + 1)
    return p


def load_params(arrays: dict[str, np.ndarray], cfg: ModelConfig, m: int = 20, n: int = 30) -> Params:
    template = init_params(cfg, m, n)
    if set(arrays) != set(template):
        missing = sorted(set(template) - set(arrays))
        extra = sorted(set(arrays) - set(template))
        raise ConfigError(f"checkpoint parameters do not match config (missing {missing}, extra {extra})")
    for name, t in template.items():
        if arrays[name].shape != t.shape:
            raise ConfigError(f"parameter {name}: shape {arrays[name].shape} != {t.shape}")
        t.data = np.array(arrays[name], dtype=np.float64)
    return template


# -- forward passes --------------------------------------------------------


def embed_goals(offsets, params: Params, mask=None) -> Tensor:
    """Max-pooled embedding of a set of goal offsets, ``(..., r, 2) -> (..., goal_embed_dim)``.

    An empty set (or one fully masked out) embeds to the zero vector.
    """
    off = np.asarray(offsets, dtype=np.float64)
    g = params["goal.l2.b"].shape[0]
    if off.ndim == 2:
        if len(off) == 0:
            return Tensor(np.zeros(g))
        return embed_goals(off[None], params, None if mask is None else np.asarray(mask)[None])[0]
    if mask is None:
        mask = np.ones(off.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if off.shape[-2] == 0:
        return Tensor(np.zeros(off.shape[:-2] + (g,)))
    h = linear(linear(Tensor(off / POS_SCALE), params, "goal.l1").relu(), params, "goal.l2")
    pad = np.where(mask, 0.0, -1e9)[..., None]
    pooled = (h + np.broadcast_to(pad, h.shape).copy()).max(axis=-2)
    present = np.any(mask, axis=-1).astype(np.float64)[..., None]
    return pooled * np.broadcast_to(present, pooled.shape).copy()


def _goal_embedding(batch: Batch, cfg: ModelConfig, params: Params) -> Tensor | None:
    if not cfg.use_goal_features:
        return None
    return embed_goals(batch.goal_offsets, params, batch.goal_mask)


def _broadcast_rows(vec: Tensor, rows: int) -> Tensor:
    # (B, g) -> (B, rows, g)
    row = vec.reshape(vec.shape[0], 1, vec.shape[1])
    return concat([row] * rows, axis=1)


def forward_batch(batch: Batch, cfg: ModelConfig, params: Params) -> tuple[Tensor, Tensor]:
    """Target-frame trajectories ``(B, k, n, 2)`` and log-confidences ``(B, k)``."""
    if cfg.variant == "lstm_mhsa":
        return _forward_lstm(batch, cfg, params)
    return _forward_set(batch, cfg, params)


def _forward_lstm(batch: Batch, cfg: ModelConfig, params: Params) -> tuple[Tensor, Tensor]:
    bsz, agents, steps, _ = batch.features.shape
    d, k, n = cfg.model_dim, cfg.k, batch.n
    x = batch.features
    h = Tensor(np.zeros((bsz, agents, d)))
    c = Tensor(np.zeros((bsz, agents, d)))
    for t in range(steps):
        h, c = lstm_step(Tensor(x[:, :, t, :]), h, c, params, "enc")
    ctx = h
    for i in range(cfg.b):
        ctx = mhsa(ctx, cfg.mhsa, params, f"att{i}", mask=batch.agent_mask)
    parts = [h[:, 0, :], ctx[:, 0, :]]
    goal = _goal_embedding(batch, cfg, params)
    if goal is not None:
        parts.append(goal)
    feat = concat(parts, axis=-1)

    hd = linear(feat, params, "dec_init").tanh().reshape(bsz, k, d)
    cd = Tensor(np.zeros((bsz, k, d)))
    prev = Tensor(np.repeat(x[:, 0, -1, None, 0:2], k, axis=1))
    outs = []
    for _ in range(n):
        hd, cd = lstm_step(prev, hd, cd, params, "dec")
        prev = linear(hd, params, "dec_out")
        outs.append(prev.reshape(bsz, k, 1, 2))
    traj = concat(outs, axis=2).cumsum(axis=2)
    if k > 1:
        log_conf = linear(feat, params, "conf").log_softmax(axis=-1)
    else:
        log_conf = Tensor(np.zeros((bsz, 1)))
    return traj, log_conf


def _forward_set(batch: Batch, cfg: ModelConfig, params: Params) -> tuple[Tensor, Tensor]:
    bsz, agents, steps, feats = batch.features.shape
    d, k, n = cfg.model_dim, cfg.k, batch.n
    flat = Tensor(batch.features.reshape(bsz, agents, steps * feats))
    e = linear(flat, params, "embed").relu()
    for i in range(cfg.b):
        e = set_attention_block(e, cfg.set_block, params, f"enc{i}", mask=batch.agent_mask)
    goal = _goal_embedding(batch, cfg, params)
    kv = e if goal is None else concat([e, _broadcast_rows(goal, agents)], axis=-1)
    if cfg.goals_as_queries:
        queries = linear(goal, params, "goal_query").reshape(bsz, k, d)
    else:
        queries = Tensor(np.zeros((bsz, k, d))) + params["seeds"]
    # the query is added back so modes stay distinct even with a single agent,
    # where every query would otherwise receive the same attention output
    out = queries + cross_attention(queries, kv, cfg.mhsa, params, "cross", mask=batch.agent_mask)
    for i in range(cfg.s):
        out = mhsa(out, cfg.mhsa, params, f"dec{i}")
    head = linear(out, params, "head")
    traj = head[..., : 2 * n].reshape(bsz, k, n, 2).cumsum(axis=2)
    log_conf = head[..., 2 * n].log_softmax(axis=-1)
    return traj, log_conf


# -- prediction sets -------------------------------------------------------


@dataclass(frozen=True)
class PredictionSet:
    scene_id: str
    trajectories: np.ndarray  # (k, n, 2) world frame
    confidences: np.ndarray  # (k,)

    def __post_init__(self):
        c = np.asarray(self.confidences, dtype=np.float64)
        t = np.asarray(self.trajectories, dtype=np.float64)
        if t.ndim != 3 or t.shape[-1] != 2 or t.shape[0] != c.shape[0]:
            raise ValueError(f"trajectories {t.shape} / confidences {c.shape} mismatch")
        if np.any(c < 0) or abs(c.sum() - 1.0) > 1e-6 or not np.all(np.isfinite(t)):
            raise ValueError("confidences must be >= 0 and sum to 1; coordinates finite")
        object.__setattr__(self, "trajectories", t)
        object.__setattr__(self, "confidences", c)

    @property
    def k(self) -> int:
        return len(self.confidences)

    def top(self, k: int) -> "PredictionSet":
        """The ``k`` most confident modes, confidences renormalized."""
        if not 1 <= k <= self.k:
            raise ValueError(f"cannot keep {k} of {self.k} modes")
        order = np.argsort(-self.confidences, kind="stable")[:k]
        conf = self.confidences[order]
        return PredictionSet(self.scene_id, self.trajectories[order], conf / conf.sum())


def to_prediction_sets(batch: Batch, traj: Tensor, log_conf: Tensor) -> list[PredictionSet]:
    out = []
    for i, tf in enumerate(batch.transforms):
        conf = np.exp(log_conf.data[i] - log_conf.data[i].max())
        out.append(PredictionSet(batch.scene_ids[i], tf.inverse(traj.data[i]), conf / conf.sum()))
    return out


def _single(scene: Scene, goals: GoalSet | None, cfg: ModelConfig, params: Params) -> PredictionSet:
    if cfg.use_goal_features and goals is None:
        raise ValueError("model uses goal features but no GoalSet was given")
    batch = collate([scene], cfg, goals=[goals] if cfg.use_goal_features else None)
    traj, log_conf = forward_batch(batch, cfg, params)
    return to_prediction_sets(batch, traj, log_conf)[0]


def forward_lstm_mhsa(scene: Scene, goals: GoalSet | None, cfg: ModelConfig, params: Params) -> PredictionSet:
    if cfg.variant != "lstm_mhsa":
        raise ConfigError("config variant is not lstm_mhsa")
    return _single(scene, goals, cfg, params)


def forward_set_transformer(scene: Scene, goals: GoalSet | None, cfg: ModelConfig, params: Params) -> PredictionSet:
    if cfg.variant != "set_transformer":
        raise ConfigError("config variant is not set_transformer")
    return _single(scene, goals, cfg, params)


def predict_bundles(
    bundles: Sequence[SceneBundle], cfg: ModelConfig, params: Params, batch_size: int = 64
) -> list[PredictionSet]:
    out: list[PredictionSet] = []
    with no_grad():
        for start in range(0, len(bundles), batch_size):
            chunk = bundles[start : start + batch_size]
            batch = collate([b.scene for b in chunk], cfg, grids=[b.grid for b in chunk])
            out.extend(to_prediction_sets(batch, *forward_batch(batch, cfg, params)))
    return out


# -- prediction files ------------------------------------------------------


def format_predictions(preds: Sequence[PredictionSet]) -> str:
    lines = []
    for p in preds:
        lines.append(f"PRED {p.scene_id} k={p.k}")
        for i, (traj, c) in enumerate(zip(p.trajectories, p.confidences)):
            lines.append(f"MODE {i} c={c:.9f}")
            lines.extend(f"{x:.6f} {y:.6f}" for x, y in traj)
    return "\n".join(lines) + "\n"


def parse_predictions(text: str, n: int | None = None) -> list[PredictionSet]:
    """Parse ``PRED``/``MODE`` blocks; confidences are renormalized after rounding."""
    out = []
    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    i = 0
    while i < len(lines):
        head = lines[i]
        if head[0] != "PRED" or len(head) != 3 or not head[2].startswith("k="):
            raise ValueError(f"line {i + 1}: expected 'PRED <scene_id> k=<k>'")
        scene_id, k = head[1], int(head[2][2:])
        i += 1
        trajs, confs = [], []
        for _ in range(k):
            if i >= len(lines) or lines[i][0] != "MODE":
                raise ValueError(f"line {i + 1}: expected MODE record")
            confs.append(float(lines[i][2][2:]))
            i += 1
            pts = []
            while i < len(lines) and lines[i][0] not in ("MODE", "PRED"):
                pts.append([float(v) for v in lines[i]])
                i += 1
            trajs.append(pts)
        lengths = {len(t) for t in trajs}
        if len(lengths) != 1 or (n is not None and lengths != {n}):
            raise ValueError(f"prediction {scene_id}: inconsistent trajectory lengths {lengths}")
        conf = np.array(confs)
        out.append(PredictionSet(scene_id, np.array(trajs), conf / conf.sum()))
    return out


def with_config(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes)
