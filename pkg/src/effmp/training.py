"""Minibatch Adam training with augmentation, plateau scheduling and checkpoints.

Everything random is drawn from ``np.random.default_rng([seed, step])`` so a
run resumed from a checkpoint at step ``s`` continues exactly like the
uninterrupted run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .evaluation import evaluate_bundles
from .features import GoalSet
from .losses import LossWeights, loss_terms
from .models import ModelConfig, Params, collate, compute_goals, forward_batch, init_params, load_params
from .optim import AdamState, PlateauScheduler, adam_step, load_checkpoint, save_checkpoint, zero_grad
from .tensor import Tensor
from .scene import AgentTrack, FeasibleGrid, Scene, SceneBundle, forward_fill, rotate_bundle

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    point_dropout_p: float = 0.1
    rotate90_p: float = 0.5
    jitter_sigma_m: float = 0.2

    def __post_init__(self):
        for p in (self.point_dropout_p, self.rotate90_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError("augmentation probabilities must lie in [0, 1]")
        if self.jitter_sigma_m < 0:
            raise ValueError("jitter sigma must be >= 0")

    @property
    def active(self) -> bool:
        return bool(self.point_dropout_p or self.rotate90_p or self.jitter_sigma_m)


NO_AUGMENT = AugmentConfig(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    max_steps: int = 1000
    eval_every: int = 50
    patience: int = 3
    early_stop: int = 5  # non-improving validations before stopping; 0 disables
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 1:
            raise ValueError("batch_size >= 1, max_steps >= 0, eval_every >= 1 required")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class TrainState:
    step: int
    lr: float
    best_metric: float
    params: Params
    checkpoint: Path | None = None
    history: list[dict] = field(default_factory=list)


def _truncated_normal(rng, sigma: float, shape) -> np.ndarray:
    out = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(out) > 6 * sigma
    while np.any(bad):
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > 6 * sigma
    return out


def augment(
    scene: Scene,
    grid: FeasibleGrid,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    quarter_turns: int | None = None,
) -> tuple[Scene, FeasibleGrid]:
    """Point dropout, random quarter-turn rotation, then Gaussian jitter.

    ``quarter_turns`` forces the rotation instead of drawing it. The future
    is only rotated; the last observed point is never dropped.
    """
    tracks = []
    for t in scene.tracks:
        mask = t.valid_mask.copy()
        if cfg.point_dropout_p > 0:
            drop = rng.random(t.m) < cfg.point_dropout_p
            drop[-1] = False
            if (mask & ~drop).sum() >= 2:
                mask &= ~drop
        tracks.append(AgentTrack(t.agent_id, t.role, forward_fill(t.observed, mask), mask))
    out = Scene(scene.scene_id, tuple(tracks), scene.target_id, scene.future, scene.sample_rate_hz, scene.m, scene.n)

    q = quarter_turns
    if q is None:
        q = int(rng.integers(1, 4)) if rng.random() < cfg.rotate90_p else 0
    bundle = SceneBundle(out, grid)
    if q % 4:
        bundle = rotate_bundle(bundle, q)

    if cfg.jitter_sigma_m > 0:
        tracks = []
        for t in bundle.scene.tracks:
            noisy = t.observed + _truncated_normal(rng, cfg.jitter_sigma_m, t.observed.shape)
            tracks.append(AgentTrack(t.agent_id, t.role, forward_fill(noisy, t.valid_mask), t.valid_mask))
        s = bundle.scene
        return Scene(s.scene_id, tuple(tracks), s.target_id, s.future, s.sample_rate_hz, s.m, s.n), bundle.grid
    return bundle.scene, bundle.grid


def split_dataset(count: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng([seed, 7919]).permutation(count)
    n_val = int(round(count * val_fraction))
    if count - n_val < 1:
        n_val = count - 1
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _meta(model_cfg: ModelConfig, step: int, lr: float, sched: PlateauScheduler, best: float, stale: int, m: int, n: int) -> dict:
    return {
        "config": model_cfg.compact(),
        "config_hash": model_cfg.digest(),
        "m": m,
        "n": n,
        "step": step,
        "lr": repr(lr),
        "sched.best": repr(sched.best),
        "sched.bad": sched.bad_evals,
        "best_metric": repr(best),
        "stale_evals": stale,
    }


def config_from_meta(meta: dict) -> ModelConfig:
    return ModelConfig.from_text(meta["config"].replace(",", "\n"))


def train(
    dataset: Sequence[SceneBundle],
    model_cfg: ModelConfig,
    cfg: TrainConfig = TrainConfig(),
    checkpoint: str | Path | None = None,
    resume: str | Path | None = None,
    emit: Callable[[str], None] | None = None,
) -> TrainState:
    """Train on ``dataset``; returns the final state.

    With ``checkpoint`` set, the resumable final state is written to
    ``<checkpoint>.last`` and the best-validation parameters to
    ``<checkpoint>`` (the final ones when there is no validation split).
    """
    if not dataset:
        raise ValueError("empty dataset")
    m, n = dataset[0].scene.m, dataset[0].scene.n
    train_idx, val_idx = split_dataset(len(dataset), cfg.val_fraction, cfg.seed)
    val = [dataset[i] for i in val_idx]

    params = init_params(model_cfg, m, n, seed=cfg.seed)
    adam = AdamState()
    sched = PlateauScheduler(cfg.lr, factor=0.5, patience=cfg.patience)
    best, stale, start = float("inf"), 0, 0
    if resume is not None:
        ck = load_checkpoint(resume)
        if config_from_meta(ck.meta) != model_cfg:
            raise ValueError("checkpoint was written for a different model config")
        params = load_params(ck.params, model_cfg, m, n)
        adam = ck.adam
        start = int(ck.meta["step"])
        sched.lr = float(ck.meta["lr"])
        sched.best = float(ck.meta["sched.best"])
        sched.bad_evals = int(ck.meta["sched.bad"])
        best = float(ck.meta["best_metric"])
        stale = int(ck.meta["stale_evals"])

    goal_cache: dict[int, GoalSet] = {}
    best_params = {k: v.data.copy() for k, v in params.items()}
    state = TrainState(start, sched.lr, best, params)
    step = start
    for step in range(start, cfg.max_steps):
        rng = np.random.default_rng([cfg.seed, step])
        size = min(cfg.batch_size, len(train_idx))
        idx = np.sort(rng.choice(train_idx, size=size, replace=False))
        scenes, grids, goals = [], [], None
        for i in idx:
            b = dataset[i]
            if cfg.aug.active:
                sc, gr = augment(b.scene, b.grid, cfg.aug, rng)
            else:
                sc, gr = b.scene, b.grid
            scenes.append(sc)
            grids.append(gr)
        if model_cfg.use_goal_features and not cfg.aug.active:
            for i in idx:
                if i not in goal_cache:
                    goal_cache[i] = compute_goals(dataset[i], model_cfg)
            goals = [goal_cache[i] for i in idx]
        batch = collate(scenes, model_cfg, grids=grids, goals=goals)
        traj, log_conf = forward_batch(batch, model_cfg, params)
        loss, terms = loss_terms(traj, log_conf, batch.future, cfg.weights)
        if not np.isfinite(loss.item()):
            raise NonFiniteLossError(f"non-finite loss at step {step + 1} in scenes {batch.scene_ids}")
        zero_grad(params)
        loss.backward()
        adam_step(params, adam, sched.lr)
        record = {"step": step + 1, "loss": loss.item(), **terms, "lr": sched.lr}
        state.history.append(record)
        line = (
            f"STEP {step + 1} loss={record['loss']:.6f} nll={terms['nll']:.6f} "
            f"ade={terms['ade']:.6f} fde={terms['fde']:.6f} lr={sched.lr:.6g}"
        )
        if emit is not None:
            emit(line)
        else:
            log.debug(line)

        if val and (step + 1) % cfg.eval_every == 0:
            report, _ = evaluate_bundles(val, model_cfg, params)
            metric = report.min_ade_k
            sched.step(metric)
            record["val_min_ade"] = metric
            if metric < best:
                best, stale = metric, 0
                best_params = {k: v.data.copy() for k, v in params.items()}
            else:
                stale += 1
            if cfg.early_stop and stale >= cfg.early_stop:
                step += 1
                break
    else:
        step = cfg.max_steps

    state.step = max(step, start)
    state.lr = sched.lr
    state.best_metric = best
    if checkpoint is not None:
        path = Path(checkpoint)
        meta = _meta(model_cfg, state.step, sched.lr, sched, best, stale, m, n)
        save_checkpoint(str(path) + ".last", params, adam, meta)
        if val and np.isfinite(best):
            frozen = {k: Tensor(v) for k, v in best_params.items()}
            save_checkpoint(path, frozen, None, meta)
        else:
            save_checkpoint(path, params, None, meta)
        state.checkpoint = path
    return state


def load_model(path: str | Path) -> tuple[ModelConfig, Params, dict]:
    ck = load_checkpoint(path)
    if "config" not in ck.meta:
        raise ValueError(f"{path}: checkpoint carries no model config")
    cfg = config_from_meta(ck.meta)
    m, n = int(ck.meta.get("m", 20)), int(ck.meta.get("n", 30))
    return cfg, load_params(ck.params, cfg, m, n), ck.meta
