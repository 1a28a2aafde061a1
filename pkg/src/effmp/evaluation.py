"""Batch evaluation over scene bundles with an optional worker pool.

The pool size is capped by the ``EFFMP_THREADS`` environment variable.
Results are identical for any worker count: chunks are fixed up front and
reassembled in input order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

from .losses import MetricReport, evaluate, scene_metrics
from .models import ModelConfig, Params, PredictionSet, predict_bundles
from .scene import SceneBundle

TSV_HEADER = "scene_id\tade\tfde\tmin_ade\tmin_fde"


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("EFFMP_THREADS")
    n = requested or (os.cpu_count() or 1)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"EFFMP_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def predict_parallel(
    bundles: Sequence[SceneBundle], cfg: ModelConfig, params: Params, workers: int | None = None, chunk: int = 64
) -> list[PredictionSet]:
    chunks = [bundles[i : i + chunk] for i in range(0, len(bundles), chunk)]
    n = min(worker_count(workers), max(1, len(chunks)))
    if n == 1:
        return [p for c in chunks for p in predict_bundles(c, cfg, params)]
    with ThreadPoolExecutor(max_workers=n) as pool:
        parts = list(pool.map(lambda c: predict_bundles(c, cfg, params), chunks))
    return [p for part in parts for p in part]


def evaluate_predictions(
    preds: Sequence[PredictionSet], bundles: Sequence[SceneBundle], k: int | None = None
) -> tuple[MetricReport, list[dict]]:
    """Score predictions against the bundles' futures, matched by scene id.

    With ``k`` set, only the ``k`` most confident modes of each prediction count.
    """
    by_id = {p.scene_id: p for p in preds}
    missing = [b.scene.scene_id for b in bundles if b.scene.scene_id not in by_id]
    if missing:
        raise KeyError(f"no prediction for scenes {missing[:5]}")
    chosen = [by_id[b.scene.scene_id] for b in bundles]
    if k is not None:
        chosen = [p.top(min(k, p.k)) for p in chosen]
    gts = [b.scene.future for b in bundles]
    report = evaluate([p.trajectories for p in chosen], [p.confidences for p in chosen], gts)
    rows = [
        {"scene_id": p.scene_id, **scene_metrics(p.trajectories, p.confidences, g)}
        for p, g in zip(chosen, gts)
    ]
    return report, rows


def evaluate_bundles(
    bundles: Sequence[SceneBundle], cfg: ModelConfig, params: Params, k: int | None = None, workers: int | None = None
) -> tuple[MetricReport, list[dict]]:
    return evaluate_predictions(predict_parallel(bundles, cfg, params, workers), bundles, k)


def format_rows(rows: Sequence[dict]) -> str:
    lines = [TSV_HEADER]
    for r in rows:
        lines.append(f"{r['scene_id']}\t{r['ade']:.6f}\t{r['fde']:.6f}\t{r['min_ade']:.6f}\t{r['min_fde']:.6f}")
    return "\n".join(lines) + "\n"
