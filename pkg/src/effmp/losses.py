"""Displacement metrics and the composite NLL + ADE + FDE training loss.

Plain-numpy functions (``ade``, ``fde``, ``nll``, ``min_ade_k`` ...) are the
evaluation metrics. The ``*_loss`` functions are their differentiable
counterparts over :class:`~effmp.tensor.Tensor` with a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError

CONF_TOL = 1e-6


class ConfidenceError(ValueError):
    """Mode confidences are negative or do not sum to one."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.75
    beta: float = 1.0
    gamma: float = 0.5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class MetricReport:
    ade: float
    fde: float
    min_ade_k: float
    min_fde_k: float
    k: int
    scenes: int

    def format(self) -> str:
        return (
            f"EVAL scenes={self.scenes} ade={self.ade:.6f} fde={self.fde:.6f} "
            f"minade{self.k}={self.min_ade_k:.6f} minfde{self.k}={self.min_fde_k:.6f}"
        )


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.shape[-1] != 2:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p, g


def ade(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean(np.hypot(*(p - g).T)))


def fde(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.hypot(*(p[-1] - g[-1])))


def _modes(preds, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.ndim != 3 or p.shape[1:] != g.shape:
        raise ShapeError(f"expected (k, n, 2) predictions for gt {g.shape}, got {p.shape}")
    return p, g


def min_ade_k(preds, gt) -> tuple[float, int]:
    p, g = _modes(preds, gt)
    per_mode = np.mean(np.linalg.norm(p - g, axis=-1), axis=-1)
    best = int(np.argmin(per_mode))
    return float(per_mode[best]), best


def min_fde_k(preds, gt) -> tuple[float, int]:
    p, g = _modes(preds, gt)
    per_mode = np.linalg.norm(p[:, -1] - g[-1], axis=-1)
    best = int(np.argmin(per_mode))
    return float(per_mode[best]), best


def check_confidences(conf) -> np.ndarray:
    c = np.asarray(conf, dtype=np.float64)
    if np.any(c < 0) or abs(c.sum(axis=-1) - 1.0).max() > CONF_TOL:
        raise ConfidenceError(f"confidences must be >= 0 and sum to 1, got {c}")
    return c


def nll(preds, confidences, gt) -> float:
    """Mixture negative log-likelihood with unit-covariance Gaussian modes."""
    p, g = _modes(preds, gt)
    c = check_confidences(confidences)
    if c.shape != (p.shape[0],):
        raise ShapeError(f"{p.shape[0]} modes but {c.shape} confidences")
    with np.errstate(divide="ignore"):
        logits = np.log(c) - 0.5 * np.sum((p - g) ** 2, axis=(1, 2))
    top = logits.max()
    return float(-(top + np.log(np.sum(np.exp(logits - top)))))


def evaluate(predictions, confidences, gts) -> MetricReport:
    """Mean metrics over scenes; ADE/FDE use each scene's most confident mode."""
    rows = [scene_metrics(p, c, g) for p, c, g in zip(predictions, confidences, gts)]
    if not rows:
        raise ValueError("no scenes to evaluate")
    arr = np.array([[r["ade"], r["fde"], r["min_ade"], r["min_fde"]] for r in rows])
    mean = arr.mean(axis=0)
    return MetricReport(*map(float, mean), k=len(np.asarray(predictions[0])), scenes=len(rows))


def scene_metrics(preds, conf, gt) -> dict[str, float]:
    p = np.asarray(preds)
    top = int(np.argmax(conf))
    return {
        "ade": ade(p[top], gt),
        "fde": fde(p[top], gt),
        "min_ade": min_ade_k(p, gt)[0],
        "min_fde": min_fde_k(p, gt)[0],
    }


# -- differentiable losses -------------------------------------------------


def _as_batch(preds: Tensor, gt) -> tuple[Tensor, np.ndarray]:
    g = np.asarray(gt, dtype=np.float64)
    if preds.ndim == 3:
        preds = preds.reshape(1, *preds.shape)
        g = g.reshape(1, *g.shape)
    if preds.ndim != 4 or preds.shape[0] != g.shape[0] or preds.shape[2:] != g.shape[1:]:
        raise ShapeError(f"predictions {preds.shape} do not match ground truth {g.shape}")
    return preds, g


def nll_loss(preds: Tensor, log_conf: Tensor, gt) -> Tensor:
    """Per-scene NLL, shape ``(batch,)``. ``preds`` is ``(batch, k, n, 2)``."""
    preds, g = _as_batch(preds, gt)
    if log_conf.ndim == 1:
        log_conf = log_conf.reshape(1, -1)
    k = preds.shape[1]
    err = preds - np.repeat(g[:, None], k, axis=1)
    sq = (err * err).sum(axis=(2, 3))
    return -((log_conf - 0.5 * sq).logsumexp(axis=-1))


def displacement(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Euclidean distance per time step, ``(..., n)``."""
    err = pred - gt
    return (err * err).sum(axis=-1).sqrt()


def best_mode(preds: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Winner-take-all index per scene: argmin of final displacement."""
    return np.argmin(np.linalg.norm(preds[:, :, -1] - gt[:, None, -1], axis=-1), axis=1)


def loss_terms(preds: Tensor, log_conf: Tensor, gt, w: LossWeights = LossWeights()) -> tuple[Tensor, dict]:
    """Batch-mean composite loss plus the batch-mean value of each term."""
    preds, g = _as_batch(preds, gt)
    batch = preds.shape[0]
    best = best_mode(preds.data, g)
    chosen = preds[np.arange(batch), best]
    dist = displacement(chosen, g)
    nll_t = nll_loss(preds, log_conf, g).mean()
    ade_t = dist.mean()
    fde_t = dist[:, -1].mean()
    total = w.alpha * nll_t + w.beta * ade_t + w.gamma * fde_t
    terms = {"nll": nll_t.item(), "ade": ade_t.item(), "fde": fde_t.item()}
    return total, terms


def total_loss(preds: Tensor, confidences: Tensor, gt, w: LossWeights = LossWeights()) -> Tensor:
    """``alpha*NLL + beta*ADE + gamma*FDE`` with ADE/FDE on the best-FDE mode."""
    check_confidences(confidences.data)
    return loss_terms(preds, confidences.log(), gt, w)[0]
