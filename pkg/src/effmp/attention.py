"""Attention blocks and the LSTM cell.

Parameters live in flat ``dict[str, Tensor]`` maps; every block takes the map
plus a name prefix. Inputs may carry any number of leading batch dimensions:
sets are ``(..., set_size, dim)``. Set blocks follow the lightweight variant
used here: no positional encoding, no layer normalization, no residual
connections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, concat, param

Params = dict[str, Tensor]

MASK_LOGIT = -1e9


@dataclass(frozen=True)
class MHSAConfig:
    model_dim: int = 64
    heads: int = 4

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


@dataclass(frozen=True)
class SetBlockConfig:
    model_dim: int = 64
    heads: int = 4
    hidden_dim: int = 128

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")

    @property
    def attention(self) -> MHSAConfig:
        return MHSAConfig(self.model_dim, self.heads)


# -- linear maps ---------------------------------------------------------


def init_linear(params: Params, rng: np.random.Generator, name: str, d_in: int, d_out: int) -> None:
    s = 1.0 / np.sqrt(d_in)
    params[f"{name}.w"] = param(rng.uniform(-s, s, size=(d_in, d_out)), name=f"{name}.w")
    params[f"{name}.b"] = param(rng.uniform(-s, s, size=(d_out,)), name=f"{name}.b")


def linear(x: Tensor, params: Params, name: str) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


# -- attention -------------------------------------------------------------


def init_mhsa(params: Params, rng, name: str, cfg: MHSAConfig, kv_dim: int | None = None) -> None:
    d = cfg.model_dim
    init_linear(params, rng, f"{name}.q", d, d)
    init_linear(params, rng, f"{name}.k", kv_dim or d, d)
    init_linear(params, rng, f"{name}.v", kv_dim or d, d)
    init_linear(params, rng, f"{name}.o", d, d)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., n, d) -> (..., heads, n, d/heads)
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, hd = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, n, h * hd)


def attend(
    q_in: Tensor,
    kv_in: Tensor,
    cfg: MHSAConfig,
    params: Params,
    name: str,
    kv_mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention of ``q_in`` rows over ``kv_in`` rows.

    ``kv_mask`` (``(..., set_size)`` booleans, True = present) excludes rows
    through an additive large negative logit.
    """
    if q_in.shape[-1] != cfg.model_dim:
        raise ShapeError(f"query width {q_in.shape[-1]} != model_dim {cfg.model_dim}")
    if q_in.shape[:-2] != kv_in.shape[:-2]:
        raise ShapeError(f"batch dims differ: {q_in.shape} vs {kv_in.shape}")
    if q_in.shape[-2] < 1 or kv_in.shape[-2] < 1:
        raise ShapeError("attention needs at least one query and one key")
    h = cfg.heads
    q = _split_heads(linear(q_in, params, f"{name}.q"), h)
    k = _split_heads(linear(kv_in, params, f"{name}.k"), h)
    v = _split_heads(linear(kv_in, params, f"{name}.v"), h)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(cfg.head_dim))
    if kv_mask is not None:
        mask = np.asarray(kv_mask, dtype=bool)
        if mask.shape != kv_in.shape[:-1]:
            raise ShapeError(f"mask shape {mask.shape} != {kv_in.shape[:-1]}")
        add = np.where(mask, 0.0, MASK_LOGIT)[..., None, None, :]
        scores = scores + np.broadcast_to(add, scores.shape).copy()
    weights = scores.softmax(axis=-1)
    out = linear(_merge_heads(weights @ v), params, f"{name}.o")
    if return_weights:
        return out, weights
    return out


def mhsa(x: Tensor, cfg: MHSAConfig, params: Params, name: str = "mhsa", mask=None, return_weights=False):
    """Self-attention over the rows of ``x``; permutation-equivariant in the rows."""
    return attend(x, x, cfg, params, name, kv_mask=mask, return_weights=return_weights)


def cross_attention(q: Tensor, kv: Tensor, cfg: MHSAConfig, params: Params, name: str = "cross", mask=None):
    """Each query row attends over ``kv``; invariant to permutations of ``kv`` rows."""
    return attend(q, kv, cfg, params, name, kv_mask=mask)


def init_set_block(params: Params, rng, name: str, cfg: SetBlockConfig) -> None:
    init_mhsa(params, rng, f"{name}.att", cfg.attention)
    init_linear(params, rng, f"{name}.ff1", cfg.model_dim, cfg.hidden_dim)
    init_linear(params, rng, f"{name}.ff2", cfg.hidden_dim, cfg.model_dim)


def set_attention_block(x: Tensor, cfg: SetBlockConfig, params: Params, name: str = "sab", mask=None) -> Tensor:
    a = mhsa(x, cfg.attention, params, f"{name}.att", mask=mask)
    return linear(linear(a, params, f"{name}.ff1").relu(), params, f"{name}.ff2")


# -- LSTM --------------------------------------------------------------------


def init_lstm(params: Params, rng, name: str, input_dim: int, hidden_dim: int) -> None:
    s = 1.0 / np.sqrt(hidden_dim)
    d = input_dim + hidden_dim
    params[f"{name}.w"] = param(rng.uniform(-s, s, size=(d, 4 * hidden_dim)), name=f"{name}.w")
    bias = rng.uniform(-s, s, size=(4 * hidden_dim,))
    bias[hidden_dim : 2 * hidden_dim] = 1.0  # forget gate
    params[f"{name}.b"] = param(bias, name=f"{name}.b")


def lstm_step(x_t: Tensor, h: Tensor, c: Tensor, params: Params, name: str = "lstm") -> tuple[Tensor, Tensor]:
    """One LSTM cell update. Gate order in the packed weights: input, forget, cell, output."""
    hid = h.shape[-1]
    w = params[f"{name}.w"]
    if x_t.shape[-1] + hid != w.shape[0] or c.shape != h.shape:
        raise ShapeError(f"lstm shapes: x {x_t.shape}, h {h.shape}, c {c.shape}, w {w.shape}")
    z = concat([x_t, h], axis=-1) @ w + params[f"{name}.b"]
    i = z[..., 0:hid].sigmoid()
    f = z[..., hid : 2 * hid].sigmoid()
    g = z[..., 2 * hid : 3 * hid].tanh()
    o = z[..., 3 * hid : 4 * hid].sigmoid()
    c_new = f * c + i * g
    return o * c_new.tanh(), c_new
