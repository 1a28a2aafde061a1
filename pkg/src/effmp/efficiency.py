"""Closed-form parameter and multiply-accumulate counts for one forward pass.

Only matrix products are counted (linear maps, LSTM gate products, attention
score and value products), matching how profiler-style FLOP counters treat
these models; elementwise activations are ignored. FLOPs are reported as
``2 * MACs``, i.e. ``GMACs = 0.5 * GFLOPs``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .models import STEP_FEATURES, ModelConfig


def linear_params(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def _mhsa_params(d: int, kv: int) -> int:
    return 2 * linear_params(d, d) + 2 * linear_params(kv, d)


def _lstm_params(d_in: int, hidden: int) -> int:
    return (d_in + hidden) * 4 * hidden + 4 * hidden


def count_params(cfg: ModelConfig, m: int = 20, n: int = 30) -> int:
    d, g, k = cfg.model_dim, cfg.goal_embed_dim, cfg.k
    gw = g if cfg.use_goal_features else 0
    total = linear_params(2, g) + linear_params(g, g) if cfg.use_goal_features else 0
    if cfg.variant == "lstm_mhsa":
        feat = 2 * d + gw
        total += _lstm_params(STEP_FEATURES, d) + cfg.b * _mhsa_params(d, d)
        total += linear_params(feat, k * d) + _lstm_params(2, d) + linear_params(d, 2)
        if k > 1:
            total += linear_params(feat, k)
        return total
    total += linear_params((m - 1) * STEP_FEATURES, d)
    total += cfg.b * (_mhsa_params(d, d) + linear_params(d, cfg.ff_dim) + linear_params(cfg.ff_dim, d))
    total += linear_params(g, k * d) if cfg.goals_as_queries else k * d
    total += _mhsa_params(d, d + gw) + cfg.s * _mhsa_params(d, d)
    total += linear_params(d, 2 * n + 1)
    return total


@dataclass
class FlopReport:
    params: int
    macs: dict[str, int] = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    @property
    def gmacs(self) -> float:
        return self.total_macs / 1e9

    @property
    def gflops(self) -> float:
        return 2.0 * self.gmacs

    def format(self) -> str:
        lines = [
            f"params_m={self.params / 1e6:.6f}",
            f"gmacs={self.gmacs:.6f}",
            f"gflops={self.gflops:.6f}",
        ]
        lines += [f"macs.{name}={value}" for name, value in self.macs.items()]
        return "\n".join(lines) + "\n"


def _attention(macs: dict, name: str, n_q: int, n_kv: int, d: int, kv_dim: int) -> None:
    macs[f"{name}.proj"] = macs.get(f"{name}.proj", 0) + 2 * n_q * d * d + 2 * n_kv * kv_dim * d
    # score and value products: quadratic in the set sizes
    macs[f"{name}.scores"] = macs.get(f"{name}.scores", 0) + 2 * n_q * n_kv * d


def count_flops(cfg: ModelConfig, agent_count: int, r: int | None = None, m: int = 20, n: int = 30) -> FlopReport:
    """MAC breakdown for a single scene with ``agent_count`` agents and ``r`` goal points."""
    a = agent_count
    r = cfg.r if r is None else r
    d, g, k = cfg.model_dim, cfg.goal_embed_dim, cfg.k
    gw = g if cfg.use_goal_features else 0
    steps = m - 1
    macs: dict[str, int] = {}
    if cfg.use_goal_features:
        macs["goal_embed"] = r * (2 * g + g * g)
    if cfg.variant == "lstm_mhsa":
        feat = 2 * d + gw
        macs["encoder_lstm"] = a * steps * (STEP_FEATURES + d) * 4 * d
        for _ in range(cfg.b):
            _attention(macs, "encoder_attention", a, a, d, d)
        macs["decoder_init"] = feat * k * d
        macs["decoder_lstm"] = n * k * ((2 + d) * 4 * d + d * 2)
        if k > 1:
            macs["confidence"] = feat * k
    else:
        macs["embed"] = a * steps * STEP_FEATURES * d
        for _ in range(cfg.b):
            _attention(macs, "encoder_attention", a, a, d, d)
        macs["encoder_ff"] = cfg.b * a * 2 * d * cfg.ff_dim
        if cfg.goals_as_queries:
            macs["goal_query"] = g * k * d
        _attention(macs, "cross_attention", k, a, d, d + gw)
        for _ in range(cfg.s):
            _attention(macs, "decoder_attention", k, k, d, d)
        macs["head"] = k * d * (2 * n + 1)
    return FlopReport(count_params(cfg, m, n), macs)
