import numpy as np
import pytest

from conftest import gradcheck
from effmp.attention import (
    MHSAConfig,
    SetBlockConfig,
    attend,
    cross_attention,
    init_lstm,
    init_mhsa,
    init_set_block,
    linear,
    lstm_step,
    mhsa,
    set_attention_block,
)
from effmp.tensor import ShapeError, Tensor, param

CFG = MHSAConfig(model_dim=16, heads=4)
SET_CFG = SetBlockConfig(model_dim=16, heads=4, hidden_dim=24)


def mhsa_params(seed=0, kv_dim=None):
    p = {}
    init_mhsa(p, np.random.default_rng(seed), "att", CFG, kv_dim)
    return p


def test_config_requires_divisible_heads():
    with pytest.raises(ValueError):
        MHSAConfig(model_dim=10, heads=4)
    with pytest.raises(ValueError):
        SetBlockConfig(model_dim=10, heads=3)
    assert MHSAConfig(64, 4).head_dim == 16


def test_single_row_takes_the_value_path():
    p = mhsa_params()
    x = Tensor(np.random.default_rng(1).normal(size=(1, 16)))
    out, w = mhsa(x, CFG, p, "att", return_weights=True)
    np.testing.assert_array_equal(w.data, np.ones((4, 1, 1)))
    expected = linear(linear(x, p, "att.v"), p, "att.o")
    np.testing.assert_allclose(out.data, expected.data, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_mhsa_is_row_equivariant(seed):
    rng = np.random.default_rng(seed)
    p = mhsa_params(seed)
    x = rng.normal(size=(2, 7, 16))
    perm = rng.permutation(7)
    a = mhsa(Tensor(x), CFG, p, "att").data
    b = mhsa(Tensor(x[:, perm]), CFG, p, "att").data
    assert np.abs(a[:, perm] - b).max() < 1e-9


def test_identical_rows_give_identical_outputs():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 16))
    x[3] = x[1]
    out = mhsa(Tensor(x), CFG, mhsa_params(), "att").data
    np.testing.assert_array_equal(out[1], out[3])


def test_attention_weights_are_distributions():
    rng = np.random.default_rng(3)
    _, w = mhsa(Tensor(rng.normal(size=(3, 9, 16)) * 4), CFG, mhsa_params(), "att", return_weights=True)
    assert (w.data >= 0).all()
    assert np.abs(w.data.sum(axis=-1) - 1).max() < 1e-9


def test_masked_rows_get_no_weight_and_do_not_matter():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 16))
    mask = np.array([True, True, False, True, False, True])
    p = mhsa_params()
    out, w = mhsa(Tensor(x), CFG, p, "att", mask=mask, return_weights=True)
    assert w.data[..., ~mask].max() < 1e-300
    y = x.copy()
    y[~mask] = rng.normal(size=(2, 16)) * 100
    out2 = mhsa(Tensor(y), CFG, p, "att", mask=mask).data
    np.testing.assert_allclose(out.data[mask], out2[mask], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_cross_attention_is_kv_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = mhsa_params(seed, kv_dim=10)
    q = Tensor(rng.normal(size=(6, 16)))
    kv = rng.normal(size=(8, 10))
    perm = rng.permutation(8)
    a = cross_attention(q, Tensor(kv), CFG, p, "att").data
    b = cross_attention(q, Tensor(kv[perm]), CFG, p, "att").data
    assert np.abs(a - b).max() < 1e-9


def test_cross_attention_over_identical_rows_returns_common_value():
    rng = np.random.default_rng(5)
    p = mhsa_params()
    row = rng.normal(size=(1, 16))
    kv = Tensor(np.repeat(row, 5, axis=0))
    out = cross_attention(Tensor(rng.normal(size=(3, 16)) * 5), kv, CFG, p, "att").data
    value = linear(linear(Tensor(row), p, "att.v"), p, "att.o").data
    np.testing.assert_allclose(out, np.repeat(value, 3, axis=0), atol=1e-12)


def test_single_query_single_key_matches_closed_form():
    rng = np.random.default_rng(6)
    p = mhsa_params()
    x = rng.normal(size=(1, 16))
    q = rng.normal(size=(1, 16))
    cross = cross_attention(Tensor(q), Tensor(x), CFG, p, "att").data
    self_path = mhsa(Tensor(x), CFG, p, "att").data
    # one key means weight 1 whatever the query, so both reduce to o(v(x))
    np.testing.assert_allclose(cross, self_path, atol=1e-12)


def test_attention_shape_errors():
    p = mhsa_params()
    with pytest.raises(ShapeError):
        mhsa(Tensor(np.ones((3, 8))), CFG, p, "att")
    with pytest.raises(ShapeError):
        attend(Tensor(np.ones((2, 3, 16))), Tensor(np.ones((3, 3, 16))), CFG, p, "att")
    with pytest.raises(ShapeError):
        mhsa(Tensor(np.ones((0, 16))), CFG, p, "att")
    with pytest.raises(ShapeError):
        mhsa(Tensor(np.ones((3, 16))), CFG, p, "att", mask=np.ones(4, bool))


def set_params(seed=0):
    p = {}
    init_set_block(p, np.random.default_rng(seed), "sab", SET_CFG)
    return p


@pytest.mark.parametrize("seed", range(3))
def test_set_block_is_row_equivariant(seed):
    rng = np.random.default_rng(seed)
    p = set_params(seed)
    x = rng.normal(size=(7, 16))
    perm = rng.permutation(7)
    a = set_attention_block(Tensor(x), SET_CFG, p).data
    b = set_attention_block(Tensor(x[perm]), SET_CFG, p).data
    assert np.abs(a[perm] - b).max() < 1e-9


def test_set_block_zero_feed_forward_returns_bias():
    p = set_params()
    p["sab.ff1.w"].data[:] = 0
    p["sab.ff1.b"].data[:] = 0
    p["sab.ff2.w"].data[:] = 0
    x = Tensor(np.random.default_rng(7).normal(size=(4, 16)))
    out = set_attention_block(x, SET_CFG, p).data
    np.testing.assert_array_equal(out, np.tile(p["sab.ff2.b"].data, (4, 1)))


@pytest.mark.parametrize("seed", range(3))
def test_set_block_gradcheck(seed):
    rng = np.random.default_rng(seed)
    p = set_params(seed)
    x = param(rng.normal(size=(2, 5, 16)))
    w = rng.normal(size=(2, 5, 16))
    p["x"] = x
    mask = np.array([[True] * 5, [True, True, True, False, True]])
    gradcheck(lambda: (set_attention_block(x, SET_CFG, p, mask=mask) * w).sum(), p, seed=seed)


def test_stacked_blocks_gradcheck():
    rng = np.random.default_rng(11)
    p = set_params(1)
    init_mhsa(p, rng, "cross", SET_CFG.attention)
    x = param(rng.normal(size=(6, 16)))
    q = param(rng.normal(size=(3, 16)))
    p.update(x=x, q=q)
    w = rng.normal(size=(3, 16))

    def fn():
        enc = set_attention_block(x, SET_CFG, p)
        return (cross_attention(q, enc, SET_CFG.attention, p, "cross").tanh() * w).sum()

    gradcheck(fn, p, seed=11)


def test_lstm_constant_cell():
    p = {}
    init_lstm(p, np.random.default_rng(0), "lstm", 3, 4)
    p["lstm.w"].data[:] = 0
    p["lstm.b"].data[:] = 0
    p["lstm.b"].data[4:8] = 1.0
    c = np.array([0.3, -1.2, 2.0, 0.0])
    h1, c1 = lstm_step(Tensor(np.ones(3)), Tensor(np.zeros(4)), Tensor(c), p)
    sig1 = 1 / (1 + np.exp(-1.0))
    np.testing.assert_allclose(c1.data, sig1 * c, atol=1e-15)
    np.testing.assert_allclose(h1.data, 0.5 * np.tanh(sig1 * c), atol=1e-15)


def test_lstm_output_is_bounded():
    rng = np.random.default_rng(1)
    p = {}
    init_lstm(p, rng, "lstm", 5, 8)
    p["lstm.w"].data *= 50
    h, c = Tensor(np.zeros((10, 8))), Tensor(np.zeros((10, 8)))
    for _ in range(6):
        h, c = lstm_step(Tensor(rng.normal(size=(10, 5)) * 100), h, c, p)
        assert (np.abs(h.data) < 1).all()


def test_lstm_shape_error():
    p = {}
    init_lstm(p, np.random.default_rng(0), "lstm", 3, 4)
    with pytest.raises(ShapeError):
        lstm_step(Tensor(np.ones(2)), Tensor(np.zeros(4)), Tensor(np.zeros(4)), p)


@pytest.mark.parametrize("seed", range(3))
def test_lstm_unrolled_gradcheck(seed):
    rng = np.random.default_rng(seed)
    p = {}
    init_lstm(p, rng, "lstm", 3, 5)
    xs = param(rng.normal(size=(5, 2, 3)))
    p["xs"] = xs
    w = rng.normal(size=(2, 5))

    def fn():
        h = c = Tensor(np.zeros((2, 5)))
        for t in range(5):
            h, c = lstm_step(xs[t], h, c, p)
        return (h * w).sum() + c.sum()

    gradcheck(fn, p, seed=seed)
