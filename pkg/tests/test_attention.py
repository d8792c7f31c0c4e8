"""Feature-map and spatial attention: analytic fixtures, gradients, variants."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgbdfuse import attention as A
from rgbdfuse import tensor as T
from rgbdfuse.errors import ConfigError
from tests.test_tensor import check_grad


def zero_params(module):
    for _, p in module.parameters():
        p.data[:] = 0.0


def fm_init(channels, m, seed=0, **kw):
    return A.FeatureMapAttention.init(channels, m, np.random.default_rng(seed), **kw)


def sp_init(m, seed=0, **kw):
    return A.SpatialAttention.init(m, np.random.default_rng(seed), **kw)


# -- reshape_to_map_sequence ----------------------------------------------------


def test_map_sequence_paper_shape():
    f = T.Tensor(np.zeros((7, 7, 1024)))
    assert A.reshape_to_map_sequence(f).shape == (1024, 49)


def test_map_sequence_degenerate_spatial():
    f = T.Tensor(np.arange(5.0).reshape(1, 1, 5))
    out = A.reshape_to_map_sequence(f)
    assert out.shape == (5, 1)
    assert np.array_equal(out.data.reshape(-1), f.data.reshape(-1))


def test_map_sequence_index_placement_brute_force():
    m, c = 2, 2
    f = np.arange(float(m * m * c)).reshape(m, m, c)
    out = A.reshape_to_map_sequence(T.Tensor(f)).data
    for ch in range(c):
        for i in range(m):
            for j in range(m):
                assert out[ch, i * m + j] == f[i, j, ch]


def test_map_sequence_batched_orientation():
    rng = np.random.default_rng(1)
    f = rng.random((3, 2, 2, 4))
    out = A.reshape_to_map_sequence(T.Tensor(f)).data
    assert out.shape == (4, 3, 4)
    for b in range(3):
        single = A.reshape_to_map_sequence(T.Tensor(f[b])).data
        assert np.array_equal(out[:, b, :], single)


# -- feature-map attention ---------------------------------------------------------


def test_fm_zero_parameters_gives_half_weights():
    att = fm_init(4, 2)
    zero_params(att)
    f = T.Tensor(np.random.default_rng(2).random((2, 2, 4)))
    weights, refined = A.feature_map_attention(att, f)
    assert np.array_equal(weights.data, np.full(4, 0.5))
    assert np.array_equal(refined.data, 0.5 * f.data)


def test_fm_bypass_is_exact_identity():
    att = fm_init(4, 2)
    att.bypass = True
    f = T.Tensor(np.random.default_rng(3).random((2, 2, 4)))
    weights, refined = A.feature_map_attention(att, f)
    assert np.array_equal(weights.data, np.ones(4))
    assert np.array_equal(refined.data, f.data)


def test_fm_weights_strictly_in_unit_interval():
    att = fm_init(4, 2, seed=4)
    f = T.Tensor(np.random.default_rng(5).standard_normal((2, 2, 4)) * 50)
    weights, _ = A.feature_map_attention(att, f)
    assert np.all(weights.data > 0.0) and np.all(weights.data < 1.0)


@pytest.mark.parametrize(
    "kw",
    [
        {},
        {"variant": "dense_only"},
        {"n_layers": 2},
        {"n_layers": 3},
        {"blstm": True},
        {"transposed": True},
        {"activation": "softmax"},
    ],
)
def test_fm_variants_shapes_and_gradients(kw):
    att = fm_init(4, 2, seed=6, hidden=5, **kw)
    rng = np.random.default_rng(7)
    f = T.parameter(rng.standard_normal((2, 2, 4)), "f")
    g = T.Tensor(rng.standard_normal((2, 2, 4)))

    weights, refined = A.feature_map_attention(att, f)
    assert weights.shape == (4,)
    assert refined.shape == f.shape

    params = [p for _, p in att.parameters()] + [f]

    def loss():
        _, out = A.feature_map_attention(att, f)
        return T.tsum(out * g)

    check_grad(loss, params, 1e-4)


def test_fm_gradients_reach_every_parameter():
    att = fm_init(6, 2, seed=8, hidden=4)
    rng = np.random.default_rng(9)
    f = T.Tensor(rng.standard_normal((3, 2, 2, 6)))
    _, refined = A.feature_map_attention(att, f)
    params = [p for _, p in att.parameters()]
    T.backward(T.tsum(refined * T.Tensor(rng.standard_normal(refined.shape))), params)
    for name, p in att.parameters():
        assert p.grad is not None and np.abs(p.grad).sum() > 0, name


def test_fm_channel_mismatch_is_config_error():
    att = fm_init(4, 2)
    with pytest.raises(ConfigError):
        A.feature_map_attention(att, T.Tensor(np.zeros((2, 2, 5))))
    with pytest.raises(ConfigError):
        A.feature_map_attention(att, T.Tensor(np.zeros((3, 3, 4))))


def test_fm_dense_only_is_permutation_equivariant():
    att = fm_init(5, 2, seed=10, variant="dense_only")
    rng = np.random.default_rng(11)
    f = rng.standard_normal((2, 2, 5))
    w_base, _ = A.feature_map_attention(att, T.Tensor(f))
    perm = rng.permutation(5)
    w_perm, _ = A.feature_map_attention(att, T.Tensor(f[..., perm]))
    assert np.allclose(w_perm.data, w_base.data[perm], atol=1e-14)


def test_fm_batched_matches_per_sample():
    att = fm_init(4, 2, seed=12, hidden=3)
    rng = np.random.default_rng(13)
    f = rng.standard_normal((3, 2, 2, 4))
    weights, refined = A.feature_map_attention(att, T.Tensor(f))
    assert weights.shape == (3, 4)
    for b in range(3):
        w1, r1 = A.feature_map_attention(att, T.Tensor(f[b]))
        assert np.allclose(weights.data[b], w1.data, atol=1e-15)
        assert np.allclose(refined.data[b], r1.data, atol=1e-15)


def test_fm_softmax_weights_sum_to_one():
    att = fm_init(4, 2, seed=14, activation="softmax")
    w, _ = A.feature_map_attention(att, T.Tensor(np.random.default_rng(15).random((2, 2, 4))))
    assert abs(w.data.sum() - 1.0) < 1e-12


def test_fm_init_validation():
    rng = np.random.default_rng(16)
    with pytest.raises(ConfigError):
        A.FeatureMapAttention.init(4, 2, rng, variant="cbam")
    with pytest.raises(ConfigError):
        A.FeatureMapAttention.init(4, 2, rng, n_layers=4)
    with pytest.raises(ConfigError):
        A.FeatureMapAttention.init(4, 2, rng, blstm=True, n_layers=2)


# -- spatial attention ----------------------------------------------------------------


def test_spatial_zero_parameters_gives_half_weights():
    att = sp_init(3)
    zero_params(att)
    f = T.Tensor(np.random.default_rng(17).random((3, 3, 5)))
    weights, refined = A.spatial_attention(att, f)
    assert np.array_equal(weights.data, np.full((3, 3), 0.5))
    assert np.array_equal(refined.data, 0.5 * f.data)


def test_spatial_constant_volume_gives_uniform_weights():
    att = sp_init(3, seed=18)
    f = T.Tensor(np.full((3, 3, 4), 2.5))
    weights, _ = A.spatial_attention(att, f)
    assert np.allclose(weights.data, weights.data[0, 0], atol=1e-15)


@pytest.mark.parametrize("variant", ["conv", "dense"])
def test_spatial_gradients(variant):
    att = sp_init(3, seed=19, variant=variant)
    rng = np.random.default_rng(20)
    f = T.parameter(rng.standard_normal((3, 3, 4)), "f")
    g = T.Tensor(rng.standard_normal((3, 3, 4)))
    params = [p for _, p in att.parameters()] + [f]

    def loss():
        _, out = A.spatial_attention(att, f)
        return T.tsum(out * g)

    check_grad(loss, params, 1e-4)


def test_spatial_dense_extent_mismatch():
    att = sp_init(3, variant="dense")
    with pytest.raises(ConfigError):
        A.spatial_attention(att, T.Tensor(np.zeros((4, 4, 2))))


def test_spatial_bypass_identity():
    att = sp_init(3)
    att.bypass = True
    f = T.Tensor(np.random.default_rng(21).random((3, 3, 2)))
    weights, refined = A.spatial_attention(att, f)
    assert np.array_equal(weights.data, np.ones((3, 3)))
    assert np.array_equal(refined.data, f.data)


# -- composition ------------------------------------------------------------------------


def test_two_level_bypass_is_identity():
    fm = fm_init(4, 2)
    sp = sp_init(2)
    fm.bypass = sp.bypass = True
    f = T.Tensor(np.random.default_rng(22).random((2, 2, 4)))
    result = A.two_level_attention(fm, sp, f)
    assert np.array_equal(result.refined.data, f.data)


def test_two_level_zero_parameters_quarter_scaling():
    fm = fm_init(4, 2)
    sp = sp_init(2)
    zero_params(fm)
    zero_params(sp)
    f = T.Tensor(np.random.default_rng(23).random((2, 2, 4)))
    result = A.two_level_attention(fm, sp, f)
    assert np.array_equal(result.refined.data, 0.25 * f.data)


def test_two_level_paper_scale_shapes():
    fm = fm_init(1024, 7, seed=24, hidden=8)
    sp = sp_init(7, seed=25)
    f = T.Tensor(np.random.default_rng(26).random((7, 7, 1024)))
    with T.no_grad():
        result = A.two_level_attention(fm, sp, f)
    assert result.fm_weights.shape == (1024,)
    assert result.spatial_weights.shape == (7, 7)
    assert result.refined.shape == (7, 7, 1024)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=10, deadline=None)
def test_two_level_weights_in_unit_interval_and_shape_preserved(seed):
    rng = np.random.default_rng(seed)
    fm = A.FeatureMapAttention.init(6, 2, rng, hidden=4)
    sp = A.SpatialAttention.init(2, rng)
    f = T.Tensor(rng.standard_normal((2, 2, 6)) * 10)
    result = A.two_level_attention(fm, sp, f)
    assert result.refined.shape == f.shape
    for w in (result.fm_weights, result.spatial_weights):
        assert np.all(w.data > 0.0) and np.all(w.data < 1.0)


# -- weight dump --------------------------------------------------------------------------


def test_write_weights_csv_format():
    buf = io.StringIO()
    A.write_weights_csv(buf, ["s0", "s1"], T.Tensor([[0.25, 0.5], [0.125, 1.0]]))
    assert buf.getvalue().splitlines() == ["s0,0,0.25", "s0,1,0.5", "s1,0,0.125", "s1,1,1"]
