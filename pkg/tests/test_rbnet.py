import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from errors import DataError, NumericalError
from grid_core import PointFeatures
from rbnet import (
    ACTIVATIONS,
    ClampConfig,
    Standardizer,
    backward,
    clamp_backward,
    clamp_residual,
    default_log_mask,
    direct_forward,
    forward,
    forward_with_cache,
    init_params,
    signed_log,
    zero_params,
)


def tiny(seed=0, width=16, activation="silu"):
    params = init_params(seed, input_width=width, hidden_widths=(8, 4), head_width=3, activation=activation)
    rng = np.random.default_rng(seed + 100)
    # head outputs start at zero; randomize them so every path carries gradient
    for head in (params.head_mean, params.head_var):
        head[1].weight[:] = rng.normal(0, 0.5, size=head[1].weight.shape)
        head[1].bias[:] = rng.normal(0, 0.1, size=head[1].bias.shape)
    return params


# ===== forward =====

def test_zero_network_outputs_zero():
    params = zero_params(hidden_widths=(8, 4), head_width=3)
    e0, s0 = forward(params, np.random.default_rng(0).normal(size=16))
    assert e0 == 0.0 and s0 == 0.0


def test_fresh_network_heads_start_at_zero():
    params = init_params(1, hidden_widths=(8, 4), head_width=3)
    e0, s0 = forward(params, np.random.default_rng(1).normal(size=(5, 16)))
    assert np.all(e0 == 0.0) and np.all(s0 == 0.0)


def test_forward_is_deterministic():
    params = tiny(2)
    y = np.random.default_rng(2).normal(size=16)
    assert forward(params, y) == forward(params, y)


def test_forward_batch_matches_single_rows():
    params = tiny(3)
    y = np.random.default_rng(3).normal(size=(4, 16))
    e0, s0 = forward(params, y)
    for i in range(4):
        ei, si = forward(params, y[i])
        assert ei == pytest.approx(e0[i], rel=1e-14, abs=1e-15)
        assert si == pytest.approx(s0[i], rel=1e-14, abs=1e-15)


def test_forward_lipschitz_bound():
    params = tiny(4)
    lip = ACTIVATIONS[params.activation][2]
    rng = np.random.default_rng(4)
    y = rng.normal(size=16)
    delta = 1e-3

    def chain_norm(head):
        norm = 1.0
        for layer in params.trunk:
            norm *= np.linalg.norm(layer.weight, 2) * lip
        norm *= np.linalg.norm(head[0].weight, 2) * lip
        return norm * np.linalg.norm(head[1].weight, 2)

    for k in range(16):
        bumped = y.copy()
        bumped[k] += delta
        e_a, s_a = forward(params, y)
        e_b, s_b = forward(params, bumped)
        assert abs(e_b - e_a) <= chain_norm(params.head_mean) * delta * (1 + 1e-9)
        assert abs(s_b - s_a) <= chain_norm(params.head_var) * delta * (1 + 1e-9)


def test_forward_rejects_wrong_width():
    with pytest.raises(DataError):
        forward(tiny(), np.zeros(11))


def test_forward_names_non_finite_layer():
    params = tiny(5)
    params.trunk[1].weight[0, 0] = np.inf
    with pytest.raises(NumericalError) as info:
        forward(params, np.ones(16))
    assert info.value.layer == "trunk.1"


# ===== init_params =====

def test_init_same_seed_identical():
    a, b = init_params(9), init_params(9)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))


def test_init_different_seeds_differ():
    a, b = init_params(9), init_params(10)
    assert any(not np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))


def test_init_default_shapes():
    params = init_params(0)
    assert params.input_width == 16
    assert params.hidden_widths == (128, 256, 256, 256, 128)
    assert params.head_width == 50
    assert params.head_mean[1].weight.shape == (50, 1)
    assert init_params(0, input_width=11).input_width == 11
    assert params.init_scheme


def test_init_weight_variance_follows_fan_in():
    params = init_params(0)
    for layer in params.trunk[1:]:
        fan_in = layer.weight.shape[0]
        assert layer.weight.var() == pytest.approx(1.0 / fan_in, rel=0.2)


def test_variance_bias_sets_initial_log_variance():
    floor = math.log(1e-4)
    params = init_params(4, hidden_widths=(8, 4), head_width=3, var_bias=floor)
    x = np.random.default_rng(4).normal(size=(6, 16))
    e0, s0 = forward(params, x)
    assert (e0 == 0.0).all()
    assert (s0 == floor).all()
    out = clamp_residual(e0, s0, np.full(6, -0.7), ClampConfig())
    assert (out.e_bar == 0.0).all()
    np.testing.assert_allclose(out.s_bar, floor, rtol=1e-15)


def test_init_rejects_unknown_activation():
    with pytest.raises(DataError):
        init_params(0, activation="relu6")


# ===== clamp =====

def test_clamp_zero_mean_output():
    out = clamp_residual(0.0, 3.0, -1.5, ClampConfig())
    assert out.e_bar == 0.0
    assert out.s_bar == pytest.approx(math.log(1e-4))
    assert out.s_bar == pytest.approx(-9.21034, abs=1e-5)


def test_clamp_keeps_smaller_raw_variance():
    out = clamp_residual(0.0, -12.0, -1.5, ClampConfig())
    assert out.s_bar == -12.0


def test_clamp_saturation():
    out = clamp_residual(20.0, 0.0, -2.0, ClampConfig(k1=1.0))
    assert out.e_bar == pytest.approx(-2.0, abs=1e-8)


def test_clamp_tanh_one():
    out = clamp_residual(1.0, 0.0, -1.0, ClampConfig(k1=1.0))
    assert out.e_bar == pytest.approx(-0.761594, abs=1e-6)


def test_clamp_bounds_hold_on_a_million_samples():
    rng = np.random.default_rng(0)
    n = 1_000_000
    e0 = rng.normal(0, 5, n)
    s0 = rng.normal(0, 10, n)
    e_conv = rng.normal(0, 3, n)
    k1 = rng.uniform(0.0, 2.0, n)
    k2 = rng.uniform(1e-3, 2.0, n)
    e_bar = k1 * np.tanh(e0) * e_conv
    ceiling = np.log(k2 ** 2 * e_bar ** 2 + 1e-4)
    s_bar = np.minimum(s0, ceiling)
    assert np.all(np.abs(e_bar) <= k1 * np.abs(e_conv))
    assert np.all(s_bar <= ceiling)

    # the library path, per clamp setting
    for k1_value, k2_value in ((1.0, 1.0), (0.1, 2.0), (2.0, 0.1)):
        cfg = ClampConfig(k1=k1_value, k2=k2_value)
        out = clamp_residual(e0, s0, e_conv, cfg)
        assert np.all(np.abs(out.e_bar) <= k1_value * np.abs(e_conv))
        assert np.all(out.s_bar <= np.log(k2_value ** 2 * out.e_bar ** 2 + 1e-4))


@given(st.floats(-30, 30), st.floats(-30, 30).filter(lambda v: v != 0), st.floats(0.01, 2.0))
def test_clamp_sign_rule(e0, e_conv, k1):
    out = clamp_residual(e0, 0.0, e_conv, ClampConfig(k1=k1))
    if e0 != 0 and out.e_bar != 0:
        assert np.sign(out.e_bar) == np.sign(e0) * np.sign(e_conv)


@given(st.floats(-5, 5), st.floats(1e-3, 1.0), st.floats(0.1, 10.0))
def test_clamp_monotone_in_e0(e0, step, e_conv):
    cfg = ClampConfig()
    lower = clamp_residual(e0, 0.0, e_conv, cfg).e_bar
    higher = clamp_residual(e0 + step, 0.0, e_conv, cfg).e_bar
    assert higher > lower


def test_clamp_config_validation():
    assert ClampConfig() == ClampConfig(k1=1.0, k2=1.0, epsilon=1e-4)
    with pytest.raises(ValueError):
        ClampConfig(k1=2.5)
    with pytest.raises(ValueError):
        ClampConfig(k2=0.0)
    with pytest.raises(ValueError):
        ClampConfig(k1=1.0, shift=2.0)


def test_clamp_gradient_at_origin_is_k1_e_conv():
    cfg = ClampConfig(k1=0.7)
    grad_e0, grad_s0 = clamp_backward(0.0, 5.0, -1.3, cfg, 1.0, 0.0)
    assert grad_e0 == 0.7 * -1.3
    assert grad_s0 == 0.0


def test_clamp_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    cfg = ClampConfig(k1=1.2, k2=0.8, epsilon=1e-2)
    e0 = rng.normal(size=200)
    s0 = rng.normal(-3, 4, size=200)
    e_conv = rng.normal(size=200)
    a, b = rng.normal(size=200), rng.normal(size=200)

    def objective(e, s):
        out = clamp_residual(e, s, e_conv, cfg)
        return a * out.e_bar + b * out.s_bar

    grad_e0, grad_s0 = clamp_backward(e0, s0, e_conv, cfg, a, b)
    h = 1e-6
    fd_e = (objective(e0 + h, s0) - objective(e0 - h, s0)) / (2 * h)
    fd_s = (objective(e0, s0 + h) - objective(e0, s0 - h)) / (2 * h)
    ceiling = np.log(cfg.k2 ** 2 * (cfg.k1 * np.tanh(e0) * e_conv) ** 2 + cfg.epsilon)
    away_from_kink = np.abs(s0 - ceiling) > 1e-3
    np.testing.assert_allclose(grad_e0[away_from_kink], fd_e[away_from_kink], rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(grad_s0[away_from_kink], fd_s[away_from_kink], rtol=1e-5, atol=1e-6)


# ===== backward =====

@pytest.mark.parametrize("activation", sorted(ACTIVATIONS))
def test_backward_matches_central_differences(activation):
    params = tiny(7, activation=activation)
    rng = np.random.default_rng(7)
    y = rng.normal(size=(6, 16))
    g_e, g_s = rng.normal(size=6), rng.normal(size=6)

    def objective(p):
        e0, s0 = forward(p, y)
        return float(np.sum(g_e * e0) + np.sum(g_s * s0))

    _, _, cache = forward_with_cache(params, y)
    grads = backward(params, cache, g_e, g_s)
    h = 1e-5
    for array, grad in zip(params.arrays(), grads.arrays()):
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + h
            up = objective(params)
            array[index] = original - h
            down = objective(params)
            array[index] = original
            fd = (up - down) / (2 * h)
            assert grad[index] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_backward_zero_upstream_gives_zero_gradients():
    params = tiny(8)
    y = np.random.default_rng(8).normal(size=(3, 16))
    _, _, cache = forward_with_cache(params, y)
    grads = backward(params, cache, np.zeros(3), np.zeros(3))
    assert all(not g.any() for g in grads.arrays())


def test_backward_rejects_shape_mismatch():
    params = tiny(9)
    _, _, cache = forward_with_cache(params, np.zeros((3, 16)))
    with pytest.raises(DataError):
        backward(params, cache, np.zeros(2), np.zeros(3))


# ===== direct mode =====

def test_direct_forward_zero_weights():
    params = zero_params(input_width=11, hidden_widths=(8, 4), head_width=3)
    assert direct_forward(params, PointFeatures.from_array(np.ones(11))) == (0.0, 0.0)


def test_direct_forward_is_deterministic():
    params = tiny(10, width=11)
    x = PointFeatures.from_array(np.random.default_rng(10).uniform(size=11))
    assert direct_forward(params, x) == direct_forward(params, x)


def test_direct_forward_requires_eleven_inputs():
    with pytest.raises(DataError):
        direct_forward(tiny(11), np.zeros(11))


def test_unclamped_variance_grows_without_bound():
    """Scaling the variance head drives the integrated sigma past any fixed bound."""
    rng = np.random.default_rng(12)
    x = rng.uniform(0.0, 1.0, size=(10_000, 11))
    density_weights = np.full(10_000, 1e-4)
    bound = 1e6
    sigmas = []
    for scale in (1.0, 10.0, 100.0):
        params = tiny(12, width=11)
        params.head_var[1].weight[:] = 0.0
        params.head_var[1].bias[:] = scale
        _, s_hat = direct_forward(params, x)
        sigmas.append(float(np.sum(density_weights * np.exp(0.5 * s_hat))))
    assert sigmas[0] < sigmas[1] < sigmas[2]
    assert sigmas[2] > bound


# ===== standardizer =====

def test_signed_log_is_odd_and_monotone():
    v = np.array([-1.0, -1e-4, 0.0, 1e-4, 1.0])
    out = signed_log(v)
    assert out[2] == 0.0
    assert out[0] == -out[4]
    assert np.all(np.diff(out) > 0)


def test_standardizer_centres_training_rows():
    rng = np.random.default_rng(13)
    rows = rng.lognormal(size=(500, 16))
    std = Standardizer.fit(rows, default_log_mask("Y16"))
    z = std.apply(rows)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-10)
    assert not std.log_mask[-1]


def test_standardizer_constant_column_keeps_unit_scale():
    rows = np.ones((10, 11))
    std = Standardizer.fit(rows, default_log_mask("X11"))
    assert np.all(std.scale == 1.0)
    np.testing.assert_allclose(std.apply(rows), 0.0, atol=1e-12)
