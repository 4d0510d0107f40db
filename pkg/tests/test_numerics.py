import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmdnn.errors import ConfigurationError, DomainError
from vmdnn.numerics import (
    KL_FLOOR,
    KernelBank,
    SoftmaxGroupSpec,
    conv_backward,
    conv_output_shape,
    conv_valid,
    decode_analog,
    encode_analog,
    grouped_softmax,
    kl_grad_logits,
    kl_loss,
    leaky_update,
    scaled_tanh,
    scaled_tanh_prime,
)

finite = st.floats(-50, 50, allow_nan=False)


def test_scaled_tanh_values():
    assert scaled_tanh(0.0) == 0.0
    assert scaled_tanh(1.5) == pytest.approx(1.7159 * math.tanh(1.0), abs=1e-15)
    assert float(scaled_tanh(1.5)) == pytest.approx(1.306819, abs=1e-6)


@given(finite)
def test_scaled_tanh_odd_and_bounded(u):
    assert scaled_tanh(u) == -scaled_tanh(-u)
    assert abs(scaled_tanh(u)) <= 1.7159


def test_scaled_tanh_increasing():
    u = np.linspace(-5, 5, 1001)
    assert np.all(np.diff(scaled_tanh(u)) > 0)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_nonfinite_input_rejected(bad):
    with pytest.raises(DomainError):
        scaled_tanh(bad)
    with pytest.raises(DomainError):
        scaled_tanh_prime(np.array([0.0, bad]))


def test_scaled_tanh_prime():
    assert scaled_tanh_prime(0.0) == pytest.approx(1.7159 * 2 / 3, abs=1e-15)
    assert float(scaled_tanh_prime(0.0)) == pytest.approx(1.143933, abs=1e-6)
    u = np.linspace(-5, 5, 401)
    h = 1e-5
    fd = (scaled_tanh(u + h) - scaled_tanh(u - h)) / (2 * h)
    assert np.max(np.abs(fd - scaled_tanh_prime(u))) < 1e-8
    assert np.array_equal(scaled_tanh_prime(u), scaled_tanh_prime(-u))
    assert np.all(scaled_tanh_prime(u) > 0)


# --------------------------------------------------------------- convolution


def naive_conv(x, w, b, s):
    m, c, kh, kw = w.shape
    oh = (x.shape[1] - kh) // s + 1
    ow = (x.shape[2] - kw) // s + 1
    out = np.zeros((m, oh, ow))
    for o in range(m):
        for i in range(oh):
            for j in range(ow):
                out[o, i, j] = np.sum(w[o] * x[:, i * s:i * s + kh, j * s:j * s + kw]) + b[o]
    return out


def test_full_size_stage_shapes():
    assert conv_output_shape(48, 64, 8, 8, 4) == (11, 15)
    assert conv_output_shape(11, 15, 7, 7, 2) == (3, 5)
    assert conv_output_shape(3, 5, 3, 5, 1) == (1, 1)


def test_kernel_larger_than_input_rejected():
    with pytest.raises(ConfigurationError):
        conv_output_shape(11, 15, 13, 13, 2)


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv_matches_naive_loop(stride):
    rng = np.random.default_rng(stride)
    x = rng.normal(size=(3, 11, 13))
    bank = KernelBank(rng.normal(size=(4, 3, 3, 4)), rng.normal(size=4), stride)
    assert np.allclose(conv_valid(x, bank), naive_conv(x, bank.weights, bank.biases, stride), atol=1e-12)


def test_conv_batched_leading_axes():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 1, 12, 16))
    bank = KernelBank(rng.normal(size=(4, 1, 4, 4)), rng.normal(size=4), 2)
    out = conv_valid(x, bank)
    assert out.shape == (2, 5, 4, 5, 7)
    assert np.allclose(out[1, 3], conv_valid(x[1, 3], bank), atol=1e-13)


def test_conv_zero_kernel():
    bank = KernelBank(np.zeros((4, 1, 8, 8)), np.zeros(4), 4)
    out = conv_valid(np.ones((1, 48, 64)), bank)
    assert out.shape == (4, 11, 15)
    assert not out.any()


def test_conv_linearity():
    rng = np.random.default_rng(1)
    x, z = rng.normal(size=(2, 2, 9, 9))
    w1, w2 = rng.normal(size=(2, 3, 2, 3, 3))
    a, b = 0.7, -1.3
    k = KernelBank(w1, None, 2)
    assert np.allclose(conv_valid(a * x + b * z, k), a * conv_valid(x, k) + b * conv_valid(z, k), atol=1e-10)
    lhs = conv_valid(x, KernelBank(a * w1 + b * w2, None, 2))
    rhs = a * conv_valid(x, KernelBank(w1, None, 2)) + b * conv_valid(x, KernelBank(w2, None, 2))
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_conv_channel_mismatch():
    with pytest.raises(ConfigurationError):
        conv_valid(np.zeros((2, 5, 5)), KernelBank(np.zeros((1, 3, 2, 2))))


def test_kernel_bank_validation():
    with pytest.raises(ConfigurationError):
        KernelBank(np.zeros((2, 2, 2)))
    with pytest.raises(ConfigurationError):
        KernelBank(np.zeros((2, 1, 2, 2)), np.zeros(3))
    with pytest.raises(ConfigurationError):
        KernelBank(np.zeros((2, 1, 2, 2)), stride=0)


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 7, 8))
    bank = KernelBank(rng.normal(size=(3, 2, 3, 2)), rng.normal(size=3), 2)
    g = rng.normal(size=conv_valid(x, bank).shape)
    dw, db, dx = conv_backward(g, x, bank)
    f = lambda xx, ww, bb: float(np.sum(g * conv_valid(xx, KernelBank(ww, bb, 2))))
    h = 1e-6
    for idx in [(0, 0, 0, 0), (2, 1, 2, 1), (1, 0, 1, 1)]:
        e = np.zeros_like(bank.weights)
        e[idx] = h
        fd = (f(x, bank.weights + e, bank.biases) - f(x, bank.weights - e, bank.biases)) / (2 * h)
        assert dw[idx] == pytest.approx(fd, rel=1e-6)
    assert np.allclose(db, g.sum(axis=(1, 2)))
    for idx in [(0, 0, 0), (1, 6, 7), (0, 3, 4)]:
        e = np.zeros_like(x)
        e[idx] = h
        fd = (f(x + e, bank.weights, bank.biases) - f(x - e, bank.weights, bank.biases)) / (2 * h)
        assert dx[idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)


# ------------------------------------------------------------------- leaky


def test_leaky_update():
    assert leaky_update(3.7, 1.25, 1.0) == 1.25
    assert leaky_update(0.0, 1.0, 2.0) == 0.5
    with pytest.raises(ConfigurationError):
        leaky_update(0.0, 1.0, 0.5)


def test_leaky_update_converges_geometrically():
    u, d, tau = 0.0, 2.0, 5.0
    gaps = []
    for _ in range(30):
        u = leaky_update(u, d, tau)
        gaps.append(abs(d - u))
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    assert np.allclose(ratios, 1 - 1 / tau)


# ----------------------------------------------------------------- softmax


def test_grouped_softmax_basic():
    spec = SoftmaxGroupSpec(2, 10)
    y = grouped_softmax(np.zeros(20), spec)
    assert np.allclose(y, 0.1)
    y2 = grouped_softmax(np.array([math.log(2), 0.0]), SoftmaxGroupSpec(1, 2))
    assert np.allclose(y2, [2 / 3, 1 / 3], atol=1e-15)


@given(st.lists(finite, min_size=12, max_size=12), st.floats(-100, 100))
def test_grouped_softmax_sums_and_shift(u, c):
    spec = SoftmaxGroupSpec(3, 4)
    u = np.array(u)
    y = grouped_softmax(u, spec)
    assert np.allclose(y.reshape(3, 4).sum(1), 1.0, atol=1e-12)
    shifted = u.copy()
    shifted[4:8] += c
    assert np.allclose(grouped_softmax(shifted, spec), y, atol=1e-12)


def test_grouped_softmax_length_mismatch():
    with pytest.raises(ConfigurationError):
        grouped_softmax(np.zeros(7), SoftmaxGroupSpec(2, 4))


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        SoftmaxGroupSpec(2, 3, ((0, 1),))
    with pytest.raises(ConfigurationError):
        SoftmaxGroupSpec(1, 3, ((1, 1),))
    with pytest.raises(ConfigurationError):
        SoftmaxGroupSpec(1, 3, sigma=0)


# ---------------------------------------------------------------------- KL


def test_kl_values():
    p = np.array([0.2, 0.8, 0.5, 0.5])
    assert kl_loss(p, p) == 0.0
    assert kl_loss(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(math.log(2), abs=1e-15)


def test_kl_nonnegative_random_pairs():
    rng = np.random.default_rng(0)
    spec = SoftmaxGroupSpec(3, 5)
    for _ in range(1000):
        t = grouped_softmax(rng.normal(size=15) * 3, spec)
        y = grouped_softmax(rng.normal(size=15) * 3, spec)
        assert kl_loss(t, y) >= 0.0


def test_kl_floor_keeps_loss_finite():
    loss = kl_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert loss == pytest.approx(-math.log(KL_FLOOR))


def test_kl_grad_matches_finite_difference():
    rng = np.random.default_rng(2)
    spec = SoftmaxGroupSpec(2, 4)
    t = grouped_softmax(rng.normal(size=8), spec)
    u = rng.normal(size=8)
    g = kl_grad_logits(t.reshape(2, 4), grouped_softmax(u, spec).reshape(2, 4)).ravel()
    h = 1e-6
    for i in range(8):
        e = np.zeros(8)
        e[i] = h
        fd = (kl_loss(t, grouped_softmax(u + e, spec)) - kl_loss(t, grouped_softmax(u - e, spec))) / (2 * h)
        assert g[i] == pytest.approx(fd, abs=1e-8)


# ------------------------------------------------------------------- codec


def test_encode_midpoint_symmetric():
    spec = SoftmaxGroupSpec(1, 10, ((2.0, 4.0),))
    code = encode_analog(np.array([3.0]), spec)
    assert np.allclose(code, code[::-1], atol=1e-15)
    assert set(np.argsort(code)[-2:]) == {4, 5}


def test_encode_narrow_sigma_is_one_hot():
    spec = SoftmaxGroupSpec(1, 10, sigma=1e-3)
    ref = spec.reference_points()[0]
    code = encode_analog(np.array([ref[3]]), spec)
    assert code[3] == pytest.approx(1.0)
    assert decode_analog(code, spec)[0] == pytest.approx(ref[3])


def test_decode_uniform_is_midpoint():
    spec = SoftmaxGroupSpec(2, 10, ((0, 1), (1, 10)))
    assert np.allclose(decode_analog(np.full(20, 0.1), spec), [0.5, 5.5])


def test_roundtrip_error_below_one_percent():
    spec = SoftmaxGroupSpec(2, 10, ((0, 1), (1, 10)))
    rng = np.random.default_rng(0)
    v = rng.uniform(spec.lo, spec.hi, size=(1000, 2))
    err = np.abs(decode_analog(encode_analog(v, spec), spec) - v) / (spec.hi - spec.lo)
    assert err.mean(axis=0).max() < 0.01


def test_encode_clamps_with_warning():
    spec = SoftmaxGroupSpec(1, 10)
    with pytest.warns(RuntimeWarning):
        code, clamped = encode_analog(np.array([1.5]), spec, return_clamped=True)
    assert clamped
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert np.allclose(code, encode_analog(np.array([1.0]), spec))


@settings(max_examples=50)
@given(st.floats(0, 1))
def test_code_is_a_distribution(v):
    spec = SoftmaxGroupSpec(1, 10)
    code = encode_analog(np.array([v]), spec)
    assert np.all(code > 0) or np.all(code >= 0)
    assert code.sum() == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= decode_analog(code, spec)[0] <= 1.0
