import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcrwkv import rwkv_core as rk
from pcrwkv.errors import ChannelsNotDivisibleBy4, ShapeMismatch
from pcrwkv.numerics import ag, check_grads, const, make_rng, parameter

from .oracles import qshift_index_oracle, random_wkv_case, wkv_relative_error


def _params(w, u):
    return rk.BiWkvParams(w=parameter(w), u=parameter(u))


# ------------------------------------------------------------------ kernels


@pytest.mark.parametrize("kernel", [rk.bi_wkv_linear, rk.bi_wkv_quadratic])
def test_single_token_returns_v(kernel):
    rng = make_rng(0)
    K, V, w, u = random_wkv_case(rng, 1, 6)
    np.testing.assert_array_equal(kernel(K, V, w=w, u=u), V)


@pytest.mark.parametrize("kernel", [rk.bi_wkv_linear, rk.bi_wkv_quadratic])
def test_constant_values_are_reproduced(kernel):
    rng = make_rng(1)
    K, _, w, u = random_wkv_case(rng, 9, 4)
    out = kernel(K, np.full((9, 4), -1.25), w=w, u=u)
    np.testing.assert_allclose(out, -1.25, rtol=1e-14)


@pytest.mark.parametrize("kernel", [rk.bi_wkv_linear, rk.bi_wkv_quadratic])
def test_two_tokens_zero_keys_average(kernel):
    V = np.array([[1.0, -2.0], [3.0, 5.0]])
    out = kernel(np.zeros((2, 2)), V, w=np.array([4.0, -3.0]), u=np.zeros(2))
    np.testing.assert_allclose(out, [[2.0, 1.5], [2.0, 1.5]], rtol=0, atol=1e-15)


def test_three_tokens_hand_value():
    # T=3, one channel, w=3, u=0, k=0: token 0 sees token 2 at |t-i|-1 = 1, decay e^{-1}
    V = np.array([[1.0], [2.0], [4.0]])
    out = rk.bi_wkv_linear(np.zeros((3, 1)), V, w=np.array([3.0]), u=np.zeros(1))
    e = np.exp(-1.0)
    want0 = (1.0 + 2.0 + e * 4.0) / (2.0 + e)
    want1 = (1.0 + 2.0 + 4.0) / 3.0
    want2 = (e * 1.0 + 2.0 + 4.0) / (2.0 + e)
    np.testing.assert_allclose(out[:, 0], [want0, want1, want2], rtol=1e-14)


@pytest.mark.parametrize("T", [1, 2, 3, 7, 64, 257])
def test_linear_matches_quadratic(T):
    rng = make_rng(T)
    for _ in range(20):
        K, V, w, u = random_wkv_case(rng, T, 5)
        assert wkv_relative_error(K, V, w, u) <= 1e-10


def test_batched_inputs_match_per_sample():
    rng = make_rng(3)
    K = rng.uniform(-5, 5, (3, 11, 4))
    V = rng.uniform(-5, 5, (3, 11, 4))
    w, u = rng.uniform(-5, 5, 4), rng.uniform(-5, 5, 4)
    out = rk.bi_wkv_linear(K, V, w=w, u=u)
    for b in range(3):
        np.testing.assert_array_equal(out[b], rk.bi_wkv_linear(K[b], V[b], w=w, u=u))


def test_channels_are_independent_bitwise():
    rng = make_rng(4)
    K, V, w, u = random_wkv_case(rng, 33, 6)
    full = rk.bi_wkv_linear(K, V, w=w, u=u)
    for c in range(6):
        one = rk.bi_wkv_linear(K[:, c : c + 1], V[:, c : c + 1], w=w[c : c + 1], u=u[c : c + 1])
        assert one.tobytes() == np.ascontiguousarray(full[:, c : c + 1]).tobytes()


def test_large_key_dominates_neighbours():
    T, C = 16, 3
    K = np.zeros((T, C))
    K[7] = 80.0
    V = make_rng(5).normal(size=(T, C))
    w, u = np.ones(C), np.zeros(C)
    lin = rk.bi_wkv_linear(K, V, w=w, u=u)
    quad = rk.bi_wkv_quadratic(K, V, w=w, u=u)
    assert np.all(np.isfinite(lin)) and np.all(np.isfinite(quad))
    for t in (5, 6, 8, 9):
        np.testing.assert_allclose(lin[t], V[7], rtol=1e-12, atol=1e-12)
    assert wkv_relative_error(K, V, w, u) <= 1e-10


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_extreme_offsets_stay_finite(sign):
    rng = make_rng(6)
    K, V, w, u = random_wkv_case(rng, 40, 4)
    K = K + sign * 80.0 * (rng.random((40, 4)) < 0.3)
    u = np.full(4, sign * 80.0)
    assert np.all(np.isfinite(rk.bi_wkv_linear(K, V, w=w, u=u)))
    assert np.all(np.isfinite(rk.bi_wkv_quadratic(K, V, w=w, u=u)))
    assert wkv_relative_error(K, V, w, u) <= 1e-8


def test_shift_invariance_in_keys():
    # every exponent (k_i for other tokens, u + k_t for the token itself) moves by c
    rng = make_rng(7)
    K, V, w, u = random_wkv_case(rng, 50, 4)
    scale = rk.bi_wkv_quadratic(K, np.abs(V), w=w, u=u)
    for kernel in (rk.bi_wkv_linear, rk.bi_wkv_quadratic):
        base = kernel(K, V, w=w, u=u)
        shifted = kernel(K + 50.0, V, w=w, u=u)
        assert np.max(np.abs(shifted - base) / scale) <= 1e-8


def test_shifting_keys_and_bonus_together_equals_shifting_bonus():
    # the self term carries u + k_t, so k += c and u += c is the same as u += c alone
    rng = make_rng(8)
    K, V, w, u = random_wkv_case(rng, 50, 4)
    both = rk.bi_wkv_linear(K + 50.0, V, w=w, u=u + 50.0)
    bonus = rk.bi_wkv_linear(K, V, w=w, u=u + 50.0)
    scale = rk.bi_wkv_quadratic(K, np.abs(V), w=w, u=u + 50.0)
    assert np.max(np.abs(both - bonus) / scale) <= 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_sequence_reversal_reverses_output(T, seed):
    K, V, w, u = random_wkv_case(make_rng(seed), T, 3)
    fwd = rk.bi_wkv_linear(K, V, w=w, u=u)
    rev = rk.bi_wkv_linear(K[::-1], V[::-1], w=w, u=u)
    scale = rk.bi_wkv_quadratic(K, np.abs(V), w=w, u=u)
    assert np.max(np.abs(rev[::-1] - fwd) / scale) <= 1e-12


def test_kernel_shape_errors():
    with pytest.raises(ShapeMismatch):
        rk.bi_wkv_linear(np.zeros((3, 2)), np.zeros((3, 3)), w=np.zeros(2), u=np.zeros(2))
    with pytest.raises(ShapeMismatch):
        rk.bi_wkv_linear(np.zeros((3, 2)), np.zeros((3, 2)), w=np.zeros(3), u=np.zeros(2))


@pytest.mark.parametrize("T", [1, 2, 5, 9])
def test_bi_wkv_gradients(T):
    rng = make_rng(10 + T)
    for _ in range(10):
        K0, V0, w0, u0 = random_wkv_case(rng, T, 3, bound=2.0)
        K, V, p = parameter(K0), parameter(V0), _params(w0, u0)
        G = const(rng.normal(size=(T, 3)))
        rep = check_grads(lambda: ag.sum(rk.bi_wkv(K, V, p) * G), [K, V, p.w, p.u], eps=1e-6)
        assert rep.elementwise < 1e-4, rep


def test_bi_wkv_node_matches_plain_kernel():
    rng = make_rng(12)
    K, V, w, u = random_wkv_case(rng, 20, 4)
    node = rk.bi_wkv(const(K), const(V), _params(w, u))
    np.testing.assert_array_equal(node.value, rk.bi_wkv_linear(K, V, w=w, u=u))


# ------------------------------------------------------------------ q-shift


def test_qshift_mu_one_is_identity():
    X = make_rng(0).normal(size=(6, 8))
    np.testing.assert_array_equal(rk.q_shift(X, np.ones(8)).value, X)


def test_qshift_single_token_clamps_to_self():
    X = make_rng(1).normal(size=(1, 8))
    mu = np.full(8, 0.25)
    np.testing.assert_array_equal(rk.q_shift(X, mu).value, X + 0.75 * X)


def test_qshift_hand_index_map():
    X = np.arange(12.0).reshape(3, 4)  # rows r0, r1, r2
    out = rk.q_shift(X, np.zeros(4)).value
    star = out - X
    # offsets -1, +1, -2, +2 with clamping; one channel per quarter
    np.testing.assert_array_equal(star[0], [X[0, 0], X[1, 1], X[0, 2], X[2, 3]])
    np.testing.assert_array_equal(star[1], [X[0, 0], X[2, 1], X[0, 2], X[2, 3]])
    np.testing.assert_array_equal(star[2], [X[1, 0], X[2, 1], X[0, 2], X[2, 3]])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_qshift_matches_loop_oracle(T, quarter, seed):
    rng = make_rng(seed)
    X = rng.normal(size=(T, 4 * quarter))
    mu = rng.random(4 * quarter)
    want = qshift_index_oracle(X, mu, rk.QSHIFT_OFFSETS)
    np.testing.assert_array_equal(rk.q_shift(X, mu).value, want)


def test_qshift_channel_guard():
    with pytest.raises(ChannelsNotDivisibleBy4):
        rk.q_shift(np.zeros((3, 6)), np.zeros(6))


def test_qshift_gradients():
    rng = make_rng(2)
    X, mu = parameter(rng.normal(size=(5, 8))), parameter(rng.random(8))
    G = const(rng.normal(size=(5, 8)))
    rep = check_grads(lambda: ag.sum(rk.q_shift(X, mu) * G), [X, mu], eps=1e-6)
    assert rep.elementwise < 1e-4


# ---------------------------------------------------------------- sublayers


def _qs(params):
    return lambda X: rk.q_shift(X, params.mu)


def test_spatial_mix_zero_output_projection():
    rng = make_rng(0)
    p = rk.init_spatial_mix(8, rng)
    p.W_o = parameter(np.zeros((8, 8)))
    out = rk.spatial_mix(const(rng.normal(size=(6, 8))), p, _qs(p))
    np.testing.assert_array_equal(out.value, 0.0)


def test_spatial_mix_identity_projections_zero_keys():
    rng = make_rng(1)
    C = 8
    p = rk.init_spatial_mix(C, rng)
    for name in ("W_r", "W_v", "W_o"):
        setattr(p, name, parameter(np.eye(C)))
    p.W_k = parameter(np.zeros((C, C)))
    X = rng.normal(size=(7, C))
    xs = rk.q_shift(X, p.mu).value
    want = 1.0 / (1.0 + np.exp(-xs)) * rk.bi_wkv_quadratic(np.zeros_like(xs), xs, p.wkv)
    got = rk.spatial_mix(const(X), p, _qs(p)).value
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


def test_spatial_mix_exposes_keys_and_values():
    rng = make_rng(2)
    p = rk.init_spatial_mix(8, rng)
    X = const(rng.normal(size=(6, 8)))
    seen = []
    rk.spatial_mix(X, p, rk.identity_shift, lambda k, v: seen.append((k, v)))
    (k, v), = seen
    np.testing.assert_allclose(k.value, X.value @ p.W_k.value)
    np.testing.assert_allclose(v.value, X.value @ p.W_v.value)


def test_spatial_mix_gating_bound():
    rng = make_rng(3)
    p = rk.init_spatial_mix(8, rng)
    X = rng.normal(size=(10, 8))
    xs = rk.q_shift(X, p.mu).value
    wkv = rk.bi_wkv_linear(xs @ p.W_k.value, xs @ p.W_v.value, p.wkv)
    out = rk.spatial_mix(const(X), p, _qs(p)).value
    bound = np.linalg.norm(p.W_o.value, 2) * np.linalg.norm(wkv, axis=1)
    assert np.all(np.linalg.norm(out, axis=1) <= bound + 1e-12)


def test_spatial_mix_gradients():
    rng = make_rng(4)
    p = rk.init_spatial_mix(8, rng)
    X = parameter(rng.normal(size=(6, 8)))
    nodes = [X, *p.named().values()]
    rep = check_grads(lambda: ag.sum(rk.spatial_mix(X, p, _qs(p))), nodes, eps=1e-6)
    assert rep.elementwise < 1e-4, rep


def test_channel_mix_zero_and_negative_inputs():
    rng = make_rng(5)
    p = rk.init_channel_mix(8, rng, ratio=2)
    out = rk.channel_mix(const(np.zeros((4, 8))), p, _qs(p))
    np.testing.assert_array_equal(out.value, 0.0)
    p.W_k = parameter(-np.abs(p.W_k.value))
    X = np.abs(rng.normal(size=(4, 8)))
    np.testing.assert_array_equal(rk.channel_mix(const(X), p, _qs(p)).value, 0.0)


def test_channel_mix_gradients():
    rng = make_rng(6)
    p = rk.init_channel_mix(8, rng, ratio=2)
    assert p.W_k.shape == (8, 16) and p.W_v.shape == (16, 8)
    X = parameter(rng.normal(size=(5, 8)))
    rep = check_grads(lambda: ag.sum(rk.channel_mix(X, p, _qs(p))), [X, *p.named().values()], eps=1e-6)
    assert rep.elementwise < 1e-4, rep


def test_initialisers_shapes():
    rng = make_rng(7)
    s = rk.init_spatial_mix(12, rng, mu_init=0.3)
    assert all(s.named()[k].shape == (12, 12) for k in ("W_r", "W_k", "W_v", "W_o"))
    assert s.wkv.w.shape == s.wkv.u.shape == (12,)
    np.testing.assert_array_equal(s.mu.value, 0.3)
    c = rk.init_channel_mix(12, rng)
    assert c.W_k.shape == (12, 48)
