import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from l2s import numerics as nx
from l2s.checks import loop_attention, plain_attention
from l2s.errors import AllMaskedRow, MissingGrad, NoTape, NonDeterministicFunction, ShapeMismatch
from l2s.numerics import NEG_LARGE, ParameterStore, RngStream, Tensor


def store_with(**arrays):
    s = ParameterStore(0, np.float64)
    for name, value in arrays.items():
        s.add(name, value)
    return s


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


# matmul

def test_matmul_identity_and_hand_case():
    x = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)
    out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]])).data
    assert np.array_equal(out, [[3.0], [7.0]])


def test_matmul_matches_triple_loop():
    g = np.random.default_rng(0)
    a, b = g.normal(size=(5, 7)), g.normal(size=(7, 3))
    assert np.abs(nx.matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b)).max() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeMismatch, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# softmax

def test_softmax_examples():
    p = nx.softmax_with_bias(Tensor([0.0, 0.0]), np.zeros(2)).data
    assert np.allclose(p, [0.5, 0.5])
    p = nx.softmax_with_bias(Tensor([5.0, 1.0]), np.array([0.0, -NEG_LARGE])).data
    assert np.abs(p - [1.0, 0.0]).max() < 1e-9
    x = np.array([0.3, -0.2, 1.1])
    ref = np.exp(x) / np.exp(x).sum()
    assert np.abs(nx.softmax_with_bias(Tensor(x)).data - ref).max() < 1e-15


def test_softmax_all_masked_row_raises():
    with pytest.raises(AllMaskedRow):
        nx.softmax_with_bias(Tensor(np.zeros((2, 3))), np.array([[0.0, 0, 0], [-NEG_LARGE] * 3]))


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_softmax_rows_sum_to_one(rows, cols, seed):
    g = np.random.default_rng(seed)
    bias = np.where(g.random((rows, cols)) < 0.5, -NEG_LARGE, 0.0)
    bias[:, 0] = 0.0
    p = nx.softmax_with_bias(Tensor(g.normal(size=(rows, cols)) * 10), bias).data
    assert np.abs(p.sum(-1) - 1).max() < 1e-9
    assert np.all(p[bias < 0] == 0.0)


# layer norm

def test_layer_norm_moments():
    x = np.random.default_rng(1).normal(3.0, 5.0, size=(4, 16))
    y = nx.layer_norm(Tensor(x)).data
    assert np.abs(y.mean(-1)).max() < 1e-6
    assert np.abs(y.var(-1) - 1).max() < 1e-6


# attention

@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_attention_matches_loop_oracle(seed):
    g = np.random.default_rng(seed)
    B, H, Nq, Nk, dk = 2, int(g.integers(1, 5)), int(g.integers(1, 9)), int(g.integers(1, 9)), 4
    q, k, v = (g.normal(size=(B, H, n, dk)) for n in (Nq, Nk, Nk))
    keys = g.random((B, Nk)) < 0.5
    keys[:, 0] = True
    bias = np.broadcast_to(np.where(keys[:, None, None, :], 0.0, -NEG_LARGE), (B, H, Nq, Nk))
    ref = loop_attention(q, k, v, bias)
    assert np.abs(nx.attention(Tensor(q), Tensor(k), Tensor(v), bias=bias).data - ref).max() < 1e-10
    assert np.abs(nx.attention(Tensor(q), Tensor(k), Tensor(v), key_mask=keys).data - ref).max() < 1e-10


def test_zero_bias_attention_is_exactly_plain():
    g = np.random.default_rng(2)
    q, k, v = (g.normal(size=(1, 2, 5, 4)) for _ in range(3))
    out = nx.attention(Tensor(q), Tensor(k), Tensor(v), bias=np.zeros((1, 2, 5, 5))).data
    assert np.array_equal(out, plain_attention(q, k, v))


def test_attention_key_mask_without_keys_raises():
    q = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(AllMaskedRow):
        nx.attention(q, q, q, key_mask=np.zeros((1, 2), dtype=bool))


# backward and gradient checks

def test_backward_requires_tape():
    s = store_with(w=np.ones(3))
    with pytest.raises(NoTape):
        nx.backward(s["w"].sum(), s)


def test_unreachable_parameters_get_zero_gradients():
    s = store_with(a=np.ones(3), b=np.ones(2))
    with nx.recording():
        grads = nx.backward((s["a"] * s["a"]).sum(), s)
    assert np.array_equal(grads["a"], 2 * np.ones(3))
    assert np.array_equal(grads["b"], np.zeros(2))


def test_gradient_accumulates_over_shared_uses():
    s = store_with(k=np.random.default_rng(3).normal(size=(2, 3)))
    with nx.recording():
        kt = s["k"].transpose(1, 0)
        grads = nx.backward((kt * kt * 3.0).sum() + s["k"].sum(), s)
    assert np.allclose(grads["k"], 6 * s["k"].data + 1)


def _squared(x):
    return x * x


OPS = {
    "add": lambda s: ((s["a"] + s["b"]) * s["a"]).sum(),
    "sub": lambda s: ((s["a"] - s["b"]) * (s["a"] - s["b"])).sum(),
    "silu": lambda s: nx.silu(s["a"] * s["b"]).sum(),
    "gelu": lambda s: (nx.gelu(s["a"]) * s["b"]).sum(),
    "matmul": lambda s: _squared(nx.matmul(s["a"], s["b"].transpose(1, 0))).sum(),
    "layer_norm": lambda s: (nx.layer_norm(s["a"] + s["b"]) * s["b"]).sum(),
    "softmax": lambda s: (nx.softmax_with_bias(s["a"]) * s["b"]).sum(),
    "reshape_getitem": lambda s: (s["a"].reshape(-1)[1:4] * s["b"].reshape(-1)[2:5]).sum(),
    "concat_take": lambda s: (nx.take(nx.concat([s["a"], s["b"]], axis=0), [0, 3, 3], axis=0)
                              * nx.take(nx.concat([s["b"], s["a"]], axis=0), [1, 1, 2], axis=0)).sum(),
    "mean": lambda s: (s["a"].mean(axis=0) * s["b"].mean(axis=0)).sum(),
}


@pytest.mark.parametrize("op", sorted(OPS))
@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=8, deadline=None)
def test_op_gradients_match_finite_differences(op, seed):
    g = np.random.default_rng(seed)
    rows, cols = int(g.integers(2, 4)), int(g.integers(5, 7))
    s = store_with(a=g.normal(size=(rows, cols)), b=g.normal(size=(rows, cols)))
    rep = nx.finite_diff_check(OPS[op], s, eps=1e-6)
    assert rep.passed, rep.errors


def test_attention_gradients_match_finite_differences():
    g = np.random.default_rng(4)
    s = store_with(q=g.normal(size=(2, 2, 3, 4)), k=g.normal(size=(2, 2, 5, 4)), v=g.normal(size=(2, 2, 5, 4)))
    keys = np.array([[True, False, True, True, False], [False, False, True, False, True]])
    bias = np.where(keys[:, None, None, :], 0.0, -NEG_LARGE) + g.normal(size=(2, 2, 3, 5))
    w = g.normal(size=(2, 2, 3, 4))
    for kw in ({"bias": bias}, {"key_mask": keys}):
        rep = nx.finite_diff_check(lambda st: (nx.attention(st["q"], st["k"], st["v"], **kw) * Tensor(w)).sum(),
                                   s, eps=1e-6)
        assert rep.passed, (kw.keys(), rep.errors)


def test_finite_diff_check_flags_a_wrong_gradient():
    s = store_with(w=np.random.default_rng(5).normal(size=4))

    def wrong_square(x):
        # forward x^2, backward claims 2.1 x
        def fn(g):
            return (g * 2.1 * x.data,)
        return nx._record(x.data * x.data, (x,), fn)

    rep = nx.finite_diff_check(lambda st: wrong_square(st["w"]).sum(), s, eps=1e-6)
    assert not rep.passed
    assert rep.worst[0] == "w" and rep.worst[1] > 0.01


def test_finite_diff_check_floor_still_catches_small_wrong_gradients():
    # a gradient of size 1e-3 that is 10% off must fail even though it is small
    s = store_with(w=np.full(3, 1e-3))

    def scaled(x):
        def fn(g):
            return (g * 0.9,)
        return nx._record(x.data.copy(), (x,), fn)

    rep = nx.finite_diff_check(lambda st: scaled(st["w"]).sum() * 1e-3, s, eps=1e-6)
    assert not rep.passed


def test_finite_diff_check_rejects_nondeterministic_f():
    s = store_with(w=np.ones(2))
    g = np.random.default_rng(0)
    with pytest.raises(NonDeterministicFunction):
        nx.finite_diff_check(lambda st: (st["w"] * float(g.normal())).sum(), s)


def test_finite_diff_check_eps_range():
    s = store_with(w=np.ones(2))
    with pytest.raises(ValueError):
        nx.finite_diff_check(lambda st: st["w"].sum(), s, eps=1e-2)


# optimizer

def test_adamw_first_step_moves_by_lr_times_sign():
    s = store_with(w=np.array([1.0, -2.0, 3.0]))
    nx.adamw_step(s, {"w": np.array([0.5, -4.0, 1e-3])}, lr=0.1, weight_decay=0.0)
    assert np.allclose(s["w"].data, [0.9, -1.9, 2.9], atol=1e-6)


def test_adamw_decoupled_weight_decay_with_zero_gradient():
    s = store_with(w=np.array([2.0]))
    nx.adamw_step(s, {"w": np.zeros(1)}, lr=0.1, weight_decay=0.5)
    assert np.allclose(s["w"].data, [2.0 * (1 - 0.05)])


def test_adamw_missing_grad():
    s = store_with(a=np.ones(1), b=np.ones(1))
    with pytest.raises(MissingGrad, match="b"):
        nx.adamw_step(s, {"a": np.ones(1)}, lr=0.1, weight_decay=0.0)


def test_adamw_minimises_a_quadratic():
    s = store_with(w=np.array([3.0, -2.0]))
    for step in range(1, 501):
        with nx.recording():
            grads = nx.backward(((s["w"] - 1.0) * (s["w"] - 1.0)).sum(), s)
        nx.adamw_step(s, grads, lr=0.05, weight_decay=0.0, step_index=step)
    assert np.abs(s["w"].data - 1.0).max() < 1e-2


# rng

def test_rng_stream_reproducible_and_labelled():
    a = RngStream(7, "x").child("y").normal(5)
    b = RngStream(7, "x/y").normal(5)
    c = RngStream(7, "x").child("z").normal(5)
    d = RngStream(8, "x/y").normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_rng_children_do_not_collide():
    draws = {tuple(RngStream(0, "root").child(f"c{i}").integers(0, 2**62, 2)) for i in range(500)}
    assert len(draws) == 500
