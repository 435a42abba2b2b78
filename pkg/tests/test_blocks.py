import numpy as np
import pytest

from l2s import numerics as nx
from l2s.blocks import (LN_EPS, AdaLNParams, BlockConfig, adaln_single, adaln_trunk, global_block,
                        init_adaln_trunk, init_attention, init_global_block, init_subject_block,
                        init_zero_linear, masked_attention, modulate, subject_block, zero_inject)
from l2s.checks import loop_attention, randomize
from l2s.layout import AttentionBiasSet
from l2s.numerics import NEG_LARGE, ParameterStore, RngStream, Tensor


def attn_store(d, seed=0):
    s = ParameterStore(seed, np.float64)
    init_attention(s, "a", d, RngStream(seed, "t"))
    randomize(s, seed, 0.5)
    return s


def mha_oracle(s, xq, xkv, heads, bias):
    """Per-head loops over explicit softmax rows."""
    def lin(name, x):
        return x @ s[f"a.{name}.w"].data + s[f"a.{name}.b"].data

    q, k, v = lin("wq", xq), lin("wk", xkv), lin("wv", xkv)
    B, Nq, d = q.shape
    dk = d // heads
    split = lambda x: x.reshape(B, -1, heads, dk).transpose(0, 2, 1, 3)
    out = loop_attention(split(q), split(k), split(v), np.broadcast_to(bias[:, None], (B, heads, Nq, k.shape[1])))
    return lin("wo", out.transpose(0, 2, 1, 3).reshape(B, Nq, d))


def test_masked_attention_zero_bias_equals_unmasked_oracle():
    g = np.random.default_rng(0)
    s = attn_store(8)
    x = g.normal(size=(2, 5, 8))
    out = masked_attention(s, "a", Tensor(x), Tensor(x), 2, bias=np.zeros((2, 5, 5))).data
    assert np.abs(out - mha_oracle(s, x, x, 2, np.zeros((2, 5, 5)))).max() <= 1e-12
    assert np.array_equal(out, masked_attention(s, "a", Tensor(x), Tensor(x), 2).data)


def test_masked_attention_single_survivor():
    g = np.random.default_rng(1)
    s = attn_store(4)
    xq, xkv = g.normal(size=(1, 3, 4)), g.normal(size=(1, 2, 4))
    out = masked_attention(s, "a", Tensor(xq), Tensor(xkv), 1, bias=np.array([[[0.0, -NEG_LARGE]] * 3])).data
    only = masked_attention(s, "a", Tensor(xq), Tensor(xkv[:, :1]), 1).data
    assert np.abs(out - only).max() < 1e-9


def test_masked_attention_loop_oracle():
    g = np.random.default_rng(2)
    s = attn_store(8)
    xq, xkv = g.normal(size=(1, 4, 8)), g.normal(size=(1, 4, 8))
    bias = np.where(g.random((1, 4, 4)) < 0.3, -NEG_LARGE, 0.0) + g.normal(size=(1, 4, 4))
    bias[..., 0] = 0.0
    out = masked_attention(s, "a", Tensor(xq), Tensor(xkv), 1, bias=bias).data
    assert np.abs(out - mha_oracle(s, xq, xkv, 1, bias)).max() < 1e-10


def test_forbidden_value_rows_have_no_influence():
    g = np.random.default_rng(3)
    s = attn_store(8)
    xq, xkv = g.normal(size=(2, 4, 8)), g.normal(size=(2, 6, 8))
    keys = np.array([[1, 1, 0, 0, 1, 0], [0, 1, 0, 1, 0, 0]], dtype=bool)
    bias = np.broadcast_to(np.where(keys[:, None, :], 0.0, -NEG_LARGE), (2, 4, 6))
    base = masked_attention(s, "a", Tensor(xq), Tensor(xkv), 2, bias=bias).data
    base_k = masked_attention(s, "a", Tensor(xq), Tensor(xkv), 2, key_mask=keys).data
    # change keys/values only at forbidden positions
    x2 = xkv.copy()
    x2[~keys] = g.normal(size=(int((~keys).sum()), 8)) * 100
    moved = masked_attention(s, "a", Tensor(xq), Tensor(x2), 2, bias=bias).data
    assert np.abs(moved - base).max() < 1e-20
    assert np.abs(base_k - base).max() < 1e-12


# AdaLN-single

def trunk_store(d=8, freq=8, seed=0):
    s = ParameterStore(seed, np.float64)
    init_adaln_trunk(s, "ada", d, freq, RngStream(seed, "t"))
    return s


def test_adaln_zero_weights_give_zero_params():
    s = trunk_store()
    for _, t in s.items():
        t.data[...] = 0.0
    _, six = adaln_trunk(s, "ada", np.array([1.0, 500.0]), 8)
    ada = adaln_single(six, Tensor(np.zeros((6, 8))))
    for part in vars(ada).values():
        assert not part.data.any()


def test_adaln_shared_trunk_property():
    s = trunk_store()
    randomize(s, 1)
    g = np.random.default_rng(4)
    e1, e2 = g.normal(size=(6, 8)), g.normal(size=(6, 8))
    for t in ([3.0], [250.0, 999.0]):
        _, six = adaln_trunk(s, "ada", np.array(t), 8)
        a, b = adaln_single(six, Tensor(e1)), adaln_single(six, Tensor(e2))
        diff = np.stack([getattr(a, k).data - getattr(b, k).data for k in vars(a)], axis=1)
        order = ["beta1", "beta2", "gamma1", "gamma2", "alpha1", "alpha2"]
        assert order == list(vars(a))
        assert np.allclose(diff, (e1 - e2)[None], atol=1e-12)


def test_adaln_gradients():
    s = trunk_store()
    randomize(s, 2)
    w = np.random.default_rng(5).normal(size=(3, 6, 8))
    rep = nx.finite_diff_check(lambda st: (adaln_trunk(st, "ada", np.array([1.0, 40.0, 800.0]), 8)[1]
                                           * Tensor(w)).sum(), s, eps=1e-6)
    assert rep.passed, rep.errors


def test_modulate_form():
    g = np.random.default_rng(6)
    x, gam, bet = g.normal(size=(2, 3, 4)), g.normal(size=(2, 4)), g.normal(size=(2, 4))
    out = modulate(Tensor(x), Tensor(gam), Tensor(bet)).data
    assert np.allclose(out, x * (1 + gam[:, None]) + bet[:, None])


# blocks

def ada_from(g, rows, d, scale=0.3):
    return AdaLNParams(*(Tensor(g.normal(size=(rows, d)) * scale) for _ in range(6)))


def block_store(d, heads, seed=0, random=True):
    s = ParameterStore(seed, np.float64)
    rng = RngStream(seed, "blocks")
    init_global_block(s, "g", BlockConfig(d, heads, True, 2), rng)
    init_global_block(s, "gn", BlockConfig(d, heads, False, 2), rng)
    init_subject_block(s, "s", BlockConfig(d, heads, False, 2), rng)
    if random:
        randomize(s, seed)
    return s


def test_global_block_identity_with_zero_gates():
    g = np.random.default_rng(7)
    s = block_store(8, 2, random=False)
    z, text = g.normal(size=(2, 4, 8)), g.normal(size=(2, 3, 8))
    ada = ada_from(g, 2, 8)
    ada.alpha1 = Tensor(np.zeros((2, 8)))
    ada.alpha2 = Tensor(np.zeros((2, 8)))
    out = global_block(s, "g", Tensor(z), Tensor(text), ada, BlockConfig(8, 2, True, 2)).data
    assert np.array_equal(out, z)


def test_global_block_identical_samples():
    g = np.random.default_rng(8)
    s = block_store(8, 2)
    z = np.repeat(g.normal(size=(1, 4, 8)), 2, axis=0)
    text = np.repeat(g.normal(size=(1, 3, 8)), 2, axis=0)
    ada = AdaLNParams(*(Tensor(np.repeat(g.normal(size=(1, 8)), 2, axis=0)) for _ in range(6)))
    out = global_block(s, "g", Tensor(z), Tensor(text), ada, BlockConfig(8, 2, True, 2)).data
    assert np.array_equal(out[0], out[1])


def test_subject_block_degenerates_to_global_style_block():
    # all-valid biases and f=1: self + cross (global block without FFN) then one more attention
    g = np.random.default_rng(9)
    d, hw = 8, 4
    s = block_store(d, 2)
    for n in list(s.params):
        if n.startswith("s.") and not n.startswith("s.temporal"):
            s[n].data[...] = s["gn." + n[2:]].data
    z, text = g.normal(size=(2, 1, hw, d)), g.normal(size=(2, 3, d))
    ada = ada_from(g, 2, d)
    out = subject_block(s, "s", Tensor(z), Tensor(text), AttentionBiasSet.all_valid(2, 1, hw), ada,
                        BlockConfig(d, 2, False)).data
    x = global_block(s, "gn", Tensor(z[:, 0]), Tensor(text), ada, BlockConfig(d, 2, False))
    h = modulate(nx.layer_norm(x, LN_EPS), ada.gamma2, ada.beta2)
    x = x + ada.alpha2.reshape(2, 1, d) * masked_attention(s, "s.temporal", h, h, 2)
    assert np.abs(out[:, 0] - x.data).max() < 1e-12


def test_subject_block_bypass_outside_box():
    g = np.random.default_rng(10)
    d, hw = 8, 9
    s = block_store(d, 2)
    s["s.self.wo.w"].data[...] = 0.0
    s["s.self.wo.b"].data[...] = 0.0
    s["s.temporal.wo.w"].data[...] = 0.0
    s["s.temporal.wo.b"].data[...] = 0.0
    keys = np.zeros((1, 2, hw), dtype=bool)
    keys[0, 0, :4] = True
    keys[0, 1, 5:] = True
    z, text = g.normal(size=(1, 2, hw, d)), g.normal(size=(2, 3, d))
    out = subject_block(s, "s", Tensor(z), Tensor(text), AttentionBiasSet(keys), ada_from(g, 1, d),
                        BlockConfig(d, 2, False)).data
    assert np.array_equal(out[~keys], z[~keys])
    assert not np.allclose(out[keys], z[keys])


def test_subject_block_dense_and_gathered_agree():
    g = np.random.default_rng(11)
    d, hw = 8, 9
    s = block_store(d, 2)
    keys = g.random((2, 2, hw)) < 0.5
    keys[..., 0] = True
    text = g.normal(size=(4, 3, d))
    tmask = np.ones((4, 3), dtype=bool)
    tmask[1, 2] = False
    args = (s, "s", Tensor(g.normal(size=(2, 2, hw, d))), Tensor(text), AttentionBiasSet(keys),
            ada_from(g, 2, d), BlockConfig(d, 2, False), tmask)
    assert np.abs(subject_block(*args).data - subject_block(*args, dense=True).data).max() < 1e-12


@pytest.mark.parametrize("d,hw,f", [(4, 4, 1), (4, 9, 2), (8, 4, 2), (8, 9, 1)])
def test_block_gradients(d, hw, f):
    g = np.random.default_rng(d * 100 + hw * 10 + f)
    s = block_store(d, 2, seed=f)
    keys = g.random((1, f, hw)) < 0.5
    keys[..., 0] = True
    zs = g.normal(size=(1, f, hw, d))
    text = g.normal(size=(f, 2, d))
    ada_g = ada_from(g, f, d)
    ada_s = ada_from(g, 1, d)
    w_g, w_s = g.normal(size=(f, hw, d)), g.normal(size=(1, f, hw, d))

    gl = s.subset(lambda n: n.startswith("g."))
    rep = nx.finite_diff_check(lambda st: (global_block(st, "g", Tensor(zs[0]), Tensor(text), ada_g,
                                                        BlockConfig(d, 2, True, 2)) * Tensor(w_g)).sum(),
                               gl, eps=1e-6)
    assert rep.passed, rep.errors
    sb = s.subset(lambda n: n.startswith("s."))
    rep = nx.finite_diff_check(lambda st: (subject_block(st, "s", Tensor(zs), Tensor(text), AttentionBiasSet(keys),
                                                         ada_s, BlockConfig(d, 2, False)) * Tensor(w_s)).sum(),
                               sb, eps=1e-6)
    assert rep.passed, rep.errors


# zero injection

def inject_store(d=6):
    s = ParameterStore(0, np.float64)
    init_zero_linear(s, "inj", d)
    return s


def test_zero_inject_fresh_identity_and_oracles():
    g = np.random.default_rng(12)
    zg, zs = g.normal(size=(2, 8, 6)), g.normal(size=(2, 2, 4, 6))
    s = inject_store()
    assert np.array_equal(zero_inject(Tensor(zg), Tensor(zs), s, "inj").data, zg)
    s["inj.w"].data[...] = np.eye(6)
    assert np.array_equal(zero_inject(Tensor(zg), Tensor(zs), s, "inj").data, zg + zs.reshape(zg.shape))
    w, b = g.normal(size=(6, 6)), g.normal(size=6)
    s["inj.w"].data[...] = w
    s["inj.b"].data[...] = b
    ref = zg + zs.reshape(zg.shape) @ w + b
    assert np.abs(zero_inject(Tensor(zg), Tensor(zs), s, "inj").data - ref).max() < 1e-12
