import numpy as np
import pytest

from l2s.checks import random_masks, zero_init_togglability
from l2s.errors import BadRefFrame, EmptyCaption, ShapeMismatch
from l2s.layout import BoundingBox
from l2s.model import (ForwardOptions, Layout, ModelConfig, base_embedding, concat_reference,
                       copy_global_to_subject, denoiser_forward, encode_text, init_params, injection_site,
                       is_global_param, substitute_captions)
from l2s.numerics import RngStream, Tensor

CFG = ModelConfig(d_model=16, n_heads=2, h=4, w=4, max_frames=3, vocab_dim=8, freq_dim=8, ffn_mult=2)


def open_store(seed=0):
    """Parameters with the zero-initialised outputs opened up."""
    s = init_params(CFG, seed)
    g = np.random.default_rng(seed + 1)
    for name, t in s.items():
        if name.startswith(("subject.inject", "subject.block", "global.final.out", "global.adaln")):
            t.data[...] = g.normal(size=t.shape) * 0.3
    return s


# text stub

def test_text_embedding_deterministic_and_local():
    s = init_params(CFG, 0)
    a = encode_text(["red blob moving"], s, CFG).tokens.data
    assert np.array_equal(a, encode_text("red blob moving", s, CFG).tokens.data)
    b = encode_text(["red blob still"], s, CFG).tokens.data
    assert np.array_equal(a[0, :2], b[0, :2]) and not np.array_equal(a[0, 2], b[0, 2])
    assert np.array_equal(base_embedding("Red  BLOB", CFG), base_embedding("red blob", CFG))


def test_text_truncation_and_padding_mask():
    long = " ".join(f"w{i}" for i in range(130))
    assert base_embedding(long, CFG).shape == (120, CFG.vocab_dim)
    assert np.array_equal(base_embedding(long, CFG), base_embedding(" ".join(long.split()[:120]), CFG))
    emb = encode_text(["a b c", "a"], init_params(CFG, 0), CFG)
    assert emb.mask.tolist() == [[True, True, True], [True, False, False]]
    assert emb.lengths.tolist() == [3, 1]
    with pytest.raises(EmptyCaption):
        base_embedding("   ", CFG)


def test_subject_branch_has_its_own_text_projection():
    s = open_store()
    s["text.subject.proj.w"].data[...] += 1.0
    g = encode_text("red blob", s, CFG, "global").tokens.data
    sub = encode_text("red blob", s, CFG, "subject").tokens.data
    assert not np.allclose(g, sub)


# reference concat

def test_refconv_starts_as_identity_on_latent():
    s = init_params(CFG, 0)
    g = np.random.default_rng(0)
    z = g.normal(size=(2, 3, 4, 4, 4))
    out = concat_reference(Tensor(z), g.normal(size=(2, 4, 4, 4)), np.ones((2, 4, 4, 1)), [0, 2], s).data
    assert np.array_equal(out, z)


def test_bad_reference_frame():
    s = init_params(CFG, 0)
    z = np.zeros((1, 2, 4, 4, 4))
    lay = Layout([[None, None]], ref_latent=np.zeros((1, 4, 4, 4)), ref_frame=[2])
    with pytest.raises(BadRefFrame):
        denoiser_forward(s, CFG, z, [5], ["a"], lay)


# togglability

def test_zero_init_togglability():
    ok, detail = zero_init_togglability(n_inputs=12, seed=3)
    assert ok, detail


def test_omitted_layout_equals_full_frame_boxes_with_global_captions():
    s = open_store(2)
    g = np.random.default_rng(4)
    z = g.normal(size=(2, 3, 4, 4, 4))
    caps = ["red blob left", "blue blob"]
    none = denoiser_forward(s, CFG, z, [10, 700], caps, None).data
    full = Layout([[BoundingBox.full()] * 3, [None] * 3], [[c] * 3 for c in caps])
    assert np.array_equal(none, denoiser_forward(s, CFG, z, [10, 700], caps, full).data)
    other = Layout(random_masks(g, 2, 3, 4, 4))
    assert not np.allclose(none, denoiser_forward(s, CFG, z, [10, 700], caps, other).data)


def test_dense_and_gathered_bias_paths_agree():
    s = open_store(5)
    g = np.random.default_rng(5)
    z = g.normal(size=(2, 2, 4, 4, 4))
    lay = Layout(random_masks(g, 2, 2, 4, 4), [["red", "blue"], ["green blob", "up"]],
                 g.normal(size=(2, 4, 4, 4)), [1, 0])
    a = denoiser_forward(s, CFG, z, [3, 900], ["a b", "c"], lay).data
    b = denoiser_forward(s, CFG, z, [3, 900], ["a b", "c"], lay, ForwardOptions(dense_bias=True)).data
    assert np.abs(a - b).max() < 1e-12


def test_frame_permutation_equivariance_without_positions():
    s = open_store(6)
    g = np.random.default_rng(6)
    z = g.normal(size=(1, 3, 4, 4, 4))
    perm = [2, 0, 1]
    opts = ForwardOptions(pos_scale=0.0)
    out = denoiser_forward(s, CFG, z, [400], ["red blob"], None, opts).data
    outp = denoiser_forward(s, CFG, z[:, perm], [400], ["red blob"], None, opts).data
    assert np.abs(out[:, perm] - outp).max() < 1e-12


def test_forward_shape_errors():
    s = init_params(CFG, 0)
    with pytest.raises(ShapeMismatch):
        denoiser_forward(s, CFG, np.zeros((1, 2, 4, 4, 3)), [1], ["a"])
    with pytest.raises(ShapeMismatch):
        denoiser_forward(s, CFG, np.zeros((2, 2, 4, 4, 4)), [1, 2], ["a"])
    with pytest.raises(ShapeMismatch):
        denoiser_forward(s, CFG, np.zeros((1, 4, 4, 4, 4)), [1], ["a"])
    with pytest.raises(ShapeMismatch):
        denoiser_forward(s, CFG, np.zeros((1, 2, 4, 4, 4)), [1], ["a"], Layout([[None]]))


# parameters

def test_subject_branch_not_larger_than_global():
    s = init_params(ModelConfig(), 0)
    sizes = {True: 0, False: 0}
    for name, t in s.items():
        sizes[is_global_param(name)] += t.data.size
    assert 0 < sizes[False] <= sizes[True]


def test_copy_global_to_subject():
    s = open_store(7)
    copy_global_to_subject(s, CFG)
    for m in range(1, CFG.n_subject_blocks + 1):
        src = f"global.block{injection_site(m)}"
        assert np.array_equal(s[f"subject.block{m}.self.wq.w"].data, s[f"{src}.self.wq.w"].data)
        assert np.array_equal(s[f"subject.block{m}.temporal.wo.b"].data, s[f"{src}.self.wo.b"].data)
        assert np.array_equal(s[f"subject.block{m}.cross.wk.w"].data, s[f"{src}.cross.wk.w"].data)
    assert injection_site(1) == 2 and injection_site(2) == 4


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_global_blocks=3)
    with pytest.raises(ValueError):
        ModelConfig(token_cap=121)


# caption substitution

def test_substitute_captions_extremes_and_rate():
    subj = [["a", "b"], ["c", "d"]]
    glob = ["G0", "G1"]
    out, hit = substitute_captions(subj, glob, 0.0, RngStream(0, "s"))
    assert out == subj and not hit.any()
    out, hit = substitute_captions(subj, glob, 1.0, RngStream(0, "s"))
    assert out == [["G0", "G0"], ["G1", "G1"]] and hit.all()
    n = 10_000
    _, hit = substitute_captions([["x"]] * n, ["g"] * n, 0.25, RngStream(1, "s"))
    assert 0.235 <= hit.mean() <= 0.265
    with pytest.raises(ValueError):
        substitute_captions(subj, glob, 1.5, RngStream(0, "s"))
