"""Transformer building blocks for both branches.

Parameters live in a flat :class:`ParameterStore` under dotted names; the
functions here take the store and a name prefix rather than holding state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ShapeMismatch
from .layout import AttentionBiasSet
from .numerics import NEG_LARGE, ParameterStore, RngStream, Tensor

LN_EPS = 1e-6


@dataclass(frozen=True)
class BlockConfig:
    d_model: int
    n_heads: int
    has_ffn: bool = True
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class AdaLNParams:
    beta1: Tensor
    beta2: Tensor
    gamma1: Tensor
    gamma2: Tensor
    alpha1: Tensor
    alpha2: Tensor


# ------------------------------------------------------------------ init helpers

def init_linear(store: ParameterStore, name: str, d_in: int, d_out: int, rng: RngStream,
                zero: bool = False, bias: bool = True) -> None:
    if zero:
        w = np.zeros((d_in, d_out))
    else:
        w = rng.child(name).normal((d_in, d_out)) / np.sqrt(d_in)
    store.add(name + ".w", w)
    if bias:
        store.add(name + ".b", np.zeros(d_out))


def apply_linear(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    b = store[name + ".b"] if name + ".b" in store else None
    return nx.linear(x, store[name + ".w"], b)


def init_attention(store: ParameterStore, name: str, d_model: int, rng: RngStream,
                   zero_out: bool = False) -> None:
    for proj in ("q", "k", "v"):
        init_linear(store, f"{name}.w{proj}", d_model, d_model, rng)
    init_linear(store, f"{name}.wo", d_model, d_model, rng, zero=zero_out)


def init_adaln_trunk(store: ParameterStore, name: str, d_model: int, freq_dim: int, rng: RngStream) -> None:
    init_linear(store, f"{name}.fc1", freq_dim, d_model, rng)
    init_linear(store, f"{name}.fc2", d_model, d_model, rng)
    init_linear(store, f"{name}.six", d_model, 6 * d_model, rng, zero=True)


def init_global_block(store: ParameterStore, name: str, cfg: BlockConfig, rng: RngStream) -> None:
    store.add(f"{name}.emb", np.zeros((6, cfg.d_model)))
    init_attention(store, f"{name}.self", cfg.d_model, rng)
    init_attention(store, f"{name}.cross", cfg.d_model, rng, zero_out=True)
    if cfg.has_ffn:
        init_linear(store, f"{name}.ffn1", cfg.d_model, cfg.ffn_mult * cfg.d_model, rng)
        init_linear(store, f"{name}.ffn2", cfg.ffn_mult * cfg.d_model, cfg.d_model, rng)


def init_subject_block(store: ParameterStore, name: str, cfg: BlockConfig, rng: RngStream) -> None:
    store.add(f"{name}.emb", np.zeros((6, cfg.d_model)))
    init_attention(store, f"{name}.self", cfg.d_model, rng)
    init_attention(store, f"{name}.cross", cfg.d_model, rng, zero_out=True)
    init_attention(store, f"{name}.temporal", cfg.d_model, rng)


def init_zero_linear(store: ParameterStore, name: str, d_model: int) -> None:
    store.add(name + ".w", np.zeros((d_model, d_model)))
    store.add(name + ".b", np.zeros(d_model))


# ------------------------------------------------------------------ attention

def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, N, d = x.shape
    return x.reshape(B, N, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, N, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, H * dk)


def masked_attention(store: ParameterStore, name: str, xq: Tensor, xkv: Tensor, n_heads: int,
                     bias=None, key_mask=None) -> Tensor:
    """Multi-head ``softmax(QK^T/sqrt(d_k) + bias) V`` with output projection.

    ``bias`` broadcasts to (B, Nq, Nk) and is shared by every head.
    ``key_mask`` (B, Nk) is the compact key-only alternative.
    """
    if xq.shape[-1] != xkv.shape[-1] or xq.shape[0] != xkv.shape[0]:
        raise ShapeMismatch(f"attention inputs {xq.shape} and {xkv.shape} disagree")
    q = _split_heads(apply_linear(store, f"{name}.wq", xq), n_heads)
    k = _split_heads(apply_linear(store, f"{name}.wk", xkv), n_heads)
    v = _split_heads(apply_linear(store, f"{name}.wv", xkv), n_heads)
    if bias is not None:
        bias = np.asarray(bias.data if isinstance(bias, Tensor) else bias)
        if bias.ndim == 3:
            bias = bias[:, None]
    out = nx.attention(q, k, v, bias=bias, key_mask=key_mask)
    return apply_linear(store, f"{name}.wo", _merge_heads(out))


# ------------------------------------------------------------------ AdaLN-single

def timestep_embedding(t, dim: int, max_period: float = 10000.0, dtype=np.float64) -> np.ndarray:
    """Sinusoidal features of (possibly fractional) timesteps, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.size, 1))], axis=-1)
    return emb.astype(dtype)


def adaln_trunk(store: ParameterStore, name: str, t, freq_dim: int) -> tuple[Tensor, Tensor]:
    """Shared timestep MLP: returns (hidden (B, d), six shared vectors (B, 6, d))."""
    feats = Tensor(timestep_embedding(t, freq_dim, dtype=store.dtype))
    hidden = apply_linear(store, f"{name}.fc2", nx.silu(apply_linear(store, f"{name}.fc1", feats)))
    six = apply_linear(store, f"{name}.six", nx.silu(hidden))
    B, d = hidden.shape
    return hidden, six.reshape(B, 6, d)


def adaln_single(shared_six: Tensor, block_embedding: Tensor) -> AdaLNParams:
    """Specialise the shared six vectors for one block by adding its embedding."""
    p = shared_six + block_embedding
    parts = [p[:, i, :] for i in range(6)]
    return AdaLNParams(*parts)


def modulate(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    B, d = gamma.shape
    return x * (gamma.reshape(B, 1, d) + 1.0) + beta.reshape(B, 1, d)


def _gate(alpha: Tensor, x: Tensor) -> Tensor:
    B, d = alpha.shape
    return alpha.reshape(B, 1, d) * x


def repeat_rows(x: Tensor, times: int) -> Tensor:
    """(b, ...) -> (b*times, ...), each row repeated ``times`` times consecutively."""
    if times == 1:
        return x
    return nx.take(x, np.repeat(np.arange(x.shape[0]), times), axis=0)


def text_padding_bias(text_mask: np.ndarray, n_queries: int, dtype) -> np.ndarray:
    row = np.where(text_mask, 0.0, -NEG_LARGE).astype(dtype)
    return np.broadcast_to(row[:, None, :], (row.shape[0], n_queries, row.shape[1]))


# ------------------------------------------------------------------ blocks

def global_block(store: ParameterStore, name: str, z: Tensor, text: Tensor, ada: AdaLNParams,
                 cfg: BlockConfig, text_mask: np.ndarray | None = None) -> Tensor:
    """One global-branch block on token-major input ``z`` (B, N, d).

    ``text`` (B, l, d) and the AdaLN vectors must already be expanded to B
    rows. Padding tokens of ``text`` are excluded through ``text_mask``.
    """
    h = modulate(nx.layer_norm(z, LN_EPS), ada.gamma1, ada.beta1)
    z = z + _gate(ada.alpha1, masked_attention(store, f"{name}.self", h, h, cfg.n_heads))
    z = z + masked_attention(store, f"{name}.cross", nx.layer_norm(z, LN_EPS), text, cfg.n_heads,
                             key_mask=text_mask)
    if cfg.has_ffn:
        h = modulate(nx.layer_norm(z, LN_EPS), ada.gamma2, ada.beta2)
        h = apply_linear(store, f"{name}.ffn2", nx.gelu(apply_linear(store, f"{name}.ffn1", h)))
        z = z + _gate(ada.alpha2, h)
    return z


def subject_block(store: ParameterStore, name: str, z_sub: Tensor, text: Tensor,
                  biases: AttentionBiasSet, ada: AdaLNParams, cfg: BlockConfig,
                  text_mask: np.ndarray | None = None, dense: bool = False) -> Tensor:
    """One subject-branch block on ``z_sub`` (b, f, hw, d).

    ``text`` is (b*f, l, d); ``ada`` holds per-story vectors (b rows).
    Order: masked self-attention within each frame, masked cross-attention
    whose residual is zeroed outside the box, then masked attention across all
    frames' tokens. ``gamma1/beta1/alpha1`` modulate the first, ``*2`` the last.
    ``dense=True`` feeds the materialised bias tensors instead of key masks.
    """
    b, f, hw, d = z_sub.shape
    if biases.keys.shape != (b, f, hw):
        raise ShapeMismatch(f"bias set {biases.keys.shape} does not match latent {(b, f, hw)}")
    keys = biases.keys
    frame_ada = AdaLNParams(*(repeat_rows(v, f) for v in (ada.beta1, ada.beta2, ada.gamma1,
                                                          ada.gamma2, ada.alpha1, ada.alpha2)))
    x = z_sub.reshape(b * f, hw, d)

    h = modulate(nx.layer_norm(x, LN_EPS), frame_ada.gamma1, frame_ada.beta1)
    if dense:
        a = masked_attention(store, f"{name}.self", h, h, cfg.n_heads,
                             bias=biases.self_bias.reshape(b * f, hw, hw))
    else:
        a = masked_attention(store, f"{name}.self", h, h, cfg.n_heads, key_mask=keys.reshape(b * f, hw))
    x = x + _gate(frame_ada.alpha1, a)

    inside = Tensor(keys.reshape(b * f, hw, 1).astype(store.dtype))
    hx = nx.layer_norm(x, LN_EPS)
    if dense:
        l = text.shape[1]
        cb = np.zeros((b * f, hw, l), dtype=store.dtype)
        if text_mask is not None:
            cb = cb + text_padding_bias(text_mask, hw, store.dtype)
        c = masked_attention(store, f"{name}.cross", hx, text, cfg.n_heads, bias=cb)
    else:
        c = masked_attention(store, f"{name}.cross", hx, text, cfg.n_heads, key_mask=text_mask)
    x = x + c * inside

    x3 = x.reshape(b, f * hw, d)
    h = modulate(nx.layer_norm(x3, LN_EPS), ada.gamma2, ada.beta2)
    if dense:
        a = masked_attention(store, f"{name}.temporal", h, h, cfg.n_heads, bias=biases.temporal_bias)
    else:
        a = masked_attention(store, f"{name}.temporal", h, h, cfg.n_heads, key_mask=keys.reshape(b, f * hw))
    x3 = x3 + _gate(ada.alpha2, a)
    return x3.reshape(b, f, hw, d)


def zero_inject(z_global: Tensor, z_sub: Tensor, store: ParameterStore, name: str) -> Tensor:
    """``z_global + F(z_sub)`` where F is the zero-initialised linear ``name``."""
    if int(np.prod(z_global.shape)) != int(np.prod(z_sub.shape)) or z_global.shape[-1] != z_sub.shape[-1]:
        raise ShapeMismatch(f"cannot inject {z_sub.shape} into {z_global.shape}")
    return z_global + apply_linear(store, name, z_sub.reshape(z_global.shape))
