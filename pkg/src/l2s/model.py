"""Two-branch denoiser.

The global branch is a small text-conditioned DiT that sees every frame on
its own. The subject branch consumes the noisy latent concatenated with a
reference latent and its mask, attends under the layout masks, and feeds the
global branch through zero-initialised linears after every second global
block (subject block ``m`` into global block ``2m``).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .blocks import (
    BlockConfig,
    LN_EPS,
    adaln_single,
    adaln_trunk,
    apply_linear,
    global_block,
    init_adaln_trunk,
    init_global_block,
    init_linear,
    init_subject_block,
    init_zero_linear,
    modulate,
    repeat_rows,
    subject_block,
    zero_inject,
)
from .errors import BadRefFrame, EmptyCaption, ShapeMismatch
from .layout import TOKEN_CAP, AttentionBiasSet, BoundingBox, rasterize_bbox
from .numerics import ParameterStore, RngStream, Tensor

NULL_CAPTION = "<null>"
LATENT_CHANNELS = 4


@dataclass(frozen=True)
class ModelConfig:
    n_global_blocks: int = 4
    d_model: int = 64
    n_heads: int = 4
    latent_channels: int = LATENT_CHANNELS
    h: int = 16
    w: int = 16
    max_frames: int = 4
    vocab_dim: int = 32
    token_cap: int = TOKEN_CAP
    freq_dim: int = 32
    ffn_mult: int = 4
    text_seed: int = 1234

    def __post_init__(self):
        if self.n_global_blocks < 2 or self.n_global_blocks % 2:
            raise ValueError("n_global_blocks must be a positive even number")
        if self.latent_channels != LATENT_CHANNELS:
            raise ValueError("latents have exactly four channels")
        if not 1 <= self.token_cap <= TOKEN_CAP:
            raise ValueError(f"token_cap must lie in [1, {TOKEN_CAP}]")
        BlockConfig(self.d_model, self.n_heads)

    @property
    def n_subject_blocks(self) -> int:
        return self.n_global_blocks // 2

    @property
    def hw(self) -> int:
        return self.h * self.w

    @property
    def global_block_cfg(self) -> BlockConfig:
        return BlockConfig(self.d_model, self.n_heads, True, self.ffn_mult)

    @property
    def subject_block_cfg(self) -> BlockConfig:
        return BlockConfig(self.d_model, self.n_heads, False, self.ffn_mult)

    def to_dict(self) -> dict:
        return asdict(self)


def injection_site(m: int) -> int:
    """Global block (1-based) that receives subject block ``m`` (1-based)."""
    return 2 * m


# ------------------------------------------------------------------ text stub

def tokenize(caption: str) -> list[str]:
    return caption.lower().split()


_BASE_CACHE: dict[tuple[str, int, int], np.ndarray] = {}


def token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    """Fixed pseudo-random unit-variance vector for one token."""
    key = (token, dim, seed)
    vec = _BASE_CACHE.get(key)
    if vec is None:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
        gen = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
        vec = gen.standard_normal(dim)
        _BASE_CACHE[key] = vec
    return vec


def base_embedding(caption: str, cfg: ModelConfig) -> np.ndarray:
    """Pre-projection token vectors (l, vocab_dim), truncated to the token cap."""
    tokens = tokenize(caption)
    if not tokens:
        raise EmptyCaption("caption is empty after whitespace normalisation")
    tokens = tokens[: cfg.token_cap]
    return np.stack([token_vector(tok, cfg.vocab_dim, cfg.text_seed) for tok in tokens])


@dataclass
class TextEmbedding:
    tokens: Tensor  # (B, L, d)
    mask: np.ndarray  # (B, L) bool, False on padding
    lengths: np.ndarray  # (B,)


def encode_text(captions: Sequence[str] | str, store: ParameterStore, cfg: ModelConfig,
                branch: str = "global") -> TextEmbedding:
    """Embed a batch of captions with the branch's trainable projection."""
    if isinstance(captions, str):
        captions = [captions]
    bases = [base_embedding(c, cfg) for c in captions]
    lengths = np.array([len(x) for x in bases])
    L = int(lengths.max())
    arr = np.zeros((len(bases), L, cfg.vocab_dim), dtype=store.dtype)
    mask = np.zeros((len(bases), L), dtype=bool)
    for i, x in enumerate(bases):
        arr[i, : len(x)] = x
        mask[i, : len(x)] = True
    tokens = apply_linear(store, f"text.{branch}.proj", Tensor(arr))
    return TextEmbedding(tokens, mask, lengths)


# ------------------------------------------------------------------ parameters

def _sincos_2d(h: int, w: int, d: int) -> np.ndarray:
    quarter = d // 4
    omega = 1.0 / 10000 ** (np.arange(quarter) / max(quarter, 1))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        args = coord[:, None] * omega[None, :]
        parts += [np.sin(args), np.cos(args)]
    emb = np.concatenate(parts, axis=1)
    if emb.shape[1] < d:
        emb = np.concatenate([emb, np.zeros((h * w, d - emb.shape[1]))], axis=1)
    return emb


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ParameterStore:
    store = ParameterStore(seed, dtype)
    rng = RngStream(seed, "init")
    d = cfg.d_model
    gcfg, scfg = cfg.global_block_cfg, cfg.subject_block_cfg

    init_linear(store, "text.global.proj", cfg.vocab_dim, d, rng)
    init_linear(store, "global.patch", cfg.latent_channels, d, rng)
    store.add("global.pos", _sincos_2d(cfg.h, cfg.w, d))
    init_adaln_trunk(store, "global.adaln", d, cfg.freq_dim, rng)
    for i in range(1, cfg.n_global_blocks + 1):
        init_global_block(store, f"global.block{i}", gcfg, rng)
    store.add("global.final.emb", np.zeros((2, d)))
    init_linear(store, "global.final.out", d, cfg.latent_channels, rng, zero=True)

    init_linear(store, "text.subject.proj", cfg.vocab_dim, d, rng)
    w = np.zeros((2 * cfg.latent_channels + 1, cfg.latent_channels))
    w[: cfg.latent_channels] = np.eye(cfg.latent_channels)
    store.add("subject.refconv.w", w)
    store.add("subject.refconv.b", np.zeros(cfg.latent_channels))
    init_linear(store, "subject.patch", cfg.latent_channels, d, rng)
    store.add("subject.pos", _sincos_2d(cfg.h, cfg.w, d))
    store.add("subject.frame_pos", 0.02 * rng.child("frame_pos").normal((cfg.max_frames, d)))
    for m in range(1, cfg.n_subject_blocks + 1):
        init_subject_block(store, f"subject.block{m}", scfg, rng)
        init_zero_linear(store, f"subject.inject{m}", d)
    return store


def is_global_param(name: str) -> bool:
    return name.startswith("global.") or name.startswith("text.global.")


def is_subject_param(name: str) -> bool:
    return not is_global_param(name)


def copy_global_to_subject(store: ParameterStore, cfg: ModelConfig) -> None:
    """Initialise the subject branch from the global branch.

    Subject block m takes the attention weights and block embedding of global
    block 2m; the temporal attention starts from the same self-attention.
    """
    def copy(dst: str, src: str):
        store[dst].data[...] = store[src].data

    for suffix in (".w", ".b"):
        copy("text.subject.proj" + suffix, "text.global.proj" + suffix)
        copy("subject.patch" + suffix, "global.patch" + suffix)
    copy("subject.pos", "global.pos")
    for m in range(1, cfg.n_subject_blocks + 1):
        g = f"global.block{injection_site(m)}"
        s = f"subject.block{m}"
        copy(f"{s}.emb", f"{g}.emb")
        for proj in ("wq", "wk", "wv", "wo"):
            for suffix in (".w", ".b"):
                copy(f"{s}.self.{proj}{suffix}", f"{g}.self.{proj}{suffix}")
                copy(f"{s}.temporal.{proj}{suffix}", f"{g}.self.{proj}{suffix}")
                copy(f"{s}.cross.{proj}{suffix}", f"{g}.cross.{proj}{suffix}")


# ------------------------------------------------------------------ inputs

@dataclass
class Layout:
    """User-facing layout condition for a batch of b stories with f frames."""

    boxes: list[list[BoundingBox | None]]
    subject_captions: list[list[str]] | None = None
    ref_latent: np.ndarray | None = None  # (b, h, w, 4)
    ref_frame: Sequence[int] | None = None


@dataclass
class SubjectInputs:
    """Resolved subject-branch inputs (no optional parts left)."""

    biases: AttentionBiasSet
    subject_captions: list[list[str]]
    ref_latent: np.ndarray  # (b, h, w, 4)
    ref_mask: np.ndarray  # (b, h, w, 1)
    ref_frame: np.ndarray  # (b,)


def prepare_subject_inputs(layout: Layout | None, global_captions: Sequence[str], f: int,
                           cfg: ModelConfig, dtype=np.float64) -> SubjectInputs:
    """Resolve a layout, falling back to the layout-free path where absent.

    Without a layout every bias is all-valid, each frame's subject caption is
    the global caption, the reference latent is zero and its mask full-frame.
    """
    b = len(global_captions)
    h, w = cfg.h, cfg.w
    if layout is None:
        return SubjectInputs(
            AttentionBiasSet.all_valid(b, f, cfg.hw, dtype=dtype),
            [[c] * f for c in global_captions],
            np.zeros((b, h, w, cfg.latent_channels), dtype=dtype),
            np.ones((b, h, w, 1), dtype=dtype),
            np.zeros(b, dtype=np.int64),
        )
    if len(layout.boxes) != b or any(len(row) != f for row in layout.boxes):
        raise ShapeMismatch(f"layout boxes must be {b} x {f}")
    masks = np.stack([np.stack([rasterize_bbox(bx, h, w).grid for bx in row]) for row in layout.boxes])
    biases = AttentionBiasSet.from_masks(masks, dtype=dtype)
    caps = layout.subject_captions
    if caps is None:
        caps = [[c] * f for c in global_captions]
    ref_frame = np.zeros(b, dtype=np.int64) if layout.ref_frame is None else np.asarray(layout.ref_frame)
    if np.any(ref_frame < 0) or np.any(ref_frame >= f):
        raise BadRefFrame(f"reference frame indices {ref_frame.tolist()} outside [0, {f})")
    if layout.ref_latent is None:
        ref_latent = np.zeros((b, h, w, cfg.latent_channels), dtype=dtype)
        ref_mask = np.ones((b, h, w, 1), dtype=dtype)
    else:
        ref_latent = np.asarray(layout.ref_latent, dtype=dtype)
        ref_mask = np.stack([masks[i, ref_frame[i]] for i in range(b)])[..., None].astype(dtype)
    return SubjectInputs(biases, [list(r) for r in caps], ref_latent, ref_mask, ref_frame)


def reference_channels(z: Tensor, ref_latent: np.ndarray, ref_mask: np.ndarray, ref_frame) -> Tensor:
    """Channel concat [z, ref latent, ref mask] with the reference in one frame slot."""
    b, f, h, w, c = z.shape
    ref_latent = np.asarray(ref_latent)
    ref_mask = np.asarray(ref_mask)
    if ref_latent.shape != (b, h, w, c) or ref_mask.shape != (b, h, w, 1):
        raise ShapeMismatch(f"reference {ref_latent.shape}/{ref_mask.shape} vs latent {z.shape}")
    ref_frame = np.broadcast_to(np.asarray(ref_frame, dtype=np.int64), (b,))
    if np.any(ref_frame < 0) or np.any(ref_frame >= f):
        raise BadRefFrame(f"reference frame indices {ref_frame.tolist()} outside [0, {f})")
    pad = np.zeros((b, f, h, w, c + 1), dtype=z.dtype)
    for i in range(b):
        pad[i, ref_frame[i], ..., :c] = ref_latent[i]
        pad[i, ref_frame[i], ..., c:] = ref_mask[i]
    return nx.concat([z, Tensor(pad)], axis=-1)


def concat_reference(z: Tensor, ref_latent, ref_mask, ref_frame, store: ParameterStore) -> Tensor:
    """9-channel concat reduced back to 4 channels by a 1x1 convolution."""
    return apply_linear(store, "subject.refconv", reference_channels(z, ref_latent, ref_mask, ref_frame))


# ------------------------------------------------------------------ forward

@dataclass
class ForwardOptions:
    use_subject: bool = True
    dense_bias: bool = False
    pos_scale: float = 1.0  # tests zero positional tables through this


def denoiser_forward(store: ParameterStore, cfg: ModelConfig, z_t, t, global_captions: Sequence[str],
                     layout: Layout | SubjectInputs | None = None,
                     options: ForwardOptions | None = None) -> Tensor:
    """Predict the noise in ``z_t`` (b, f, h, w, 4) at timesteps ``t`` (b,)."""
    opts = options or ForwardOptions()
    z = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=store.dtype))
    if z.ndim != 5 or z.shape[2:] != (cfg.h, cfg.w, cfg.latent_channels):
        raise ShapeMismatch(f"latent must be (b, f, {cfg.h}, {cfg.w}, {cfg.latent_channels}); got {z.shape}")
    b, f = z.shape[:2]
    if len(global_captions) != b:
        raise ShapeMismatch(f"{len(global_captions)} captions for a batch of {b}")
    if f > cfg.max_frames and opts.use_subject:
        raise ShapeMismatch(f"{f} frames exceeds max_frames={cfg.max_frames}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    d, hw = cfg.d_model, cfg.hw
    gcfg, scfg = cfg.global_block_cfg, cfg.subject_block_cfg

    x = apply_linear(store, "global.patch", z.reshape(b * f, hw, cfg.latent_channels))
    x = x + store["global.pos"] * opts.pos_scale
    hidden, six = adaln_trunk(store, "global.adaln", t, cfg.freq_dim)
    six_f = repeat_rows(six, f)
    text = encode_text(global_captions, store, cfg, "global")
    text_tokens = repeat_rows(text.tokens, f)
    text_mask = np.repeat(text.mask, f, axis=0)

    if opts.use_subject:
        sub = layout if isinstance(layout, SubjectInputs) else prepare_subject_inputs(
            layout, global_captions, f, cfg, store.dtype)
        zs = concat_reference(z, sub.ref_latent, sub.ref_mask, sub.ref_frame, store)
        s = apply_linear(store, "subject.patch", zs.reshape(b, f, hw, cfg.latent_channels))
        frame_pos = store["subject.frame_pos"][:f].reshape(1, f, 1, d)
        s = s + store["subject.pos"].reshape(1, 1, hw, d) * opts.pos_scale + frame_pos * opts.pos_scale
        flat_caps = [c for row in sub.subject_captions for c in row]
        if len(flat_caps) != b * f:
            raise ShapeMismatch(f"need {b * f} subject captions, got {len(flat_caps)}")
        stext = encode_text(flat_caps, store, cfg, "subject")

    for i in range(1, cfg.n_global_blocks + 1):
        name = f"global.block{i}"
        x = global_block(store, name, x, text_tokens, adaln_single(six_f, store[f"{name}.emb"]), gcfg, text_mask)
        if opts.use_subject and i % 2 == 0:
            m = i // 2
            sname = f"subject.block{m}"
            s = subject_block(store, sname, s, stext.tokens, sub.biases,
                              adaln_single(six, store[f"{sname}.emb"]), scfg, stext.mask, opts.dense_bias)
            x = zero_inject(x, s, store, f"subject.inject{m}")

    final = store["global.final.emb"] + repeat_rows(hidden, f).reshape(b * f, 1, d)
    shift, scale = final[:, 0, :], final[:, 1, :]
    x = modulate(nx.layer_norm(x, LN_EPS), scale, shift)
    out = apply_linear(store, "global.final.out", x)
    return out.reshape(b, f, cfg.h, cfg.w, cfg.latent_channels)


# ------------------------------------------------------------------ training strategy

def substitute_captions(subject_captions: Sequence[Sequence[str]], global_captions: Sequence[str],
                        p: float, rng: RngStream, sample_ids: Sequence | None = None
                        ) -> tuple[list[list[str]], np.ndarray]:
    """Per story, with probability ``p`` replace all subject captions by the global one."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    ids = range(len(global_captions)) if sample_ids is None else sample_ids
    out, hit = [], []
    for sid, caps, g in zip(ids, subject_captions, global_captions):
        swap = rng.child(sid).random() < p
        hit.append(swap)
        out.append([g] * len(caps) if swap else list(caps))
    return out, np.array(hit, dtype=bool)
