"""Invariant and oracle suite behind ``l2s check``.

Each check returns a :class:`CheckResult`; numbered checks correspond to the
acceptance criteria and use their stated tolerances.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .blocks import (BlockConfig, AdaLNParams, adaln_trunk, global_block, init_adaln_trunk,
                     init_attention, init_global_block, init_subject_block, init_zero_linear,
                     masked_attention, subject_block, zero_inject)
from .config import RunConfig
from .diffusion import guided_eps, make_schedule, predict_x0, q_sample, q_step
from .errors import SplitLeak
from .eval import fid, recall_at_1, subject_consistency
from .layout import TOKEN_CAP, AttentionBiasSet, BoundingBox
from .model import ForwardOptions, Layout, ModelConfig, denoiser_forward, init_params
from .numerics import NEG_LARGE, ParameterStore, RngStream, Tensor
from .pipeline.grouping import DEFAULT_LENGTHS, group_frames
from .pipeline.kmeans import K_FULL, K_PARTIAL, WINDOW, kmeans, window_k
from .pipeline.manifest import FrameRef, ManifestRules, SequenceEntry, build_manifest

WORDS = ("red", "green", "blue", "small", "large", "blob", "moving", "left", "right", "up")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f} s)"


# ------------------------------------------------------------------ oracles

def loop_attention(q, k, v, bias) -> np.ndarray:
    """Scalar-loop reference for softmax(q k^T / sqrt(dk) + bias) v."""
    B, H, Nq, dk = q.shape
    Nk = k.shape[2]
    out = np.zeros_like(q)
    for b, h, i in itertools.product(range(B), range(H), range(Nq)):
        logits = [sum(q[b, h, i, c] * k[b, h, j, c] for c in range(dk)) / math.sqrt(dk) + bias[b, h, i, j]
                  for j in range(Nk)]
        top = max(logits)
        w = [math.exp(s - top) for s in logits]
        z = sum(w)
        for c in range(dk):
            out[b, h, i, c] = sum(w[j] * v[b, h, j, c] for j in range(Nk)) / z
    return out


def plain_attention(q, k, v) -> np.ndarray:
    s = (q @ np.swapaxes(k, -1, -2)) * float(1.0 / np.sqrt(q.shape[-1]))
    s = s - s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s @ v


def exhaustive_inertia(x: np.ndarray, k: int) -> float:
    """Lowest inertia over every labelling that uses all k clusters."""
    best = np.inf
    for lab in itertools.product(range(k), repeat=len(x)):
        lab = np.array(lab)
        if len(np.unique(lab)) < k:
            continue
        tot = sum(float(((x[lab == j] - x[lab == j].mean(axis=0)) ** 2).sum()) for j in range(k))
        best = min(best, tot)
    return best


# ------------------------------------------------------------------ helpers

def random_masks(g: np.random.Generator, b: int, f: int, h: int, w: int) -> list[list[BoundingBox]]:
    out = []
    for _ in range(b):
        row = []
        for _ in range(f):
            x0, x1 = np.sort(g.uniform(0, 1, 2))
            y0, y1 = np.sort(g.uniform(0, 1, 2))
            row.append(BoundingBox(float(x0), float(y0), float(x1), float(y1)))
        out.append(row)
    return out


def randomize(store: ParameterStore, seed: int, scale: float = 0.3) -> None:
    g = np.random.default_rng(seed)
    for _, t in store.items():
        t.data[...] = g.normal(size=t.shape) * scale


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"raised {type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


# ------------------------------------------------------------------ criteria

def masked_attention_oracle(n_instances: int = 40, seed: int = 0) -> tuple[bool, str]:
    g = np.random.default_rng(seed)
    worst = 0.0
    exact = True
    for _ in range(n_instances):
        B, H = int(g.integers(1, 3)), int(g.integers(1, 5))
        Nq, Nk, dk = int(g.integers(1, 17)), int(g.integers(1, 17)), int(g.integers(1, 9))
        q, k, v = (g.normal(size=(B, H, n, dk)) for n in (Nq, Nk, Nk))
        keys = g.random((B, Nk)) < 0.6
        keys[np.arange(B), g.integers(0, Nk, B)] = True
        bias = np.where(keys[:, None, None, :], 0.0, -NEG_LARGE) + g.normal(size=(B, H, Nq, Nk)) * 0.5
        ref = loop_attention(q, k, v, bias)
        dense = nx.attention(Tensor(q), Tensor(k), Tensor(v), bias=bias).data
        worst = max(worst, float(np.abs(dense - ref).max()))
        key_only = np.broadcast_to(np.where(keys[:, None, None, :], 0.0, -NEG_LARGE), (B, H, Nq, Nk))
        ref_k = loop_attention(q, k, v, key_only)
        gathered = nx.attention(Tensor(q), Tensor(k), Tensor(v), key_mask=keys).data
        worst = max(worst, float(np.abs(gathered - ref_k).max()))
        zero = nx.attention(Tensor(q), Tensor(k), Tensor(v), bias=np.zeros((B, H, Nq, Nk))).data
        exact &= bool(np.array_equal(zero, plain_attention(q, k, v)))
    return worst < 1e-10 and exact, f"max |err| {worst:.2e} over {n_instances} instances; zero-bias exact={exact}"


def zero_init_togglability(n_inputs: int = 100, seed: int = 0) -> tuple[bool, str]:
    cfg = ModelConfig(d_model=16, n_heads=2, h=4, w=4, max_frames=3, vocab_dim=8, freq_dim=8, ffn_mult=2)
    store = init_params(cfg, seed, np.float64)
    g = np.random.default_rng(seed)
    identical = 0
    probes = []
    for i in range(n_inputs):
        b, f = int(g.integers(1, 3)), int(g.integers(1, 4))
        z = g.normal(size=(b, f, cfg.h, cfg.w, 4))
        t = g.integers(1, 1001, b)
        caps = [" ".join(g.choice(WORDS, int(g.integers(1, 6)))) for _ in range(b)]
        layout = Layout(random_masks(g, b, f, cfg.h, cfg.w),
                        [[" ".join(g.choice(WORDS, 3)) for _ in range(f)] for _ in range(b)],
                        g.normal(size=(b, cfg.h, cfg.w, 4)), list(g.integers(0, f, b)))
        full = denoiser_forward(store, cfg, z, t, caps, layout).data
        glob = denoiser_forward(store, cfg, z, t, caps, None, ForwardOptions(use_subject=False)).data
        identical += bool(np.array_equal(full, glob))
        if i < 3:
            probes.append((z, t, caps, layout, glob))
    # the final projection starts at zero, which would hide any injection; open it up
    store["global.final.out.w"].data[...] = g.normal(size=store["global.final.out.w"].shape)
    base = [denoiser_forward(store, cfg, z, t, c, None, ForwardOptions(use_subject=False)).data
            for z, t, c, _, _ in probes]
    unchanged = [np.array_equal(denoiser_forward(store, cfg, z, t, c, lay).data, b0)
                 for (z, t, c, lay, _), b0 in zip(probes, base)]
    differs = []
    for m in range(1, cfg.n_subject_blocks + 1):
        w = store[f"subject.inject{m}.w"].data
        w[...] = g.normal(size=w.shape) * 1e-3
        z, t, c, lay, _ = probes[0]
        differs.append(not np.array_equal(denoiser_forward(store, cfg, z, t, c, lay).data, base[0]))
        w[...] = 0.0
    ok = identical == n_inputs and all(unchanged) and all(differs)
    return ok, (f"{identical}/{n_inputs} bit-identical; identical with open head: {sum(unchanged)}/"
                f"{len(unchanged)}; perturbed injections change output: {sum(differs)}/{len(differs)}")


def _block_store(d: int = 8, heads: int = 2, seed: int = 0):
    rng = RngStream(seed, "gradcheck")
    store = ParameterStore(seed, np.float64)
    gcfg = BlockConfig(d, heads, True, 2)
    scfg = BlockConfig(d, heads, False, 2)
    init_attention(store, "attn", d, rng)
    init_adaln_trunk(store, "adaln", d, 8, rng)
    init_global_block(store, "gblock", gcfg, rng)
    init_subject_block(store, "sblock", scfg, rng)
    init_zero_linear(store, "inject", d)
    randomize(store, seed)
    return store, gcfg, scfg


def gradient_integrity(tol: float = 1e-4, seed: int = 0) -> tuple[bool, str]:
    g = np.random.default_rng(seed)
    d = 8
    store, gcfg, scfg = _block_store(d, 2, seed)
    b, f, h, w, l = 2, 2, 3, 3, 3
    hw = h * w
    keys = g.random((b, f, hw)) < 0.5
    keys[..., 0] = True
    biases = AttentionBiasSet(keys)
    xq = g.normal(size=(b * f, hw, d))
    text = g.normal(size=(b * f, l, d))
    text_mask = np.ones((b * f, l), dtype=bool)
    text_mask[0, -1] = False
    zs = g.normal(size=(b, f, hw, d))
    tgt = {n: g.normal(size=s) for n, s in (("attn", (b * f, hw, d)), ("g", (b, hw, d)),
                                              ("s", (b, f, hw, d)), ("six", (b, 6, d)))}
    ts = np.array([3.0, 700.0])

    def subset(prefixes):
        return store.subset(lambda n: n.startswith(prefixes))

    def ada_for(st, rows):
        hidden, six = adaln_trunk(st, "adaln", ts[:rows] if rows <= 2 else np.repeat(ts, rows // 2), 8)
        return AdaLNParams(*[six[:, i, :] for i in range(6)])

    cases = {
        "masked_attention/dense": (("attn.",), lambda st: (masked_attention(
            st, "attn", Tensor(xq), Tensor(xq), 2, bias=biases.self_bias.reshape(b * f, hw, hw))
            * Tensor(tgt["attn"])).sum()),
        "masked_attention/key_mask": (("attn.",), lambda st: (masked_attention(
            st, "attn", Tensor(xq), Tensor(xq), 2, key_mask=keys.reshape(b * f, hw))
            * Tensor(tgt["attn"])).sum()),
        "adaln_trunk": (("adaln.",), lambda st: (adaln_trunk(st, "adaln", ts, 8)[1]
                                                   * Tensor(tgt["six"])).sum()),
        "global_block": (("gblock.", "adaln."), lambda st: (global_block(
            st, "gblock", Tensor(zs[:, 0]), Tensor(text[:b]), ada_for(st, b), gcfg, text_mask[:b])
            * Tensor(tgt["g"])).sum()),
        "subject_block/gathered": (("sblock.", "adaln."), lambda st: (subject_block(
            st, "sblock", Tensor(zs), Tensor(text), biases, ada_for(st, b), scfg, text_mask)
            * Tensor(tgt["s"])).sum()),
        "subject_block/dense": (("sblock.", "adaln."), lambda st: (subject_block(
            st, "sblock", Tensor(zs), Tensor(text), biases, ada_for(st, b), scfg, text_mask, dense=True)
            * Tensor(tgt["s"])).sum()),
        "zero_inject": (("inject.",), lambda st: (zero_inject(
            Tensor(zs.reshape(b, f * hw, d)), Tensor(zs * 0.5), st, "inject")
            * Tensor(tgt["s"].reshape(b, f * hw, d))).sum()),
    }
    errors = {}
    for name, (prefixes, fn) in cases.items():
        sub = subset(prefixes)
        rep = nx.finite_diff_check(lambda s, fn=fn: fn(s), sub, eps=1e-6, tol=tol)
        errors[name] = rep.worst[1]

    cfg = ModelConfig(n_global_blocks=2, d_model=8, n_heads=2, h=3, w=3, max_frames=2,
                      vocab_dim=8, freq_dim=8, ffn_mult=2)
    mstore = init_params(cfg, seed, np.float64)
    randomize(mstore, seed + 1)
    z = g.normal(size=(2, 2, 3, 3, 4))
    layout = Layout(random_masks(g, 2, 2, 3, 3), [["red blob", "blue blob"], ["green", "small blob"]],
                    g.normal(size=(2, 3, 3, 4)), [0, 1])
    target = g.normal(size=z.shape)

    def e2e(st):
        out = denoiser_forward(st, cfg, z, np.array([5, 900]), ["a red blob", "moving left"], layout)
        return (out * Tensor(target)).sum()

    rep = nx.finite_diff_check(e2e, mstore, eps=1e-6, tol=tol, max_elements=24)
    errors["denoiser_end_to_end"] = rep.worst[1]
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    return worst <= tol, f"worst relative error {worst:.2e} (tol {tol:g}); {detail}"


def diffusion_correctness(n_draws: int = 100_000, seed: int = 0) -> tuple[bool, str]:
    sched = make_schedule()
    g = np.random.default_rng(seed)
    z0 = g.normal(size=(16, 3, 4, 4, 4))
    t = g.integers(1, sched.T + 1, 16)
    eps = g.normal(size=z0.shape)
    recon = float(np.abs(predict_x0(q_sample(z0, t, eps, sched), t, eps, sched) - z0).max())

    t_mc = 60
    x0 = 1.5
    z = np.full(n_draws, x0)
    rng = RngStream(seed, "mc")
    for s in range(1, t_mc + 1):
        z = q_step(z, s, rng.child(s).normal(n_draws), sched)
    ab = float(sched.abar(t_mc))
    mean_err = abs(z.mean() - math.sqrt(ab) * x0) / (math.sqrt(ab) * x0)
    var_err = abs(z.var(ddof=1) - (1 - ab)) / (1 - ab)

    ec, eu = g.normal(size=(2, 8, 4))
    ident = bool(np.array_equal(guided_eps(ec, eu, 1.0), ec))
    ok = recon <= 1e-10 and mean_err < 0.01 and var_err < 0.02 and ident
    return ok, (f"reconstruction {recon:.1e}; t={t_mc} mean rel err {mean_err:.2%}, "
                f"variance rel err {var_err:.2%}; s=1 identity {ident}")


def default_constants() -> tuple[bool, str]:
    cfg = RunConfig()
    facts = {
        "sample.steps == 25": cfg.sample.steps == 25,
        "sample.guidance_scale == 4.5": cfg.sample.guidance_scale == 4.5,
        "token cap == 120": cfg.model.token_cap == 120 and TOKEN_CAP == 120,
        "p_layout == 0.25": cfg.training.p_layout == 0.25,
        "p_caption == 0.25": cfg.training.p_caption == 0.25,
        "window 150 -> k=12": WINDOW == 150 and K_FULL == 12 and window_k(150) == 12,
        "window < 150 -> k=6": K_PARTIAL == 6 and window_k(149) == 6,
        "grouping 4/5/6 = 50/30/20": DEFAULT_LENGTHS == {4: 0.5, 5: 0.3, 6: 0.2}
        and cfg.length_dist() == DEFAULT_LENGTHS,
    }
    bad = [k for k, v in facts.items() if not v]
    return not bad, "all constants match" if not bad else f"mismatch: {bad}"


def grouping_frequencies(n_sequences: int = 10_000, seed: int = 0) -> tuple[bool, str]:
    rng = RngStream(seed, "grouping")
    counts = {4: 0, 5: 0, 6: 0}
    emitted = 0
    c = 0
    while emitted < n_sequences:
        for seq in group_frames(list(range(600)), rng.child(c)):
            if emitted == n_sequences:
                break
            counts[len(seq)] += 1
            emitted += 1
        c += 1
    freqs = {k: v / n_sequences for k, v in counts.items()}
    ok = all(abs(freqs[k] - DEFAULT_LENGTHS[k]) <= 0.015 for k in counts)
    return ok, "frequencies " + ", ".join(f"{k}: {v:.3f}" for k, v in freqs.items())


def kmeans_exhaustive(n_instances: int = 200, seed: int = 0) -> tuple[bool, str]:
    g = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_instances):
        n = int(g.integers(1, 9))
        k = int(g.integers(1, min(3, n) + 1))
        x = g.normal(size=(n, 2))
        worst = max(worst, abs(kmeans(x, k, seed=i).inertia - exhaustive_inertia(x, k)))
    return worst <= 1e-9, f"max inertia gap {worst:.1e} over {n_instances} instances (n<=8, k<=3)"


def _entry(seq_id: str, video: str, category: str, length: int) -> SequenceEntry:
    frames = [FrameRef(video, j, BoundingBox(0.1, 0.1, 0.5, 0.5), "a blob") for j in range(length)]
    return SequenceEntry(seq_id, video, category, f"{video}/c0", "a blob | moving", frames)


def split_leak_detection(n_cases: int = 100, seed: int = 0) -> tuple[bool, str]:
    g = np.random.default_rng(seed)
    caught = 0
    for c in range(n_cases):
        n_train, n_bench = int(g.integers(2, 30)), int(g.integers(1, 20))
        train = [_entry(f"t{c}-{i}", f"vt{c}-{i}", "cat", 4) for i in range(n_train)]
        bench = [_entry(f"b{c}-{i}", f"vb{c}-{i}", f"cat{i}", 4) for i in range(n_bench)]
        n_leak = int(g.integers(1, min(n_train, n_bench) + 1))
        leaked = set()
        for j in g.choice(n_bench, n_leak, replace=False):
            vid = train[int(g.integers(0, n_train))].video_id
            bench[j] = _entry(bench[j].sequence_id, vid, bench[j].category, 4)
            leaked.add(vid)
        tm = build_manifest(train, "train", ManifestRules(cap_per_category=None))
        try:
            build_manifest(bench, "bench", ManifestRules(exclude_video_ids=frozenset(tm.video_ids)))
        except SplitLeak as exc:
            caught += set(exc.video_ids) == leaked
    return caught == n_cases, f"caught {caught}/{n_cases} injected leaks with the exact offending ids"


def pipeline_statistics() -> tuple[bool, str]:
    parts = [grouping_frequencies(), kmeans_exhaustive(), split_leak_detection()]
    return all(p[0] for p in parts), "; ".join(p[1] for p in parts)


def benchmark_arithmetic() -> tuple[bool, str]:
    entries = []
    i = 0
    for length, count in ((4, 375), (5, 180), (6, 100)):
        for _ in range(count):
            entries.append(_entry(f"s{i}", f"v{i}", f"cat{i // 8}", length))
            i += 1
    m = build_manifest(entries, "bench")
    ok = m.n_sets == 655 and m.n_prompts == 3000 and m.length_histogram == {4: 375, 5: 180, 6: 100}
    return ok, f"{m.n_sets} sets, {m.n_prompts} prompts, histogram {m.length_histogram}"


def metric_correctness(seed: int = 0) -> tuple[bool, str]:
    g = np.random.default_rng(seed)
    a = g.normal(size=(200, 16))
    self_fid = fid(a, a)
    dvec = g.normal(size=16)
    shifted = fid(a, a + dvec)
    shift_err = abs(shifted - float(dvec @ dvec))
    rec = recall_at_1(np.eye(12))
    frame = g.normal(size=(16, 16, 4))
    box = BoundingBox(0.25, 0.25, 0.75, 0.5)
    cons = subject_consistency(np.stack([frame] * 4), [box] * 4)
    ok = abs(self_fid) <= 1e-8 and shift_err <= 1e-6 and rec == 1.0 and abs(cons - 1.0) <= 1e-9
    return ok, (f"fid(a,a) {self_fid:.1e}; mean-shift error {shift_err:.1e}; recall(I) {rec}; "
                f"consistency(identical) {cons:.12f}")


# ------------------------------------------------------------------ extra invariants

def checkpoint_roundtrip() -> tuple[bool, str]:
    import tempfile
    from pathlib import Path

    from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

    cfg = ModelConfig(d_model=8, n_heads=2, h=4, w=4, vocab_dim=8, freq_dim=8)
    store = init_params(cfg, 0, np.float32)
    with tempfile.TemporaryDirectory() as tmp:
        p1, p2 = Path(tmp) / "a.l2s", Path(tmp) / "b.l2s"
        save_checkpoint(p1, Checkpoint({"model": {"d_model": 8}}, 1, 7, store.arrays()))
        ck = load_checkpoint(p1)
        save_checkpoint(p2, ck)
        same = p1.read_bytes() == p2.read_bytes()
    return same, "save -> load -> save is byte-identical" if same else "round trip changed bytes"


def ppm_roundtrip() -> tuple[bool, str]:
    import tempfile
    from pathlib import Path

    from .render import quantize, read_ppm, render_latent

    frames = np.random.default_rng(0).normal(size=(3, 8, 8, 4))
    with tempfile.TemporaryDirectory() as tmp:
        paths = render_latent(frames, Path(tmp) / "x")
        back = np.stack([read_ppm(p) for p in paths])
    ok = np.array_equal(back, quantize(frames)) and back.max() == 255
    return ok, "PPM read-back equals the quantised mapping" if ok else "PPM round trip mismatch"


def fid_symmetry(seed: int = 0) -> tuple[bool, str]:
    g = np.random.default_rng(seed)
    worst_sym, worst_neg = 0.0, 0.0
    for _ in range(20):
        a = g.normal(size=(int(g.integers(2, 40)), 6))
        b = g.normal(size=(int(g.integers(2, 40)), 6)) * g.uniform(0.5, 2) + g.normal()
        worst_sym = max(worst_sym, abs(fid(a, b) - fid(b, a)))
        worst_neg = min(worst_neg, fid(a, b), fid(a, a))
    ok = worst_sym <= 1e-8 and worst_neg >= -1e-8
    return ok, f"max asymmetry {worst_sym:.1e}; most negative value {worst_neg:.1e}"


CRITERIA: dict[str, Callable[[], tuple[bool, str]]] = {
    "1 masked-attention oracle": masked_attention_oracle,
    "2 zero-init togglability": zero_init_togglability,
    "3 gradient integrity": gradient_integrity,
    "4 diffusion correctness": diffusion_correctness,
    "5 default-constant fidelity": default_constants,
    "6 pipeline statistics": pipeline_statistics,
    "7 benchmark arithmetic": benchmark_arithmetic,
    "8 metric correctness": metric_correctness,
}

EXTRA: dict[str, Callable[[], tuple[bool, str]]] = {
    "checkpoint round trip": checkpoint_roundtrip,
    "PPM round trip": ppm_roundtrip,
    "FID symmetry and sign": fid_symmetry,
}


def run_all(include: dict[str, Callable] | None = None) -> list[CheckResult]:
    suite = include or {**CRITERIA, **EXTRA}
    return [_timed(name, fn) for name, fn in suite.items()]
