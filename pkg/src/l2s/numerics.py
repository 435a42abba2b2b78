"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. While a :func:`recording` context is
active, every operation whose inputs require gradients appends a node to the
tape; :func:`backward` replays the tape in reverse and then frees it.

Attention, layer norm and softmax are single fused nodes with hand-written
backward passes. Each of them is checked against central finite differences
in the test suite.
"""

from __future__ import annotations

import hashlib
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import (
    AllMaskedRow,
    MissingGrad,
    NonDeterministicFunction,
    NoTape,
    NumericError,
    ShapeMismatch,
)

NEG_LARGE = 1e9
_FORBIDDEN = -NEG_LARGE / 2  # anything at or below this counts as a masked entry

DEBUG = os.environ.get("L2S_DEBUG", "") not in ("", "0")


class Tape:
    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.closed = False


_active: Tape | None = None


@contextmanager
def recording() -> Iterator[Tape]:
    """Record differentiable operations performed inside the block."""
    global _active
    prev = _active
    tape = Tape()
    _active = tape
    try:
        yield tape
    finally:
        _active = prev


def is_recording() -> bool:
    return _active is not None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)

    def __getitem__(self, idx) -> "Tensor":
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _record(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    if DEBUG and data.dtype.kind == "f" and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by " + getattr(fn, "__qualname__", "op"))
    tape = _active
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._tape = tape
        tape.nodes.append((out, tuple(parents), fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    # python scalars / raw arrays adopt the dtype of the tensor operand
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad * bd, (a, b), fn)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))

    def fn(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return _record(xd * sig, (x,), fn)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _record(0.5 * xd * (1.0 + th), (x,), fn)


# ---------------------------------------------------------------- structural

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def fn(g):
        return (g.reshape(src),)

    return _record(x.data.reshape(shape), (x,), fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def fn(g):
        return (g.transpose(inv),)

    return _record(x.data.transpose(axes), (x,), fn)


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing. Use :func:`take` for gathers."""
    src_shape, dtype = x.shape, x.dtype

    def fn(g):
        out = np.zeros(src_shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return _record(x.data[idx], (x,), fn)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.int64)
    src_shape, dtype = x.shape, x.dtype

    def fn(g):
        out = np.zeros(src_shape, dtype=dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _record(np.take(x.data, indices, axis=axis), (x,), fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product.

    ``a`` is ``(..., m, k)``. ``b`` is either ``(k, n)`` (shared weight) or
    ``(..., k, n)`` with leading dimensions identical to ``a``'s.
    """
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch dimensions differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(ad @ bd, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalisation

def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance (no affine)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd

    def fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - y * gy),)

    return _record(y, (x,), fn)


def _check_rows(bias: np.ndarray, shape) -> None:
    full = np.broadcast_to(bias, shape)
    dead = np.all(full <= _FORBIDDEN, axis=-1)
    if dead.any():
        where = tuple(int(i) for i in np.argwhere(dead)[0])
        raise AllMaskedRow(f"every entry of row {where} is forbidden")


def _softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def softmax_with_bias(logits: Tensor, bias=None) -> Tensor:
    """Softmax over the last axis of ``logits + bias``.

    ``bias`` is a constant (no gradient). Rows whose entries are all forbidden
    raise :class:`AllMaskedRow`.
    """
    logits = as_tensor(logits)
    s = logits.data
    if bias is not None:
        bias = bias.data if isinstance(bias, Tensor) else np.asarray(bias)
        shape = np.broadcast_shapes(s.shape, bias.shape)
        _check_rows(bias, shape)
        s = s + bias.astype(s.dtype, copy=False)
    else:
        s = s.copy()
    p = _softmax(s)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (logits,), fn)


# ---------------------------------------------------------------- attention

def attention(q: Tensor, k: Tensor, v: Tensor, bias=None, key_mask=None) -> Tensor:
    """Fused ``softmax(q k^T / sqrt(d_k) + bias) v``.

    Shapes: ``q`` (B, H, Nq, dk); ``k``, ``v`` (B, H, Nk, dk). ``bias`` is a
    constant broadcastable to (B, H, Nq, Nk). ``key_mask`` (B, Nk) of bools is
    the compact form of a key-only bias (0 where True, -NEG_LARGE elsewhere);
    it is evaluated by gathering the permitted keys, which gives the same
    result because masked weights underflow to exactly zero.
    """
    if q.ndim != 4 or k.shape != v.shape or q.shape[:2] != k.shape[:2] or q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    B, H, Nq, dk = q.shape
    Nk = k.shape[2]
    scale = float(1.0 / np.sqrt(dk))
    qd, kd, vd = q.data, k.data, v.data
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (B, Nk):
            raise ShapeMismatch(f"attention: key_mask {key_mask.shape}, expected {(B, Nk)}")
        if not key_mask.any(axis=-1).all():
            raise AllMaskedRow("a sample has no permitted key")
        if bias is None and key_mask.all():
            key_mask = None
    if bias is not None:
        bias = bias.data if isinstance(bias, Tensor) else np.asarray(bias)
        _check_rows(bias, (B, H, Nq, Nk))
        bias = np.broadcast_to(bias.astype(qd.dtype, copy=False), (B, H, Nq, Nk))

    if key_mask is None:
        s = (qd @ np.swapaxes(kd, -1, -2)) * scale
        if bias is not None:
            s += bias
        p = _softmax(s)
        out = p @ vd

        def fn(g):
            gv = np.swapaxes(p, -1, -2) @ g
            gp = g @ np.swapaxes(vd, -1, -2)
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
            gs *= scale
            return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv

        return _record(out, (q, k, v), fn)

    # gathered path: one sample at a time over its permitted keys
    idxs = [np.flatnonzero(key_mask[b]) for b in range(B)]
    probs = []
    out = np.empty_like(qd)
    for b, idx in enumerate(idxs):
        kb, vb = kd[b][:, idx], vd[b][:, idx]
        s = (qd[b] @ np.swapaxes(kb, -1, -2)) * scale
        if bias is not None:
            s += bias[b][..., idx]
        p = _softmax(s)
        probs.append(p)
        out[b] = p @ vb

    def fn(g):
        gq = np.empty_like(qd)
        gk = np.zeros_like(kd)
        gv = np.zeros_like(vd)
        for b, idx in enumerate(idxs):
            p = probs[b]
            kb, vb = kd[b][:, idx], vd[b][:, idx]
            gv[b][:, idx] = np.swapaxes(p, -1, -2) @ g[b]
            gp = g[b] @ np.swapaxes(vb, -1, -2)
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
            gs *= scale
            gq[b] = gs @ kb
            gk[b][:, idx] = np.swapaxes(gs, -1, -2) @ qd[b]
        return gq, gk, gv

    return _record(out, (q, k, v), fn)


# ---------------------------------------------------------------- parameters

class ParameterStore:
    """Ordered name -> Tensor map plus optimizer moments."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.rng_seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> list[str]:
        return list(self.params)

    def subset(self, keep: Callable[[str], bool]) -> "ParameterStore":
        """A view sharing tensors and moment state with this store."""
        view = ParameterStore(self.rng_seed, self.dtype)
        view.params = {n: t for n, t in self.params.items() if keep(n)}
        view.moments = self.moments
        return view

    def count(self, prefix: str = "") -> int:
        return int(sum(t.data.size for n, t in self.params.items() if n.startswith(prefix)))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def astype(self, dtype) -> "ParameterStore":
        other = ParameterStore(self.rng_seed, dtype)
        for n, t in self.params.items():
            other.add(n, t.data)
        return other


def zero_grads(store: ParameterStore) -> None:
    for t in store.params.values():
        t.grad = None


def backward(loss: Tensor, store: ParameterStore | None = None) -> dict[str, np.ndarray]:
    """Propagate d(loss) back through the tape that produced ``loss``.

    Leaf tensors receive ``.grad``; the returned map covers every parameter of
    ``store`` (zeros for those the loss does not reach). The tape is freed.
    """
    tape = loss._tape
    if tape is None or tape.closed:
        raise NoTape("loss was not computed inside a recording() block")
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward expects a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, parents, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgrads = fn(g)
        for p, pg in zip(parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if p._tape is None:
                leaves[key] = p
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    tape.nodes.clear()
    tape.closed = True
    for key, t in leaves.items():
        t.grad = grads[key]
    if store is None:
        return {t.name or str(k): grads[k] for k, t in leaves.items()}
    out = {}
    for name, t in store.items():
        g = grads.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else g
        t.grad = out[name]
    return out


# ---------------------------------------------------------------- optimiser

def adamw_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray],
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    step_index: int = 1,
    eps: float = 1e-8,
) -> ParameterStore:
    """In-place AdamW update with bias correction and decoupled decay."""
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    missing = [n for n in store.names() if n not in grads]
    if missing:
        raise MissingGrad("no gradient for: " + ", ".join(missing))
    b1, b2 = betas
    c1 = 1.0 - b1**step_index
    c2 = 1.0 - b2**step_index
    for name, t in store.items():
        g = np.asarray(grads[name], dtype=t.dtype)
        m, v = store.moments.get(name, (None, None))
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        store.moments[name] = (m, v)
        p = t.data
        p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


# ---------------------------------------------------------------- rng

class RngStream:
    """Seeded generator addressed by a label path.

    ``RngStream(seed, "a").child("b")`` is the same stream as
    ``RngStream(seed, "a/b")``; distinct labels hash to distinct spawn keys.
    """

    def __init__(self, seed: int, stream_id: str = "root"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = stream_id
        digest = hashlib.blake2b(stream_id.encode("utf-8"), digest_size=16).digest()
        key = tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, label) -> "RngStream":
        return RngStream(self.seed, f"{self.stream_id}/{label}")

    def normal(self, size=None, dtype=np.float64) -> np.ndarray:
        return self.gen.standard_normal(size).astype(dtype, copy=False)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def bernoulli(self, p: float) -> bool:
        return bool(self.gen.random() < p)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self.gen.permutation(n)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    passed: bool = True
    noise: float = 0.0

    @property
    def worst(self) -> tuple[str, float]:
        if not self.errors:
            return ("", 0.0)
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def finite_diff_check(
    f: Callable[[ParameterStore], Tensor],
    store: ParameterStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_elements: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The error for a parameter is ``max|analytic - numeric|`` divided by the
    largest gradient magnitude of that parameter. Central differences cannot
    resolve derivatives below their own rounding level
    ``noise = 16 * machine_eps * max|f| / eps``, so the denominator is floored
    at ``max(floor, noise / tol)``: a gradient that is zero by construction
    (a key bias under softmax, say) passes when both sides sit below the
    noise, while any gradient of ordinary size is still judged relatively.
    ``max_elements`` samples that many entries per parameter instead of
    probing all of them.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")

    def value() -> float:
        return float(np.asarray(f(store).data).reshape(()))

    v0, v1 = value(), value()
    if v0 != v1:
        raise NonDeterministicFunction(f"f returned {v0!r} then {v1!r}")
    with recording():
        loss = f(store)
        analytic = backward(loss, store)

    rng = np.random.default_rng(seed)
    fmax = abs(v0)
    report = GradCheckReport(tol=tol)
    for name, t in store.items():
        flat = t.data.reshape(-1)
        ag = analytic[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, max_elements, replace=False)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * eps)
            fmax = max(fmax, abs(fp), abs(fm))
        a = ag[idx]
        noise = 16.0 * float(np.finfo(np.float64).eps) * fmax / eps
        report.noise = max(report.noise, noise)
        scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0), floor, noise / tol)
        report.errors[name] = float(np.abs(a - num).max(initial=0.0) / scale)
    report.passed = all(e <= tol for e in report.errors.values())
    return report
