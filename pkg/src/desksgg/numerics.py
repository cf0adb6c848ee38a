"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation in this module is a *primitive*: it computes its forward value
with numpy and, when a :class:`Tape` is active and some input requires a
gradient, records a backward rule on that tape.  ``Tape.backward`` replays the
rules in reverse execution order, accumulating into ``Tensor.grad``.

Only bias-style broadcasting (a vector added along the last axis) is
supported.  Anything else must match shapes exactly.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "parameter",
    "no_tape",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "linear",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "absolute",
    "minimum",
    "maximum",
    "sum",
    "mean",
    "softmax",
    "layer_norm",
    "concat",
    "reshape",
    "transpose",
    "take",
    "dropout",
    "conv2d",
    "cross_entropy",
    "grad_check",
    "grad_check_report",
    "GradCheckResult",
    "corrupt_backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense float64 array plus optional gradient.

    ``data`` is a C-contiguous numpy array; its row-major flattening is the
    canonical flat storage.  ``grad`` is allocated lazily by backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route through the primitives below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _raise_item(t: Tensor) -> float:
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Record:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    rule: BackwardRule


_local = threading.local()
# op name -> multiplier applied to that op's input gradients (test hook)
_corrupted: dict[str, float] = {}


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def _active() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


@dataclass
class Tape:
    """Ordered log of executed primitives.

    Use as a context manager; primitives run inside the block are recorded
    when any of their inputs requires a gradient.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, output: Tensor, inputs: tuple[Tensor, ...], rule: BackwardRule) -> None:
        self.records.append(_Record(op, output, inputs, rule))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(input) into every recorded input's ``grad``."""
        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss or an explicit seed, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        loss.grad = np.array(seed, dtype=np.float64).reshape(loss.shape)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.rule(g)
            factor = _corrupted.get(rec.op)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if factor is not None:
                    gi = gi * factor
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64).reshape(inp.shape)
                else:
                    inp.grad += gi


@contextlib.contextmanager
def no_tape():
    """Run primitives without recording, even inside an enclosing Tape."""
    st = _stack()
    saved = st[:]
    st.clear()
    try:
        yield
    finally:
        st.extend(saved)


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float):
    """Scale the recorded input gradients of ``op`` by ``factor``.

    Exists so gradient checking can be shown to catch a broken rule.
    """
    _corrupted[op] = factor
    try:
        yield
    finally:
        _corrupted.pop(op, None)


def _emit(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], rule: BackwardRule) -> Tensor:
    tape = _active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.record(op, out, inputs, rule)
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; ``b`` may also be a vector matching a's last extent (bias add)."""
    if a.shape == b.shape:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def _branch(mask: np.ndarray) -> None:
    """Log the branch taken by a non-smooth op while a kink probe is listening."""
    log = getattr(_local, "branches", None)
    if log is not None:
        log.append(np.packbits(mask).tobytes())


@contextlib.contextmanager
def record_branches():
    """Collect the branch masks of relu/abs/min/max evaluated inside the block."""
    prev = getattr(_local, "branches", None)
    log: list[bytes] = []
    _local.branches = log
    try:
        yield log
    finally:
        _local.branches = prev


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _branch(mask)
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    _branch(s > 0)
    return _emit("absolute", np.abs(x.data), (x,), lambda g: (g * s,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_same("minimum", a, b)
    pick_a = a.data <= b.data
    _branch(pick_a)
    return _emit("minimum", np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _check_same("maximum", a, b)
    pick_a = a.data >= b.data
    _branch(pick_a)
    return _emit("maximum", np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a))


# ---------------------------------------------------------------------------
# Reductions and structure
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    if axis is None:
        return _emit("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))
    ax = axis % x.data.ndim
    return _emit("sum", x.data.sum(axis=ax), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        n = x.size
        return _emit("mean", np.array(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape),))
    ax = axis % x.data.ndim
    n = shape[ax]
    return _emit("mean", x.data.mean(axis=ax), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, ax) / n, shape),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit("take", np.array(x.data[index]), (x,), rule)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    nd = parts[0].data.ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.data.ndim != nd or any(p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {parts[0].shape} vs {p.shape} on axis {axis}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]
    return _emit(
        "concat",
        np.concatenate([p.data for p in parts], axis=ax),
        parts,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch extents must agree."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def rule(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _emit("matmul", ad @ bd, (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` over the last axis of ``x``.

    ``weight`` is (in, out); ``x`` may have any number of leading axes.
    """
    xd, wd = x.data, weight.data
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (wd.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data

    def rule(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", out.reshape(lead + (wd.shape[1],)), inputs, rule)


# ---------------------------------------------------------------------------
# Normalization, attention pieces
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to zero mean / unit variance, then scale and shift."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({n},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, n)
        return gx, (lead * xhat.reshape(-1, n)).sum(axis=0), lead.sum(axis=0)

    return _emit("layer_norm", xhat * gd + bias.data, (x, gain, bias), rule)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity unless ``training`` and ``rate > 0``."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
        writeable=False,
    )
    return view.reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W); weight: (O, C, kh, kw)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, c, h, w = xd.shape
    o, _, kh, kw = wd.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{w}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    wmat = wd.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(wd.shape)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", out, inputs, rule)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, target, weights=None) -> Tensor:
    """Weighted sum of per-row softmax cross-entropies.

    ``logits`` is (n, C) or (C,); ``target`` an int or length-n int array;
    ``weights`` an optional length-n array of nonnegative row weights.
    """
    ld = logits.data
    single = ld.ndim == 1
    l2 = ld.reshape(1, -1) if single else ld
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape[0] != l2.shape[0]:
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for {l2.shape[0]} rows")
    if np.any((t < 0) | (t >= l2.shape[1])):
        raise ValueError(f"cross_entropy: target index out of range for {l2.shape[1]} classes")
    w = np.ones(l2.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    shifted = l2 - l2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(l2.shape[0])
    nll = lse - shifted[rows, t]
    value = np.array((w * nll).sum())

    def rule(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1.0
        gl = g * w[:, None] * p
        return (gl.reshape(ld.shape),)

    return _emit("cross_entropy", value, (logits,), rule)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str | None
    worst_index: int | None
    per_param: dict[str, float]
    kinks: list[str] = field(default_factory=list)  # entries excluded as non-differentiable


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, dict):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


def grad_check_report(
    f: Callable[[], Tensor],
    params,
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    kink_screen: float | None = 1e-6,
) -> GradCheckResult:
    """Compare tape gradients of scalar ``f()`` with central differences.

    Relative error per entry is ``|a - n| / max(1, |a|, |n|)``.  With
    ``max_entries`` set, at most that many entries per tensor are probed,
    chosen by ``rng``.

    Entries whose error exceeds ``kink_screen`` are tested for a kink inside
    the probe interval: either a relu/abs/min/max op took a different branch
    at ``x +- eps`` than at ``x``, or the gap between forward and backward
    one-sided slopes fails to halve with the step (kinks outside this
    module, such as matching switches).  Such entries break the
    differentiability precondition and are listed in ``kinks`` instead of
    counted.  Neither test looks at the analytic gradient, so a wrong
    backward rule cannot hide there.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    named = _named(params)
    for _, p in named:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape, record_branches() as base_branches:
        loss = f()
    if loss.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {loss.shape}")
    tape.backward(loss)
    rng = rng or np.random.default_rng(0)

    per_param: dict[str, float] = {}
    worst = (-1.0, None, None)
    bad: list[str] = []
    kinks: list[str] = []
    for name, p in named:
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        idx = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        err_p = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            with no_tape(), record_branches() as br_up:
                up = float(f().data)
            flat[i] = orig - eps
            with no_tape(), record_branches() as br_down:
                down = float(f().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                bad.append(f"{name}[{i}]")
                continue
            numeric = (up - down) / (2 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            crossed = br_up != base_branches or br_down != base_branches
            if kink_screen is not None and err > kink_screen and (crossed or _has_kink(f, flat, i, eps, up, down)):
                kinks.append(f"{name}[{i}]")
                continue
            err_p = max(err_p, err)
            if err > worst[0]:
                worst = (err, name, int(i))
        per_param[name] = err_p
    if bad:
        raise FloatingPointError("non-finite function value when perturbing " + ", ".join(bad))
    return GradCheckResult(max(worst[0], 0.0), worst[1], worst[2], per_param, kinks)


def _has_kink(f, flat: np.ndarray, i: int, eps: float, up: float, down: float) -> bool:
    orig = flat[i]

    def at(x):
        flat[i] = x
        with no_tape():
            return float(f().data)

    try:
        mid = at(orig)
        half_up, half_down = at(orig + eps / 2), at(orig - eps / 2)
    finally:
        flat[i] = orig
    gap = abs((up - mid) - (mid - down)) / eps
    gap_half = abs((half_up - mid) - (mid - half_down)) / (eps / 2)
    return gap_half > 0.75 * gap and gap > 1e-7 * max(1.0, abs(mid))


def grad_check(f: Callable[[], Tensor], params, eps: float = 1e-5, **kw) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return grad_check_report(f, params, eps, **kw).max_rel_error


def iter_grads(params: Iterable[Tensor]) -> Iterable[np.ndarray]:
    for p in params:
        yield np.zeros_like(p.data) if p.grad is None else p.grad
