"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations used by the patch translator and its losses are provided.
Shapes are explicit: elementwise binary ops require equal shapes, or a plain
Python scalar on one side.

Typical use::

    w = Tensor(np.ones((4,)), requires_grad=True)
    loss = mean(mul(w, x))
    backward(loss)
    w.grad  # -> x / 4
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "DimensionError",
    "NumericError",
    "ContractError",
    "precision",
    "get_dtype",
    "no_grad",
    "record_kinks",
    "replay_kinks",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "leaky_relu",
    "tanh",
    "abs",
    "mean",
    "sum",
    "square",
    "conv2d",
    "conv2d_transpose",
    "instance_norm",
    "pad",
]

Scalar = Union[int, float]
PadSpec = Union[int, Tuple[int, int, int, int]]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


_state = threading.local()
_ids = itertools.count()


def _get(name, default):
    return getattr(_state, name, default)


def get_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Switch every tensor created in this thread to ``dtype`` (float32/float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    prev = get_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward ops without recording them on the tape."""
    prev = _get("grad_enabled", True)
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def record_kinks() -> Iterator[list]:
    """Collect the sign pattern of every relu/leaky_relu/abs input.

    Finite-difference checks use this to detect when a perturbation moves a
    unit across a non-differentiable point.
    """
    prev = _get("kinks", None)
    log: list = []
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


@contextlib.contextmanager
def replay_kinks(log: Sequence[np.ndarray]) -> Iterator[None]:
    """Reuse a recorded sign pattern instead of recomputing ``x > 0``.

    Inside this block relu/leaky_relu/abs act as the fixed linear piece that
    was active when ``log`` was recorded, which makes the forward pass smooth
    in a neighbourhood of that point.
    """
    prev = _get("replay", None)
    _state.replay = iter(log)
    try:
        yield
    finally:
        _state.replay = prev


def _sign_pattern(x: np.ndarray) -> np.ndarray:
    replay = _get("replay", None)
    pos = next(replay) if replay is not None else x > 0
    if pos.shape != x.shape:
        raise ContractError("replayed sign pattern does not match the forward pass")
    log = _get("kinks", None)
    if log is not None:
        log.append(pos)
    return pos


class Tensor:
    """An n-d array that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "node_id", "op")

    def __init__(self, data, requires_grad: bool = False, *, _copy: bool = True):
        dt = get_dtype()
        arr = np.array(data, dtype=dt) if _copy else np.asarray(data, dtype=dt)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: Tuple[Tensor, ...] = ()
        self.backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.node_id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, _copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite output")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, _copy=False)
    out.op = op
    if _get("grad_enabled", True) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return _make(a.data + a.data.dtype.type(b), (a,), lambda g: (g,), "add")
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return _make(a.data - a.data.dtype.type(b), (a,), lambda g: (g,), "sub")
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul")
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def relu(a: Tensor) -> Tensor:
    pos = _sign_pattern(a.data)
    return _make(np.where(pos, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = _sign_pattern(a.data)
    c = a.data.dtype.type(slope)
    scale = np.where(pos, a.data.dtype.type(1), c)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    pos = _sign_pattern(a.data)
    if _get("replay", None) is None:
        # sign(0) = 0 gives subgradient 0 at the kink, same convention as relu
        s = np.sign(a.data)
    else:
        s = np.where(pos, 1, -1).astype(a.data.dtype)
    return _make(a.data * s, (a,), lambda g: (g * s,), "abs")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape, dt = a.shape, a.data.dtype
    return _make(
        np.asarray(a.data.mean(dtype=np.float64), dtype=dt),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=dt),),
        "mean",
    )


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape, dt = a.shape, a.data.dtype
    return _make(
        np.asarray(a.data.sum(dtype=np.float64), dtype=dt),
        (a,),
        lambda g: (np.full(shape, g, dtype=dt),),
        "sum",
    )


# ---------------------------------------------------------------- convolution


def _pad4(padding: PadSpec) -> Tuple[int, int, int, int]:
    if isinstance(padding, int):
        return (padding,) * 4
    t, b, l, r = (int(v) for v in padding)
    if min(t, b, l, r) < 0:
        raise DimensionError(f"negative padding {padding}")
    return t, b, l, r


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape (C, kh, kw, N, Ho, Wo) over a padded NCHW array."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp, (c, kh, kw, n, ho, wo), (sc, sh, sw, sn, sh * stride, sw * stride), writeable=False
    )


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    v = _windows(xp, kh, kw, stride)
    c, _, _, n, ho, wo = v.shape
    return np.ascontiguousarray(v).reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add columns back onto an NCHW array."""
    n, c, hp, wp = shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out


def _zero_pad(x: np.ndarray, t: int, b: int, l: int, r: int) -> np.ndarray:
    if t == b == l == r == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: PadSpec = 0,
) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[F,C,kh,kw]`` using zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernel")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    n, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    if c != c2:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {c2}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({f},)")
    t, b, l, r = _pad4(padding)
    hp, wp = h + t + b, wd + l + r
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = _zero_pad(x.data, t, b, l, r)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(f, -1)
    out = (wmat @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(f, -1)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and f < c:
                # full correlation with the flipped kernel: far fewer columns when F << C
                gp = _zero_pad(g, kh - 1, kh - 1, kw - 1, kw - 1)
                wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                gxp = (wflip @ _im2col(gp, kh, kw, 1)).reshape(c, n, hp, wp).transpose(1, 0, 2, 3)
            else:
                gxp = _col2im(wmat.T @ gmat, (n, c, hp, wp), kh, kw, stride, ho, wo)
            gx = np.ascontiguousarray(gxp[:, :, t:t + h, l:l + wd])
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, back, "conv2d")


def conv2d_transpose(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: PadSpec = 0,
) -> Tensor:
    """Exact adjoint of :func:`conv2d` with respect to its input.

    ``w`` has shape ``[C_in, C_out, kh, kw]``; output side is
    ``(H - 1) * stride - pad_top - pad_bottom + kh``.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d_transpose expects 4-d input and kernel")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    n, cin, h, wd = x.shape
    cin2, cout, kh, kw = w.shape
    if cin != cin2:
        raise DimensionError(f"conv2d_transpose: input has {cin} channels, kernel expects {cin2}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d_transpose: bias shape {bias.shape} != ({cout},)")
    t, b, l, r = _pad4(padding)
    hp = (h - 1) * stride + kh
    wp = (wd - 1) * stride + kw
    ho, wo = hp - t - b, wp - l - r
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d_transpose: padding removes the whole output")
    wmat = w.data.reshape(cin, -1)
    xmat = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    full = _col2im(wmat.T @ xmat, (n, cout, hp, wp), kh, kw, stride, h, wd)
    out = full[:, :, t:t + ho, l:l + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gp = _zero_pad(g, t, b, l, r)
        cols = _im2col(gp, kh, kw, stride)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wmat @ cols).reshape(cin, n, h, wd).transpose(1, 0, 2, 3))
        gw = (xmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, back, "conv2d_transpose")


# ---------------------------------------------------------------- normalization / padding


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (n, c) plane to zero mean and unit population variance."""
    if x.data.ndim != 4:
        raise DimensionError("instance_norm expects NCHW input")
    d = x.data
    mu = d.mean(axis=(2, 3), keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat.astype(d.dtype), (x,), back, "instance_norm")


def _pad_index(n: int, before: int, after: int, mode: str) -> np.ndarray:
    idx = np.arange(-before, n + after)
    if mode == "replicate":
        return np.clip(idx, 0, n - 1)
    if mode == "reflect":
        if before >= n or after >= n:
            raise DimensionError(f"reflect padding {before},{after} too large for size {n}")
        idx = np.abs(idx)
        return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
    raise ValueError(f"unknown pad mode {mode!r}")


def pad(x: Tensor, padding: PadSpec, mode: str = "zero") -> Tensor:
    """Pad the two spatial axes of an NCHW tensor (zero, reflect or replicate)."""
    if x.data.ndim != 4:
        raise DimensionError("pad expects NCHW input")
    t, b, l, r = _pad4(padding)
    n, c, h, w = x.shape
    if mode == "zero":
        out = _zero_pad(x.data, t, b, l, r)
        return _make(
            np.array(out, copy=True), (x,), lambda g: (g[:, :, t:t + h, l:l + w],), "pad"
        )
    # one-hot row/column selectors keep forward and adjoint exact
    ph = np.eye(h, dtype=x.data.dtype)[_pad_index(h, t, b, mode)]
    pw = np.eye(w, dtype=x.data.dtype)[_pad_index(w, l, r, mode)]
    out = ph @ x.data @ pw.T
    return _make(out, (x,), lambda g: (ph.T @ g @ pw,), f"pad_{mode}")
