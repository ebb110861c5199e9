"""Dense NCHW tensors with a reverse-mode tape.

Only the handful of operations a plain U-Net needs are provided: 2D
convolution, 2x2 max-pooling, nearest-neighbour x2 upsampling, channel
concatenation, relu/sigmoid, and scalar reductions for building losses.

Gradient tracking is opt-in per tape::

    tape = Tape()
    w = tape.watch(Tensor(weights))
    loss = sum_all(relu(conv2d(x, w, b, pad=1)))
    grads = tape.backward(loss)
    grads[w.node.index]  # or tape.grad(w)

Operations whose inputs are all untracked run without recording anything.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_default_dtype: type = np.float32
_checked = False


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Engine-wide precision for tensors built from non-float data."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported precision {dtype!r}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def checked(enabled: bool = True) -> Iterator[None]:
    """Raise NumericError as soon as any op produces NaN or Inf."""
    global _checked
    prev = _checked
    _checked = enabled
    try:
        yield
    finally:
        _checked = prev


@dataclass(frozen=True)
class Node:
    tape: "Tape"
    index: int


class Tensor:
    """N-dimensional float array plus an optional tape handle."""

    __slots__ = ("data", "node")

    def __init__(self, data, node: Node | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", tracked" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Record:
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    backward: BackwardFn


class Tape:
    """Ordered log of recorded operations and, after backward, their gradients.

    Records are appended as ops execute, so inputs always precede consumers.
    A tape is not thread-safe; use one tape per concurrent forward pass.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.grads: dict[int, Tensor] = {}
        self._next = 0

    def __len__(self) -> int:
        return len(self.records)

    def _new_node(self) -> Node:
        node = Node(self, self._next)
        self._next += 1
        return node

    def watch(self, t) -> Tensor:
        """Return a tracked leaf sharing ``t``'s data."""
        t = as_tensor(t)
        if t.node is not None and t.node.tape is not self:
            raise UsageError("tensor is already tracked by another tape")
        if t.node is not None:
            return t
        return Tensor(t.data, self._new_node())

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray, backward: BackwardFn) -> Tensor:
        handles = []
        for t in inputs:
            if t.node is not None and t.node.tape is not self:
                raise UsageError(f"{kind}: inputs are tracked by different tapes")
            handles.append(None if t.node is None else t.node.index)
        node = self._new_node()
        self.records.append(Record(kind, tuple(handles), node.index, backward))
        return Tensor(out, node)

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Accumulate d(loss)/d(node) for every ancestor of ``loss``."""
        if loss.node is None or loss.node.tape is not self:
            raise UsageError("loss is not a node on this tape")
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node.index: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.get(rec.output)
            if g is None:
                continue
            for handle, gi in zip(rec.inputs, rec.backward(g)):
                if handle is None or gi is None:
                    continue
                if handle in grads:
                    grads[handle] = grads[handle] + gi
                else:
                    grads[handle] = gi
        self.grads = {k: Tensor(v) for k, v in grads.items()}
        return self.grads

    def grad(self, t: Tensor) -> Tensor | None:
        if t.node is None or t.node.tape is not self:
            raise UsageError("tensor is not a node on this tape")
        return self.grads.get(t.node.index)


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    return tape.backward(loss)


def _tape_of(*inputs: Tensor) -> Tape | None:
    for t in inputs:
        if t.node is not None:
            return t.node.tape
    return None


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, make_backward: Callable[[], BackwardFn]) -> Tensor:
    if _checked and not np.isfinite(out).all():
        raise NumericError(f"{kind} produced non-finite values")
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(kind, inputs, out, make_backward())


def _require_4d(name: str, t: Tensor) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N,C,H,W), got shape {t.shape}")


# -- convolution --------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # cols layout (C, kh, kw, N, Ho, Wo) so one GEMM covers the whole batch
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = win.transpose(1, 0, 2, 3)
    return cols


def _col2im(gcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
    return gxp


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding, NCHW input and (Cout,Cin,kh,kw) weights."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _require_4d("conv2d input", x)
    _require_4d("conv2d weight", w)
    if stride < 1 or pad < 0:
        raise UsageError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(cin * kh * kw, n * ho * wo)
    wmat = w.data.reshape(cout, -1)
    out = wmat @ cols
    out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def make_backward():
        need_x, need_w, need_b = x.tracked, w.tracked, b.tracked

        def bw(g):
            gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
            gx = gw = gb = None
            if need_w:
                gw = (gmat @ cols.T).reshape(w.shape)
            if need_b:
                gb = gmat.sum(axis=1)
            if need_x:
                gcols = (wmat.T @ gmat).reshape(cin, kh, kw, n, ho, wo)
                gxp = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
                gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
            return gx, gw, gb

        return bw

    return _emit("conv2d", (x, w, b), out, make_backward)


# -- resampling ---------------------------------------------------------------

def max_pool2(x: Tensor) -> Tensor:
    """Disjoint 2x2 max; ties resolve to the first element in row-major order."""
    x = as_tensor(x)
    _require_4d("max_pool2 input", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even H and W, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def make_backward():
        def bw(g):
            gwin = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
            np.put_along_axis(gwin, idx, g[..., None], axis=-1)
            return (gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

        return bw

    return _emit("max_pool2", (x,), out, make_backward)


def upsample_nearest2(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _require_4d("upsample_nearest2 input", x)
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def make_backward():
        def bw(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return bw

    return _emit("upsample_nearest2", (x,), out, make_backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_4d("concat_channels a", a)
    _require_4d("concat_channels b", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def make_backward():
        def bw(g):
            return g[:, :ca], g[:, ca:]

        return bw

    return _emit("concat_channels", (a, b), out, make_backward)


# -- elementwise --------------------------------------------------------------

def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def activation(x: Tensor, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "relu":
        out = np.maximum(x.data, 0)

        def make_backward():
            return lambda g: (g * (x.data > 0),)

    elif kind == "sigmoid":
        out = _sigmoid(x.data)

        def make_backward():
            return lambda g: (g * out * (1 - out),)

    else:
        raise UsageError(f"unknown activation {kind!r}; expected 'relu' or 'sigmoid'")
    return _emit(kind, (x,), out, make_backward)


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


# -- reductions ---------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def make_backward():
        return lambda g: (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), out, make_backward)


def weighted_sum(x: Tensor, weights) -> Tensor:
    """sum(x * weights) with constant ``weights``; handy for probing gradients."""
    x = as_tensor(x)
    wts = np.asarray(weights, dtype=x.dtype)
    if wts.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {wts.shape} vs input {x.shape}")
    out = np.asarray((x.data * wts).sum(), dtype=x.dtype)

    def make_backward():
        return lambda g: (g * wts,)

    return _emit("weighted_sum", (x,), out, make_backward)


def custom_op(kind: str, inputs: Sequence[Tensor], out: np.ndarray, make_backward: Callable[[], BackwardFn]) -> Tensor:
    """Record an op defined elsewhere (losses) on the inputs' tape, if any."""
    return _emit(kind, tuple(as_tensor(t) for t in inputs), out, make_backward)


# -- gradient checking ------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` must map a tensor to a scalar tensor. Runs in float64.
    """
    x64 = np.array(as_tensor(x).data, dtype=np.float64)
    tape = Tape()
    xt = tape.watch(Tensor(x64))
    out = f(xt)
    if out.size != 1:
        raise UsageError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    if out.node is None:
        analytic = np.zeros_like(x64)
    else:
        g = tape.backward(out).get(xt.node.index)
        analytic = np.zeros_like(x64) if g is None else np.asarray(g.data, dtype=np.float64)

    numeric = np.empty_like(x64)
    probe = x64.copy()
    flat, nflat = probe.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(probe)).item()
        flat[i] = orig - h
        fm = f(Tensor(probe)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * h)

    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
