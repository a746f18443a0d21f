"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Ops are plain functions over :class:`Tensor`. When a :class:`Graph` is active
(``with Graph() as g:``) and at least one input requires a gradient, the op
appends a node holding a backward closure. Without an active graph nothing is
recorded, which is the inference path.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

_local = threading.local()
_default_dtype = np.float32


def default_dtype() -> type:
    return getattr(_local, "dtype", _default_dtype)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new parameters and inputs.

    Training runs in float32; gradient checks use ``precision(np.float64)``.
    """
    prev = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Tape of recorded ops for one forward pass.

    Nodes are appended in execution order, so the tape is already
    topologically sorted; :func:`backward` walks it in reverse.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        stack = getattr(_local, "graphs", None)
        if stack is None:
            stack = _local.graphs = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.graphs.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def current_graph() -> Graph | None:
    stack = getattr(_local, "graphs", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = _local.graphs = []
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _record(op: str, inputs: Sequence[Tensor], out: Tensor, fn) -> Tensor:
    graph = current_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.nodes.append(Node(op, tuple(inputs), out, fn))
    return out


def backward(graph: Graph, loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors that do not influence the loss get exact zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    keep = {id(t) for t in wrt.values()}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        oid = id(node.output)
        g = grads.get(oid) if oid in keep else grads.pop(oid, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
    return {
        name: grads[id(t)].astype(t.dtype, copy=False) if id(t) in grads else np.zeros_like(t.data)
        for name, t in wrt.items()
    }


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record("sub", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = as_tensor(a)
        c = b
        out = Tensor(a.data * np.asarray(c, dtype=a.dtype))
        return _record("scale", (a,), out, lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        "mul",
        (a, b),
        out,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data >= 0
    out = Tensor(np.where(pos, x.data, x.data * np.asarray(slope, dtype=x.dtype)))
    return _record("leaky_relu", (x,), out, lambda g: (np.where(pos, g, g * slope),))


def tanh_act(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", (x,), Tensor(y), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record("sigmoid", (x,), Tensor(y), lambda g: (g * y * (1.0 - y),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient passes where lo <= x <= hi."""
    inside = (x.data >= lo) & (x.data <= hi)
    out = Tensor(np.clip(x.data, lo, hi))
    return _record("clamp", (x,), out, lambda g: (g * inside,))


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), Tensor(y), grad)


# ------------------------------------------------------------------ reductions


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    return _record("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


def bce_with_logits_sum(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Sum of binary cross-entropy between sigmoid(logits) and 0/1 targets."""
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    val = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(np.asarray(val.sum(), dtype=x.dtype))
    return _record("bce", (logits,), out, lambda g: (g * (_sigmoid(x) - t),))


def smooth_l1_sum(pred: Tensor, target: np.ndarray, mask: np.ndarray, beta: float = 1.0) -> Tensor:
    """Masked sum of the Huber-style smooth L1 penalty on ``pred - target``."""
    d = pred.data - np.asarray(target, dtype=pred.dtype)
    m = np.asarray(mask, dtype=pred.dtype)
    ad = np.abs(d)
    small = ad < beta
    val = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta) * m
    out = Tensor(np.asarray(val.sum(), dtype=pred.dtype))
    return _record(
        "smooth_l1", (pred,), out, lambda g: (g * np.where(small, d / beta, np.sign(d)) * m,)
    )


# --------------------------------------------------------------- convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with zero padding.

    Internally works channels-last so every GEMM is tall and skinny
    (pixels x channels), which is what BLAS handles well here.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if ic != c:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (oc,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match weight {weight.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {weight.shape} too large for input {x.shape}")
    if stride == 1:
        return _conv2d_shift(x, weight, bias, padding, ho, wo)
    return _conv2d_cols(x, weight, bias, stride, padding, ho, wo)


def _nhwc_padded(x: np.ndarray, p: int) -> np.ndarray:
    xt = x.transpose(0, 2, 3, 1)
    if p:
        return np.pad(xt, ((0, 0), (p, p), (p, p), (0, 0)))
    return np.ascontiguousarray(xt)


def _conv2d_shift(x: Tensor, weight: Tensor, bias: Tensor | None, p: int, ho: int, wo: int) -> Tensor:
    """Stride-1 convolution as one GEMM per kernel tap on the flattened padded grid.

    With pixels flattened row-major, tap (i, j) is the constant row offset
    ``i * Wp + j``, so each tap reads a contiguous block. Rows that straddle
    image borders are computed and then discarded.
    """
    n, c, h, w = x.shape
    oc, _, kh, kw = weight.shape
    xp = _nhwc_padded(x.data, p)
    hp, wp = xp.shape[1:3]
    total = n * hp * wp
    flat = xp.reshape(total, c)
    offsets = [i * wp + j for i in range(kh) for j in range(kw)]
    span = total - offsets[-1]
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(kh * kw, c, oc)
    full = np.zeros((total, oc), dtype=x.dtype)
    acc = full[:span]
    for t, off in enumerate(offsets):
        acc += flat[off : off + span] @ taps[t]
    if bias is not None:
        full += bias.data
    out = Tensor(full.reshape(n, hp, wp, oc)[:, :ho, :wo].transpose(0, 3, 1, 2))

    def grad(g):
        gfull = np.zeros((n, hp, wp, oc), dtype=g.dtype)
        gfull[:, :ho, :wo] = g.transpose(0, 2, 3, 1)
        gflat = gfull.reshape(total, oc)
        # row r of tap t's block holds the output gradient at r - offset
        shifted = np.zeros((total, kh * kw, oc), dtype=g.dtype)
        for t, off in enumerate(offsets):
            shifted[off:, t] = gflat[: total - off]
        shifted = shifted.reshape(total, kh * kw * oc)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (flat.T @ shifted).reshape(c, kh, kw, oc).transpose(3, 0, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gflat_x = shifted @ np.ascontiguousarray(taps.transpose(0, 2, 1)).reshape(kh * kw * oc, c)
            gx = gflat_x.reshape(n, hp, wp, c)[:, p : p + h, p : p + w].transpose(0, 3, 1, 2)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("conv2d", inputs, out, grad)


def _conv2d_cols(x: Tensor, weight: Tensor, bias: Tensor | None, s: int, p: int, ho: int, wo: int) -> Tensor:
    """Strided convolution through an explicit (pixels, taps*channels) matrix."""
    n, c, h, w = x.shape
    oc, _, kh, kw = weight.shape
    xp = _nhwc_padded(x.data, p)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j] = xp[:, i : i + s * ho : s, j : j + s * wo : s]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wmat = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(kh * kw * c, oc)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = Tensor(out.reshape(n, ho, wo, oc).transpose(0, 3, 1, 2))

    def grad(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, oc)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(kh, kw, c, oc).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ np.ascontiguousarray(wmat.T)).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, i, j]
            gx = gxp[:, p : p + h, p : p + w].transpose(0, 3, 1, 2)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("conv2d", inputs, out, grad)


# ---------------------------------------------------------------- resampling


def _lerp_table(n_in: int, n_out: int):
    """Source indices and fractions for half-pixel-centre linear resampling."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _lerp_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, f = _lerp_table(n_in, n_out)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centres (align_corners=False).

    The forward pass uses the ``a + f * (b - a)`` form so a constant input
    stays bitwise constant.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize target must be >= 1, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    y0, y1, fy = _lerp_table(h, out_h)
    x0, x1, fx = _lerp_table(w, out_w)
    fy_ = fy.astype(x.dtype)[:, None]
    fx_ = fx.astype(x.dtype)
    d = x.data
    top, bot = d[:, :, y0, :], d[:, :, y1, :]
    rows = top + fy_ * (bot - top)
    left, right = rows[:, :, :, x0], rows[:, :, :, x1]
    out = Tensor(left + fx_ * (right - left))

    def grad(g):
        my = _lerp_matrix(h, out_h).astype(x.dtype)
        mx = _lerp_matrix(w, out_w).astype(x.dtype)
        return (np.matmul(np.matmul(my.T, g), mx),)

    return _record("bilinear_resize", (x,), out, grad)


def take(x: Tensor, axis: int, index: np.ndarray) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)
    out = Tensor(np.take(x.data, index, axis=axis))

    def grad(g):
        gx = np.zeros_like(x.data)
        sel = [slice(None)] * x.data.ndim
        sel[axis] = index
        np.add.at(gx, tuple(sel), g)
        return (gx,)

    return _record("take", (x,), out, grad)


def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = idx % period
    return np.where(idx < n, idx, period - idx)


def reflect_pad(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Reflect-pad at the bottom and right edges."""
    if pad_h:
        x = take(x, 2, _reflect_index(x.shape[2], pad_h))
    if pad_w:
        x = take(x, 3, _reflect_index(x.shape[3], pad_w))
    return x


def crop(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h`` x ``w`` window."""
    if (h, w) == x.shape[2:]:
        return x
    out = Tensor(x.data[:, :, :h, :w])

    def grad(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :h, :w] = g
        return (gx,)

    return _record("crop", (x,), out, grad)


# ------------------------------------------------------------------ channels


def concat_channels(*tensors: Tensor) -> Tensor:
    if len(tensors) < 2:
        raise ValueError("concat_channels needs at least two tensors")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels shape mismatch: {ref} vs {t.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def grad(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _record("concat", tensors, out, grad)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[:, start:stop])

    def grad(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _record("slice", (x,), out, grad)


def channel_stats(x: Tensor, eps: float = 0.0) -> tuple[Tensor, Tensor]:
    """Per-sample, per-channel mean and population std, each shaped (N, C, 1, 1).

    ``eps`` is added to the variance under the square root.
    """
    n, c, h, w = x.shape
    count = h * w
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=(2, 3), keepdims=True)
    std = np.sqrt(var + eps)
    mean_t, std_t = Tensor(mu), Tensor(std)

    def grad_mean(g):
        return (np.broadcast_to(g / count, x.shape).copy(),)

    def grad_std(g):
        safe = np.where(std > 0, std, 1.0)
        return (np.where(std > 0, g / safe, 0.0) * centred / count,)

    _record("channel_mean", (x,), mean_t, grad_mean)
    _record("channel_std", (x,), std_t, grad_std)
    return mean_t, std_t
