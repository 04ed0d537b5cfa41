"""Dense NCHW tensors with a reverse-mode autodiff tape.

Activations, parameters and gradients are plain numpy arrays wrapped in
:class:`Tensor`. Forward ops executed while a :class:`Graph` is recording
append one tape node each; ``Graph.backward`` replays the tape in reverse
insertion order and accumulates gradients into the leaf tensors.

Model state is float32. The same ops run unchanged in float64, which is
how the finite-difference harness gets oracle-grade arithmetic.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .errors import ConfigError, ContractError, GraphError, NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float32

# Debug hook for verification negative controls: scales the analytic GELU
# derivative so a deliberately wrong gradient is observable end to end.
GELU_GRAD_SCALE = 1.0


class Tensor:
    """A numpy array plus autodiff metadata.

    Activations follow the NCHW layout ``(batch, channel, height, width)``;
    reductions and fully-connected paths also use 2-D ``(n, features)`` and
    0-D scalar carriers.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        arr = np.asarray(arr, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor ingestion rejected non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    # -- construction that skips ingestion validation (internal op outputs)
    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar -------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


class Node:
    """One recorded forward op: inputs, output and its vjp closure."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE_GRAPH: "Graph | None" = None


class Graph:
    """Single-writer autodiff tape; topological order is insertion order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        global _ACTIVE_GRAPH
        if _ACTIVE_GRAPH is not None:
            raise GraphError("a graph is already recording; graphs are single-writer")
        _ACTIVE_GRAPH = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_GRAPH
        _ACTIVE_GRAPH = None

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_graph() -> Graph | None:
    return _ACTIVE_GRAPH


def backward(graph: Graph, loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; gradients accumulate until zeroed.

    Intermediate (tape-produced) tensors receive their gradient for this
    sweep; leaves accumulate across sweeps via ``+=`` semantics.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    produced = {id(n.output) for n in graph.nodes}
    for node in reversed(graph.nodes):
        g = flows.pop(id(node.output), None)
        if g is None:
            continue
        node.output.accumulate_grad(g)
        grads = node.backward_fn(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in flows:
                flows[key] = flows[key] + gt
            else:
                flows[key] = gt
                tensors[key] = t
    # whatever remains never appeared as a node output: these are leaves
    for key, g in flows.items():
        t = tensors[key]
        if id(t) not in produced and t.requires_grad:
            t.accumulate_grad(g)


# -- FLOP instrumentation -------------------------------------------------

_FLOP_BOX: list[int] | None = None


class flop_counter:
    """Context manager accumulating the FLOPs of every op executed inside."""

    def __init__(self):
        self.total = 0

    def __enter__(self) -> "flop_counter":
        global _FLOP_BOX
        self._box = [0]
        _FLOP_BOX = self._box
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _FLOP_BOX
        self.total = self._box[0]
        _FLOP_BOX = None


def _count_flops(n: int) -> None:
    if _FLOP_BOX is not None:
        _FLOP_BOX[0] += int(n)


# -- op plumbing ----------------------------------------------------------


def register_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
                backward_fn: Callable, flops: int = 0) -> Tensor:
    """Wrap an op result and record it on the active tape.

    ``backward_fn(gout)`` must return one gradient (or None) per input,
    in order. Blocks outside this module build their primitives with this.
    """
    _count_flops(flops)
    out = Tensor._wrap(out_data)
    g = _ACTIVE_GRAPH
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g.nodes.append(Node(op, tuple(inputs), out, backward_fn))
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data
    sa, sb = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return register_op("add", out, (a, b), bwd, flops=out.size)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data
    sa, sb = a.data.shape, b.data.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return register_op("sub", out, (a, b), bwd, flops=out.size)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return register_op("mul", out, (a, b), bwd, flops=out.size)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return register_op("div", out, (a, b), bwd, flops=out.size)


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out = a.data ** p
    ad = a.data

    def bwd(g):
        return (g * p * ad ** (p - 1.0),)

    return register_op("pow", out, (a,), bwd, flops=2 * out.size)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return register_op("exp", out, (a,), bwd, flops=out.size)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return register_op("log", out, (a,), bwd, flops=out.size)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return register_op("sigmoid", out, (a,), bwd, flops=4 * out.size)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact erf-based GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * np.asarray(_INV_SQRT2, dtype=x.dtype)))
    out = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * np.asarray(_INV_SQRT_2PI, dtype=x.dtype)
        d = cdf + x * pdf
        if GELU_GRAD_SCALE != 1.0:
            d = d * np.asarray(GELU_GRAD_SCALE, dtype=x.dtype)
        return (g * d,)

    return register_op("gelu", out, (a,), bwd, flops=8 * out.size)


def bce_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Elementwise binary cross-entropy on raw logits (numerically stable)."""
    if logits.shape != target.shape:
        raise ShapeError(f"bce_with_logits shape mismatch: logits {logits.shape} vs target {target.shape}")
    z, y = logits.data, target.data
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def bwd(g):
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        p[~pos] = ez / (1.0 + ez)
        return g * (p - y), None

    return register_op("bce_with_logits", out, (logits, target), bwd, flops=8 * out.size)


# -- reductions and shape ops ----------------------------------------------


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)
    in_shape = a.data.shape

    def bwd(g):
        if ax is None:
            return (np.broadcast_to(np.asarray(g), in_shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, in_shape).copy(),)

    return register_op("sum", out, (a,), bwd, flops=a.size)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    count = a.size if ax is None else int(np.prod([a.data.shape[i] for i in ax]))
    out = a.data.mean(axis=ax, keepdims=keepdims)
    in_shape = a.data.shape

    def bwd(g):
        gg = np.asarray(g) / count
        if ax is not None and not keepdims:
            gg = np.expand_dims(gg, ax)
        return (np.broadcast_to(gg, in_shape).copy(),)

    return register_op("mean", out, (a,), bwd, flops=a.size)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    in_shape = a.data.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return register_op("reshape", out, (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    axis = axis % a.ndim
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] exceeds axis {axis} of shape {a.shape}")
    idx = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(a.ndim))
    out = a.data[idx].copy()
    in_shape = a.data.shape

    def bwd(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return register_op("narrow", out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def bwd(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(pieces)

    return register_op("concat", out, tuple(tensors), bwd)


def softmax(a: Tensor, axis: int) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    out = ez / ez.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return register_op("softmax", out, (a,), bwd, flops=5 * out.size)


# -- dense linear algebra ---------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on 2-D inputs: (n, f_in) @ (f_out, f_in)^T + bias.

    The forward reduces per sample (broadcast + pairwise sum) rather than
    calling GEMM: BLAS picks batch-size-dependent accumulation orders, and
    eval-mode logits must not depend on what else is in the batch. The
    layers routed through here are small, so the temporary is cheap.
    """
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D operands, got x {x.shape}, weight {weight.shape}")
    n, f_in = x.data.shape
    f_out, f_in_w = weight.data.shape
    if f_in != f_in_w:
        raise ShapeError(f"linear inner dims differ: x {x.shape} vs weight {weight.shape}")
    out = (x.data[:, None, :] * weight.data[None, :, :]).sum(axis=2)
    flops = 2 * n * f_in * f_out
    if bias is not None:
        out = out + bias.data
        flops += n * f_out
    xd, wd = x.data, weight.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return register_op("linear", out, inputs, bwd, flops=flops)


# -- convolution -------------------------------------------------------------


def _conv_out_size(h: int, k: int, stride: int, padding: int) -> int:
    return (h + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    col = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for ki in range(kh):
        he = ki + stride * (oh - 1) + 1
        for kj in range(kw):
            we = kj + stride * (ow - 1) + 1
            col[:, :, ki, kj] = xp[:, :, ki:he:stride, kj:we:stride]
    return col


def _col2im(gcol: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = gcol.shape[-2:]
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcol.dtype)
    for ki in range(kh):
        he = ki + stride * (oh - 1) + 1
        for kj in range(kw):
            we = kj + stride * (ow - 1) + 1
            gxp[:, :, ki:he:stride, kj:we:stride] += gcol[:, :, ki, kj]
    if padding:
        return gxp[:, :, padding:padding + h, padding:padding + w]
    return gxp


def _check_conv_pre(x: Tensor, kh: int, kw: int, stride: int, padding: int) -> tuple:
    if x.ndim != 4:
        raise ShapeError(f"conv input must be 4-D NCHW, got {x.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be non-negative, got {padding}")
    n, c, h, w = x.data.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel ({kh},{kw}) exceeds padded input ({h + 2 * padding},{w + 2 * padding})")
    return n, c, h, w


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding."""
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D, got {weight.shape}")
    oc, ic, kh, kw = weight.data.shape
    n, c, h, w = _check_conv_pre(x, kh, kw, stride, padding)
    if c != ic:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} has {c} channels, weight {weight.shape} expects {ic}")
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    col = _im2col(xp, kh, kw, stride, oh, ow)
    col2 = col.reshape(n, c * kh * kw, oh * ow)
    w2 = weight.data.reshape(oc, c * kh * kw)
    out = np.matmul(w2, col2).reshape(n, oc, oh, ow)
    flops = 2 * n * oc * oh * ow * c * kh * kw
    if bias is not None:
        if bias.data.shape != (oc,):
            raise ShapeError(f"conv2d bias must have shape ({oc},), got {bias.shape}")
        out += bias.data[None, :, None, None]
        flops += n * oc * oh * ow
    x_shape = x.data.shape
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        go = g.reshape(n, oc, oh * ow)
        gw = np.einsum("nol,nkl->ok", go, col2, optimize=True).reshape(weight.data.shape)
        gcol = np.matmul(w2.T, go).reshape(n, c, kh, kw, oh, ow)
        gx = _col2im(gcol, x_shape, kh, kw, stride, padding)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return register_op("conv2d", out, inputs, bwd, flops=flops)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel 2-D convolution; channel i of output sees only channel i.

    Runs as kh*kw vectorized offset accumulations instead of im2col; the
    temporaries stay output-sized.
    """
    if weight.ndim != 4 or weight.data.shape[1] != 1:
        raise ShapeError(f"depthwise weight must be (c, 1, kh, kw), got {weight.shape}")
    wc, _, kh, kw = weight.data.shape
    n, c, h, w = _check_conv_pre(x, kh, kw, stride, padding)
    if c != wc:
        raise ShapeError(f"depthwise channel mismatch: input {x.shape} has {c} channels, weight {weight.shape} has {wc}")
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    w3 = weight.data.reshape(c, kh, kw)
    out = np.zeros((n, c, oh, ow), dtype=x.data.dtype)
    windows = []
    for ki in range(kh):
        he = ki + stride * (oh - 1) + 1
        for kj in range(kw):
            we = kj + stride * (ow - 1) + 1
            win = xp[:, :, ki:he:stride, kj:we:stride]
            windows.append((ki, kj, win))
            out += win * w3[None, :, ki, kj, None, None]
    flops = 2 * n * c * oh * ow * kh * kw
    if bias is not None:
        if bias.data.shape != (c,):
            raise ShapeError(f"depthwise bias must have shape ({c},), got {bias.shape}")
        out += bias.data[None, :, None, None]
        flops += n * c * oh * ow
    x_shape = x.data.shape
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gw = np.empty_like(weight.data)
        gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for ki, kj, win in windows:
            gw[:, 0, ki, kj] = (g * win).sum(axis=(0, 2, 3))
            he = ki + stride * (oh - 1) + 1
            we = kj + stride * (ow - 1) + 1
            gxp[:, :, ki:he:stride, kj:we:stride] += g * w3[None, :, ki, kj, None, None]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return register_op("depthwise_conv2d", out, inputs, bwd, flops=flops)


# -- normalization -----------------------------------------------------------


class RunningStats:
    """Per-channel EMA statistics owned by a batch-norm layer."""

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d input must be 4-D, got {x.shape}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm2d affine params must have shape ({c},)")
    xd = x.data
    gd, bd = gamma.data, beta.data
    if training:
        if n * h * w < 2:
            raise ContractError(f"batch_norm2d training needs batch*h*w >= 2, got {n * h * w}")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running.mean[:] = (1.0 - momentum) * running.mean + momentum * mu
        running.var[:] = (1.0 - momentum) * running.var + momentum * var
    else:
        mu = running.mean.astype(xd.dtype, copy=False)
        var = running.var.astype(xd.dtype, copy=False)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gd[None, :, None, None] * xhat + bd[None, :, None, None]
    m = n * h * w

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxh = g * gd[None, :, None, None]
        if training:
            mean_g = gxh.mean(axis=(0, 2, 3), keepdims=True)
            mean_gx = (gxh * xhat).mean(axis=(0, 2, 3), keepdims=True)
            gx = inv[None, :, None, None] * (gxh - mean_g - xhat * mean_gx)
        else:
            gx = gxh * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return register_op("batch_norm2d", out, (x, gamma, beta), bwd, flops=7 * x.size)


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize each (channel-group, h, w) slab per sample."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm input must be 4-D, got {x.shape}")
    n, c, h, w = x.data.shape
    if num_groups < 1 or c % num_groups != 0:
        raise ConfigError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"group_norm affine params must have shape ({c},)")
    xd = x.data.reshape(n, num_groups, c // num_groups, h, w)
    mu = xd.mean(axis=(2, 3, 4), keepdims=True)
    var = xd.var(axis=(2, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * inv).reshape(n, c, h, w)
    gd, bd = gamma.data, beta.data
    out = gd[None, :, None, None] * xhat + bd[None, :, None, None]

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxh = (g * gd[None, :, None, None]).reshape(n, num_groups, c // num_groups, h, w)
        xh = xhat.reshape(n, num_groups, c // num_groups, h, w)
        mean_g = gxh.mean(axis=(2, 3, 4), keepdims=True)
        mean_gx = (gxh * xh).mean(axis=(2, 3, 4), keepdims=True)
        gx = (inv * (gxh - mean_g - xh * mean_gx)).reshape(n, c, h, w)
        return gx, ggamma, gbeta

    return register_op("group_norm", out, (x, gamma, beta), bwd, flops=7 * x.size)


# -- resampling --------------------------------------------------------------

_UPSAMPLE_CACHE: dict[tuple, np.ndarray] = {}


def _upsample2x_matrix(size: int, dtype) -> np.ndarray:
    """Dense (2*size, size) interpolation matrix, align-corners=false."""
    key = (size, np.dtype(dtype).str)
    cached = _UPSAMPLE_CACHE.get(key)
    if cached is not None:
        return cached
    m = np.zeros((2 * size, size), dtype=dtype)
    for i in range(2 * size):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, size - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    _UPSAMPLE_CACHE[key] = m
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Doubles spatial dims by bilinear interpolation (align-corners=false)."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample2x input must be 4-D, got {x.shape}")
    n, c, h, w = x.data.shape
    mh = _upsample2x_matrix(h, x.data.dtype)
    mw = _upsample2x_matrix(w, x.data.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    # two taps per axis pass: ~3 flops per produced element per pass
    flops = 3 * n * c * (2 * h) * w + 3 * n * c * (2 * h) * (2 * w)

    def bwd(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return register_op("bilinear_upsample2x", out, (x,), bwd, flops=flops)
