"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations executed while a :class:`Graph` is active are recorded on that
graph in execution order; :meth:`Graph.backward` replays the tape in exact
reverse order.  Outside of a graph every op is a plain numpy computation and
nothing is recorded, which is how evaluation code avoids holding activations.

Images are channels-first and row-major: a single frame is ``(C, H, W)`` and a
batch is ``(N, C, H, W)``.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes do not compose."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared at an op boundary while debug checks were on."""


class ContractError(ValueError):
    """An op was called outside its contract (e.g. backward on a non-scalar)."""


_local = threading.local()
_debug = False


def set_debug(enabled: bool) -> None:
    global _debug
    _debug = bool(enabled)


@contextlib.contextmanager
def debug_checks(enabled: bool = True) -> Iterator[None]:
    """Raise :class:`NonFiniteError` as soon as any op emits a non-finite value."""
    global _debug
    previous, _debug = _debug, enabled
    try:
        yield
    finally:
        _debug = previous


def _check_finite(op: str, arr: np.ndarray) -> None:
    if _debug and not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"{op}: non-finite value at index {tuple(int(i) for i in bad)}")


def _graph_stack() -> list["Graph"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """Shape-tagged real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        # (graph, node index, output slot) when produced by a recorded op
        self.node: tuple[Graph, int, int] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    outputs: list[Tensor]
    inputs: tuple[Tensor, ...]
    backward: Callable
    # which inputs wanted gradient when the op ran; frozen() may change flags later
    needs: tuple[bool, ...]


@dataclass
class Graph:
    """Ordered record of differentiable operations.

    Use as a context manager; ops run inside the ``with`` block are appended in
    execution order, so the tape is topologically sorted by construction.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("graph stack corrupted")
        stack.pop()

    def record(self, op: str, outputs: list[Tensor], inputs: Sequence[Tensor], fn: Callable) -> None:
        idx = len(self.nodes)
        for slot, out in enumerate(outputs):
            out.node = (self, idx, slot)
            out.requires_grad = True
        inputs = tuple(inputs)
        self.nodes.append(_Node(op, outputs, inputs, fn, tuple(t.requires_grad for t in inputs)))

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        """Accumulate gradients into leaves.

        The tape is released afterwards unless ``retain`` is set: outputs point
        back at the graph, so a kept tape is a reference cycle that pins every
        intermediate array until the cycle collector happens to run.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node[0] is not self:
            raise ContractError("loss was not produced on this graph")
        _, last, slot = loss.node
        if last >= len(self.nodes):
            raise ContractError("graph was already released by an earlier backward; pass retain=True")
        grads: dict[tuple[int, int], np.ndarray] = {(last, slot): np.ones_like(loss.data)}
        for idx in range(last, -1, -1):
            node = self.nodes[idx]
            outs = [grads.pop((idx, s), None) for s in range(len(node.outputs))]
            if all(g is None for g in outs):
                continue
            if len(outs) == 1:
                in_grads = node.backward(outs[0])
            else:
                outs = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, outs)]
                in_grads = node.backward(*outs)
            for t, g, need in zip(node.inputs, in_grads, node.needs):
                if g is None or not need:
                    continue
                _check_finite(f"backward of {node.op}", g)
                if t.node is not None and t.node[0] is self:
                    key = (t.node[1], t.node[2])
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g
                elif t.node is None:
                    t.grad = g.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + g
            if not retain:
                self.nodes[idx] = None
        if not retain:
            self.nodes.clear()


def backward(loss: Tensor, graph: Graph | None = None, retain: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        if loss.node is None:
            raise ContractError("loss is not attached to a graph")
        graph = loss.node[0]
    graph.backward(loss, retain)


def _emit(op: str, data, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        g.record(op, [out], inputs, fn)
    return out


def _emit_many(op: str, datas: Sequence[np.ndarray], inputs: Sequence[Tensor], fn: Callable) -> list[Tensor]:
    outs = []
    for d in datas:
        _check_finite(op, d)
        outs.append(Tensor(d))
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        g.record(op, outs, inputs, fn)
    return outs


@contextlib.contextmanager
def frozen(params: dict[str, Tensor] | Sequence[Tensor]) -> Iterator[None]:
    """Temporarily stop the given leaves from receiving gradient."""
    items = list(params.values()) if isinstance(params, dict) else list(params)
    saved = [t.requires_grad for t in items]
    for t in items:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(items, saved):
            t.requires_grad = flag


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.dtype != b.dtype:
        # python scalars come in as float64; follow the tensor operand
        if a.size == 1 and a.is_leaf and not a.requires_grad:
            a = Tensor(a.data.astype(b.dtype))
        elif b.size == 1 and b.is_leaf and not b.requires_grad:
            b = Tensor(b.data.astype(a.dtype))
    return a, b


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(x: Tensor) -> Tensor:
    return _emit("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis)

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.ndim for a in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _emit("sum", np.asarray(out), (x,), fn)


def tmean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    def fn(g):
        out = np.zeros_like(x.data)
        if _has_advanced(index):
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _emit("getitem", np.array(x.data[index]), (x,), fn)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return _emit("stack", np.stack([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs))))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise DimensionError(f"matmul: inner axes differ ({a.shape} @ {b.shape})")

    def fn(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), fn)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``W @ x + b`` for ``x`` of shape ``(N,)`` or a batch ``(B, N)``."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: input axis -1 has {x.shape[-1]}, W axis 1 has {W.shape[1]}")
    if b.shape != (W.shape[0],):
        raise DimensionError(f"affine: bias axis 0 has {b.shape}, W axis 0 has {W.shape[0]}")
    out = x.data @ W.data.T + b.data

    def fn(g):
        g2 = g.reshape(-1, W.shape[0])
        x2 = x.data.reshape(-1, W.shape[1])
        return g @ W.data, g2.T @ x2, g2.sum(axis=0)

    return _emit("affine", out, (x, W, b), fn)


def linear(x: Tensor, W: Tensor) -> Tensor:
    """``x @ W.T`` without bias; ``x`` is ``(N,)`` or ``(B, N)``."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"linear: input axis -1 has {x.shape[-1]}, W axis 1 has {W.shape[1]}")

    def fn(g):
        g2 = g.reshape(-1, W.shape[0])
        return g @ W.data, g2.T @ x.data.reshape(-1, W.shape[1])

    return _emit("linear", x.data @ W.data.T, (x, W), fn)


def _logistic(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise ``relu``, ``tanh``, ``logistic`` or ``clip01``."""
    d = x.data
    if kind == "relu":
        return _emit("relu", np.maximum(d, 0), (x,), lambda g: (g * (d > 0),))
    if kind == "tanh":
        y = np.tanh(d)
        return _emit("tanh", y, (x,), lambda g: (g * (1 - y * y),))
    if kind == "logistic":
        y = _logistic(d)
        return _emit("logistic", y, (x,), lambda g: (g * y * (1 - y),))
    if kind == "clip01":
        return _emit("clip01", np.clip(d, 0, 1), (x,), lambda g: (g * ((d > 0) & (d < 1)),))
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def logistic(x: Tensor) -> Tensor:
    return activation(x, "logistic")


def clip01(x: Tensor) -> Tensor:
    return activation(x, "clip01")


def log_clamped(p: Tensor, eps: float) -> Tensor:
    """``log(clip(p, eps, 1 - eps))``; zero gradient where the clamp is active."""
    d = p.data
    inside = (d > eps) & (d < 1 - eps)
    c = np.clip(d, eps, 1 - eps)
    return _emit("log", np.log(c), (p,), lambda g: (g * inside / c,))


# ---------------------------------------------------------------------------
# Image ops
# ---------------------------------------------------------------------------

def _as_batch(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"{op}: expected (C,H,W) or (N,C,H,W), got {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding (no kernel flip)."""
    xb, single = _as_batch(x, "conv2d")
    N, C, H, W = xb.shape
    if kernels.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be (C_out,C_in,kH,kW), got {kernels.shape}")
    Co, Ci, kh, kw = kernels.shape
    if Ci != C:
        raise DimensionError(f"conv2d: input channel axis has {C}, kernel axis 1 has {Ci}")
    if bias.shape != (Co,):
        raise DimensionError(f"conv2d: bias axis 0 has {bias.shape}, kernel axis 0 has {Co}")
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise DimensionError(f"conv2d: padded spatial axes ({H + 2 * pad},{W + 2 * pad}) "
                             f"smaller than kernel axes ({kh},{kw})")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    Ho, Wo = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # (C, kh, kw, N, Ho, Wo) -> one GEMM over the whole batch
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * kh * kw, N * Ho * Wo)
    wmat = kernels.data.reshape(Co, -1)
    out = (wmat @ cols).reshape(Co, N, Ho, Wo).transpose(1, 0, 2, 3) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def fn(g):
        gb = g[None] if single else g
        gmat = gb.transpose(1, 0, 2, 3).reshape(Co, -1)
        gw = (gmat @ cols.T).reshape(kernels.shape)
        gbias = gmat.sum(axis=1)
        gcols = (wmat.T @ gmat).reshape(C, kh, kw, N, Ho, Wo)
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride] += \
                    gcols[:, u, v].transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return (gx[0] if single else gx), gw, gbias

    return _emit("conv2d", out[0] if single else out, (x, kernels, bias), fn)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max over windows; ties resolve to the first position in row-major order."""
    stride = window if stride is None else stride
    xb, single = _as_batch(x, "maxpool2d")
    N, C, H, W = xb.shape
    if window > H or window > W:
        raise DimensionError(f"maxpool2d: window {window} exceeds spatial axes (H={H}, W={W})")
    Ho, Wo = (H - window) // stride + 1, (W - window) // stride + 1
    win = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(N, C, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def fn(g):
        gb = g[None] if single else g
        rows = np.arange(Ho)[:, None] * stride + arg // window
        cols = np.arange(Wo)[None, :] * stride + arg % window
        n_idx = np.arange(N)[:, None, None, None]
        c_idx = np.arange(C)[None, :, None, None]
        gx = np.zeros_like(xb)
        if stride >= window:
            gx[n_idx, c_idx, rows, cols] = gb
        else:
            np.add.at(gx, (n_idx, c_idx, rows, cols), gb)
        return (gx[0] if single else gx),

    return _emit("maxpool2d", out[0] if single else out, (x,), fn)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample_nearest: factor must be >= 1, got {factor}")
    xb, single = _as_batch(x, "upsample_nearest")
    out = xb.repeat(factor, axis=2).repeat(factor, axis=3)
    N, C, H, W = xb.shape

    def fn(g):
        gb = g[None] if single else g
        gx = gb.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5))
        return (gx[0] if single else gx),

    return _emit("upsample", out[0] if single else out, (x,), fn)


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Symmetric zero padding of the two trailing (spatial) axes."""
    if pad < 0:
        raise ValueError(f"pad must be non-negative, got {pad}")
    if pad == 0:
        return x
    if x.ndim < 2:
        raise DimensionError(f"pad2d needs spatial axes, got {x.shape}")
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return _emit("pad2d", np.pad(x.data, widths), (x,), lambda g: (g[..., pad:-pad, pad:-pad],))


# ---------------------------------------------------------------------------
# Fused LSTM sequence
# ---------------------------------------------------------------------------

def lstm_sequence(xs: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor,
                  h0: Tensor | None = None, c0: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Run an LSTM over ``xs`` of shape ``(B, T, In)``.

    ``Wx`` is ``(4H, In)``, ``Wh`` is ``(4H, H)`` and ``b`` is ``(4H,)`` with gate
    blocks stacked in the order input, forget, candidate, output.  Returns the
    hidden and cell states for every step, each ``(B, T, H)``.  Numerically this
    is the same recurrence as stepping :func:`pgn.layers.lstm_step`; the fused
    form exists so input projections and weight gradients become single GEMMs.
    """
    if xs.ndim != 3:
        raise DimensionError(f"lstm_sequence: xs must be (B,T,In), got {xs.shape}")
    B, T, In = xs.shape
    H4, H = Wh.shape
    if H4 != 4 * H or Wx.shape != (H4, In) or b.shape != (H4,):
        raise DimensionError(f"lstm_sequence: inconsistent shapes Wx={Wx.shape} Wh={Wh.shape} "
                             f"b={b.shape} for input axis {In}")
    dt = xs.dtype
    h0d = np.zeros((B, H), dt) if h0 is None else h0.data
    c0d = np.zeros((B, H), dt) if c0 is None else c0.data
    proj = (xs.data.reshape(B * T, In) @ Wx.data.T + b.data).reshape(B, T, H4)
    WhT = Wh.data.T
    gates = np.empty((B, T, H4), dt)
    hs = np.empty((B, T, H), dt)
    cs = np.empty((B, T, H), dt)
    tcs = np.empty((B, T, H), dt)
    h, c = h0d, c0d
    for t in range(T):
        z = proj[:, t] + h @ WhT
        gi = _logistic(z[:, :H])
        gf = _logistic(z[:, H:2 * H])
        gg = np.tanh(z[:, 2 * H:3 * H])
        go = _logistic(z[:, 3 * H:])
        c = gf * c + gi * gg
        tc = np.tanh(c)
        h = go * tc
        gates[:, t, :H], gates[:, t, H:2 * H], gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:] = gi, gf, gg, go
        hs[:, t], cs[:, t], tcs[:, t] = h, c, tc

    def fn(ghs, gcs):
        dz_all = np.empty((B, T, H4), dt)
        dh_next = np.zeros((B, H), dt)
        dc_next = np.zeros((B, H), dt)
        for t in range(T - 1, -1, -1):
            gi, gf = gates[:, t, :H], gates[:, t, H:2 * H]
            gg, go = gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:]
            tc = tcs[:, t]
            c_prev = cs[:, t - 1] if t > 0 else c0d
            dh = ghs[:, t] + dh_next
            dc = gcs[:, t] + dc_next + dh * go * (1 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc * gg * gi * (1 - gi)
            dz[:, H:2 * H] = dc * c_prev * gf * (1 - gf)
            dz[:, 2 * H:3 * H] = dc * gi * (1 - gg * gg)
            dz[:, 3 * H:] = dh * tc * go * (1 - go)
            dh_next = dz @ Wh.data
            dc_next = dc * gf
        dzf = dz_all.reshape(B * T, H4)
        h_prev = np.concatenate([h0d[:, None], hs[:, :-1]], axis=1).reshape(B * T, H)
        gx = (dzf @ Wx.data).reshape(B, T, In)
        gWx = dzf.T @ xs.data.reshape(B * T, In)
        gWh = dzf.T @ h_prev
        gb = dzf.sum(axis=0)
        grads = [gx, gWx, gWh, gb]
        if h0 is not None:
            grads.append(dh_next)
        if c0 is not None:
            grads.append(dc_next)
        return tuple(grads)

    inputs = [xs, Wx, Wh, b] + [t for t in (h0, c0) if t is not None]
    out = _emit_many("lstm_sequence", [hs, cs], inputs, fn)
    return out[0], out[1]


# ---------------------------------------------------------------------------
# Finite-difference check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[str, int] | None
    n_checked: int


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                    max_coords: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients of ``loss_fn`` with central differences.

    ``loss_fn`` must rebuild its graph on every call from the current values of
    ``params``.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.  With ``max_coords`` only that many
    coordinates per tensor are sampled (seeded).
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"check_gradients requires float64 parameters; {name} is {p.dtype}")
    for p in params.values():
        p.grad = None
    with Graph() as g:
        loss = loss_fn()
    g.backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    worst_err, worst_at, count = 0.0, None, 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"check_gradients: non-finite loss perturbing {name}[{int(i)}]")
            num = (fp - fm) / (2 * h)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            count += 1
            if err > worst_err:
                worst_err, worst_at = err, (name, int(i))
    for p in params.values():
        p.grad = None
    return GradCheckResult(float(worst_err), worst_at, count)
