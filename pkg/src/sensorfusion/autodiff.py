"""Small reverse-mode differentiation engine.

Only the layer types needed by the CNN and LSTM base models are provided.
Every op accepts an optional leading batch axis, so a conv input may be
``(T, C)`` or ``(B, T, C)``.  All arithmetic is float64.

A :class:`Tensor` produced by an op remembers its op kind, its inputs and a
closure holding whatever activations the backward pass needs.  Calling
:meth:`Tensor.backward` on a scalar walks that graph in reverse topological
order and accumulates ``.grad`` on every tensor that requires it.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import (
    DimensionError,
    EmptyOutputError,
    LabelError,
    NumericOverflowError,
    ParameterError,
    StateError,
)

BCE_EPS = 1e-7

OP_KINDS = (
    "conv1d", "maxpool1d", "gap", "dense", "lstm", "dropout", "concat",
    "relu", "tanh", "sigmoid", "bce", "add", "mul", "sum", "reshape",
)

_state = threading.local()


def _record_branch(kind, decision):
    # discrete choices (relu masks, argmax, clamps) seen while a recorder is active
    rec = getattr(_state, "recorder", None)
    if rec is not None:
        rec.append((kind, np.packbits(decision).tobytes() if decision.dtype == bool else decision.tobytes()))


@contextmanager
def record_branches():
    """Collect the piecewise decisions taken by ops; used to detect kinks in finite differences."""
    prev = getattr(_state, "recorder", None)
    _state.recorder = []
    try:
        yield _state.recorder
    finally:
        _state.recorder = prev


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording a graph (used for evaluation)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array with an optional gradient buffer and graph node."""

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = None
        self._inputs = ()
        self._backward = None
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.op is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        kind = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{label}{kind})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self, grad=None, retain_graph=False):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring it.

        ``grad`` seeds the upstream gradient; it defaults to 1 for scalars.
        The graph is released afterwards unless ``retain_graph`` is set, so a
        second backward without a fresh forward raises :class:`StateError`.
        """
        if self._released:
            raise StateError("backward called on a released graph; rerun the forward pass")
        if not self.requires_grad:
            raise StateError("backward called on a tensor outside any recorded forward pass")
        if grad is None:
            if self.data.size != 1:
                raise StateError("implicit gradient seed needs a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape).copy()

        order = _topological_order(self)
        for node in order:
            if not node.is_leaf:
                node.grad = None
        self.grad = seed if self.grad is None or not self.is_leaf else self.grad + seed

        for node in reversed(order):
            if node.is_leaf or node.grad is None:
                continue
            if node._backward is None:
                raise StateError(f"cached activations of {node.op} node were released")
            in_grads = node._backward(node.grad)
            for inp, g in zip(node._inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    inp.grad = inp.grad + g
        if not retain_graph:
            for node in order:
                if not node.is_leaf:
                    node._backward = None
                    node._released = True


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node._inputs:
            if inp.requires_grad and id(inp) not in seen:
                stack.append((inp, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, op, backward):
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op
        out._inputs = tuple(inputs)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def tsum(a):
    return _make(a.data.sum(), (a,), "sum", lambda g: (np.broadcast_to(g, a.shape),))


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def _batched(x, core_ndim, what):
    if x.ndim == core_ndim:
        return False
    if x.ndim == core_ndim + 1:
        return True
    raise DimensionError(f"{what}: expected {core_ndim} or {core_ndim + 1} axes, got shape {x.shape}")


def conv1d(x, kernels, bias):
    """Valid, stride-1 1-D convolution: ``out[t,o] = b[o] + sum_{k,c} x[t+k,c] w[k,c,o]``."""
    batched = _batched(x, 2, "conv1d")
    if kernels.ndim != 3:
        raise DimensionError(f"conv1d: kernels must be K x Cin x Cout, got {kernels.shape}")
    K, cin, cout = kernels.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"conv1d: input channel axis {x.shape[-1]} != kernel Cin axis {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv1d: bias axis {bias.shape} != kernel Cout axis ({cout},)")
    T = x.shape[-2]
    if T < K:
        raise EmptyOutputError(f"conv1d: time axis {T} shorter than kernel axis {K}")
    xb = x.data if batched else x.data[None]
    B, tout = xb.shape[0], T - K + 1
    w = kernels.data
    # im2col pays off only for narrow inputs; otherwise accumulate one matmul per tap
    use_cols = cin <= 2
    if use_cols:
        # (B, tout, Cin, K) -> (B, tout, K, Cin)
        cols = sliding_window_view(xb, K, axis=1).transpose(0, 1, 3, 2).reshape(B, tout, K * cin)
        out = cols @ w.reshape(K * cin, cout)
    else:
        out = xb[:, :tout] @ w[0]
        for k in range(1, K):
            out += xb[:, k:k + tout] @ w[k]
    out += bias.data
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        g2 = gb.reshape(-1, cout)
        gbias = g2.sum(axis=0)
        gx = np.zeros_like(xb)
        if use_cols:
            gw = (cols.reshape(-1, K * cin).T @ g2).reshape(K, cin, cout)
            gcols = (gb @ w.reshape(K * cin, cout).T).reshape(B, tout, K, cin)
            for k in range(K):
                gx[:, k:k + tout] += gcols[:, :, k]
        else:
            gw = np.empty_like(w)
            for k in range(K):
                gw[k] = np.tensordot(xb[:, k:k + tout], gb, axes=([0, 1], [0, 1]))
                gx[:, k:k + tout] += gb @ w[k].T
        return (gx if batched else gx[0]), gw, gbias

    return _make(out, (x, kernels, bias), "conv1d", backward)


def maxpool1d(x, pool):
    """Non-overlapping max pooling over time; trailing remainder dropped."""
    if pool < 1:
        raise ParameterError(f"maxpool1d: pool must be >= 1, got {pool}")
    batched = _batched(x, 2, "maxpool1d")
    xb = x.data if batched else x.data[None]
    B, T, C = xb.shape
    tout = T // pool
    if tout == 0:
        raise EmptyOutputError(f"maxpool1d: pool {pool} larger than time axis {T}")
    windows = xb[:, :tout * pool].reshape(B, tout, pool, C)
    idx = windows.argmax(axis=2)  # first occurrence on ties
    _record_branch("maxpool1d", idx)
    out = np.take_along_axis(windows, idx[:, :, None, :], axis=2)[:, :, 0, :]
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        hit = np.arange(pool)[None, None, :, None] == idx[:, :, None, :]
        gx = np.zeros_like(xb)
        gx[:, :tout * pool] = (hit * gb[:, :, None, :]).reshape(B, tout * pool, C)
        return (gx if batched else gx[0]),

    return _make(out, (x,), "maxpool1d", backward)


def global_avg_pool(x):
    _batched(x, 2, "global_avg_pool")
    T = x.shape[-2]
    if T < 1:
        raise EmptyOutputError("global_avg_pool: empty time axis")
    return _make(x.data.mean(axis=-2), (x,), "gap",
                 lambda g: (np.broadcast_to(np.expand_dims(g, -2) / T, x.shape),))


def relu(x):
    mask = x.data > 0
    _record_branch("relu", mask)
    return _make(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def tanh(x):
    y = np.tanh(x.data)
    return _make(y, (x,), "tanh", lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    y = expit(x.data)
    return _make(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "linear": lambda x: x}


def dense(x, weights, bias, activation="linear", name=None):
    """``activation(x @ W + b)``; the affine part and the activation are separate nodes."""
    if activation not in ACTIVATIONS:
        raise ParameterError(f"dense: unknown activation {activation!r}")
    _batched(x, 1, "dense")
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0]:
        raise DimensionError(f"dense: input axis {x.shape[-1]} != weight rows {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense: bias axis {bias.shape} != weight columns {weights.shape[1]}")
    with np.errstate(over="ignore", invalid="ignore"):
        z = x.data @ weights.data + bias.data
    if not np.all(np.isfinite(z)):
        raise NumericOverflowError(f"dense layer {name or '?'} produced non-finite values")

    def backward(g):
        gx = g @ weights.data.T
        if x.ndim == 1:
            gw = np.outer(x.data, g)
            gbias = g
        else:
            gw = x.data.T @ g
            gbias = g.sum(axis=0)
        return gx, gw, gbias

    pre = _make(z, (x, weights, bias), "dense", backward)
    return ACTIVATIONS[activation](pre)


def _sigmoid_inplace(a):
    # (1 + tanh(z / 2)) / 2, several times faster than expit on float64
    a *= 0.5
    np.tanh(a, out=a)
    a *= 0.5
    a += 0.5


def lstm_sequence(x, wx, wh, bias):
    """Run an LSTM over the time axis and return the final hidden state.

    Gates are packed along the last weight axis in the order input, forget,
    candidate, output: ``wx`` is ``Cin x 4n``, ``wh`` is ``n x 4n``.  Initial
    hidden and cell states are zero.  Backward is full BPTT.
    """
    batched = _batched(x, 2, "lstm_sequence")
    xb = x.data if batched else x.data[None]
    B, T, cin = xb.shape
    if T == 0:
        raise EmptyOutputError("lstm_sequence: empty sequence")
    if wx.ndim != 2 or wx.shape[0] != cin or wx.shape[1] % 4:
        raise DimensionError(f"lstm_sequence: input weights {wx.shape} do not fit Cin={cin}")
    n = wx.shape[1] // 4
    if wh.shape != (n, 4 * n) or bias.shape != (4 * n,):
        raise DimensionError(f"lstm_sequence: recurrent weights {wh.shape} / bias {bias.shape} do not fit n={n}")

    # Feature-major layout (slot, feature, B) keeps every gate block contiguous.
    # Each step runs one matmul on the stacked [h_t; x_t] operand.  Without a
    # recorded graph a single time slot is reused.
    keep = grad_enabled() and any(t.requires_grad for t in (x, wx, wh, bias))
    slots = T if keep else 1
    xt = xb.transpose(1, 2, 0)  # (T, Cin, B) view
    w_all = np.ascontiguousarray(np.concatenate([wh.data, wx.data], axis=0).T)  # (4n, n + Cin)
    b_col = bias.data[:, None]
    gates = np.empty((slots, 4 * n, B))
    cells = np.zeros((slots + 1, n, B))
    hx = np.zeros((slots + 1, n + cin, B))  # rows [:n] hidden state, [n:] input
    tanh_c = np.empty((slots, n, B))
    cand_z = np.empty((n, B))
    for t in range(T):
        k = t if keep else 0
        hx[k, n:] = xt[t]
        a = gates[k]
        np.matmul(w_all, hx[k], out=a)
        a += b_col
        cand = a[2 * n:3 * n]
        np.tanh(cand, out=cand_z)
        _sigmoid_inplace(a)
        cand[...] = cand_z
        c = cells[k + 1]
        np.multiply(a[n:2 * n], cells[k], out=c)
        c += a[:n] * cand
        np.tanh(c, out=tanh_c[k])
        np.multiply(a[3 * n:], tanh_c[k], out=hx[k + 1, :n])
        if not keep:
            cells[0] = c
            hx[0, :n] = hx[1, :n]
    out = hx[slots, :n].T.copy()
    if not batched:
        out = out[0]

    def backward(g):
        dh = np.array((g if batched else g[None]).T)
        dc = np.zeros((n, B))
        dz = np.empty((T, 4 * n, B))
        whd = wh.data
        for t in range(T - 1, -1, -1):
            a = gates[t]
            i, f, cand, o = a[:n], a[n:2 * n], a[2 * n:3 * n], a[3 * n:]
            tc = tanh_c[t]
            dct = dc + dh * o * (1.0 - tc * tc)
            d = dz[t]
            np.multiply(dct * cand, i * (1.0 - i), out=d[:n])
            np.multiply(dct * cells[t], f * (1.0 - f), out=d[n:2 * n])
            np.multiply(dct * i, 1.0 - cand * cand, out=d[2 * n:3 * n])
            np.multiply(dh * tc, o * (1.0 - o), out=d[3 * n:])
            dc = dct * f
            dh = whd @ d
        flat = dz.transpose(2, 0, 1).reshape(B * T, 4 * n)
        gwx = xb.reshape(-1, cin).T @ flat
        gwh = hx[:T, :n].transpose(2, 0, 1).reshape(B * T, n).T @ flat
        gbias = flat.sum(axis=0)
        gx = (flat @ wx.data.T).reshape(B, T, cin)
        return (gx if batched else gx[0]), gwx, gwh, gbias

    return _make(out, (x, wx, wh, bias), "lstm", backward)


def dropout(x, p, train, rng=None):
    """Inverted dropout; the identity (same object) in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), "dropout", lambda g: (g * mask,))


def concat(tensors):
    """Concatenate along the last (feature / channel) axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one input")
    if len(tensors) == 1:
        return tensors[0]
    lead = tensors[0].shape[:-1]
    for k, t in enumerate(tensors[1:], start=1):
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat: input {k} has leading axes {t.shape[:-1]}, expected {lead}")
    extents = [t.shape[-1] for t in tensors]
    cuts = np.cumsum(extents)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return _make(out, tensors, "concat", lambda g: tuple(np.split(g, cuts, axis=-1)))


def bce_loss(pred, target, soft=False):
    """Mean binary cross-entropy with the prediction clamped to [eps, 1 - eps].

    Targets must be 0/1 unless ``soft`` is set, in which case any value in
    [0, 1] is accepted (used to build a zero output error on purpose).
    """
    t = np.asarray(target, dtype=np.float64)
    if soft:
        if np.any((t < 0) | (t > 1)) or not np.all(np.isfinite(t)):
            raise LabelError("soft targets must lie in [0, 1]")
    elif np.any((t != 0) & (t != 1)):
        raise LabelError("targets must be 0 or 1")
    p = pred.data
    try:
        t = np.broadcast_to(t.reshape(p.shape) if t.size == p.size else t, p.shape)
    except ValueError as exc:
        raise DimensionError(f"bce_loss: target shape {t.shape} vs prediction {p.shape}") from exc
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    loss = -np.mean(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    inside = (p >= BCE_EPS) & (p <= 1.0 - BCE_EPS)
    _record_branch("bce", inside)

    def backward(g):
        return (g * inside * (-t / pc + (1.0 - t) / (1.0 - pc)) / n,)

    return _make(loss, (pred,), "bce", backward)
