"""Reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Value` wraps an ndarray and remembers the values it was computed
from plus a vector-Jacobian-product closure; :func:`backward` replays the
implicit tape in reverse creation order. Everything is float64 and
single-threaded-deterministic: identical inputs build identical tapes and
produce bitwise-identical gradients.

The optimizer state and checkpoint format live here too, since both operate
on the same named-parameter dictionaries. Checkpoint byte layout (version 1,
all integers little-endian):

    magic  b"SPCK"
    u32    version (1)
    u32    parameter count
    per parameter, sorted by name:
        u16      name length, then that many UTF-8 bytes
        u8       ndim
        u32[ndim] dims
        f64[prod(dims)] row-major little-endian data
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Incompatible operand shapes; raised when the graph is built."""


_counter = itertools.count()


class Value:
    """Node in the autodiff graph holding float64 data and (after backward) grad."""

    __slots__ = ("data", "grad", "_parents", "_vjp", "_order", "name")

    def __init__(self, data, parents=(), vjp=None, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Value, ...] = tuple(parents)
        self._vjp = vjp
        self._order = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Value(shape={self.data.shape}{tag})"

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

    def __getitem__(self, key):
        return slice_(self, key)


def wrap(x) -> Value:
    """Lift plain data into a constant (leaf) Value."""
    return x if isinstance(x, Value) else Value(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(a: Value, b: Value, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


def add(a, b) -> Value:
    a, b = wrap(a), wrap(b)
    _broadcast_check(a, b, "add")
    return Value(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        "add",
    )


def sub(a, b) -> Value:
    a, b = wrap(a), wrap(b)
    _broadcast_check(a, b, "sub")
    return Value(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
        "sub",
    )


def mul(a, b) -> Value:
    a, b = wrap(a), wrap(b)
    _broadcast_check(a, b, "mul")
    return Value(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
        "mul",
    )


def matmul(a, b) -> Value:
    a, b = wrap(a), wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} are incompatible")
    return Value(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def transpose(a) -> Value:
    a = wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: need a 2-d value, got shape {a.data.shape}")
    return Value(a.data.T, (a,), lambda g: (g.T,), "transpose")


def exp(a) -> Value:
    a = wrap(a)
    out = np.exp(a.data)
    return Value(out, (a,), lambda g: (g * out,), "exp")


def sigmoid(a) -> Value:
    a = wrap(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Value(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Value:
    a = wrap(a)
    mask = a.data > 0
    return Value(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def softmax(a, axis: int = -1) -> Value:
    a = wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Value(out, (a,), vjp, "softmax")


def layer_norm(x, gamma, b, eps: float = 1e-5) -> Value:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, b = wrap(x), wrap(gamma), wrap(b)
    n = x.data.shape[-1]
    if gamma.data.shape != (n,) or b.data.shape != (n,):
        raise ShapeError(
            f"layer_norm: gamma/bias must have shape ({n},), got {gamma.data.shape} and {b.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return Value(xhat * gamma.data + b.data, (x, gamma, b), vjp, "layer_norm")


def conv2d(x, w, b) -> Value:
    """3x3 stride-1 same-padding convolution: (H, W, Cin) -> (H, W, Cout)."""
    x, w, b = wrap(x), wrap(w), wrap(b)
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d: input must be (H, W, C), got {x.data.shape}")
    if w.data.ndim != 4 or w.data.shape[:2] != (3, 3) or w.data.shape[2] != x.data.shape[2]:
        raise ShapeError(f"conv2d: weights {w.data.shape} do not match input {x.data.shape}")
    if b.data.shape != (w.data.shape[3],):
        raise ShapeError(f"conv2d: bias {b.data.shape} does not match weights {w.data.shape}")
    h, wd, cin = x.data.shape
    cout = w.data.shape[3]
    padded = np.zeros((h + 2, wd + 2, cin))
    padded[1 : h + 1, 1 : wd + 1] = x.data
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    col = windows.transpose(0, 1, 3, 4, 2).reshape(h * wd, 9 * cin)
    wmat = w.data.reshape(9 * cin, cout)
    out = (col @ wmat + b.data).reshape(h, wd, cout)

    def vjp(g):
        gflat = g.reshape(h * wd, cout)
        gw = (col.T @ gflat).reshape(3, 3, cin, cout)
        gb = gflat.sum(axis=0)
        gcol = (gflat @ wmat.T).reshape(h, wd, 3, 3, cin)
        gpad = np.zeros_like(padded)
        for ky in range(3):
            for kx in range(3):
                gpad[ky : ky + h, kx : kx + wd] += gcol[:, :, ky, kx, :]
        return (gpad[1 : h + 1, 1 : wd + 1], gw, gb)

    return Value(out, (x, w, b), vjp, "conv2d")


def concat(values, axis: int = 0) -> Value:
    vals = [wrap(v) for v in values]
    if not vals:
        raise ShapeError("concat: need at least one value")
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[v.data.shape for v in vals]} do not align on axis {axis}")
    sizes = [v.data.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Value(out, tuple(vals), vjp, "concat")


def reshape(a, shape) -> Value:
    a = wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    return Value(out, (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def slice_(a, key) -> Value:
    a = wrap(a)
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def vjp(g):
        gx = np.zeros_like(a.data)
        gx[key] = g
        return (gx,)

    return Value(out, (a,), vjp, "slice")


def gather_rows(a, idx) -> Value:
    """Select rows: out[i] = a[idx[i]]; backward scatter-adds (duplicates sum)."""
    a = wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-d, got shape {idx.shape}")

    def vjp(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Value(a.data[idx], (a,), vjp, "gather_rows")


def scatter_rows(a, idx, n_rows: int) -> Value:
    """Place rows into an (n_rows, ...) zero array; duplicates add."""
    a = wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (a.data.shape[0],):
        raise ShapeError(f"scatter_rows: index shape {idx.shape} must be ({a.data.shape[0]},)")
    out = np.zeros((n_rows,) + a.data.shape[1:])
    np.add.at(out, idx, a.data)
    return Value(out, (a,), lambda g: (g[idx],), "scatter_rows")


def take_per_row(a, idx) -> Value:
    """out[i] = a[i, idx[i]] for a 2-d value; backward routes into the taken slots."""
    a = wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or idx.shape != (a.data.shape[0],):
        raise ShapeError(f"take_per_row: value {a.data.shape} with index {idx.shape}")
    rows = np.arange(a.data.shape[0])

    def vjp(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return Value(a.data[rows, idx], (a,), vjp, "take_per_row")


def sum_(a, axis=None) -> Value:
    a = wrap(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return Value(out, (a,), vjp, "sum")


def mean(a, axis=None) -> Value:
    a = wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape) / n,)

    return Value(out, (a,), vjp, "mean")


def mse(a, b) -> Value:
    """Mean squared error, a scalar Value."""
    a, b = wrap(a), wrap(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse: shapes {a.data.shape} and {b.data.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        scaled = (2.0 / n) * g * diff
        return (scaled, -scaled)

    return Value(np.mean(diff * diff), (a, b), vjp, "mse")


def absolute(a) -> Value:
    """|a| composed from relu(a) + relu(-a); zero gets zero gradient."""
    a = wrap(a)
    return add(relu(a), relu(mul(a, -1.0)))


def custom_node(inputs, forward, vjp, name: str = "custom") -> Value:
    """Splice an externally differentiated computation into the tape.

    ``forward`` maps the inputs' ndarrays to an output ndarray; ``vjp`` maps
    the output cotangent to one cotangent per input (or None for no
    gradient). Cotangent shapes are validated when backward reaches the node.
    """
    vals = [wrap(v) for v in inputs]
    out = forward(*[v.data for v in vals])

    def checked_vjp(g):
        grads = vjp(g)
        if len(grads) != len(vals):
            raise ShapeError(f"custom node {name!r}: got {len(grads)} gradients for {len(vals)} inputs")
        for v, gr in zip(vals, grads):
            if gr is not None and np.shape(gr) != v.data.shape:
                raise ShapeError(
                    f"custom node {name!r}: gradient shape {np.shape(gr)} != input shape {v.data.shape}"
                )
        return grads

    return Value(out, tuple(vals), checked_vjp, name)


def backward(root: Value) -> None:
    """Accumulate gradients of a scalar root into every reachable Value."""
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
    nodes: list[Value] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda v: v._order, reverse=True)

    root.grad = np.ones_like(root.data)
    for node in nodes:
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != parent.data.shape:
                raise ShapeError(
                    f"node {node.name!r}: gradient shape {g.shape} != parent shape {parent.data.shape}"
                )
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# Adam optimizer


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; parameters without gradients are untouched."""
    t = state.step + 1
    new_params: dict = {}
    new_m: dict = dict(state.m)
    new_v: dict = dict(state.v)
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = theta
            continue
        if np.shape(g) != np.shape(theta):
            raise ShapeError(f"adam_step: gradient {np.shape(g)} != parameter {np.shape(theta)} for {name!r}")
        m = new_m.get(name)
        v = new_v.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(t, new_m, new_v)


class Adam:
    """In-place Adam over a dict of named parameter Values."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        raw = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        updated, self.state = adam_step(
            raw, grads, self.state, self.lr, self.beta1, self.beta2, self.eps
        )
        for k, p in self.params.items():
            p.data = updated[k]


# ---------------------------------------------------------------------------
# Checkpoint I/O (format documented in the module docstring)

_MAGIC = b"SPCK"
_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save_checkpoint(path, params: dict) -> None:
    """Write named float64 arrays; accepts Values or ndarrays."""
    items = []
    for name in sorted(params):
        data = params[name].data if isinstance(params[name], Value) else params[name]
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d.
        items.append((name, np.asarray(data, dtype=np.float64)))
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(items)))
        for name, data in items:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.astype("<f8").tobytes())


def load_checkpoint(path) -> dict:
    """Read a checkpoint back into a name -> float64 ndarray dict."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    params: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        params[name] = data.astype(np.float64)
    if offset != len(blob):
        raise CheckpointError("trailing bytes after last parameter")
    return params
