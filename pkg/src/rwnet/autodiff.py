"""Small reverse-mode automatic differentiation engine over numpy arrays.

Every value is a :class:`Tensor` holding a float64 array.  Operations on
tensors that require gradients record their parents and a backward
closure; :meth:`Tensor.backward` walks the recorded graph in reverse
topological order and accumulates gradients into the leaves.

Broadcasting follows numpy rules for the elementwise primitives and for
``matmul``; gradients are summed back to each operand's shape.
"""

import contextlib
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, StateError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

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
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise InvalidInputError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if not self.requires_grad:
            raise StateError("backward() on a tensor with no recorded computation")
        if grad is None:
            if self.data.size != 1:
                raise InvalidInputError(
                    f"backward() without an explicit grad needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise InvalidInputError(f"grad shape {grad.shape} != tensor shape {self.shape}")

        order = computation_record(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_multiply(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def computation_record(output):
    """Nodes reachable from ``output`` in topological order (inputs first)."""
    order = []
    seen = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(data, parents, backward, op):
    """Wrap a forward result, recording ``backward`` when any parent needs grad.

    ``backward`` maps the output gradient to a tuple with one entry (array
    or None) per parent.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, name):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidInputError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def _norm_axis(axis, ndim, name):
    if not -ndim <= axis < ndim:
        raise InvalidInputError(f"{name}: axis {axis} out of range for {ndim}-d input")
    return axis % ndim


# -- elementwise ----------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return apply_op(
        a.data + b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        ),
        "add",
    )


def subtract(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "subtract")
    return apply_op(
        a.data - b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        ),
        "subtract",
    )


def hadamard(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "hadamard")
    return apply_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
        "hadamard",
    )


def scalar_multiply(a, c):
    a = as_tensor(a)
    c = float(c)
    return apply_op(a.data * c, (a,), lambda g: (g * c,), "scalar_multiply")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return apply_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def clip_values(x, lo, hi):
    """Clip to [lo, hi]; gradient is 1 strictly inside and 0 elsewhere."""
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return apply_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip_values")


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidInputError("matmul: operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidInputError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise InvalidInputError(f"matmul: {exc}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return apply_op(out, (a, b), backward, "matmul")


# -- reductions -------------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is not None:
        axis = _norm_axis(axis, x.ndim, "sum")
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[_norm_axis(axis, x.ndim, "mean")]
    return scalar_multiply(sum_(x, axis, keepdims), 1.0 / n)


def max_over(x, axis):
    """Maximum along ``axis``; gradient goes to the first arg-max."""
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim, "max_over")
    out = x.data.max(axis=axis)

    def backward(g):
        # scan the slices in order; the first one equal to the max takes g
        xs = np.moveaxis(x.data, axis, 0)
        full = np.empty(xs.shape)
        pending = np.ones(out.shape, dtype=bool)
        for k in range(xs.shape[0]):
            hit = pending & (xs[k] == out)
            np.copyto(full[k], np.where(hit, g, 0.0))
            pending &= ~hit
        return (np.moveaxis(full, 0, axis),)

    return apply_op(out, (x,), backward, "max_over")


def softmax(x, axis=-1):
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return apply_op(y, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return apply_op(y, (x,), backward, "log_softmax")


def l1_norm(x):
    x = as_tensor(x)
    return apply_op(np.abs(x.data).sum(), (x,), lambda g: (g * np.sign(x.data),), "l1_norm")


def squared_l2_distance(a, b, axis=None):
    """Sum of squared differences, over all elements or along ``axis``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"squared_l2_distance: shapes differ, {a.shape} vs {b.shape}")
    if axis is not None:
        axis = _norm_axis(axis, a.ndim, "squared_l2_distance")
    diff = a.data - b.data
    out = (diff * diff).sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        d = 2.0 * diff * g
        return (d if a.requires_grad else None, -d if b.requires_grad else None)

    return apply_op(out, (a, b), backward, "squared_l2_distance")


def negative_log_likelihood(log_probs, labels):
    """Mean of ``-log_probs[i, labels[i]]`` over rows."""
    log_probs = as_tensor(log_probs)
    labels = np.asarray(labels, dtype=np.int64)
    if log_probs.ndim != 2 or labels.shape != (log_probs.shape[0],):
        raise InvalidInputError(
            f"negative_log_likelihood: need (M, N) scores and M labels, "
            f"got {log_probs.shape} and {labels.shape}"
        )
    m, n = log_probs.shape
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise InvalidInputError("negative_log_likelihood: label out of range")
    rows = np.arange(m)
    out = -log_probs.data[rows, labels].sum() / m

    def backward(g):
        full = np.zeros(log_probs.shape)
        full[rows, labels] = -g / m
        return (full,)

    return apply_op(out, (log_probs,), backward, "negative_log_likelihood")


# -- shape ------------------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise InvalidInputError(f"reshape: {exc}") from None
    return apply_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidInputError("concat: no inputs")
    axis = _norm_axis(axis, tensors[0].ndim, "concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise InvalidInputError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op(out, tuple(tensors), backward, "concat")


def slice_(x, index):
    x = as_tensor(x)
    try:
        out = x.data[index]
    except (IndexError, TypeError) as exc:
        raise InvalidInputError(f"slice: {exc}") from None
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice, type(Ellipsis), type(None))) for i in parts)

    def backward(g):
        full = np.zeros(x.shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return apply_op(np.array(out, copy=True), (x,), backward, "slice")


# -- optimisation -------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.

    ``params`` is a sequence of Tensors updated in place (their ``data`` is
    rebound, never mutated); ``grads`` the matching arrays.  Returns the new
    state; the old one is left untouched.
    """
    params = list(params)
    grads = [np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64) for p, g in zip(params, grads)]
    if len(grads) != len(params):
        raise InvalidInputError("adam_step: need one gradient per parameter")
    m_prev = state.m or [np.zeros(p.shape) for p in params]
    v_prev = state.v or [np.zeros(p.shape) for p in params]
    if len(m_prev) != len(params) or len(v_prev) != len(params):
        raise InvalidInputError("adam_step: optimizer state does not match parameter count")
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_m, new_v = [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        if g.shape != p.shape or m.shape != p.shape or v.shape != p.shape:
            raise InvalidInputError(f"adam_step: shape mismatch for parameter of shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m.append(m)
        new_v.append(v)
    return AdamState(step=t, m=new_m, v=new_v)


class Adam:
    """Stateful wrapper around :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.state = adam_step(
            self.params, [p.grad for p in self.params], self.state,
            self.lr, self.beta1, self.beta2, self.eps,
        )


# -- verification -------------------------------------------------------------


def grad_check(f, x, step=1e-5):
    """Max relative error between backprop and central differences.

    ``f`` maps a Tensor to a scalar Tensor.  The error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.size != 1:
        raise InvalidInputError(f"grad_check: f must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += step
        xm = flat.copy()
        xm[i] -= step
        with no_grad():
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- checkpoints ----------------------------------------------------------------

_MAGIC = b"RWNP"
_VERSION = 1


def _atomic_write(path, payload):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def encode_parameters(params):
    """Serialise an ordered name -> array mapping to the binary container.

    Layout (little-endian): magic, u32 version, u32 count, then per entry
    u32 name length, utf-8 name, u32 ndim, u64 dims, float64 data.
    Returns (bytes, manifest entries).
    """
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(params))]
    entries = []
    offset = sum(len(c) for c in chunks)
    for name, arr in params.items():
        arr = np.require(arr, dtype="<f8", requirements="C")
        raw_name = name.encode("utf-8")
        header = struct.pack("<I", len(raw_name)) + raw_name
        header += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset + len(header),
            "nbytes": len(body),
        })
        chunks += [header, body]
        offset += len(header) + len(body)
    return b"".join(chunks), entries


def decode_parameters(payload):
    if payload[:4] != _MAGIC:
        raise InvalidInputError("not a parameter container (bad magic)")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != _VERSION:
        raise InvalidInputError(f"unsupported parameter container version {version}")
    pos = 12
    params = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        name = payload[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", payload, pos)
        pos += 8 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(payload):
        raise InvalidInputError("trailing bytes in parameter container")
    return params


def save_parameters(prefix, params, extra=None):
    """Write ``<prefix>.bin`` and a ``<prefix>.json`` manifest."""
    payload, entries = encode_parameters(params)
    manifest = {"format": "rwnet-params", "version": _VERSION, "entries": entries}
    if extra:
        manifest.update(extra)
    _atomic_write(f"{prefix}.bin", payload)
    _atomic_write(f"{prefix}.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def load_parameters(prefix):
    with open(f"{prefix}.bin", "rb") as fh:
        params = decode_parameters(fh.read())
    with open(f"{prefix}.json") as fh:
        manifest = json.load(fh)
    names = [e["name"] for e in manifest.get("entries", [])]
    if names != list(params):
        raise InvalidInputError(f"manifest {prefix}.json does not match {prefix}.bin")
    return params, manifest
