"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them. ``backward`` orders
the recorded graph topologically and visits each node once.

Shapes must match exactly for binary ops; the only broadcasts are
scalar scaling and the explicit row-bias op :func:`add_bias`.
"""

from __future__ import annotations

import io

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    """Raised when a forward op produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
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

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root):
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, True, tuple(parents), backward, op)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """``a @ b`` for 2-D operands or batched operands with equal leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: incompatible ranks {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _make(ad @ bd, (a, b), backward, "matmul")


def spmm(mat, x):
    """Multiply a constant scipy sparse matrix into a 2-D tensor.

    Used for row gathers, scatter-adds and interpolation with fixed weights.
    """
    x = as_tensor(x)
    if x.ndim != 2 or mat.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: {mat.shape} @ {x.shape}")
    mat = sp.csr_matrix(mat)
    matT = mat.T.tocsr()

    def backward(g):
        return (np.asarray(matT @ g),)

    return _make(np.asarray(mat @ x.data), (x,), backward, "spmm")


def gather_rows(x, rows):
    """Rows of ``x`` selected by ``rows``; entries of -1 yield zero rows."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    present = rows >= 0
    idx = np.nonzero(present)[0]
    mat = sp.csr_matrix(
        (np.ones(len(idx)), (idx, rows[present])), shape=(len(rows), x.shape[0])
    )
    return spmm(mat, x)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x, b):
    """``x[..., C] + b[C]`` (row broadcast of a bias vector)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} + {b.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def elementwise(kind, *args):
    """Dispatch by name; binary kinds take two tensors, ``scale`` a tensor and a float."""
    table = {
        "relu": relu, "tanh": tanh, "sigmoid": sigmoid, "exp": exp,
        "add": add, "mul": mul, "scale": scale,
    }
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](*args)


# ---------------------------------------------------------------- reductions / shape

def sum(x, axis=None):  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = axis % x.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _make(x.data.sum(axis=ax), (x,), backward, "sum")


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


# ---------------------------------------------------------------- composite ops

def softmax_lastdim(x, mask=None):
    """Softmax over the last axis; ``mask`` (bool, True = excluded) acts as -inf logits."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, -np.inf, z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    C = x.shape[-1]
    if C < 2:
        raise ShapeError("layer_norm needs at least two channels")
    if gain.shape != (C,) or bias.shape != (C,):
        raise ShapeError(f"layer_norm: affine params must have shape ({C},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets.

    Evaluated as ``max(z, 0) - z*y + log1p(exp(-|z|))``.
    """
    z = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if z.data.size == 0:
        raise ZeroDivisionError("bce_with_logits over an empty set")
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: {z.shape} vs targets {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("targets must be 0 or 1")
    zd = z.data
    n = zd.size
    loss = np.sum(np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))) / n
    p = _sigmoid(zd)
    return _make(np.array(loss), (z,), lambda g: (g * (p - y) / n,), "bce_with_logits")


def linear(x, w, b=None):
    """``x[..., Cin] @ w[Cin, Cout] (+ b)`` for inputs of any rank."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    out = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        out = add_bias(out, b)
    return reshape(out, lead + (w.shape[-1],))


# ---------------------------------------------------------------- optimizer

class Adam:
    """Bias-corrected Adam over a ``name -> Tensor`` mapping."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** t)
            vhat = self.v[k] / (1 - b2 ** t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(params, grads, state):
    """Functional form: update ``params`` (dict of arrays) in a copy, advancing ``state``.

    ``state`` is a dict with keys lr, beta1, beta2, eps, step, m, v.
    """
    state = dict(state)
    t = state["step"] + 1
    b1, b2, eps, lr = state["beta1"], state["beta2"], state["eps"], state["lr"]
    m = {k: b1 * state["m"].get(k, 0.0) + (1 - b1) * grads[k] for k in params}
    v = {k: b2 * state["v"].get(k, 0.0) + (1 - b2) * grads[k] ** 2 for k in params}
    new = {
        k: params[k] - lr * (m[k] / (1 - b1 ** t)) / (np.sqrt(v[k] / (1 - b2 ** t)) + eps)
        for k in params
    }
    state.update(step=t, m=m, v=v)
    return new, state


# ---------------------------------------------------------------- verification

def grad_check(f, x, h=1e-5):
    """Max relative error between central differences and the tape gradient.

    ``f`` maps a Tensor to a scalar Tensor. The error per coordinate is
    ``|g_fd - g_ad| / max(1, |g_fd|, |g_ad|)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    out.backward()
    g_ad = xt.grad if xt.grad is not None else np.zeros_like(x0)
    g_fd = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gf = g_fd.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        gf[i] = (fp - fm) / (2 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(g_fd), np.abs(g_ad)))
    return float(np.max(np.abs(g_fd - g_ad) / denom)) if x0.size else 0.0


# ---------------------------------------------------------------- serialization

def write_params(stream, params):
    """Write ``name -> array`` as header line ``name d0 d1 ...`` plus raw little-endian f64."""
    for name in sorted(params):
        arr = np.ascontiguousarray(np.asarray(params[name], dtype="<f8"))
        if any(c.isspace() for c in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        header = " ".join([name] + [str(d) for d in arr.shape])
        stream.write(header.encode("utf-8") + b"\n")
        stream.write(arr.tobytes())


def read_params(stream, count):
    params = {}
    for _ in range(count):
        line = stream.readline()
        if not line.endswith(b"\n"):
            raise ValueError("truncated parameter header")
        name, *dims = line.decode("utf-8").split()
        shape = tuple(int(d) for d in dims)
        n = int(np.prod(shape)) if shape else 1
        raw = stream.read(8 * n)
        if len(raw) != 8 * n:
            raise ValueError(f"truncated parameter blob for {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return params


def params_to_bytes(params):
    buf = io.BytesIO()
    write_params(buf, params)
    return buf.getvalue()
