"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 for gradient-check
work) and record the operations applied to them. Calling ``backward()`` on a
scalar result walks the recorded graph in reverse topological order and
accumulates gradients into every tensor created with ``requires_grad=True``.

Only the operations needed by the acoustic model live here: matmul,
pointwise ops, softmax, layer norm, dropout, 1-D convolution, a GRU cell,
and the loss primitives.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ValueError):
    """Non-finite or degenerate numeric input."""


class ParameterError(ValueError):
    """An operation parameter is outside its valid range."""


class UsageError(RuntimeError):
    """The API was called in an unsupported way (e.g. backward on a matrix)."""


class Tensor:
    """A dense array node in the autodiff graph.

    data is row-major and immutable by convention once the tensor has been
    consumed by an op; parameter tensors are mutated in place only by the
    optimizer, between graph constructions.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None,
                 _parents=(), _backward=None):
        if dtype is None:
            dtype = getattr(data, "dtype", None)
            if dtype is None or dtype.kind != "f":
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self):
        """Reverse-mode sweep from a scalar root.

        Populates ``grad`` on every reachable tensor that requires it;
        accumulation is additive across multiple uses of the same tensor.
        """
        if self.data.size != 1:
            raise UsageError(
                f"backward() requires a scalar root, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _result(data, parents, backward_fn):
    if _needs_grad(*parents):
        return Tensor(data, requires_grad=True, _parents=parents,
                      _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum gradient over axes that were broadcast in the forward pass."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def constant(data, dtype=None):
    return Tensor(np.asarray(data), dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(out, (a, b), bwd)


def _binary(a, b, fwd, da, db):
    try:
        out = fwd(a.data, b.data)
    except ValueError as e:
        raise DimensionError(str(e)) from e
    if out.shape != np.broadcast_shapes(a.data.shape, b.data.shape):
        raise DimensionError(f"shapes {a.data.shape} and {b.data.shape}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(da(g, a.data, b.data), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(db(g, a.data, b.data), b.data.shape))

    return _result(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.multiply,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * s

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * s)

    return _result(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _result(out, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - out * out))

    return _result(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * out * (1.0 - out))

    return _result(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * out)

    return _result(out, (x,), bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last dimension, stabilized by max subtraction."""
    if x.data.shape[-1] == 0:
        raise DimensionError("softmax over empty last dimension")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            x._accumulate(out * (g - dot))

    return _result(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-dim slice to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if d == 1 and eps == 0.0:
        raise NumericError("layer_norm over a single element with eps=0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        gy = g * gain.data
        if x.requires_grad:
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gy - m1 - xhat * m2))
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))

    return _result(out, (x, gain, bias), bwd)


def dropout(x: Tensor, p: float, active: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p) so the mean is preserved."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not active or p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    mask = mask.astype(x.data.dtype)
    out = x.data * mask

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _result(out, (x,), bwd)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded temporal convolution.

    x is T x C_in, kernels is W x C_in x C_out with odd width W; the output
    keeps the temporal length T.
    """
    w = kernels.data.shape[0]
    if w % 2 == 0:
        raise ParameterError(f"conv1d kernel width must be odd, got {w}")
    if x.data.ndim != 2 or kernels.data.ndim != 3 \
            or x.data.shape[1] != kernels.data.shape[1]:
        raise DimensionError(
            f"conv1d shapes incompatible: {x.data.shape} vs {kernels.data.shape}")
    t, c_in = x.data.shape
    c_out = kernels.data.shape[2]
    half = w // 2
    xpad = np.zeros((t + 2 * half, c_in), dtype=x.data.dtype)
    xpad[half:half + t] = x.data
    out = np.zeros((t, c_out), dtype=x.data.dtype)
    for i in range(w):
        out += xpad[i:i + t] @ kernels.data[i]
    if bias is not None:
        out = out + bias.data

    parents = (x, kernels) if bias is None else (x, kernels, bias)

    def bwd(g):
        if x.requires_grad:
            gpad = np.zeros_like(xpad)
            for i in range(w):
                gpad[i:i + t] += g @ kernels.data[i].T
            x._accumulate(gpad[half:half + t])
        if kernels.requires_grad:
            gk = np.empty_like(kernels.data)
            for i in range(w):
                gk[i] = xpad[i:i + t].T @ g
            kernels._accumulate(gk)
        if bias is not None and bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))

    return _result(out, parents, bwd)


class GRUWeights:
    """Parameter bundle for one GRU cell: gates z, r and candidate n."""

    def __init__(self, w_z, u_z, b_z, w_r, u_r, b_r, w_n, u_n, b_n):
        self.w_z, self.u_z, self.b_z = w_z, u_z, b_z
        self.w_r, self.u_r, self.b_r = w_r, u_r, b_r
        self.w_n, self.u_n, self.b_n = w_n, u_n, b_n

    def tensors(self):
        return {"w_z": self.w_z, "u_z": self.u_z, "b_z": self.b_z,
                "w_r": self.w_r, "u_r": self.u_r, "b_r": self.b_r,
                "w_n": self.w_n, "u_n": self.u_n, "b_n": self.b_n}


def gru_cell(x: Tensor, h: Tensor, w: GRUWeights) -> Tensor:
    """One GRU step: h' = z * h + (1 - z) * n.

    A saturated update gate (large positive bias) therefore keeps the
    previous state. Built from primitives so gradients come for free.
    """
    if x.data.shape[0] != h.data.shape[0]:
        raise DimensionError(
            f"gru_cell batch mismatch: {x.data.shape} vs {h.data.shape}")
    if x.data.shape[1] != w.w_z.data.shape[0] or h.data.shape[1] != w.u_z.data.shape[0]:
        raise DimensionError(
            f"gru_cell width mismatch: x {x.data.shape}, h {h.data.shape}, "
            f"w_z {w.w_z.data.shape}, u_z {w.u_z.data.shape}")
    z = sigmoid(add(add(matmul(x, w.w_z), matmul(h, w.u_z)), w.b_z))
    r = sigmoid(add(add(matmul(x, w.w_r), matmul(h, w.u_r)), w.b_r))
    n = tanh(add(add(matmul(x, w.w_n), matmul(mul(r, h), w.u_n)), w.b_n))
    one_minus_z = sub(constant(np.ones_like(z.data)), z)
    return add(mul(z, h), mul(one_minus_z, n))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference. Subgradient at zero difference is 0."""
    if pred.data.shape != target.data.shape:
        raise DimensionError(
            f"l1_loss shapes differ: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    out = np.abs(diff).mean(dtype=pred.data.dtype)

    def bwd(g):
        s = np.sign(diff) / diff.size
        if pred.requires_grad:
            pred._accumulate(g * s)
        if target.requires_grad:
            target._accumulate(-g * s)

    return _result(np.asarray(out, dtype=pred.data.dtype), (pred, target), bwd)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy computed in a numerically stable form."""
    if logits.data.shape != targets.data.shape:
        raise DimensionError(
            f"bce shapes differ: {logits.data.shape} vs {targets.data.shape}")
    x, t = logits.data, targets.data
    out = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean()

    def bwd(g):
        if logits.requires_grad:
            s = 1.0 / (1.0 + np.exp(-x))
            logits._accumulate(g * (s - t) / x.size)

    return _result(np.asarray(out, dtype=x.dtype), (logits, targets), bwd)


def tsum(x: Tensor) -> Tensor:
    out = x.data.sum(dtype=x.data.dtype)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(g)))

    return _result(np.asarray(out, dtype=x.data.dtype), (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.data.shape}")
    out = x.data.T.copy()

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g.T)

    return _result(out, (x,), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.data.shape[-1]:
        raise DimensionError(
            f"slice_cols [{start}:{stop}] out of range for {x.data.shape}")
    out = x.data[..., start:stop].copy()

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[..., start:stop] = g
            x._accumulate(full)

    return _result(out, (x,), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.data.shape[-1] for p in parts]

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                p._accumulate(g[..., off:off + w])
            off += w

    return _result(out, tuple(parts), bwd)


def gather_rows(x: Tensor, ids) -> Tensor:
    """Row lookup (embedding gather) with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= x.data.shape[0]):
        raise LookupError(
            f"gather_rows id out of range for table of {x.data.shape[0]} rows")
    out = x.data[ids]

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, ids, g)
            x._accumulate(full)

    return _result(out, (x,), bwd)


class Optimizer:
    """SGD or Adam over a named parameter dict. Gradients are zeroed after
    each step."""

    def __init__(self, kind: str, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer kind {kind!r}")
        if learning_rate < 0:
            raise ParameterError("learning rate must be non-negative")
        self.kind = kind
        self.learning_rate = float(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict[str, Tensor]):
        for name, p in params.items():
            if p.grad is None:
                raise UsageError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        for name, p in params.items():
            g = p.grad
            if self.kind == "sgd":
                p.data -= self.learning_rate * g
            else:
                if name not in self.m:
                    self.m[name] = np.zeros_like(p.data)
                    self.v[name] = np.zeros_like(p.data)
                m = self.m[name]
                v = self.v[name]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                mhat = m / (1 - self.beta1 ** self.step_count)
                vhat = v / (1 - self.beta2 ** self.step_count)
                p.data -= self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)
            p.zero_grad()

    def state_tensors(self):
        """Moment buffers for checkpointing, keyed like the parameters."""
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out


def zero_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.zero_grad()
