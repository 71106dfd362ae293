"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Covers exactly the layer vocabulary the rest of the package needs:
convolution ('same' zero or cyclic padding, stride), dense matmul, tanh,
relu, batch normalization, residual add, pooling, channel permutation,
space-to-depth, concat/split and cross-entropy. Every op records a VJP
closure on the output tensor; ``Tensor.backward`` replays them in reverse
topological order. Gradients are only allocated for tensors that require
them, so frozen parameters never receive gradient buffers.
"""

from __future__ import annotations

import numpy as np


class NumericOverflowError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Reverse sweep from this node; visits each node exactly once."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.broadcast_to(grad, self.data.shape))
        for node in reversed(topo):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, name=""):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(p for p in parents if p.requires_grad),
                  _vjp=vjp if req else None, name=name)


def check_finite(t, where=""):
    if not np.all(np.isfinite(t.data)):
        raise NumericOverflowError(f"non-finite values after {where or 'op'}")
    return t


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(out_data, (a, b), vjp, "add")


def mul(a, b):
    """Elementwise product; b may be a broadcastable constant array."""
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"mul: {a.shape} vs {b.shape}")
        out_data = a.data * b.data

        def vjp(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

        return _make(out_data, (a, b), vjp, "mul")
    barr = np.asarray(b, dtype=np.float64)
    out_data = a.data * barr

    def vjp_const(g):
        if a.requires_grad:
            ga = g * barr
            if ga.shape != a.shape:
                ga = _reduce_to_shape(ga, a.shape)
            a._accumulate(ga)

    return _make(out_data, (a,), vjp_const, "mul")


def _reduce_to_shape(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), vjp, "tanh")


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(a.data * mask, (a,), vjp, "relu")


def identity(a):
    return _as_tensor(a)


ACTIVATIONS = {"tanh": tanh, "relu": relu, "identity": identity}


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), vjp, "reshape")


def mean(a, axis=None):
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def vjp(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.full(a.shape, g / count))
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape) / count)

    return _make(out_data, (a,), vjp, "mean")


def sum_(a, axis=None):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis)

    def vjp(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.full(a.shape, g))
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(out_data, (a,), vjp, "sum")


def concat_channels(parts):
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _make(out_data, tuple(parts), vjp, "concat")


def slice_channels(a, lo, hi):
    a = _as_tensor(a)

    def vjp(g):
        if a.requires_grad:
            buf = np.zeros(a.shape)
            buf[:, lo:hi] = g
            a._accumulate(buf)

    return _make(a.data[:, lo:hi], (a,), vjp, "slice")


def permute_channels(a, perm):
    a = _as_tensor(a)
    perm = np.asarray(perm)
    inv = np.argsort(perm)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g[:, inv])

    return _make(a.data[:, perm], (a,), vjp, "permute")


def space_to_depth(a):
    """(b, c, 2n, 2m) -> (b, 4c, n, m); an exact permutation of coordinates."""
    a = _as_tensor(a)
    b, c, n, m = a.shape
    if n % 2 or m % 2:
        raise DimensionError(f"space_to_depth needs even spatial dims, got {a.shape}")
    out_data = (a.data.reshape(b, c, n // 2, 2, m // 2, 2)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(b, 4 * c, n // 2, m // 2))

    def vjp(g):
        if a.requires_grad:
            gg = (g.reshape(b, c, 2, 2, n // 2, m // 2)
                  .transpose(0, 1, 4, 2, 5, 3)
                  .reshape(b, c, n, m))
            a._accumulate(gg)

    return _make(out_data, (a,), vjp, "space_to_depth")


def global_avg_pool(a):
    """(b, c, h, w) -> (b, c)."""
    a = _as_tensor(a)
    h, w = a.shape[2], a.shape[3]
    out_data = a.data.mean(axis=(2, 3))

    def vjp(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g[:, :, None, None], a.shape) / (h * w))

    return _make(out_data, (a,), vjp, "gap")


def avg_pool2(a):
    """2x2 average pooling with stride 2."""
    a = _as_tensor(a)
    b, c, n, m = a.shape
    if n % 2 or m % 2:
        raise DimensionError("avg_pool2 needs even spatial dims")
    out_data = a.data.reshape(b, c, n // 2, 2, m // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        if a.requires_grad:
            gg = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
            a._accumulate(gg)

    return _make(out_data, (a,), vjp, "avg_pool2")


# ---------------------------------------------------------------------------
# dense / conv


def matmul(a, w):
    """a: (b, d_in), w: (d_out, d_in) -> (b, d_out)."""
    a, w = _as_tensor(a), _as_tensor(w)
    if a.shape[-1] != w.shape[1]:
        raise DimensionError(f"matmul: {a.shape} x {w.shape}")
    out_data = a.data @ w.data.T

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ a.data)

    return _make(out_data, (a, w), vjp, "matmul")


def add_bias(a, bias):
    """Broadcast bias over the trailing-channel layout (b, c, ...) or (b, c)."""
    a, bias = _as_tensor(a), _as_tensor(bias)
    if a.ndim == 2:
        out_data = a.data + bias.data[None, :]
    else:
        out_data = a.data + bias.data[None, :, None, None]

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g)
        if bias.requires_grad:
            axes = (0,) if a.ndim == 2 else (0, 2, 3)
            bias._accumulate(g.sum(axis=axes))

    return _make(out_data, (a, bias), vjp, "bias")


def _same_pad(n, r, stride):
    out = -(-n // stride)
    total = max((out - 1) * stride + r - n, 0)
    return out, total // 2, total - total // 2


def _pad_spatial(x, pl_y, pr_y, pl_x, pr_x, cyclic):
    mode = "wrap" if cyclic else "constant"
    return np.pad(x, ((0, 0), (0, 0), (pl_y, pr_y), (pl_x, pr_x)), mode=mode)


def _unpad_adjoint(gxp, n, m, pl_y, pr_y, pl_x, pr_x, cyclic):
    if not cyclic:
        return gxp[:, :, pl_y:pl_y + n, pl_x:pl_x + m]
    g = gxp[:, :, pl_y:pl_y + n, :].copy()
    if pl_y:
        g[:, :, n - pl_y:n, :] += gxp[:, :, :pl_y, :]
    if pr_y:
        g[:, :, :pr_y, :] += gxp[:, :, pl_y + n:, :]
    g2 = g[:, :, :, pl_x:pl_x + m].copy()
    if pl_x:
        g2[:, :, :, m - pl_x:m] += g[:, :, :, :pl_x]
    if pr_x:
        g2[:, :, :, :pr_x] += g[:, :, :, pl_x + m:]
    return g2


def conv2d(x, w, stride=1, cyclic=False):
    """Direct 2D convolution with 'same' padding.

    x: (b, d_in, n, m), w: (d_out, d_in, r, s). Padding is zero by default;
    ``cyclic=True`` wraps indices around (the boundary condition of the
    concentration experiments and of the isometry analysis).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d operands, got {x.shape}, {w.shape}")
    b, d_in, n, m = x.shape
    d_out, d_in_w, r, s = w.shape
    if d_in != d_in_w:
        raise DimensionError(f"conv2d channels: input {d_in} vs filter {d_in_w}")
    h_out, pl_y, pr_y = _same_pad(n, r, stride)
    w_out, pl_x, pr_x = _same_pad(m, s, stride)
    xp = _pad_spatial(x.data, pl_y, pr_y, pl_x, pr_x, cyclic)
    out_data = np.zeros((b, d_out, h_out, w_out))
    for i in range(r):
        for j in range(s):
            xs = xp[:, :, i:i + stride * (h_out - 1) + 1:stride,
                    j:j + stride * (w_out - 1) + 1:stride]
            out_data += np.einsum("oc,bcyx->boyx", w.data[:, :, i, j], xs, optimize=True)

    def vjp(g):
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(r):
                for j in range(s):
                    xs = xp[:, :, i:i + stride * (h_out - 1) + 1:stride,
                            j:j + stride * (w_out - 1) + 1:stride]
                    gw[:, :, i, j] = np.einsum("boyx,bcyx->oc", g, xs, optimize=True)
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(r):
                for j in range(s):
                    gxp[:, :, i:i + stride * (h_out - 1) + 1:stride,
                        j:j + stride * (w_out - 1) + 1:stride] += np.einsum(
                            "boyx,oc->bcyx", g, w.data[:, :, i, j], optimize=True)
            x._accumulate(_unpad_adjoint(gxp, n, m, pl_y, pr_y, pl_x, pr_x, cyclic))

    return _make(out_data, (x, w), vjp, "conv2d")


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm(x, gamma, beta, running_mean, running_var, eps, momentum,
              training, update_stats=None):
    """Per-channel batch normalization over (batch, height, width).

    Training mode normalizes with batch statistics (biased variance) and,
    when ``update_stats``, folds them into the running arrays with the fixed
    momentum. Inference normalizes with the running statistics, making the
    op an affine per-channel map. x may be (b, c) or (b, c, h, w).
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    count = x.data.shape[0] if x.ndim == 2 else x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    if update_stats is None:
        update_stats = training

    def expand(v):
        return v[None, :] if x.ndim == 2 else v[None, :, None, None]

    if training:
        if x.shape[0] < 2:
            raise DimensionError("batch size >= 2 required in training mode")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - expand(mu)) * expand(invstd)
    out_data = xhat * expand(gamma.data) + expand(beta.data)

    def vjp(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            k = expand(gamma.data * invstd)
            if training:
                gm = g.mean(axis=axes)
                gxm = (g * xhat).mean(axis=axes)
                x._accumulate(k * (g - expand(gm) - xhat * expand(gxm)))
            else:
                x._accumulate(k * g)

    _ = count
    return _make(out_data, (x, gamma, beta), vjp, "batchnorm")


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy. logits: (b, K), labels: int array (b,)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    b = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(b), labels].mean()
    probs = np.exp(logp)

    def vjp(g):
        if logits.requires_grad:
            gl = probs.copy()
            gl[np.arange(b), labels] -= 1.0
            logits._accumulate(g * gl / b)

    return _make(loss, (logits,), vjp, "cross_entropy")
