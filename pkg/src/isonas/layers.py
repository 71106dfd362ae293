"""Parameter containers, block execution, BN-only backprop and Jacobians."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class TapeError(RuntimeError):
    pass


class JacobianTooLargeError(ValueError):
    """Dense materialization refused; use stochastic trace estimation."""


@dataclass
class LayerParams:
    """Frozen-by-default weights of a conv or dense layer.

    weight shape is (d_out, d_in, r, r) for conv, (d_out, d_in) for dense.
    Bias is kept zero under the bias-free policy but remains a parameter
    slot so the checkpoint layout is uniform.
    """

    weight: Tensor
    bias: Tensor
    op: str = "conv"  # "conv" | "dense"
    stride: int = 1
    frozen: bool = True
    name: str = ""

    def __post_init__(self):
        self.set_frozen(self.frozen)

    def set_frozen(self, frozen):
        self.frozen = frozen
        self.weight.requires_grad = not frozen
        self.bias.requires_grad = not frozen

    def arrays(self):
        return {f"{self.name}.weight": self.weight.data, f"{self.name}.bias": self.bias.data}


@dataclass
class BNParams:
    """Batch-normalization parameters plus running statistics.

    ``trainable=False`` freezes gamma/beta at their current values; the layer
    still normalizes. eps > 0 guards zero-variance channels.
    """

    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5
    momentum: float = 0.1
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    trainable: bool = True
    name: str = ""

    def __post_init__(self):
        c = self.gamma.data.shape[0]
        if self.beta.data.shape[0] != c:
            raise ag.DimensionError("gamma/beta length mismatch")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.running_mean is None:
            self.running_mean = np.zeros(c)
        if self.running_var is None:
            self.running_var = np.ones(c)
        self.set_trainable(self.trainable)

    @classmethod
    def unit(cls, channels, trainable=True, eps=1e-5, name=""):
        return cls(gamma=Tensor(np.ones(channels)), beta=Tensor(np.zeros(channels)),
                   eps=eps, trainable=trainable, name=name)

    def set_trainable(self, trainable):
        self.trainable = trainable
        self.gamma.requires_grad = trainable
        self.beta.requires_grad = trainable

    def arrays(self):
        return {f"{self.name}.gamma": self.gamma.data, f"{self.name}.beta": self.beta.data,
                f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}


@dataclass
class Tape:
    """Record of one recorded forward pass, enough to push gradients back."""

    output: Tensor = None
    bn_nodes: list = field(default_factory=list)
    layer_nodes: list = field(default_factory=list)

    def record_bn(self, p: BNParams):
        self.bn_nodes.append(p)

    def record_layer(self, p: LayerParams):
        self.layer_nodes.append(p)


def apply_layer(x, p: LayerParams, cyclic=False):
    if p.op == "dense":
        out = ag.matmul(x, p.weight)
    elif p.op == "conv":
        out = ag.conv2d(x, p.weight, stride=p.stride, cyclic=cyclic)
    else:
        raise ValueError(f"unknown layer op {p.op!r}")
    return ag.add_bias(out, p.bias)


def apply_bn(x, p: BNParams, training, update_stats=None):
    return ag.batchnorm(x, p.gamma, p.beta, p.running_mean, p.running_var,
                        p.eps, p.momentum, training, update_stats=update_stats)


def forward_block(x, params, activation="tanh", training=False, cyclic=False,
                  tape: Tape | None = None, update_stats=None):
    """Run a sequence of LayerParams/BNParams; activation follows each layer.

    Raises DimensionError on shape mismatch and NumericOverflowError naming
    the offending element if any intermediate goes non-finite.
    """
    if activation not in ag.ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    act = ag.ACTIVATIONS[activation]
    out = x if isinstance(x, Tensor) else Tensor(x)
    for idx, p in enumerate(params):
        if isinstance(p, LayerParams):
            out = act(apply_layer(out, p, cyclic=cyclic))
            if tape is not None:
                tape.record_layer(p)
        elif isinstance(p, BNParams):
            out = apply_bn(out, p, training, update_stats=update_stats)
            if tape is not None:
                tape.record_bn(p)
        else:
            raise TypeError(f"params[{idx}] is {type(p).__name__}")
        if not np.all(np.isfinite(out.data)):
            label = getattr(p, "name", "") or f"params[{idx}]"
            raise ag.NumericOverflowError(f"non-finite output at layer {label}")
    if tape is not None:
        tape.output = out
    return out


def backward_bn_only(tape: Tape, loss_grad):
    """Backprop the recorded pass and return grads for trainable BN params.

    Frozen LayerParams receive no gradient buffers at all. loss_grad is the
    upstream gradient on the tape output (array of matching shape, or a
    scalar for scalar outputs).
    """
    if tape is None or tape.output is None:
        raise TapeError("tape is empty; run a recorded forward pass first")
    grad = np.broadcast_to(np.asarray(loss_grad, dtype=np.float64), tape.output.shape)
    tape.output.backward(grad)
    grads = {}
    for p in tape.bn_nodes:
        if p.trainable:
            ggamma = p.gamma.grad if p.gamma.grad is not None else np.zeros_like(p.gamma.data)
            gbeta = p.beta.grad if p.beta.grad is not None else np.zeros_like(p.beta.data)
            grads[p.name or f"bn{id(p)}"] = (ggamma, gbeta)
    return grads


def jacobian_of(block, x, max_dim=4096):
    """Dense input-output Jacobian of ``block`` at ``x``.

    ``block`` must be a per-sample map (run it in inference mode so batch
    normalization uses running statistics): rows of the batch must not
    interact. x is a single sample of shape (c, n, m) or (d,). Returns J of
    shape (out_size, in_size); one batched reverse pass computes all rows.
    """
    x = np.asarray(x, dtype=np.float64)
    w_in = x.size
    if w_in > max_dim:
        raise JacobianTooLargeError(
            f"input dimension {w_in} exceeds {max_dim}; "
            "use stochastic trace estimation instead")
    probe = Tensor(x[None], requires_grad=True)
    out = block(probe)
    w_out = out.size
    if w_out > max_dim:
        raise JacobianTooLargeError(
            f"output dimension {w_out} exceeds {max_dim}; "
            "use stochastic trace estimation instead")
    xb = Tensor(np.broadcast_to(x[None], (w_out,) + x.shape).copy(), requires_grad=True)
    yb = block(xb)
    seed = np.eye(w_out).reshape((w_out,) + yb.shape[1:])
    yb.backward(seed)
    return xb.grad.reshape(w_out, w_in)


def collect_params(objs):
    """Flatten LayerParams/BNParams into an ordered {name: ndarray} dict."""
    out = {}
    for o in objs:
        out.update(o.arrays())
    return out
