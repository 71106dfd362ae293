"""Frozen-weight construction satisfying the signal-isometry condition.

Dense matrices are orthogonalized by triangular (QR) decomposition of
Gaussian draws. Spatial convolution banks additionally need the *operator*
(not just the flattened filter matrix) to be an isometry; a QR of the
flattened bank leaves large correlations between shifted filter rows, so
banks with kernel > 1 are built as random FIR paraunitary filter banks:
products of Householder-delay factors whose orthogonal seeds come from the
same triangular decomposition. Under cyclic boundary conditions the
resulting convolution operator is exactly orthogonal per spatial frequency,
and by Parseval the flattened bank still satisfies W W^T = gain^2 I.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .layers import LayerParams
from .meanfield import gauss_expect, ACTIVATION_DERIVS


class RankDeficientError(np.linalg.LinAlgError):
    """Input matrix is numerically rank-deficient; re-draw with a new seed."""


@dataclass(frozen=True)
class InitSpec:
    """How to draw frozen weights.

    scheme: 'orthogonal-triangular' (the main pipeline), 'gaussian'
    (contrast experiments only) or 'identity'. gain scales every singular
    value. weight_variance is the Gaussian variance in the mean-field
    normalization: entry variance = weight_variance / fan_in. For the
    orthogonal scheme the pre-orthogonalization variance is immaterial
    (QR of a Gaussian is scale-invariant).
    """

    scheme: str = "orthogonal-triangular"
    gain: float = 1.0
    seed: int = 0
    weight_variance: float = 1.0

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if self.weight_variance <= 0:
            raise ValueError("weight_variance must be positive")
        if self.scheme not in ("orthogonal-triangular", "gaussian", "identity"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


@dataclass(frozen=True)
class OrthogonalFactor:
    """Result of triangular orthogonalization: q and the inverse factor.

    For square or tall inputs, q = F @ w_inv. For wide inputs the rows are
    orthogonalized through the transpose: q.T = F.T @ w_inv. w_inv is upper
    triangular with strictly positive diagonal, which pins the sign
    convention and makes the factorization unique.
    """

    q: np.ndarray
    w_inv: np.ndarray


def orthogonalize_triangular(f):
    """Orthogonalize F by triangular decomposition (QR with positive diag).

    Wide matrices (rows < cols) yield orthonormal rows; tall or square ones
    orthonormal columns. Raises RankDeficientError when F loses rank.
    """
    f = np.asarray(f, dtype=np.float64)
    rows, cols = f.shape
    wide = rows < cols
    a = f.T if wide else f
    q, r = np.linalg.qr(a)
    diag = np.diag(r)
    scale = np.abs(a).max()
    if scale == 0 or np.min(np.abs(diag)) < 1e-12 * scale * max(a.shape):
        raise RankDeficientError("rank-deficient input; re-draw with a new seed")
    sign = np.sign(diag)
    q = q * sign
    w_inv = _upper_inverse(r * sign[:, None])
    if wide:
        return OrthogonalFactor(q=q.T, w_inv=w_inv)
    return OrthogonalFactor(q=q, w_inv=w_inv)


def _upper_inverse(r):
    n = r.shape[0]
    return np.linalg.solve(r, np.eye(n))


def haar_orthogonal(rng, d, gain=1.0):
    """gain * (Haar-random d x d orthogonal) via triangular decomposition."""
    return gain * orthogonalize_triangular(rng.standard_normal((d, d))).q


def _paraunitary_1d(rng, d, taps):
    """1D FIR paraunitary taps (d, d, taps): Q0 followed by Householder-delay
    factors (I - vv^T) + z vv^T. Each factor is orthogonal per frequency."""
    w = np.zeros((d, d, 1))
    w[:, :, 0] = haar_orthogonal(rng, d)
    for _ in range(taps - 1):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        proj = np.outer(v, v)
        keep = np.eye(d) - proj
        new = np.zeros((d, d, w.shape[2] + 1))
        new[:, :, :-1] += np.einsum("ab,bct->act", keep, w)
        new[:, :, 1:] += np.einsum("ab,bct->act", proj, w)
        w = new
    return w


def paraunitary_bank(rng, d_out, d_in, r, gain=1.0):
    """Random r x r conv bank whose cyclic operator is an exact coisometry.

    Built square at d_in as a separable product of vertical and horizontal
    1D paraunitary factors, then row-sliced (requires d_out <= d_in, the
    only regime candidate blocks use for spatial kernels). Per-frequency
    unitarity makes the cyclic convolution operator exactly orthogonal, and
    by Parseval the flattened bank rows are orthonormal with norm ``gain``.
    """
    if d_out > d_in:
        raise ValueError("paraunitary row slice needs d_out <= d_in")
    if r == 1:
        w = haar_orthogonal(rng, d_in)[:, :, None, None]
    else:
        vert = _paraunitary_1d(rng, d_in, r)
        horz = _paraunitary_1d(rng, d_in, r)
        w = np.einsum("omi,mcj->ocij", vert, horz)
    return gain * w[:d_out]


def init_conv_orthogonal(spec: InitSpec, d_out, d_in, r, name="", stride=1):
    """Frozen conv LayerParams under ``spec``; bias is zero.

    orthogonal-triangular with d_out <= d_in uses a paraunitary bank (exact
    cyclic-operator coisometry; plain triangular-decomposed Haar for 1x1).
    Channel-raising banks (d_out > d_in, only the stem at desk scale) fall
    back to triangular orthogonalization of the flattened matrix, which
    keeps the flattened-Gram invariant exact at the cost of only
    approximate operator isometry. gaussian: entries
    N(0, weight_variance / fan_in). identity: center-delta identity map
    (requires d_out == d_in).
    """
    rng = np.random.default_rng(spec.seed)
    if spec.scheme == "orthogonal-triangular":
        if r == 1:
            d = max(d_out, d_in)
            w = (spec.gain * haar_orthogonal(rng, d))[:d_out, :d_in, None, None]
        elif d_out <= d_in:
            w = paraunitary_bank(rng, d_out, d_in, r, gain=spec.gain)
        else:
            flat = rng.standard_normal((d_out, d_in * r * r))
            w = (spec.gain * orthogonalize_triangular(flat).q).reshape(d_out, d_in, r, r)
    elif spec.scheme == "gaussian":
        std = np.sqrt(spec.weight_variance / (d_in * r * r))
        w = rng.standard_normal((d_out, d_in, r, r)) * std
    else:
        if d_out != d_in:
            raise ValueError("identity scheme requires d_out == d_in")
        w = np.zeros((d_out, d_in, r, r))
        w[np.arange(d_out), np.arange(d_in), r // 2, r // 2] = spec.gain
    return LayerParams(weight=Tensor(w), bias=Tensor(np.zeros(d_out)),
                       op="conv", stride=stride, frozen=True, name=name)


def init_dense_orthogonal(spec: InitSpec, d_out, d_in, name=""):
    """Frozen dense LayerParams; singular values all equal ``spec.gain``."""
    rng = np.random.default_rng(spec.seed)
    if spec.scheme == "orthogonal-triangular":
        rows, cols = d_out, d_in
        if rows <= cols:
            q = orthogonalize_triangular(rng.standard_normal((rows, cols))).q
        else:
            q = orthogonalize_triangular(rng.standard_normal((rows, cols))).q
        w = spec.gain * q
    elif spec.scheme == "gaussian":
        w = rng.standard_normal((d_out, d_in)) * np.sqrt(spec.weight_variance / d_in)
    else:
        if d_out != d_in:
            raise ValueError("identity scheme requires d_out == d_in")
        w = spec.gain * np.eye(d_out)
    return LayerParams(weight=Tensor(w), bias=Tensor(np.zeros(d_out)),
                       op="dense", frozen=True, name=name)


def calibrate_gain(activation, v_star, nodes=64):
    """Gain g with g^2 E[sigma'(sqrt(v*) z)^2] = 1 over standard Gaussian z.

    Makes the mean squared singular value of the layer Jacobian equal 1 at
    the variance fixed point. Identity activation gives exactly 1; tanh
    tends to 1 in the small-variance (linearized) limit.
    """
    if v_star < 0:
        raise ValueError("v_star must be nonnegative")
    dsigma = ACTIVATION_DERIVS[activation]
    second_moment = gauss_expect(lambda z: dsigma(z) ** 2, v_star, nodes=nodes)
    return 1.0 / np.sqrt(second_moment)


def flat_bank(w):
    """Flatten a conv bank (d_out, d_in, r, r) to (d_out, d_in*r*r)."""
    return np.asarray(w).reshape(w.shape[0], -1)


def orthogonality_error(w, gain=1.0):
    """inf-norm deviation of the flattened Gram from gain^2 I.

    Checks rows when d_out <= d_in*r*r, columns otherwise (the transpose
    regime of tall banks).
    """
    flat = flat_bank(w) if np.ndim(w) == 4 else np.asarray(w)
    rows, cols = flat.shape
    if rows <= cols:
        gram = flat @ flat.T
        target = gain * gain * np.eye(rows)
    else:
        gram = flat.T @ flat
        target = gain * gain * np.eye(cols)
    return np.abs(gram - target).max()
