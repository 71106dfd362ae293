"""Mean-field signal propagation: variance map, fixed point, chi, spectral
moments of layer Jacobians, the isometry criterion and the moment growth of
Gaussian-initialized Jacobian products.

All Gaussian integrals E[f(sqrt(v) z)] run on Gauss-Hermite quadrature
(64 nodes by default); Monte Carlo is reserved for test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class ConvergenceError(RuntimeError):
    def __init__(self, msg, last_iterate=None, iterations=0):
        super().__init__(msg)
        self.last_iterate = last_iterate
        self.iterations = iterations


ACTIVATIONS = {
    "tanh": np.tanh,
    "identity": lambda z: z,
    "relu": lambda z: np.maximum(z, 0.0),
}

ACTIVATION_DERIVS = {
    "tanh": lambda z: 1.0 - np.tanh(z) ** 2,
    "identity": lambda z: np.ones_like(z),
    "relu": lambda z: (z > 0).astype(float),
}


@lru_cache(maxsize=8)
def _hermite_nodes(n):
    x, w = np.polynomial.hermite.hermgauss(n)
    return np.sqrt(2.0) * x, w / np.sqrt(np.pi)


def gauss_expect(f, v, nodes=64):
    """E[f(sqrt(v) z)] for z ~ N(0, 1) by Gauss-Hermite quadrature."""
    if v < 0:
        raise ValueError("variance must be nonnegative")
    z, w = _hermite_nodes(nodes)
    return float(np.sum(w * f(np.sqrt(v) * z)))


@dataclass(frozen=True)
class VarianceMap:
    """One-layer variance recursion v -> v_w * E[sigma(sqrt(v) z)^2] + v_b."""

    v_w: float
    v_b: float = 0.0
    activation: str = "tanh"
    quadrature_nodes: int = 64

    def __post_init__(self):
        if self.v_w <= 0:
            raise ValueError("v_w must be positive")
        if self.v_b < 0:
            raise ValueError("v_b must be nonnegative")
        if self.quadrature_nodes < 32:
            raise ValueError("need at least 32 quadrature nodes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class FixedPoint:
    v_star: float
    iterations: int
    residual: float


@dataclass(frozen=True)
class SpectralStats:
    """First two normalized spectral moments of J J^T.

    phi = tr(JJ^T)/w, phi2 = tr((JJ^T)^2)/w, trace_var = phi2 - phi^2 >= 0
    (the empirical variance of the eigenvalues). w is the Jacobian width,
    i.e. the output-side dimension.
    """

    phi: float
    phi2: float
    trace_var: float
    width: int


@dataclass(frozen=True)
class IsometryVerdict:
    passed: bool
    phi_error: float
    trace_var: float
    tol_phi: float
    tol_var: float


@dataclass(frozen=True)
class GaussianMoments:
    """Closed-form first two moments of the spectral density of depth-L
    Gaussian-init Jacobian products: m1 = (v_w p)^L and
    m2 = (v_w p)^(2L) (L + p)/p, with p the linear-regime fraction."""

    m1: float
    m2: float
    L_depth: int
    p_linear: float

    @property
    def variance(self):
        return self.m2 - self.m1 ** 2


def variance_step(v_in, vmap: VarianceMap):
    """Propagate a pre-activation variance through one layer."""
    if v_in < 0:
        raise ValueError("v_in must be nonnegative")
    sigma = ACTIVATIONS[vmap.activation]
    moment = gauss_expect(lambda z: sigma(z) ** 2, v_in, nodes=vmap.quadrature_nodes)
    return vmap.v_w * moment + vmap.v_b


def solve_fixed_point(vmap: VarianceMap, v0, tol=1e-10, max_iter=10_000):
    """Plain fixed-point iteration of the variance map (monotone for tanh)."""
    v = float(v0)
    for it in range(1, max_iter + 1):
        v_next = variance_step(v, vmap)
        if abs(v_next - v) < tol:
            return FixedPoint(v_star=v_next, iterations=it, residual=abs(v_next - v))
        v = v_next
    raise ConvergenceError(
        f"no fixed point after {max_iter} iterations (last iterate {v:.6g})",
        last_iterate=v, iterations=max_iter)


def estimate_p_linear(activation, v_star, nodes=64):
    """Linear-regime fraction p = E[sigma'(sqrt(v*) z)^2].

    Continuous surrogate for the hard 'fraction of units in the linear
    regime'; equals 1 for the identity and tends to 1 for tanh as v* -> 0.
    """
    dsigma = ACTIVATION_DERIVS[activation]
    return gauss_expect(lambda z: dsigma(z) ** 2, v_star, nodes=nodes)


def chi(vmap: VarianceMap, v_star):
    """Mean squared singular value of D W at the fixed point; 1 = critical."""
    return vmap.v_w * estimate_p_linear(vmap.activation, v_star, nodes=vmap.quadrature_nodes)


def spectral_stats(j):
    """phi, phi2 and trace variance of a dense Jacobian."""
    j = np.asarray(j, dtype=np.float64)
    if j.size == 0:
        raise ValueError("empty Jacobian")
    w = j.shape[0]
    jj = j @ j.T
    phi = float(np.trace(jj)) / w
    phi2 = float(np.sum(jj * jj)) / w
    tv = phi2 - phi * phi
    if tv < 0:  # roundoff only; the exact quantity is a variance
        tv = 0.0
    return SpectralStats(phi=phi, phi2=phi2, trace_var=tv, width=w)


def mean_spectral_stats(stats_list):
    """Average phi/phi2 over input draws, recomputing the trace variance."""
    phi = float(np.mean([s.phi for s in stats_list]))
    phi2 = float(np.mean([s.phi2 for s in stats_list]))
    return SpectralStats(phi=phi, phi2=phi2, trace_var=max(phi2 - phi * phi, 0.0),
                         width=stats_list[0].width)


def check_isometry(stats: SpectralStats, tol_phi=0.05, tol_var=0.05):
    """Pass iff |phi - 1| <= tol_phi and trace_var <= tol_var."""
    phi_err = abs(stats.phi - 1.0)
    return IsometryVerdict(passed=(phi_err <= tol_phi and stats.trace_var <= tol_var),
                           phi_error=phi_err, trace_var=stats.trace_var,
                           tol_phi=tol_phi, tol_var=tol_var)


def gaussian_moments(v_w, p_linear, L_depth):
    """Closed-form moment growth of Gaussian-init Jacobian products.

    At criticality (v_w * p = 1) the spectral variance is L/p, growing
    without bound in depth; this is the quantity the orthogonal
    initialization keeps flat.
    """
    if not (0.0 < p_linear <= 1.0):
        raise ValueError("p_linear must lie in (0, 1]")
    if L_depth < 1:
        raise ValueError("L_depth must be >= 1")
    base = v_w * p_linear
    m1 = base ** L_depth
    m2 = base ** (2 * L_depth) * (L_depth + p_linear) / p_linear
    return GaussianMoments(m1=m1, m2=m2, L_depth=L_depth, p_linear=p_linear)


def jacobian_product_stats(init, width, depth, v_star, rng, derivative="smooth",
                           p_linear=None, activation="tanh"):
    """Spectral stats of a depth-L product of D_l W_l factors.

    init: 'gaussian' (entries N(0, v_w/width) with v_w = 1/p so the first
    moment stays at 1) or 'orthogonal' (Haar, scaled 1/sqrt(p)).
    derivative: 'smooth' draws D = diag(sigma'(sqrt(v*) z)) i.i.d. at the
    fixed point; 'bernoulli' uses hard 0/1 masks with P(1) = p, the
    linear-fraction idealization of the closed-form moments.
    """
    if p_linear is None:
        p_linear = estimate_p_linear(activation, v_star)
    dsigma = ACTIVATION_DERIVS[activation]
    j = np.eye(width)
    for _ in range(depth):
        if init == "gaussian":
            w = rng.standard_normal((width, width)) * np.sqrt(1.0 / (p_linear * width))
        elif init == "orthogonal":
            q, r = np.linalg.qr(rng.standard_normal((width, width)))
            w = (q * np.sign(np.diag(r))) / np.sqrt(p_linear)
        else:
            raise ValueError(f"unknown init {init!r}")
        if derivative == "smooth":
            d = dsigma(np.sqrt(v_star) * rng.standard_normal(width))
        elif derivative == "bernoulli":
            d = (rng.random(width) < p_linear).astype(float)
        else:
            raise ValueError(f"unknown derivative mode {derivative!r}")
        j = (d[:, None] * w) @ j
    return spectral_stats(j)


def phase_diagram_rows(v_w_grid, v_b, activation="tanh", v0=1.0):
    """(v_w, v_star, chi) rows for CSV emission; chaotic cells report the
    diverging iterate through the ConvergenceError payload."""
    rows = []
    for v_w in v_w_grid:
        vmap = VarianceMap(v_w=float(v_w), v_b=v_b, activation=activation)
        try:
            fp = solve_fixed_point(vmap, v0)
            rows.append((float(v_w), fp.v_star, chi(vmap, fp.v_star)))
        except ConvergenceError as err:
            rows.append((float(v_w), float("nan"), float("nan")))
            _ = err
    return rows
