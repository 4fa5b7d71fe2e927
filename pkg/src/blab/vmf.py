"""von Mises-Fisher fitting, log-density and the Bhattacharyya overlap estimate.

The normalizer needs ``log I_v(kappa)`` over a wide range of orders and
concentrations (``v = d/2 - 1`` up to ~60, ``kappa`` up to 1e6), so it is
evaluated in the log domain: a power series below ``BESSEL_SWITCH`` and the
uniform (Debye) asymptotic expansion above it.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import lgamma, log, pi, sqrt

import numpy as np
from scipy.special import gammaln, logsumexp

from blab.errors import DimensionMismatch, InsufficientSamples, InvalidArgument

KAPPA_MAX = 1e6
BESSEL_SWITCH = 50.0
UNIT_TOL = 1e-6


@dataclass(frozen=True)
class VmfModel:
    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        if mu.ndim != 1 or mu.size < 2:
            raise InvalidArgument("mean direction must be a vector of dimension >= 2")
        if abs(np.linalg.norm(mu) - 1.0) > 1e-9:
            raise InvalidArgument(f"mean direction must be unit length, got {np.linalg.norm(mu)}")
        if not 0.0 <= self.kappa <= KAPPA_MAX:
            raise InvalidArgument(f"kappa must lie in [0, {KAPPA_MAX}], got {self.kappa}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def log_normalizer(self) -> float:
        return log_vmf_normalizer(self.dim, self.kappa)


# Debye polynomials u_k(t), k = 1..4 (Abramowitz & Stegun 9.3.9, 9.3.10).
def _debye_terms(t):
    t2 = t * t
    u1 = t * (3.0 - 5.0 * t2) / 24.0
    u2 = t2 * (81.0 - 462.0 * t2 + 385.0 * t2**2) / 1152.0
    u3 = t**3 * (30375.0 - 369603.0 * t2 + 765765.0 * t2**2 - 425425.0 * t2**3) / 414720.0
    u4 = (
        t2**2
        * (
            4465125.0
            - 94121676.0 * t2
            + 349922430.0 * t2**2
            - 446185740.0 * t2**3
            + 185910725.0 * t2**4
        )
        / 39813120.0
    )
    return u1, u2, u3, u4


def _log_iv_series(v: float, x: float) -> float:
    # sum_k (x/2)^(2k+v) / (k! Gamma(k+v+1)); terms peak near k ~ x/2.
    k = np.arange(int(2 * x) + 60, dtype=float)
    terms = (2 * k + v) * (log(x) - log(2.0)) - gammaln(k + 1) - gammaln(k + v + 1)
    return float(logsumexp(terms))


def _log_iv_debye(v: float, x: float) -> float:
    z = x / v
    root = sqrt(1.0 + z * z)
    eta = root + log(z / (1.0 + root))
    u1, u2, u3, u4 = _debye_terms(1.0 / root)
    corr = 1.0 + u1 / v + u2 / v**2 + u3 / v**3 + u4 / v**4
    return v * eta - 0.5 * log(2.0 * pi * v) - 0.5 * log(root) + log(corr)


def _log_iv_hankel(v: float, x: float, terms: int = 12) -> float:
    # Large-argument expansion; only used for v = 0 where the Debye form is undefined.
    mu = 4.0 * v * v
    total, term = 1.0, 1.0
    for k in range(1, terms + 1):
        term *= -(mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        total += term
    return x - 0.5 * log(2.0 * pi * x) + log(total)


def log_bessel_iv(v: float, x: float) -> float:
    """``log I_v(x)`` for order ``v >= 0`` and ``x >= 0``."""
    if v < 0 or x < 0:
        raise InvalidArgument("log_bessel_iv needs v >= 0 and x >= 0")
    if x == 0.0:
        return 0.0 if v == 0 else -np.inf
    if x < BESSEL_SWITCH:
        return _log_iv_series(v, x)
    if v == 0:
        return _log_iv_hankel(v, x)
    return _log_iv_debye(v, x)


def log_sphere_area(d: int) -> float:
    """``log`` of the surface area of the unit sphere in R^d."""
    return log(2.0) + 0.5 * d * log(pi) - lgamma(0.5 * d)


def log_vmf_normalizer(d: int, kappa: float) -> float:
    """``log C_d(kappa) = (d/2-1) log kappa - (d/2) log 2pi - log I_{d/2-1}(kappa)``."""
    if kappa == 0.0:
        return -log_sphere_area(d)
    v = 0.5 * d - 1.0
    return v * log(kappa) - 0.5 * d * log(2.0 * pi) - log_bessel_iv(v, kappa)


def _check_unit_rows(y, dim=None):
    y = np.asarray(y, dtype=float)
    batch = np.atleast_2d(y)
    if dim is not None and batch.shape[1] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {batch.shape[1]}")
    norms = np.linalg.norm(batch, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise InvalidArgument("inputs must be unit vectors")
    return batch


def vmf_log_density(model: VmfModel, y) -> np.ndarray:
    """``log C_d(kappa) + kappa * mu . y`` for unit ``y`` (vector or rows)."""
    batch = _check_unit_rows(y, model.dim)
    out = model.log_normalizer + model.kappa * (batch @ model.mu)
    return out if np.ndim(y) > 1 else float(out[0])


def fit_vmf(unit_samples, kappa_max: float = KAPPA_MAX) -> VmfModel:
    """Mean direction from the resultant; concentration from the approximation
    ``kappa = r(d - r^2) / (1 - r^2)`` with ``r`` the mean resultant length.

    A (near) zero resultant gives ``kappa = 0`` with the first sample as the
    direction; ``r -> 1`` saturates at ``kappa_max``.
    """
    y = _check_unit_rows(unit_samples)
    n, d = y.shape
    if n < 2:
        raise InsufficientSamples(f"need at least 2 samples to fit a vMF, got {n}")
    resultant = y.sum(axis=0)
    length = np.linalg.norm(resultant)
    if length < 1e-12:
        return VmfModel(y[0] / np.linalg.norm(y[0]), 0.0)
    mu = resultant / length
    r = min(length / n, 1.0)
    if r >= 1.0 - 1e-15:
        kappa = kappa_max
    else:
        kappa = min(r * (d - r * r) / (1.0 - r * r), kappa_max)
    return VmfModel(mu, max(kappa, 0.0))


def sample_uniform_sphere(n: int, d: int, rng) -> np.ndarray:
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def sample_vmf(model: VmfModel, n: int, rng) -> np.ndarray:
    """Wood (1994) rejection sampler."""
    d = model.dim
    kappa = model.kappa
    if kappa == 0.0:
        return sample_uniform_sphere(n, d, rng)
    dm1 = d - 1.0
    b = dm1 / (2.0 * kappa + sqrt(4.0 * kappa * kappa + dm1 * dm1))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + dm1 * log(1.0 - x0 * x0)

    w = np.empty(0)
    while w.size < n:
        want = 2 * (n - w.size) + 16
        z = rng.beta(dm1 / 2.0, dm1 / 2.0, size=want)
        cand = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random(want)
        with np.errstate(divide="ignore"):
            ok = kappa * cand + dm1 * np.log(1.0 - x0 * cand) - c >= np.log(u)
        w = np.concatenate([w, cand[ok]])
    w = w[:n]

    v = rng.standard_normal((n, d))
    v -= np.outer(v @ model.mu, model.mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return w[:, None] * model.mu + np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * v


def _canonical_pair(a: VmfModel, b: VmfModel):
    key_a = (a.kappa, tuple(a.mu))
    key_b = (b.kappa, tuple(b.mu))
    return (a, b) if key_a <= key_b else (b, a)


def overlap_log_weights(model_a: VmfModel, model_b: VmfModel, m: int, seed) -> np.ndarray:
    """Log importance weights ``log sqrt(p_a p_b) / q`` with ``q = (p_a + p_b)/2``.

    Half of the ``m`` draws come from each component.  The pair is put in a
    canonical order first so swapping the arguments reuses the same draws.
    """
    if model_a.dim != model_b.dim:
        raise DimensionMismatch(f"dimensions differ: {model_a.dim} vs {model_b.dim}")
    if m < 1000:
        raise InvalidArgument(f"need at least 1000 Monte Carlo samples, got {m}")
    first, second = _canonical_pair(model_a, model_b)
    rng = np.random.default_rng(seed)
    half = m // 2
    y = np.vstack([sample_vmf(first, m - half, rng), sample_vmf(second, half, rng)])
    la = first.log_normalizer + first.kappa * (y @ first.mu)
    lb = second.log_normalizer + second.kappa * (y @ second.mu)
    log_q = np.logaddexp(la, lb) - log(2.0)
    return 0.5 * (la + lb) - log_q


def overlap_degree(model_a: VmfModel, model_b: VmfModel, m: int = 20000, seed=0) -> float:
    """Importance-sampled log Bhattacharyya coefficient of two vMF densities."""
    lw = overlap_log_weights(model_a, model_b, m, seed)
    return float(logsumexp(lw) - log(lw.size))


def overlap_degree_with_error(model_a, model_b, m=20000, seed=0):
    """Estimate plus the delta-method standard error of the log estimate."""
    lw = overlap_log_weights(model_a, model_b, m, seed)
    w = np.exp(lw - lw.max())
    est = float(logsumexp(lw) - log(lw.size))
    se = float(w.std(ddof=1) / (sqrt(w.size) * w.mean()))
    return est, se


def overlap_degree_pooled(model_a: VmfModel, model_b: VmfModel, points) -> float:
    """``log mean sqrt(p_a p_b)`` over the given unit points, with no proposal correction."""
    y = _check_unit_rows(points, model_a.dim)
    la = vmf_log_density(model_a, y)
    lb = vmf_log_density(model_b, y)
    return float(logsumexp(0.5 * (la + lb)) - log(y.shape[0]))
