"""Forward noising, exact Gaussian-mixture noise prediction and deterministic guided denoising.

Timesteps are 1-based (``t = 1..T``) and ``alpha_bar(0)`` is defined as 1.
All array functions accept a single vector ``(d,)`` or a batch ``(n, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from blab.data import MixtureSpec
from blab.errors import DimensionMismatch, InvalidArgument

STANDARD = "standard"
MODIFIED = "modified"


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 1 or beta.size < 1:
            raise InvalidArgument("beta must be a non-empty sequence")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise InvalidArgument("every beta_t must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", 1.0 - beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))

    @property
    def T(self) -> int:
        return self.beta.size

    def check_t(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise InvalidArgument(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def abar(self, t: int) -> float:
        """Cumulative signal fraction at step ``t`` (1 at ``t = 0``)."""
        t = self.check_t(t, lo=0)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self.check_t(t) - 1])


def linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 2:
        raise InvalidArgument(f"T must be >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise InvalidArgument(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def default_schedule(T: int = 100) -> NoiseSchedule:
    """Linear schedule on the usual [1e-4, 0.02] range, rescaled from 1000 steps to ``T``."""
    factor = 1000.0 / T
    return linear_schedule(T, 1e-4 * factor, min(0.02 * factor, 0.999))


@dataclass(frozen=True)
class GmmScoreModel:
    """Exact noise predictor for data drawn from an isotropic Gaussian per class.

    Conditioned on class ``c`` the noised marginal at step ``t`` is
    ``N(sqrt(abar) m_c, (abar sigma^2 + 1 - abar) I)``, so the noise estimate
    ``-sqrt(1 - abar) * grad log p_t`` is available in closed form.  The
    unconditional estimate mixes the per-class ones with posterior
    responsibilities under ``spec.priors``.
    """

    spec: MixtureSpec

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def dim(self) -> int:
        return self.spec.dim

    def noised_variance(self, abar: float) -> float:
        return abar * self.spec.scale**2 + 1.0 - abar

    def log_density(self, x_t, cond, t, schedule: NoiseSchedule) -> np.ndarray:
        """``log p_t(x_t | cond)``; ``cond=None`` gives the prior-weighted mixture."""
        x = _as_batch(x_t, self.dim)
        abar = schedule.abar(t)
        var = self.noised_variance(abar)
        comp = _component_logpdf(x, np.sqrt(abar) * self.spec.means, var)
        if cond is None:
            with np.errstate(divide="ignore"):
                out = logsumexp(comp + np.log(self.spec.priors), axis=1)
        else:
            out = comp[:, _cond_index(cond, self.num_classes)]
        return out if np.ndim(x_t) > 1 else out[0]


def _as_batch(x, dim) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[-1] != dim:
        raise DimensionMismatch(f"expected dimension {dim}, got {x.shape[-1]}")
    return x


def _cond_index(cond, num_classes):
    c = int(cond)
    if not 0 <= c < num_classes:
        raise InvalidArgument(f"class {c} outside [0, {num_classes})")
    return c


def _component_logpdf(x, centers, var):
    d = x.shape[1]
    sq = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return -0.5 * sq / var - 0.5 * d * np.log(2 * np.pi * var)


def forward_noise(x0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise DimensionMismatch(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    abar = schedule.abar(schedule.check_t(t))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def predict_noise(model: GmmScoreModel, x_t, cond, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Exact noise prediction; ``cond`` is a class id, an array of per-row ids, or None."""
    x = _as_batch(x_t, model.dim)
    abar = schedule.abar(schedule.check_t(t))
    var = model.noised_variance(abar)
    centers = np.sqrt(abar) * model.spec.means
    scale = np.sqrt(1.0 - abar) / var
    if cond is None:
        comp = _component_logpdf(x, centers, var)
        with np.errstate(divide="ignore"):
            resp = softmax(comp + np.log(model.spec.priors), axis=1)
        eps = scale * (x - resp @ centers)
    else:
        idx = np.asarray(cond, dtype=np.int64)
        if np.any(idx < 0) or np.any(idx >= model.num_classes):
            raise InvalidArgument(f"condition outside [0, {model.num_classes})")
        eps = scale * (x - centers[np.broadcast_to(idx, (x.shape[0],))])
    return eps if np.ndim(x_t) > 1 else eps[0]


def cfg_combine(eps_uncond, eps_cond, s: float) -> np.ndarray:
    """Guided estimate ``(1 - s) * eps_uncond + s * eps_cond``."""
    eps_uncond = np.asarray(eps_uncond, dtype=float)
    eps_cond = np.asarray(eps_cond, dtype=float)
    if eps_uncond.shape != eps_cond.shape:
        raise DimensionMismatch(f"shapes {eps_uncond.shape} and {eps_cond.shape} differ")
    return (1.0 - s) * eps_uncond + s * eps_cond


def modified_cfg(eps_target, eps_disturb, s: float) -> np.ndarray:
    """Mix two conditional estimates: ``(1 - s) * target + s * disturbing``."""
    return cfg_combine(eps_target, eps_disturb, s)


def denoise_step(x_t, t: int, eps_hat, schedule: NoiseSchedule):
    """One deterministic reverse step; returns ``(x0_hat, x_prev)``.

    At ``t = 1`` the previous state equals ``x0_hat`` since ``abar_0 = 1``.
    """
    x_t = np.asarray(x_t, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    if x_t.shape != eps_hat.shape:
        raise DimensionMismatch(f"x_t shape {x_t.shape} != eps shape {eps_hat.shape}")
    t = schedule.check_t(t)
    abar = schedule.abar(t)
    abar_prev = schedule.abar(t - 1)
    x0_hat = (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
    if t == 1:
        return x0_hat, x0_hat
    x_prev = np.sqrt(abar_prev) * x0_hat + np.sqrt(1.0 - abar_prev) * eps_hat
    return x0_hat, x_prev


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float
    target: int
    mode: str = STANDARD
    disturb: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.scale):
            raise InvalidArgument("guidance scale must be finite")
        if self.mode not in (STANDARD, MODIFIED):
            raise InvalidArgument(f"unknown guidance mode {self.mode!r}")
        if self.mode == MODIFIED:
            if self.disturb is None:
                raise InvalidArgument("modified guidance needs a disturbing class")
            if self.disturb == self.target:
                raise InvalidArgument("disturbing class must differ from the target class")


def guided_noise(model, x_t, t, schedule, guidance: GuidanceConfig) -> np.ndarray:
    target = predict_noise(model, x_t, guidance.target, t, schedule)
    if guidance.mode == MODIFIED:
        other = predict_noise(model, x_t, guidance.disturb, t, schedule)
        return modified_cfg(target, other, guidance.scale)
    uncond = predict_noise(model, x_t, None, t, schedule)
    return cfg_combine(uncond, target, guidance.scale)


def reverse(model, schedule, x_start, t_start: int, noise_fn) -> np.ndarray:
    """Run ``denoise_step`` from ``t_start`` down to 1 with ``noise_fn(x_t, t)``."""
    x = np.asarray(x_start, dtype=float)
    x0_hat = x
    for t in range(schedule.check_t(t_start), 0, -1):
        x0_hat, x = denoise_step(x, t, noise_fn(x, t), schedule)
    return x0_hat


def sample(model, schedule, guidance: GuidanceConfig, seed, n: int | None = None) -> np.ndarray:
    """Full reverse pass from ``x_T ~ N(0, I)``; returns one draw, or ``n`` draws as rows."""
    rng = np.random.default_rng(seed)
    shape = (model.dim,) if n is None else (n, model.dim)
    x_T = rng.standard_normal(shape)
    return reverse(
        model, schedule, x_T, schedule.T, lambda x, t: guided_noise(model, x, t, schedule, guidance)
    )
