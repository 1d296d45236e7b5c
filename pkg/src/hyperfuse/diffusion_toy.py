"""Noise schedule, forward noising and score-distillation residuals.

The denoiser is pluggable. :class:`GaussianOracle` is the exact noise
predictor for data concentrated at a single point, which gives every loss
here a closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import InvalidRange, ShapeMismatch
from .tensor_core import as_tensor

UNCONDITIONAL = "<uncond>"


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients ``alpha_bar[0..T]`` and loss weights ``omega[0..T]``."""

    T: int
    alpha_bar: np.ndarray
    omega: np.ndarray = field(default=None)

    def __post_init__(self):
        ab = as_tensor(self.alpha_bar).copy()
        om = np.ones(self.T + 1) if self.omega is None else as_tensor(self.omega).copy()
        if ab.shape != (self.T + 1,) or om.shape != (self.T + 1,):
            raise ShapeMismatch("alpha_bar and omega must have length T + 1")
        if ab[0] != 1.0 or ab[-1] <= 0.0 or np.any(np.diff(ab) >= 0):
            raise InvalidRange("alpha_bar must start at 1, decrease strictly and stay positive")
        if np.any(om < 0):
            raise InvalidRange("omega must be non-negative")
        ab.flags.writeable = False
        om.flags.writeable = False
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "omega", om)

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise InvalidRange(f"step {t} outside [0, {self.T}]")
        return t

    def with_omega(self, omega) -> "NoiseSchedule":
        return NoiseSchedule(self.T, self.alpha_bar, omega)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear-beta schedule: ``alpha_bar[t] = prod_{s<=t} (1 - beta_s)``, ``alpha_bar[0] = 1``."""
    if T < 2:
        raise InvalidRange("T must be >= 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidRange("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T, alpha_bar)


def add_noise(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    x0 = as_tensor(x0)
    eps = as_tensor(eps)
    if x0.shape != eps.shape:
        raise ShapeMismatch(f"x0 {x0.shape} and eps {eps.shape} differ")
    ab = sched.alpha_bar[sched.check_step(t)]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@runtime_checkable
class Denoiser(Protocol):
    """Noise predictor ``eps_hat = predict(x_t, t, cond)``.

    Implementations may also provide ``vjp(x_t, t, cond, cotangent)`` returning
    ``J^T cotangent`` with ``J = d eps_hat / d x_t``; losses that need the exact
    gradient through the denoiser require it.
    """

    def predict(self, x_t: np.ndarray, t: int, cond) -> np.ndarray: ...


class GaussianOracle:
    """Posterior-optimal noise prediction for data concentrated at ``mean``.

    ``eps_hat(x_t, t) = (x_t - sqrt(alpha_bar_t) * mean) / sqrt(1 - alpha_bar_t)``.
    An optional ``uncond_mean`` is used for the :data:`UNCONDITIONAL` label.
    Undefined at ``t = 0`` (no noise to predict).
    """

    def __init__(self, mean, sched: NoiseSchedule, uncond_mean=None):
        self.mean = as_tensor(mean).copy()
        self.uncond_mean = None if uncond_mean is None else as_tensor(uncond_mean).copy()
        self.sched = sched

    def _mean_for(self, cond):
        if cond == UNCONDITIONAL and self.uncond_mean is not None:
            return self.uncond_mean
        return self.mean

    def _coeffs(self, t):
        ab = self.sched.alpha_bar[self.sched.check_step(t)]
        if ab >= 1.0:
            raise InvalidRange("GaussianOracle is undefined at alpha_bar == 1 (t = 0)")
        return np.sqrt(ab), np.sqrt(1.0 - ab)

    def predict(self, x_t, t, cond=None):
        x_t = as_tensor(x_t)
        mu = self._mean_for(cond)
        if x_t.shape != mu.shape:
            raise ShapeMismatch(f"x_t {x_t.shape} vs oracle mean {mu.shape}")
        sa, sn = self._coeffs(t)
        return (x_t - sa * mu) / sn

    __call__ = predict

    def vjp(self, x_t, t, cond, cotangent):
        _, sn = self._coeffs(t)
        return as_tensor(cotangent) / sn


def sds_residual(x0, t: int, eps, den: Denoiser, cond, sched: NoiseSchedule):
    """Score-distillation loss and its gradient w.r.t. ``x0``.

    ``loss = omega(t) * ||eps_hat(x_t, t, cond) - eps||^2``. The gradient is the
    usual score-distillation update ``omega(t) * (eps_hat - eps)``: the
    denoiser Jacobian is dropped, equivalently the gradient of
    ``omega/2 * ||x0 - stopgrad(x0 - (eps_hat - eps))||^2``.
    """
    t = sched.check_step(t)
    x_t = add_noise(x0, t, eps, sched)
    resid = den.predict(x_t, t, cond) - as_tensor(eps)
    w = sched.omega[t]
    return float(w * np.sum(resid * resid)), w * resid


def sds_surrogate(x, x0, t: int, eps, den: Denoiser, cond, sched: NoiseSchedule) -> float:
    """Stop-gradient objective whose gradient at ``x = x0`` is the SDS gradient."""
    t = sched.check_step(t)
    resid = den.predict(add_noise(x0, t, eps, sched), t, cond) - as_tensor(eps)
    target = as_tensor(x0) - resid
    d = as_tensor(x) - target
    return float(0.5 * sched.omega[t] * np.sum(d * d))


def _ism_terms(x0, t, delta_T, den, cond, sched, eps, inversion="noise"):
    t = sched.check_step(t)
    s = t - int(delta_T)
    if delta_T < 0 or s < 0:
        raise InvalidRange(f"interval start s = t - delta_T = {s} must be >= 0")
    x_s = add_noise(x0, s, eps, sched)
    if inversion == "noise":
        x_t = add_noise(x0, t, eps, sched)
    elif inversion == "ddim":
        # one deterministic DDIM inversion step s -> t from the unconditional prediction
        eps_s = den.predict(x_s, s, UNCONDITIONAL)
        ab_s, ab_t = sched.alpha_bar[s], sched.alpha_bar[t]
        x0_hat = (x_s - np.sqrt(1.0 - ab_s) * eps_s) / np.sqrt(ab_s)
        x_t = np.sqrt(ab_t) * x0_hat + np.sqrt(1.0 - ab_t) * eps_s
    else:
        raise ValueError(f"unknown inversion mode {inversion!r}")
    resid = den.predict(x_t, t, cond) - den.predict(x_s, s, UNCONDITIONAL)
    return t, s, x_t, x_s, resid


def ism_residual(
    x0, t: int, delta_T: int, den: Denoiser, cond, sched: NoiseSchedule, eps, inversion: str = "noise"
) -> float:
    """Interval score matching value ``omega(t) ||eps_hat(x_t,t,cond) - eps_hat(x_s,s,uncond)||^2``.

    ``s = t - delta_T`` and ``x_s`` is the forward-noised ``x0`` at ``s``. With
    ``inversion="noise"`` (default) ``x_t`` is noised with the same ``eps`` draw;
    ``inversion="ddim"`` instead reaches ``x_t`` from ``x_s`` by one DDIM
    inversion step using the unconditional prediction.
    """
    t, _, _, _, resid = _ism_terms(x0, t, delta_T, den, cond, sched, eps, inversion)
    return float(sched.omega[t] * np.sum(resid * resid))


def ism_loss_and_grad(x0, t: int, delta_T: int, den: Denoiser, cond, sched: NoiseSchedule, eps):
    """ISM value with its exact gradient w.r.t. ``x0``; needs ``den.vjp``."""
    t, s, x_t, x_s, resid = _ism_terms(x0, t, delta_T, den, cond, sched, eps)
    w = sched.omega[t]
    g = 2.0 * w * resid
    grad = np.sqrt(sched.alpha_bar[t]) * den.vjp(x_t, t, cond, g) - np.sqrt(
        sched.alpha_bar[s]
    ) * den.vjp(x_s, s, UNCONDITIONAL, g)
    return float(w * np.sum(resid * resid)), grad
