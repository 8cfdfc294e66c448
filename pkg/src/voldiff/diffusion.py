"""Diffusion-process algebra: schedules, noising, denoising, sampling.

The forward chain perturbs a clean volume x0 with Gaussian noise over T
steps following a variance schedule beta_t; its closed-form marginal is

    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps

with alpha_t = 1 - beta_t and abar_t the running product of alpha. The
reverse chain inverts one step at a time using a noise-prediction
network:

    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t)
              + sigma_t * z

with the fixed-variance choice sigma_t = sqrt(beta_t) and no noise
injected at the final step (t = 1). Timesteps are 1-based throughout;
arrays are indexed t - 1.

All operations are pure functions of their inputs plus an explicit
torch.Generator, so they are safe to call concurrently on disjoint
outputs. The sampling loop itself is sequential in t by definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ContractViolationError, NumericError, ParameterError, ShapeError

EpsModel = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule arrays over T steps (float64, index t-1)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._idx(t)])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._idx(t)])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._idx(t)])

    def alpha_bar_before(self, t: int) -> float:
        """abar_{t-1}, with abar_0 defined as 1."""
        i = self._idx(t)
        return 1.0 if i == 0 else float(self.alpha_bar[i - 1])

    def sigma_at(self, t: int) -> float:
        return float(self.sigma[self._idx(t)])

    def _idx(self, t: int) -> int:
        t = int(t)
        if not (1 <= t <= self.T):
            raise ParameterError(f"timestep {t} outside [1, {self.T}]")
        return t - 1


def make_linear_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linearly interpolated beta over T steps (beta_1 = beta_start)."""
    if int(T) < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (np.isfinite(beta_start) and np.isfinite(beta_end)):
        raise ParameterError("beta endpoints must be finite")
    if not (0 < beta_start <= beta_end < 1):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma)


def subsample_schedule(sched: NoiseSchedule, stride: int) -> tuple[NoiseSchedule, np.ndarray]:
    """Re-index the schedule onto every stride-th timestep.

    Returns the compressed schedule plus a map from new 1-based steps to
    the original timesteps (for conditioning the network). The last
    original step T is always kept so sampling still starts from pure
    noise; step variances are re-derived from abar ratios.
    """
    stride = int(stride)
    if not (1 <= stride <= sched.T):
        raise ParameterError(f"stride must be in [1, T], got {stride}")
    if stride == 1:
        return sched, np.arange(1, sched.T + 1)
    ts = np.arange(sched.T, 0, -stride)[::-1].copy()  # ascending, includes T
    abar = sched.alpha_bar[ts - 1]
    abar_prev = np.concatenate(([1.0], abar[:-1]))
    alpha = abar / abar_prev
    beta = 1.0 - alpha
    return NoiseSchedule(len(ts), beta, alpha, abar, np.sqrt(beta)), ts


def _check_t_range(t: int, sched: NoiseSchedule) -> int:
    t = int(t)
    if not (1 <= t <= sched.T):
        raise ParameterError(f"timestep {t} outside [1, {sched.T}]")
    return t


def forward_sample(
    x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Closed-form marginal draw: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    t = _check_t_range(t, sched)
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    abar = sched.alpha_bar_at(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def forward_sample_batch(
    x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """forward_sample with a per-example timestep vector (training path)."""
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    abar = torch.from_numpy(sched.alpha_bar).to(x0.dtype)[t.long() - 1]
    abar = abar.view(-1, *([1] * (x0.ndim - 1)))
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def forward_step(
    x_prev: torch.Tensor, t: int, sched: NoiseSchedule, generator: torch.Generator
) -> torch.Tensor:
    """One step of the noising chain: N(sqrt(1 - beta_t) x_{t-1}, beta_t I)."""
    t = _check_t_range(t, sched)
    beta = sched.beta_at(t)
    noise = torch.randn(x_prev.shape, generator=generator, dtype=x_prev.dtype)
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * noise


def reverse_step(
    x_t: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    z: Optional[torch.Tensor],
) -> torch.Tensor:
    """One ancestral sampling update; z must be zeros (or None) at t = 1."""
    t = _check_t_range(t, sched)
    if eps_pred.shape != x_t.shape:
        raise ShapeError(
            f"eps_pred shape {tuple(eps_pred.shape)} != x_t shape {tuple(x_t.shape)}"
        )
    if t == 1 and z is not None and bool(torch.any(z != 0)):
        raise ContractViolationError("no noise may be injected at the final step (t = 1)")
    alpha = sched.alpha_at(t)
    beta = sched.beta_at(t)
    abar = sched.alpha_bar_at(t)
    mean = (x_t - (beta / math.sqrt(1.0 - abar)) * eps_pred) / math.sqrt(alpha)
    if z is None:
        return mean
    return mean + sched.sigma_at(t) * z


def predict_x0(
    x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Invert the closed-form marginal: (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)."""
    t = _check_t_range(t, sched)
    abar = sched.alpha_bar_at(t)
    if abar <= 0:
        raise NumericError(f"alpha_bar at t={t} is {abar}; cannot invert the marginal")
    return (x_t - math.sqrt(1.0 - abar) * eps_pred) / math.sqrt(abar)


def posterior_mean(
    x0_hat: torch.Tensor, x_t: torch.Tensor, t: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Mean of q(x_{t-1} | x_t, x0) evaluated at a given x0 estimate."""
    t = _check_t_range(t, sched)
    abar = sched.alpha_bar_at(t)
    abar_prev = sched.alpha_bar_before(t)
    beta = sched.beta_at(t)
    alpha = sched.alpha_at(t)
    coef0 = math.sqrt(abar_prev) * beta / (1.0 - abar)
    coefx = math.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    return coef0 * x0_hat + coefx * x_t


def eps_matching_loss(
    eps_model: Callable[..., torch.Tensor],
    x0: torch.Tensor,
    t: torch.Tensor | int,
    eps: torch.Tensor,
    sched: NoiseSchedule,
    condition: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean squared error between eps and the model's prediction at x_t.

    Gradients flow to whatever parameters inside `eps_model` require
    them; x0 and eps are treated as constants.
    """
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if torch.is_tensor(t):
        x_t = forward_sample_batch(x0, t, eps, sched)
    else:
        x_t = forward_sample(x0, int(t), eps, sched)
    pred = eps_model(x_t, t) if condition is None else eps_model(x_t, t, condition)
    if pred.shape != eps.shape:
        raise ShapeError(f"model output shape {tuple(pred.shape)} != eps shape {tuple(eps.shape)}")
    return torch.mean((pred - eps) ** 2)


def sample(
    eps_model: EpsModel,
    shape: tuple[int, ...],
    sched: NoiseSchedule,
    generator: torch.Generator,
    timestep_map: Optional[np.ndarray] = None,
    correct_x0: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Full ancestral sampling loop from x_T ~ N(0, I) down to x_0.

    `timestep_map` translates the (possibly subsampled) schedule's steps
    back to original timesteps for network conditioning. When
    `correct_x0` is given, each step predicts x0, applies the correction,
    and re-derives the step mean from the corrected estimate (the
    data-consistency path); otherwise the plain reverse update is used.
    Deterministic under a fixed generator state.
    """
    x = torch.randn(shape, generator=generator, dtype=dtype)
    for i in range(sched.T, 0, -1):
        t_net = int(timestep_map[i - 1]) if timestep_map is not None else i
        eps_pred = eps_model(x, t_net)
        if not bool(torch.isfinite(eps_pred).all()):
            raise NumericError(f"non-finite noise prediction at step {i}")
        z = torch.randn(shape, generator=generator, dtype=dtype) if i > 1 else None
        if correct_x0 is None:
            x = reverse_step(x, eps_pred, i, sched, z)
        else:
            x0_hat = correct_x0(predict_x0(x, eps_pred, i, sched))
            x = posterior_mean(x0_hat, x, i, sched)
            if z is not None:
                x = x + sched.sigma_at(i) * z
    return x
