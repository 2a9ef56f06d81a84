"""Schedule- and distribution-level diffusion math.

Everything here is network-free: the forward corruption process, its
closed-form marginal, the Gaussian posterior used for reverse steps, the
reconstruction objective, and ancestral sampling driven by a pluggable
clean-volume predictor.  The denoiser is always an ``x0``-predictor: it
maps ``(x_t, t, cond)`` to an estimate of the clean volume, which is
converted into a reverse transition through the exact posterior.

All operations are pure given an explicit ``numpy.random.Generator``;
callers that sample concurrently must give each thread its own generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, ShapeError
from .volume import JointVolume, as_array

# Largest per-step variance the schedule may assign; keeps 1 - beta > 0.
MAX_BETA = 0.999

Denoiser = Callable[[np.ndarray, int, object], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta / alpha-bar tables over T discrete steps.

    ``beta[t - 1]`` is the step-``t`` variance for ``t`` in ``1..T``;
    ``alpha_bar`` has ``T + 1`` entries indexed directly by ``t`` with
    ``alpha_bar[0] == 1``.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ConfigurationError(f"t={t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ConfigurationError(f"t={t} outside [1, {self.T}]")

    def validate(self) -> None:
        if self.beta.shape != (self.T,) or self.alpha_bar.shape != (self.T + 1,):
            raise ConfigurationError("schedule table lengths disagree with T")
        if self.alpha_bar[0] != 1.0:
            raise ConfigurationError("alpha_bar[0] must be 1")
        if not np.all(np.diff(self.alpha_bar) < 0):
            raise ConfigurationError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[self.T] >= 1e-2:
            raise ConfigurationError("alpha_bar[T] must end below 1e-2")
        if np.any(self.beta <= 0) or np.any(self.beta > 1):
            raise ConfigurationError("beta values must lie in (0, 1]")
        recur = self.alpha_bar[:-1] * (1.0 - self.beta)
        if np.max(np.abs(recur - self.alpha_bar[1:])) > 1e-10:
            raise ConfigurationError("alpha_bar recurrence violated beyond 1e-10")


def build_cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    """Discrete cosine noise schedule with offset ``s``.

    ``alpha_bar(t) = cos^2(((t/T + s)/(1 + s)) * pi/2) / cos^2((s/(1 + s)) * pi/2)``,
    with each implied beta clipped to ``MAX_BETA`` and alpha_bar rebuilt
    from the clipped betas so the product recurrence stays exact.
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ConfigurationError(f"step count T must be an integer >= 2, got {T!r}")
    if not 0.0 < s < 0.1:
        raise ConfigurationError(f"cosine offset s must lie in (0, 0.1), got {s!r}")

    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    raw_alpha_bar = f / f[0]
    beta = np.clip(1.0 - raw_alpha_bar[1:] / raw_alpha_bar[:-1], 0.0, MAX_BETA)

    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - beta)

    sched = NoiseSchedule(
        T=int(T),
        beta=beta,
        alpha_bar=alpha_bar,
        sqrt_alpha_bar=np.sqrt(alpha_bar),
        sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
    )
    sched.validate()
    return sched


def _match_shapes(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} disagree")


def forward_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Closed-form corruption ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    sched._check_t(t)
    x0_arr = as_array(x0)
    eps_arr = as_array(eps)
    _match_shapes(x0_arr, eps_arr, "forward_sample")
    out = (
        sched.sqrt_alpha_bar[t] * x0_arr.astype(np.float32)
        + sched.sqrt_one_minus_alpha_bar[t] * eps_arr.astype(np.float32)
    ).astype(np.float32)
    if isinstance(x0, JointVolume):
        return JointVolume(out, x0.channel_roles, x0.voxel_spacing)
    return out


def chain_forward_sample(x0, t: int, sched: NoiseSchedule, rng: np.random.Generator):
    """Iterate the one-step kernel ``x_k = sqrt(1 - beta_k) x_{k-1} + sqrt(beta_k) eps_k``.

    Distributionally equivalent to :func:`forward_sample`; kept as the
    slow reference path for schedule-consistency checks.
    """
    sched._check_t(t)
    x = as_array(x0).astype(np.float32)
    for k in range(1, t + 1):
        beta_k = sched.beta[k - 1]
        eps = rng.standard_normal(x.shape, dtype=np.float32)
        x = np.float32(math.sqrt(1.0 - beta_k)) * x + np.float32(math.sqrt(beta_k)) * eps
    if isinstance(x0, JointVolume):
        return JointVolume(x, x0.channel_roles, x0.voxel_spacing)
    return x


def posterior_params(x0, xt, t: int, sched: NoiseSchedule) -> tuple[np.ndarray, float]:
    """Mean and variance of the Gaussian posterior q(x_{t-1} | x_t, x_0).

    mean = sqrt(abar_{t-1}) beta_t / (1 - abar_t) * x0
         + sqrt(1 - beta_t) (1 - abar_{t-1}) / (1 - abar_t) * x_t
    var  = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
    """
    sched._check_t(t)
    x0_arr = as_array(x0).astype(np.float64)
    xt_arr = as_array(xt).astype(np.float64)
    _match_shapes(x0_arr, xt_arr, "posterior_params")
    beta_t = sched.beta[t - 1]
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    coef_x0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    coef_xt = math.sqrt(1.0 - beta_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
    mean = coef_x0 * x0_arr + coef_xt * xt_arr
    return mean, var


def reconstruction_loss(pred_x0, x0) -> float:
    """Mean squared error over all voxels and channels."""
    p = as_array(pred_x0).astype(np.float64)
    x = as_array(x0).astype(np.float64)
    _match_shapes(p, x, "reconstruction_loss")
    return float(np.mean((p - x) ** 2))


@dataclass
class DiffusionBatch:
    """A training tuple (x0, t, eps, xt) with xt in closed form."""

    x0: np.ndarray          # (B, C, D, H, W)
    t: np.ndarray           # (B,) ints in 1..T
    eps: np.ndarray         # same shape as x0
    xt: np.ndarray          # same shape as x0

    def validate(self, sched: NoiseSchedule) -> None:
        sab = sched.sqrt_alpha_bar[self.t].reshape(-1, 1, 1, 1, 1).astype(np.float32)
        somab = sched.sqrt_one_minus_alpha_bar[self.t].reshape(-1, 1, 1, 1, 1).astype(np.float32)
        expect = sab * self.x0 + somab * self.eps
        if np.max(np.abs(expect - self.xt)) > 1e-6:
            raise ShapeError("xt does not match the closed-form corruption within 1e-6")


def make_diffusion_batch(
    x0: np.ndarray, t: np.ndarray, sched: NoiseSchedule, rng: np.random.Generator
) -> DiffusionBatch:
    """Draw eps and corrupt a batch at per-item timesteps."""
    x0 = np.asarray(x0, dtype=np.float32)
    t = np.asarray(t, dtype=np.int64)
    if x0.ndim != 5:
        raise ShapeError(f"expected (B, C, D, H, W) batch, got {x0.shape}")
    if t.shape != (x0.shape[0],):
        raise ShapeError(f"t must have shape ({x0.shape[0]},), got {t.shape}")
    if np.any(t < 1) or np.any(t > sched.T):
        raise ConfigurationError("timesteps outside [1, T]")
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    sab = sched.sqrt_alpha_bar[t].reshape(-1, 1, 1, 1, 1).astype(np.float32)
    somab = sched.sqrt_one_minus_alpha_bar[t].reshape(-1, 1, 1, 1, 1).astype(np.float32)
    return DiffusionBatch(x0=x0, t=t, eps=eps, xt=sab * x0 + somab * eps)


StepHook = Callable[[int, np.ndarray], np.ndarray]


def ancestral_sample_array(
    denoiser: Denoiser,
    sched: NoiseSchedule,
    shape: tuple[int, ...],
    rng: np.random.Generator,
    cond=None,
    pre_step_hook: Optional[StepHook] = None,
    post_hook: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """Reverse-time ancestral sampling on a raw (B, C, D, H, W) state.

    Starts from x_T ~ N(0, I); for t = T..1 the predicted clean volume is
    clipped to [-1, 1] and converted through the posterior, with fresh
    Gaussian noise except at t = 1.  ``pre_step_hook(t, x_t) -> x_t`` runs
    before each denoiser call (used for marginalization overwrites);
    ``post_hook`` runs on the final x_0 before the last clip.
    """
    x = rng.standard_normal(shape, dtype=np.float32)
    for t in range(sched.T, 0, -1):
        if pre_step_hook is not None:
            x = pre_step_hook(t, x)
        pred = np.asarray(denoiser(x, t, cond), dtype=np.float32)
        if pred.shape != x.shape:
            raise ShapeError(
                f"denoiser returned shape {pred.shape}, expected {x.shape} at t={t}"
            )
        pred = np.clip(pred, -1.0, 1.0)
        mean, var = posterior_params(pred, x, t, sched)
        if t > 1:
            z = rng.standard_normal(shape, dtype=np.float32)
            x = (mean + math.sqrt(var) * z).astype(np.float32)
        else:
            x = mean.astype(np.float32)
    if post_hook is not None:
        x = post_hook(x)
    return np.clip(x, -1.0, 1.0).astype(np.float32)


def ancestral_sample(
    denoiser: Denoiser,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    spatial_shape: tuple[int, int, int],
    channel_roles: tuple[str, ...],
    voxel_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    cond=None,
    pre_step_hook: Optional[StepHook] = None,
) -> JointVolume:
    """Sample a single JointVolume by ancestral sampling."""
    shape = (1, len(channel_roles)) + tuple(spatial_shape)
    out = ancestral_sample_array(
        denoiser, sched, shape, rng, cond=cond, pre_step_hook=pre_step_hook
    )
    return JointVolume(out[0], channel_roles, voxel_spacing)
