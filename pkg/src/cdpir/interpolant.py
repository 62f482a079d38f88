"""Stochastic-interpolant core: schedules, velocity/score algebra, samplers.

Time convention: t = 0 is data (alpha=1, sigma=0), t = 1 is noise. Reverse
sampling integrates from t_start toward t_end with positive step sizes that
decrease t. The diffusion coefficient is omega(t) = sigma(t).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

VP_BETA_MIN = 0.1
VP_BETA_MAX = 20.0


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    GVP = "gvp"
    VP = "vp"


@dataclass(frozen=True)
class ScheduleValues:
    alpha: float
    sigma: float
    d_alpha: float
    d_sigma: float
    omega: float

    @property
    def denom(self) -> float:
        """d_alpha*sigma - alpha*d_sigma; strictly negative on (0, 1)."""
        return self.d_alpha * self.sigma - self.alpha * self.d_sigma


class InterpolantSchedule:
    """Closed-form interpolant coefficients alpha(t), sigma(t) and derivatives."""

    def __init__(self, kind: ScheduleKind | str = ScheduleKind.GVP):
        self.kind = ScheduleKind(kind)

    def __call__(self, t: float) -> ScheduleValues:
        return schedule_eval(self, t)

    def __repr__(self):
        return f"InterpolantSchedule({self.kind.value})"


def schedule_eval(schedule: InterpolantSchedule, t) -> ScheduleValues:
    """Evaluate (alpha, sigma, d_alpha, d_sigma, omega) at t in [0, 1].

    Accepts a scalar or an array of times; field types follow the input.
    """
    t = np.asarray(t, dtype=np.float64)
    scalar = t.ndim == 0
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"t must be in [0, 1], got {t}")
    if schedule.kind == ScheduleKind.LINEAR:
        a, s = 1.0 - t, t + 0.0
        da, ds = np.full_like(t, -1.0), np.ones_like(t)
    elif schedule.kind == ScheduleKind.GVP:
        half_pi = 0.5 * np.pi
        a, s = np.cos(half_pi * t), np.sin(half_pi * t)
        da, ds = -half_pi * np.sin(half_pi * t), half_pi * np.cos(half_pi * t)
    else:  # VP with linear beta(t)
        beta = VP_BETA_MIN + (VP_BETA_MAX - VP_BETA_MIN) * t
        integral = VP_BETA_MIN * t + 0.5 * (VP_BETA_MAX - VP_BETA_MIN) * t**2
        a = np.exp(-0.5 * integral)
        s = np.sqrt(np.maximum(1.0 - a * a, 0.0))
        da = -0.5 * beta * a
        with np.errstate(divide="ignore", invalid="ignore"):
            ds = np.where(s > 0, -a * da / np.where(s > 0, s, 1.0), 0.0)
    if scalar:
        return ScheduleValues(alpha=float(a), sigma=float(s), d_alpha=float(da),
                              d_sigma=float(ds), omega=float(s))
    return ScheduleValues(alpha=a, sigma=s, d_alpha=da, d_sigma=ds, omega=s)


@dataclass(frozen=True)
class GuidanceConfig:
    mu: float = 1.0
    label: int | None = None  # None is the null token

    def __post_init__(self):
        if not np.isfinite(self.mu) or self.mu < 0:
            raise ValueError(f"guidance scale must be finite and >= 0, got {self.mu}")


class SamplerMode(str, Enum):
    SDE = "sde"
    ODE = "ode"


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 1000
    t_start: float = 1.0
    t_end: float | None = None  # defaults to 1/n_steps
    mode: SamplerMode = SamplerMode.SDE
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        t_end = self.resolved_t_end
        if not 0.0 <= t_end < self.t_start <= 1.0:
            raise ValueError(f"need 0 <= t_end < t_start <= 1, got {t_end}, {self.t_start}")

    @property
    def resolved_t_end(self) -> float:
        return 1.0 / self.n_steps if self.t_end is None else self.t_end


def interpolate(x0: np.ndarray, eps: np.ndarray, t: float, schedule: InterpolantSchedule):
    """x_t = alpha(t) * x0 + sigma(t) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    sv = schedule_eval(schedule, t)
    return sv.alpha * x0 + sv.sigma * eps


def velocity_target(x0: np.ndarray, eps: np.ndarray, t: float, schedule: InterpolantSchedule):
    """Time derivative of the interpolant path: d_alpha * x0 + d_sigma * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    sv = schedule_eval(schedule, t)
    return sv.d_alpha * x0 + sv.d_sigma * eps


def velocity_to_score(v: np.ndarray, x: np.ndarray, t: float, schedule: InterpolantSchedule):
    """Convert a velocity estimate to the score of the time-t marginal.

    s = (alpha*v - d_alpha*x) / (sigma * (d_alpha*sigma - alpha*d_sigma)).
    For the exact conditional pair of a known x0 this equals -eps/sigma.
    """
    sv = schedule_eval(schedule, t)
    denom = sv.sigma * sv.denom
    if abs(denom) < 1e-12:
        raise ZeroDivisionError(
            f"score is singular at t={t}: sigma={sv.sigma}, coefficient denominator={sv.denom}"
        )
    return (sv.alpha * np.asarray(v) - sv.d_alpha * np.asarray(x)) / denom


def velocity_to_score_alt(v: np.ndarray, x: np.ndarray, t: float, schedule: InterpolantSchedule):
    """Alternative grouping of the same coefficients:
    s = alpha*v/sigma - d_alpha*x / (d_alpha*sigma - alpha*d_sigma).

    Retained only to document that this grouping is not a valid
    velocity-to-score conversion (it fails the Gaussian closed-form check);
    do not use it for sampling.
    """
    sv = schedule_eval(schedule, t)
    if sv.sigma == 0.0 or abs(sv.denom) < 1e-12:
        raise ZeroDivisionError(f"conversion singular at t={t}")
    return sv.alpha * np.asarray(v) / sv.sigma - sv.d_alpha * np.asarray(x) / sv.denom


def cfg_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, mu: float):
    """Classifier-free guidance combination: v_uncond + mu * (v_cond - v_uncond)."""
    v_cond = np.asarray(v_cond)
    v_uncond = np.asarray(v_uncond)
    if v_cond.shape != v_uncond.shape:
        raise ValueError(f"shape mismatch: {v_cond.shape} vs {v_uncond.shape}")
    if mu == 1.0:
        return v_cond.copy()
    return v_uncond + mu * (v_cond - v_uncond)


def em_step(
    x: np.ndarray,
    t: float,
    dt: float,
    v: np.ndarray,
    s: np.ndarray,
    schedule: InterpolantSchedule,
    rng: np.random.Generator,
):
    """One reverse-time Euler-Maruyama step from t to t - dt.

    x_next = x - dt*v + 0.5*omega(t)*dt*s + sqrt(omega(t)*dt) * z.
    omega is evaluated at the step's start time (Ito convention).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    omega = schedule_eval(schedule, t).omega
    drift = x - dt * np.asarray(v) + 0.5 * omega * dt * np.asarray(s)
    if omega == 0.0:
        return drift
    z = rng.standard_normal(x.shape)
    return drift + np.sqrt(omega * dt) * z


def ode_step(x: np.ndarray, t: float, dt: float, v_fn: Callable):
    """Deterministic Heun step of the reverse-time probability-flow ODE.

    v_fn(x, t) returns the velocity; the step moves from t to t - dt.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    k1 = np.asarray(v_fn(x, t))
    x_pred = x - dt * k1
    k2 = np.asarray(v_fn(x_pred, t - dt))
    return x - 0.5 * dt * (k1 + k2)


def reverse_sample(
    v_fn: Callable,
    schedule: InterpolantSchedule,
    config: SamplerConfig,
    shape: tuple,
    rng: np.random.Generator | None = None,
    x_init: np.ndarray | None = None,
) -> np.ndarray:
    """Integrate the reverse process from noise (or x_init) down to t_end.

    v_fn(x, t) is the velocity field. In SDE mode the step landing on t_end
    uses the deterministic update only, so no score is needed at t_end.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    t_end = config.resolved_t_end
    ts = np.linspace(config.t_start, t_end, config.n_steps + 1)
    x = rng.standard_normal(shape) if x_init is None else np.array(x_init, dtype=np.float64)
    for i in range(config.n_steps):
        t, t_next = float(ts[i]), float(ts[i + 1])
        dt = t - t_next
        if config.mode == SamplerMode.ODE:
            x = ode_step(x, t, dt, v_fn)
        elif i == config.n_steps - 1:
            x = x - dt * np.asarray(v_fn(x, t))  # last step: no noise injection
        else:
            v = np.asarray(v_fn(x, t))
            s = velocity_to_score(v, x, t, schedule)
            x = em_step(x, t, dt, v, s, schedule, rng)
    return x


def gaussian_velocity_field(m: float, tau: float, schedule: InterpolantSchedule) -> Callable:
    """Exact velocity field when the data distribution is N(m, tau^2 I).

    The marginal at t is N(alpha*m, (alpha^2 tau^2 + sigma^2) I) and the
    velocity is the conditional expectation of the path derivative.
    """

    def v_fn(x, t):
        sv = schedule_eval(schedule, t)
        var = sv.alpha**2 * tau**2 + sv.sigma**2
        e_x0 = m + sv.alpha * tau**2 * (x - sv.alpha * m) / var
        e_eps = sv.sigma * (x - sv.alpha * m) / var
        return sv.d_alpha * e_x0 + sv.d_sigma * e_eps

    return v_fn


def gaussian_score(x, t: float, m: float, tau: float, schedule: InterpolantSchedule):
    """Analytic score of the Gaussian marginal N(alpha*m, alpha^2 tau^2 + sigma^2)."""
    sv = schedule_eval(schedule, t)
    var = sv.alpha**2 * tau**2 + sv.sigma**2
    return -(np.asarray(x) - sv.alpha * m) / var
