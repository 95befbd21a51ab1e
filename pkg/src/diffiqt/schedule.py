"""Continuous-time variance-preserving diffusion with a cosine schedule.

Scalar schedule quantities are computed in double precision. Tensor-valued
helpers (:func:`forward_sample`, :func:`convert`) accept numpy arrays or
torch tensors and keep the caller's dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

from .errors import DomainError, ShapeError, SingularityError

Kind = Literal["epsilon", "x", "v"]
KINDS = ("epsilon", "x", "v")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: Literal["cosine"] = "cosine"
    s_offset: float = 0.008
    clip_alpha_min: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.s_offset < 1.0:
            raise DomainError(f"s_offset must lie in (0, 1), got {self.s_offset}")
        if self.kind != "cosine":
            raise DomainError(f"unknown schedule kind {self.kind!r}")


@dataclass(frozen=True)
class TransitionParams:
    alpha_ts: float
    sigma2_ts: float


@dataclass(frozen=True)
class PosteriorParams:
    mean_coeff_xt: float
    mean_coeff_x: float
    sigma2_Q: float

    def mean(self, x_t, x):
        return self.mean_coeff_xt * x_t + self.mean_coeff_x * x


@dataclass
class Prediction:
    kind: Kind
    tensor: object


def _check_t(t: float, name: str = "t") -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0 or math.isnan(t):
        raise DomainError(f"{name}={t} outside [0, 1]")
    return t


def alpha_sigma(sched: NoiseSchedule, t: float) -> tuple[float, float]:
    """Signal and noise scales (alpha_t, sigma_t) with alpha_t^2 + sigma_t^2 = 1."""
    t = _check_t(t)
    s = sched.s_offset
    f0 = math.cos(s / (1.0 + s) * math.pi / 2.0)
    ft = math.cos((t + s) / (1.0 + s) * math.pi / 2.0)
    alpha = max(abs(ft / f0), sched.clip_alpha_min)
    alpha = min(alpha, 1.0)
    # sigma^2 = (1 - a)(1 + a) avoids cancellation near alpha = 1
    sigma = math.sqrt(max((1.0 - alpha) * (1.0 + alpha), 0.0))
    return alpha, sigma


def transition(sched: NoiseSchedule, s: float, t: float) -> TransitionParams:
    """Parameters of q(x_t | x_s) = N(alpha_ts x_s, sigma2_ts I) for s <= t."""
    s, t = _check_t(s, "s"), _check_t(t)
    if s > t:
        raise DomainError(f"transition needs s <= t, got s={s}, t={t}")
    a_s, sig_s = alpha_sigma(sched, s)
    a_t, sig_t = alpha_sigma(sched, t)
    alpha_ts = a_t / a_s
    sigma2_ts = sig_t**2 - alpha_ts**2 * sig_s**2
    if sigma2_ts < 0.0:
        if sigma2_ts < -1e-12:
            raise ArithmeticError(f"negative transition variance {sigma2_ts} at s={s}, t={t}")
        sigma2_ts = 0.0
    return TransitionParams(alpha_ts, sigma2_ts)


def forward_sample(x, t: float, eps, sched: NoiseSchedule):
    """x_t = alpha_t x + sigma_t eps."""
    if tuple(x.shape) != tuple(eps.shape):
        raise ShapeError(f"x {tuple(x.shape)} and eps {tuple(eps.shape)} differ in shape")
    a, sig = alpha_sigma(sched, t)
    return a * x + sig * eps


def posterior_params(sched: NoiseSchedule, s: float, t: float) -> PosteriorParams:
    """Gaussian q(x_s | x_t, x) for s < t.

    mean = (alpha_ts sigma_s^2 / sigma_t^2) x_t + (alpha_s sigma2_ts / sigma_t^2) x
    var  = sigma2_ts sigma_s^2 / sigma_t^2
    """
    s, t = _check_t(s, "s"), _check_t(t)
    if s >= t:
        raise DomainError(f"posterior needs s < t, got s={s}, t={t}")
    tr = transition(sched, s, t)
    a_s, sig_s = alpha_sigma(sched, s)
    _, sig_t = alpha_sigma(sched, t)
    var_t = sig_t**2
    if var_t == 0.0:
        raise SingularityError(f"sigma_t = 0 at t={t}")
    var_s = sig_s**2
    return PosteriorParams(
        mean_coeff_xt=tr.alpha_ts * var_s / var_t,
        mean_coeff_x=a_s * tr.sigma2_ts / var_t,
        sigma2_Q=tr.sigma2_ts * var_s / var_t,
    )


def _to_x(kind: str, y, x_t, a: float, sig: float):
    if kind == "x":
        return y
    if kind == "epsilon":
        return (x_t - sig * y) / a
    return a * x_t - sig * y  # v


def convert(pred: Prediction, target_kind: Kind, x_t, t: float, sched: NoiseSchedule) -> Prediction:
    """Exact change of parametrization at fixed (x_t, t).

    x = (x_t - sigma eps) / alpha, eps = (x_t - alpha x) / sigma,
    v = alpha eps - sigma x, x = alpha x_t - sigma v.
    """
    if pred.kind not in KINDS or target_kind not in KINDS:
        raise DomainError(f"unknown parametrization {pred.kind!r} -> {target_kind!r}")
    if tuple(pred.tensor.shape) != tuple(x_t.shape):
        raise ShapeError("prediction and x_t differ in shape")
    a, sig = alpha_sigma(sched, t)
    if pred.kind == target_kind:
        return Prediction(target_kind, pred.tensor)
    if target_kind == "x":
        return Prediction("x", _to_x(pred.kind, pred.tensor, x_t, a, sig))
    if target_kind == "epsilon":
        if pred.kind == "v":
            # eps = sigma x_t + alpha v
            return Prediction("epsilon", sig * x_t + a * pred.tensor)
        if sig == 0.0:
            raise SingularityError(f"sigma_t = 0 at t={t}; epsilon is undefined")
        return Prediction("epsilon", (x_t - a * pred.tensor) / sig)
    # target v
    if pred.kind == "epsilon":
        # v = alpha eps - sigma x = (eps - sigma x_t) / alpha
        return Prediction("v", (pred.tensor - sig * x_t) / a)
    if sig == 0.0:
        raise SingularityError(f"sigma_t = 0 at t={t}; v is undefined from an x prediction")
    # v = (alpha x_t - x) / sigma
    return Prediction("v", (a * x_t - pred.tensor) / sig)


def uniform_grid(T: int) -> list[tuple[float, float]]:
    """(s, t) pairs for reverse sampling, from t=1 down to t=1/T."""
    if T < 1:
        raise DomainError("T must be >= 1")
    return [((i - 1) / T, i / T) for i in range(T, 0, -1)]
