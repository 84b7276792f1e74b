"""Noise schedules, forward diffusion and posterior statistics.

Arrays are indexed by diffusion step with a leading sentinel so that
``alpha_bar[0] == 1`` and ``beta[t]`` is the step-``t`` intensity for
``1 <= t <= T`` (``beta[0]`` is unused and stored as 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BETA_MAX = 0.999
DEFAULT_T = 1000
DEFAULT_BETA_1 = 1e-4
DEFAULT_BETA_T = 0.02
DEFAULT_OFFSET = 0.008


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    power_s: float | None = None
    offset_b: float | None = None
    splice_index: int | None = None
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    posterior_var: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.T + 1,):
            raise ScheduleError(f"beta must have T+1={self.T + 1} entries, got {beta.shape}")
        b = beta[1:]
        if np.any(b <= 0) or np.any(b >= 1):
            raise ScheduleError("beta[t] must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha[0] = 1.0
        alpha_bar = np.cumprod(alpha)
        post = np.zeros_like(beta)
        post[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * b
        for name, arr in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar), ("posterior_var", post)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def name(self) -> str:
        if self.kind == "linear":
            return "linear"
        s = self.power_s
        tag = "cos" if self.kind == "cosine_power" else "scos"
        return f"{tag}{int(s) if float(s).is_integer() else s}"

    def snr(self) -> np.ndarray:
        """Signal-to-noise ratio alpha_bar / (1 - alpha_bar), steps 1..T."""
        ab = self.alpha_bar[1:]
        return ab / (1.0 - ab)

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ScheduleError(f"step outside [1, {self.T}]")


def _linear_betas(T: int, beta_1: float, beta_T: float) -> np.ndarray:
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not (0 < beta_1 <= beta_T < 1):
        raise ScheduleError("need 0 < beta_1 <= beta_T < 1")
    b = np.zeros(T + 1)
    b[1:] = np.linspace(beta_1, beta_T, T) if T > 1 else beta_1
    return b


def cosine_power_alpha_bar(T: int, s: float, b: float) -> np.ndarray:
    """f_s(t) / f_s(0) with f_s(t) = cos^s(((t/T + b) / (1 + b)) * pi/2), t = 0..T."""
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + b) / (1.0 + b) * (math.pi / 2)) ** s
    return f / f[0]


def _cosine_power_betas(T: int, s: float, b: float) -> np.ndarray:
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if s < 1:
        raise ScheduleError("power s must be >= 1")
    if b <= 0:
        raise ScheduleError("offset b must be > 0")
    ab = cosine_power_alpha_bar(T, s, b)
    beta = np.zeros(T + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        beta[1:] = 1.0 - ab[1:] / ab[:-1]
    beta[1:] = np.where(np.isfinite(beta[1:]), beta[1:], BETA_MAX)
    beta[1:] = np.clip(beta[1:], None, BETA_MAX)
    return beta


def build_linear(T: int = DEFAULT_T, beta_1: float = DEFAULT_BETA_1,
                 beta_T: float = DEFAULT_BETA_T) -> NoiseSchedule:
    return NoiseSchedule("linear", T, _linear_betas(T, beta_1, beta_T))


def build_cosine_power(T: int = DEFAULT_T, s: float = 2, b: float = DEFAULT_OFFSET) -> NoiseSchedule:
    return NoiseSchedule("cosine_power", T, _cosine_power_betas(T, s, b), power_s=s, offset_b=b)


def find_splice(cos_beta: np.ndarray, lin_beta: np.ndarray) -> int:
    """First step of the final run on which the cosine-power beta is >= the linear beta.

    Both arrays carry the unused index-0 slot. For powers whose cosine curve
    starts slightly above the linear beta_1 the early overlap is skipped; the
    splice is where the cosine curve overtakes the linear one for good.
    """
    below = np.nonzero(cos_beta[1:] < lin_beta[1:])[0]
    if below.size == 0:
        raise ScheduleError("cosine-power betas never fall below the linear grid; no splice point")
    t_star = int(below[-1]) + 2
    if t_star > len(cos_beta) - 1:
        raise ScheduleError("cosine-power and linear beta grids never cross; no splice point")
    return t_star


def build_scos(T: int = DEFAULT_T, s: float = 2, b: float = DEFAULT_OFFSET,
               beta_1: float = DEFAULT_BETA_1, beta_T: float = DEFAULT_BETA_T) -> NoiseSchedule:
    """Spoon-cosine: cosine-power betas before the splice step, linear betas from it on."""
    cos_b = _cosine_power_betas(T, s, b)
    lin_b = _linear_betas(T, beta_1, beta_T)
    t_star = find_splice(cos_b, lin_b)
    beta = np.where(np.arange(T + 1) < t_star, cos_b, lin_b)
    beta[0] = 0.0
    return NoiseSchedule("scos", T, beta, power_s=s, offset_b=b, splice_index=t_star)


def build_schedule(kind: str, T: int = DEFAULT_T, s: float = 2, b: float = DEFAULT_OFFSET,
                   beta_1: float = DEFAULT_BETA_1, beta_T: float = DEFAULT_BETA_T) -> NoiseSchedule:
    if kind == "linear":
        return build_linear(T, beta_1, beta_T)
    if kind in ("cos", "cosine_power"):
        return build_cosine_power(T, s, b)
    if kind == "scos":
        return build_scos(T, s, b, beta_1, beta_T)
    raise ScheduleError(f"unknown schedule kind {kind!r}")


# -- diffusion math ---------------------------------------------------------

def _bcast(coef: np.ndarray, like: np.ndarray) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` is a scalar or one step per leading-axis item; t = 0 returns x0.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.T):
        raise ScheduleError(f"step outside [0, {sched.T}]")
    ab = _bcast(sched.alpha_bar[t], x0)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(np.result_type(x0.dtype, eps.dtype), copy=False)


def posterior_mean_var(x0: np.ndarray, xt: np.ndarray, t: int, sched: NoiseSchedule):
    """Mean and variance of q(x_{t-1} | x_t, x_0)."""
    sched.check_step(t)
    ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    beta_t, alpha_t = sched.beta[t], sched.alpha[t]
    c0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = c0 * np.asarray(x0) + ct * np.asarray(xt)
    return mean, float(sched.posterior_var[t])


def mu_from_eps(xt: np.ndarray, t, eps_pred: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """(1/sqrt(alpha_t)) (x_t - beta_t / sqrt(1 - abar_t) * eps)."""
    xt = np.asarray(xt)
    eps_pred = np.asarray(eps_pred)
    if xt.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch {xt.shape} vs {eps_pred.shape}")
    sched.check_step(t)
    t = np.asarray(t)
    a = _bcast(sched.alpha[t], xt)
    b = _bcast(sched.beta[t], xt)
    ab = _bcast(sched.alpha_bar[t], xt)
    return (xt - b / np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(a)


def predict_x0(xt: np.ndarray, t, eps_pred: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x0_hat = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)."""
    t = np.asarray(t)
    ab = _bcast(sched.alpha_bar[t], np.asarray(xt))
    return (xt - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


# -- progressive power controller -------------------------------------------

@dataclass(frozen=True)
class ProgressiveController:
    """Anneals the Scos power from ``s_start`` down to ``s_end`` over ``tau`` steps."""

    tau: int
    s_start: int = 6
    s_end: int = 2
    stage_length: int | None = None

    def __post_init__(self):
        if self.s_start < self.s_end:
            raise ValueError("s_start must be >= s_end")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.stage_length is None:
            n_stages = self.s_start - self.s_end + 1
            object.__setattr__(self, "stage_length", max(1, math.ceil(self.tau / n_stages)))
        elif self.stage_length < 1:
            raise ValueError("stage_length must be >= 1")

    def power(self, step: int) -> int:
        return current_power(self, step)


def current_power(controller: ProgressiveController, step: int) -> int:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= controller.tau:
        return controller.s_end
    s = controller.s_start - step // controller.stage_length
    return int(min(controller.s_start, max(controller.s_end, s)))


# -- small-object survival --------------------------------------------------

def contrast_power(image: np.ndarray, box, ring: int = 2) -> float:
    """Mean squared deviation of box pixels from the mean of a surrounding ring.

    ``box`` is (x, y, w, h) in pixels; the ring is up to ``ring`` pixels wide
    and clipped to the image.
    """
    x, y, w, h = (int(v) for v in box)
    H, W = image.shape[:2]
    if w <= 0 or h <= 0:
        raise ValueError("empty box")
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"box {box} outside {W}x{H} image")
    inner = image[y:y + h, x:x + w].reshape(-1, *image.shape[2:])
    x0, y0 = max(0, x - ring), max(0, y - ring)
    x1, y1 = min(W, x + w + ring), min(H, y + h + ring)
    sel = np.ones((y1 - y0, x1 - x0), dtype=bool)
    sel[y - y0:y - y0 + h, x - x0:x - x0 + w] = False
    outer = image[y0:y1, x0:x1][sel]
    if outer.size == 0:
        bg = 0.0
    else:
        bg = outer.mean(axis=0)
    return float(((inner - bg) ** 2).mean())


def survival_time_from_power(p_box: float, sched: NoiseSchedule, threshold: float = 1.0) -> int:
    """Largest t with snr(t) * p_box >= threshold, 0 if none."""
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    ok = np.nonzero(sched.snr() * p_box >= threshold)[0]
    return int(ok[-1]) + 1 if ok.size else 0


def region_survival_time(image: np.ndarray, box, sched: NoiseSchedule, threshold: float = 1.0) -> int:
    return survival_time_from_power(contrast_power(image, box), sched, threshold)
