# /modules/tcd_forecast/schedule.py
# Diffusion noise schedules. Arrays have length T+1 with index 0 as the
# empty-product sentinel (beta_0 = 0, alpha_bar_0 = 1), so index == step.

import math
from dataclasses import dataclass

import numpy as np

from . import config as CFG
from .errors import ParameterError, NumericalDomainError

SCHEDULE_KINDS = ("cosine", "quadratic", "linear")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_step(self, t, lowest=1):
        if not lowest <= int(t) <= self.T:
            raise ParameterError(f"Step {t} outside {lowest}..{self.T}")
        return int(t)

    def posterior_variance(self, t) -> float:
        """beta_tilde_t = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)."""
        t = self.check_step(t)
        return float(self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]))

    def signal_rates(self, t):
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))."""
        if not 0 <= int(t) <= self.T:
            raise NumericalDomainError(f"Step {t} beyond the {self.T}-step schedule")
        a = float(self.alpha_bar[int(t)])
        return math.sqrt(a), math.sqrt(1.0 - a)

    def to_manifest(self) -> dict:
        return {"kind": self.kind, "T": self.T}


def _cosine_f(t, T, s=CFG.COSINE_OFFSET):
    return np.cos(((t / T + s) / (1.0 + s)) * (math.pi / 2.0)) ** 2


def cosine_alpha_bar(T) -> np.ndarray:
    """Unclipped f(t)/f(0) for t = 0..T."""
    t = np.arange(T + 1, dtype=np.float64)
    return _cosine_f(t, T) / _cosine_f(0.0, T)


def make_schedule(kind="cosine", T=CFG.DIFFUSION_STEPS) -> NoiseSchedule:
    if kind not in SCHEDULE_KINDS:
        raise ParameterError(f"Unknown schedule kind '{kind}' (expected one of {SCHEDULE_KINDS})")
    if int(T) != T or T < 1:
        raise ParameterError(f"Schedule needs T >= 1, got {T}")
    T = int(T)

    if kind == "cosine":
        target = cosine_alpha_bar(T)
        beta = 1.0 - target[1:] / target[:-1]
    else:
        # Endpoints rescaled by 50/T so the T=50 chain keeps the same total noise.
        start = CFG.ABLATION_BETA_START * 50.0 / T
        end = CFG.ABLATION_BETA_END * 50.0 / T
        if kind == "linear":
            beta = np.linspace(start, end, T)
        else:
            beta = np.linspace(math.sqrt(start), math.sqrt(end), T) ** 2
    beta = np.clip(beta, 0.0, CFG.BETA_MAX)
    if not np.all(beta > 0):
        raise ParameterError(f"Schedule '{kind}' with T={T} produced a non-positive beta")

    beta = np.concatenate([[0.0], beta])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for array in (beta, alpha, alpha_bar):
        array.flags.writeable = False
    return NoiseSchedule(kind=kind, T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)
