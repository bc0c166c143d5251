# /modules/tcd_forecast/diffusion_engine.py
# Masked forward corruption, the ancestral reverse step and the
# replacement-conditioned sampling loop.
#
# A denoiser is any callable
#     denoiser(s_t, t, mask, observed, hint=None) -> eps_hat
# over batched tensors (B x frames x J x 3, t of shape B). DenoiserNet
# implements it; tests plug in analytic oracles.

import logging
from dataclasses import dataclass, replace

import torch

from .errors import ParameterError, NumericalDomainError, StateError, StructuralError
from .schedule import NoiseSchedule
from .sequence_core import AvailabilityMask, PoseSequence
from .utils import as_tensor, as_array, derive_seed, make_generator

logger = logging.getLogger('tcd_system.sampler')


def mask_tensor(M, like: torch.Tensor = None) -> torch.Tensor:
    """Boolean tensor view of an AvailabilityMask (or anything mask-shaped)."""
    bits = M.bits if isinstance(M, AvailabilityMask) else M
    out = torch.as_tensor(as_array(bits) if not isinstance(bits, torch.Tensor) else bits) != 0
    if like is not None and out.shape != like.shape[-out.dim():]:
        raise StructuralError(f"Mask shape {tuple(out.shape)} does not match tensor {tuple(like.shape)}")
    return out


def _coords(X) -> torch.Tensor:
    return as_tensor(X.coords if isinstance(X, PoseSequence) else X)


# ==========================================
# --- FORWARD PROCESS ---
# ==========================================

def diffuse(s0, M, t, sched: NoiseSchedule, seed):
    """
    Closed-form corruption to step t: unavailable entries become
    sqrt(abar_t) s0 + sqrt(1 - abar_t) eps, available entries stay s0.
    Returns (s_t, eps).
    """
    t = sched.check_step(t)
    s0 = _coords(s0)
    keep = mask_tensor(M, s0)
    eps = torch.randn(s0.shape, generator=make_generator(seed), dtype=s0.dtype)
    a, b = sched.signal_rates(t)
    s_t = torch.where(keep, s0, a * s0 + b * eps)
    return s_t, eps


def diffuse_batch(s0: torch.Tensor, keep: torch.Tensor, t: torch.Tensor, sched: NoiseSchedule, generator):
    """Batched variant with one step per element (training)."""
    if t.min() < 1 or t.max() > sched.T:
        raise ParameterError(f"Steps must lie in 1..{sched.T}")
    eps = torch.randn(s0.shape, generator=generator, dtype=s0.dtype)
    abar = torch.as_tensor(sched.alpha_bar, dtype=s0.dtype)[t].view(-1, 1, 1, 1)
    s_t = torch.where(keep, s0, abar.sqrt() * s0 + (1.0 - abar).sqrt() * eps)
    return s_t, eps


def predict_x0(s_t, eps_hat, t, sched: NoiseSchedule):
    """x0 = (s_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)."""
    a, b = sched.signal_rates(t)
    if a == 0.0:
        raise NumericalDomainError(f"alpha_bar is zero at step {t}; x0 is not recoverable")
    return (_coords(s_t) - b * _coords(eps_hat)) / a


# ==========================================
# --- REVERSE PROCESS ---
# ==========================================

def _draw_noise(source, shape, dtype) -> torch.Tensor:
    """
    Standard normal draw. `source` is a seed, or a sequence of generators,
    one per chain along the leading axis; each chain then reads only its own
    generator.
    """
    if isinstance(source, (list, tuple)):
        return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in source])
    return torch.randn(shape, generator=make_generator(source), dtype=dtype)


@dataclass(frozen=True, eq=False)
class DiffusionState:
    """Sampler state; entries where mask is set always equal `observed`."""
    s_t: torch.Tensor
    t: int
    mask: torch.Tensor
    observed: torch.Tensor

    @classmethod
    def start(cls, observed, M, sched: NoiseSchedule, seed) -> "DiffusionState":
        """s_T: observed values on mask=1 entries, standard normal elsewhere."""
        observed = _coords(observed)
        keep = mask_tensor(M, observed)
        noise = _draw_noise(seed, observed.shape, observed.dtype)
        return cls(torch.where(keep, observed, noise), sched.T, keep, observed)


def reverse_step(state: DiffusionState, eps_hat, sched: NoiseSchedule, seed) -> DiffusionState:
    """Ancestral DDPM step to t-1 followed by replacement conditioning."""
    t = state.t
    if t < 1:
        raise StateError("reverse_step called on a finished chain (t = 0)")
    eps_hat = _coords(eps_hat).to(state.s_t.dtype)
    beta = float(sched.beta[t])
    mean = (state.s_t - (beta / (1.0 - float(sched.alpha_bar[t])) ** 0.5) * eps_hat) / float(sched.alpha[t]) ** 0.5
    if t > 1:
        mean = mean + sched.posterior_variance(t) ** 0.5 * _draw_noise(seed, mean.shape, mean.dtype)
    s_prev = torch.where(state.mask, state.observed, mean)
    return replace(state, s_t=s_prev, t=t - 1)


@torch.no_grad()
def sample_chains(denoiser, observed: torch.Tensor, keep: torch.Tensor, sched: NoiseSchedule,
                  seeds, hint: torch.Tensor = None) -> torch.Tensor:
    """
    Runs one chain per seed in a single batch and returns n x frames x J x 3.
    Chain k only consumes its own generator, so adding seeds never changes
    the existing chains.
    """
    observed = as_tensor(observed)
    if keep.shape != observed.shape:
        raise StructuralError(f"Mask shape {tuple(keep.shape)} does not match sequence {tuple(observed.shape)}")
    generators = [make_generator(s) for s in seeds]
    n = len(generators)
    hint_b = None if hint is None else as_tensor(hint).expand(n, *hint.shape)

    state = DiffusionState.start(observed.expand(n, *observed.shape), keep.expand(n, *keep.shape), sched,
                                 generators)
    while state.t > 0:
        steps = torch.full((n,), state.t, dtype=torch.long)
        eps_hat = denoiser(state.s_t, steps, state.mask, state.observed, hint_b)
        state = reverse_step(state, eps_hat, sched, generators)
    if not torch.isfinite(state.s_t).all():
        raise NumericalDomainError("Sampler produced non-finite values")
    return state.s_t


def chain_seeds(seed, n):
    return [derive_seed(seed, "chain", k) for k in range(n)]


def sample(denoiser, observed: PoseSequence, M: AvailabilityMask, sched: NoiseSchedule, seed,
           hint=None) -> PoseSequence:
    """Single replacement-conditioned chain from s_T down to s_0."""
    obs = _coords(observed)
    keep = mask_tensor(M)
    if keep.shape != obs.shape:
        raise StructuralError(f"Mask shape {tuple(keep.shape)} does not match sequence {tuple(obs.shape)}")
    out = sample_chains(denoiser, obs, keep, sched, [seed], hint=hint)[0]
    return observed.with_coords(as_array(out))
