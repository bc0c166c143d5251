import numpy as np
import pytest
import torch

from modules.tcd_forecast.cascade_pipeline import DiffusionBlock
from modules.tcd_forecast.denoiser_net import DenoiserConfig
from modules.tcd_forecast.schedule import make_schedule
from modules.tcd_forecast.sequence_core import (PoseSequence, SkeletonSpec, generate_synthetic_motion,
                                                observation_shift, sample_gait_params)
from modules.tcd_forecast.utils import derive_seed


@pytest.fixture
def skeleton():
    return SkeletonSpec.default()


@pytest.fixture
def schedule():
    return make_schedule("cosine", 50)


def tiny_denoiser_config(frames, joints=17, T=50, **overrides):
    params = dict(residual_layers=1, channels=8, heads=2, feedforward_mult=2, step_embed_dim=8,
                  frames=frames, joints=joints, diffusion_steps=T)
    params.update(overrides)
    return DenoiserConfig(**params)


def synthetic_corpus(n, frames, observation_len, seed=0, static=False):
    skel = SkeletonSpec.default()
    return [generate_synthetic_motion(skel, sample_gait_params(derive_seed(seed, "gait", i), static=static),
                                      frames, 25.0, derive_seed(seed, "motion", i), observation_len=observation_len)
            for i in range(n)]


def f32_exact(X: PoseSequence) -> PoseSequence:
    """Copy with float32-representable coordinates (PSEQ1 payloads are float32)."""
    return X.with_coords(np.asarray(X.coords, dtype=np.float32).astype(np.float64))


class OracleDenoiser:
    """
    Returns the exact noise for a known clean canvas, so every reverse chain
    lands on `truth` at t = 0. `truth` is F x J x 3 in the block's normalized
    space; shorter canvases use its leading frames.
    """

    def __init__(self, truth, sched, expect_hint=False):
        self.truth = torch.as_tensor(np.asarray(truth), dtype=torch.float64)
        self.sched = sched
        self.expect_hint = expect_hint
        self.hints = []

    def __call__(self, s_t, t, mask, observed, hint=None):
        assert (hint is not None) == self.expect_hint
        if hint is not None:
            self.hints.append(hint)
        x0 = self.truth[:s_t.shape[1]]
        abar = torch.as_tensor(self.sched.alpha_bar, dtype=torch.float64)[t].view(-1, 1, 1, 1)
        return (s_t - abar.sqrt() * x0) / (1.0 - abar).sqrt()


def oracle_block(gt_coords, observed_coords, mask, O, role, sched, expect_hint=False):
    """DiffusionBlock (scale 1) whose oracle knows the ground truth in the cascade's normalized space."""
    shift = observation_shift(observed_coords[:O], mask.observation() if mask is not None else None, O)
    truth = np.asarray(gt_coords) - shift
    return DiffusionBlock(OracleDenoiser(truth, sched, expect_hint), sched, role, scale=1.0)


def zero_denoiser(s_t, t, mask, observed, hint=None):
    return torch.zeros_like(s_t)
