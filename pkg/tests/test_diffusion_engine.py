import numpy as np
import pytest
import torch

from modules.tcd_forecast.diffusion_engine import (DiffusionState, chain_seeds, diffuse, predict_x0, reverse_step,
                                                   sample, sample_chains)
from modules.tcd_forecast.errors import NumericalDomainError, ParameterError, StateError, StructuralError
from modules.tcd_forecast.sequence_core import (PATTERN_KINDS, AvailabilityMask, OcclusionPattern, PoseSequence,
                                                make_mask)
from modules.tcd_forecast.utils import derive_seed, make_generator

from conftest import OracleDenoiser, zero_denoiser


@pytest.fixture
def canvas():
    rng = np.random.default_rng(0)
    return PoseSequence(rng.normal(size=(8, 4, 3)), observation_len=5)


@pytest.fixture
def mask():
    joint_bits = np.zeros((8, 4), dtype=np.uint8)
    joint_bits[:5] = 1
    joint_bits[2, 1] = 0
    joint_bits[4, 3] = 0
    return AvailabilityMask.from_joint_bits(joint_bits, 5)


def test_diffuse_keeps_observed_entries(canvas, mask, schedule):
    s_t, eps = diffuse(canvas, mask, 20, schedule, seed=1)
    keep = torch.as_tensor(mask.as_bool())
    s0 = torch.as_tensor(canvas.coords)
    assert torch.equal(s_t[keep], s0[keep])
    a, b = schedule.signal_rates(20)
    torch.testing.assert_close(s_t[~keep], a * s0[~keep] + b * eps[~keep])
    again, _ = diffuse(canvas, mask, 20, schedule, seed=1)
    assert torch.equal(s_t, again)


def test_diffuse_rejects_step_zero(canvas, mask, schedule):
    with pytest.raises(ParameterError):
        diffuse(canvas, mask, 0, schedule, seed=1)


def test_predict_x0_inverts_diffuse(canvas, mask, schedule):
    s_t, eps = diffuse(canvas, mask, 35, schedule, seed=4)
    x0 = predict_x0(s_t, eps, 35, schedule)
    keep = torch.as_tensor(mask.as_bool())
    torch.testing.assert_close(x0[~keep], torch.as_tensor(canvas.coords)[~keep])


def test_reverse_step_state_rules(canvas, mask, schedule):
    state = DiffusionState.start(canvas, mask, schedule, seed=2)
    assert state.t == schedule.T
    keep = torch.as_tensor(mask.as_bool())
    assert torch.equal(state.s_t[keep], torch.as_tensor(canvas.coords)[keep])

    nxt = reverse_step(state, torch.zeros_like(state.s_t), schedule, seed=3)
    assert nxt.t == schedule.T - 1
    assert torch.equal(nxt.s_t[keep], state.s_t[keep])

    finished = DiffusionState(state.s_t, 0, state.mask, state.observed)
    with pytest.raises(StateError):
        reverse_step(finished, torch.zeros_like(state.s_t), schedule, seed=0)


def test_last_step_adds_no_noise(canvas, mask, schedule):
    state = DiffusionState.start(canvas, mask, schedule, seed=2)
    at_one = DiffusionState(state.s_t, 1, state.mask, state.observed)
    a = reverse_step(at_one, torch.zeros_like(state.s_t), schedule, seed=10)
    b = reverse_step(at_one, torch.zeros_like(state.s_t), schedule, seed=99)
    assert torch.equal(a.s_t, b.s_t)


def test_oracle_chain_recovers_truth(canvas, mask, schedule):
    truth = canvas.coords
    observed = canvas.with_coords(np.where(mask.as_bool(), truth, 0.0))
    out = sample(OracleDenoiser(truth, schedule), observed, mask, schedule, seed=5)
    keep = mask.as_bool()
    np.testing.assert_array_equal(out.coords[keep], observed.coords[keep])
    np.testing.assert_allclose(out.coords, truth, atol=1e-6)


def test_sampling_is_deterministic_per_seed(canvas, mask, schedule):
    a = sample(zero_denoiser, canvas, mask, schedule, seed=7)
    b = sample(zero_denoiser, canvas, mask, schedule, seed=7)
    c = sample(zero_denoiser, canvas, mask, schedule, seed=8)
    np.testing.assert_array_equal(a.coords, b.coords)
    assert not np.array_equal(a.coords, c.coords)


def test_more_chains_keep_earlier_chains(canvas, mask, schedule):
    obs = torch.as_tensor(canvas.coords)
    keep = torch.as_tensor(mask.as_bool())
    seeds = chain_seeds(11, 4)
    four = sample_chains(zero_denoiser, obs, keep, schedule, seeds)
    two = sample_chains(zero_denoiser, obs, keep, schedule, seeds[:2])
    assert torch.equal(four[:2], two)


def test_fully_observed_canvas_is_returned_unchanged(canvas, schedule):
    full = AvailabilityMask(np.ones((8, 4, 3), dtype=np.uint8), 8)
    out = sample(zero_denoiser, canvas, full, schedule, seed=0)
    np.testing.assert_array_equal(out.coords, canvas.coords)


def test_non_finite_denoiser_output_is_caught(canvas, mask, schedule):
    def broken(s_t, t, m, observed, hint=None):
        return torch.full_like(s_t, float("nan"))

    with pytest.raises(NumericalDomainError):
        sample(broken, canvas, mask, schedule, seed=0)


def test_shape_mismatch(canvas, skeleton, schedule):
    wrong = make_mask(OcclusionPattern("full"), 5, 3, skeleton, 0)
    with pytest.raises(StructuralError):
        sample(zero_denoiser, canvas, wrong, schedule, seed=0)


def test_fully_observed_diffuse_is_identity(canvas, schedule):
    full = AvailabilityMask(np.ones((8, 4, 3), dtype=np.uint8), 8)
    for t in (1, 25, 50):
        s_t, _ = diffuse(canvas, full, t, schedule, seed=t)
        assert torch.equal(s_t, torch.as_tensor(canvas.coords))


def test_fully_hidden_canvas_is_standard_normal_at_last_step(schedule):
    zeros = PoseSequence(np.zeros((2000, 17, 3)))
    hidden = AvailabilityMask(np.zeros((2000, 17, 3), dtype=np.uint8), 0)
    s_t, _ = diffuse(zeros, hidden, schedule.T, schedule, seed=12)
    assert abs(float(s_t.mean())) <= 0.02
    assert 0.98 <= float(s_t.var()) <= 1.02


def test_chains_are_driven_by_reverse_step(canvas, mask, schedule):
    obs = torch.as_tensor(canvas.coords)
    keep = torch.as_tensor(mask.as_bool())
    seeds = chain_seeds(3, 2)
    chains = sample_chains(zero_denoiser, obs, keep, schedule, seeds)

    generators = [make_generator(s) for s in seeds]
    state = DiffusionState.start(obs.expand(2, *obs.shape), keep.expand(2, *keep.shape), schedule, generators)
    while state.t > 0:
        state = reverse_step(state, torch.zeros_like(state.s_t), schedule, generators)
    assert torch.equal(chains, state.s_t)


@pytest.mark.parametrize("kind", PATTERN_KINDS)
def test_observed_entries_survive_sampling_for_every_pattern(kind, skeleton, schedule):
    pattern = OcclusionPattern.preset(kind)
    rng = np.random.default_rng(len(kind))
    O, P = 6, 4
    for trial in range(15):
        mask = make_mask(pattern, O, P, skeleton, seed=derive_seed(kind, trial))
        truth = rng.normal(size=(O + P, 17, 3))
        keep = mask.as_bool()
        observed = PoseSequence(np.where(keep, truth, 0.0), observation_len=O)
        for denoiser in (zero_denoiser, OracleDenoiser(truth, schedule)):
            out = sample(denoiser, observed, mask, schedule, seed=trial)
            np.testing.assert_array_equal(out.coords[keep], observed.coords[keep])
            assert np.all(np.isfinite(out.coords))
        np.testing.assert_allclose(out.coords, truth, atol=1e-6)
