import numpy as np
import pytest

from modules.tcd_forecast.errors import NumericalDomainError, ParameterError
from modules.tcd_forecast.schedule import cosine_alpha_bar, make_schedule


@pytest.mark.parametrize("kind", ["cosine", "quadratic", "linear"])
def test_schedule_arrays(kind):
    sched = make_schedule(kind, 50)
    assert len(sched.beta) == len(sched.alpha) == len(sched.alpha_bar) == 51
    assert sched.beta[0] == 0.0 and sched.alpha_bar[0] == 1.0
    assert np.all(sched.beta[1:] > 0) and np.all(sched.beta[1:] <= 0.999)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    np.testing.assert_allclose(sched.alpha_bar, np.cumprod(1.0 - sched.beta))


def test_cosine_tracks_closed_form_before_clipping():
    sched = make_schedule("cosine", 50)
    target = cosine_alpha_bar(50)
    np.testing.assert_allclose(sched.alpha_bar[:45], target[:45], rtol=1e-10)


def test_cosine_keeps_more_signal_early_than_quadratic():
    cos, quad = make_schedule("cosine", 50), make_schedule("quadratic", 50)
    early = np.arange(1, 50 // 4 + 1)
    assert np.all(cos.alpha_bar[early] >= quad.alpha_bar[early])


def test_single_step_schedule():
    sched = make_schedule("cosine", 1)
    assert sched.T == 1
    assert 0 < sched.beta[1] <= 0.999


def test_invalid_schedules():
    with pytest.raises(ParameterError):
        make_schedule("cosine", 0)
    with pytest.raises(ParameterError):
        make_schedule("sigmoid", 50)


def test_posterior_variance_and_rates():
    sched = make_schedule("cosine", 50)
    assert sched.posterior_variance(1) == 0.0
    assert 0 < sched.posterior_variance(25) < sched.beta[25]
    a, b = sched.signal_rates(10)
    assert a ** 2 + b ** 2 == pytest.approx(1.0)
    with pytest.raises(NumericalDomainError):
        sched.signal_rates(51)
    with pytest.raises(ParameterError):
        sched.posterior_variance(0)


def test_cosine_reference_values():
    sched = make_schedule("cosine", 50)
    assert sched.alpha_bar[0] == 1.0
    assert sched.beta[1] == pytest.approx(1.748e-3, abs=2e-6)
    assert sched.alpha_bar[50] < 1e-3
