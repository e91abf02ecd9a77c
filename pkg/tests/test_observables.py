import numpy as np
import pytest
import scipy.sparse.linalg as spla

from specdiff import bloch, observables, sle
from specdiff.bloch import CountingPoint, SystemParams
from specdiff.noise import OunParams, RtnParams

DECAY = SystemParams(0.0, 0.0, 1.0)
T_CHECK = np.array([0.0, 0.5, 1.0, 5.0])


def test_pure_decay_moments():
    obs = observables.compute_observables(DECAY, None, T_CHECK)
    e = np.exp(-T_CHECK)
    np.testing.assert_allclose(obs.mean_n, 1 - e, rtol=0, atol=1e-12)
    np.testing.assert_allclose(obs.intensity, e, rtol=0, atol=1e-12)
    np.testing.assert_allclose(obs.second_fact, 0.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(obs.mandel_q[1:], -(1 - e[1:]), rtol=0, atol=1e-9)
    assert np.isnan(obs.mandel_q[0])


def test_pure_decay_photon_pmf():
    pn = observables.photon_pmf(DECAY, None, 3, T_CHECK)
    e = np.exp(-T_CHECK)
    np.testing.assert_allclose(pn[:, 0], e, rtol=0, atol=1e-12)
    np.testing.assert_allclose(pn[:, 1], 1 - e, rtol=0, atol=1e-12)
    np.testing.assert_allclose(pn[:, 2:], 0.0, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(pn[0], [1, 0, 0, 0])


def test_pure_decay_waiting_time():
    wt = observables.waiting_time(DECAY, None)
    assert abs(wt.mean - 1.0) < 1e-6
    assert abs(wt.decay_rate - 1.0) < 1e-6


def test_intensity_is_time_derivative_of_mean():
    dt = 1e-3
    centers = np.array([0.5, 2.0, 7.0])
    t = np.sort(np.concatenate([[0.0], centers - dt, centers, centers + dt]))
    for model, grid in ((None, None), (RtnParams(0.3, 1.0, 0.5), None), (OunParams(0.5, 1.0, 0.6, 1.0), None)):
        obs = observables.compute_observables(SystemParams(0.7, 1, 1), model, t, grid=grid)
        idx = np.searchsorted(t, centers)
        fd = (obs.mean_n[idx + 1] - obs.mean_n[idx - 1]) / (2 * dt)
        np.testing.assert_allclose(obs.intensity[idx], fd, rtol=0, atol=1e-6)


def test_intensity_reaches_one_third_on_resonance():
    obs = observables.compute_observables(SystemParams(0, 1, 1), None, [0.0, 60.0])
    assert abs(obs.intensity[-1] - 1 / 3) < 1e-9
    assert abs(obs.mean_n[-1] / 60.0 - 1 / 3) < 0.02


def test_moment_readers_check_inputs():
    series = sle.average_series(SystemParams(0, 1, 1), None, CountingPoint(1.0, 1), [0.0, 1.0])
    assert observables.mean_photons(series)[0] == 0
    with pytest.raises(ValueError, match="order 2"):
        observables.second_factorial_moment(series)
    at_zero = sle.average_series(SystemParams(0, 1, 1), None, CountingPoint(0.0, 2), [0.0, 1.0])
    with pytest.raises(ValueError, match="s=1"):
        observables.mean_photons(at_zero)


def test_second_factorial_moment_is_nonnegative():
    t = np.linspace(0, 20, 21)
    for model in (None, RtnParams(1.0, 1.0, 0.5), OunParams(1.0, 1.0, 0.6, 1.0)):
        obs = observables.compute_observables(SystemParams(1.0, 1, 1), model, t)
        assert obs.second_fact.min() >= -1e-10
        assert obs.second_fact[0] == 0


def test_mandel_q_formula():
    n = np.array([0.0, 1e-13, 2.0, 3.0])
    np.testing.assert_array_equal(observables.mandel_q(n, n**2)[2:], 0.0)
    assert np.isnan(observables.mandel_q(n, n**2)[:2]).all()
    assert observables.mandel_q([2.0], [3.0])[0] == pytest.approx(-0.5)


def test_q_is_stable_under_time_grid_refinement():
    coarse = observables.compute_observables(SystemParams(0.5, 1, 1), RtnParams(1.0, 1.0, 0.5),
                                             np.linspace(0, 10, 3))
    fine = observables.compute_observables(SystemParams(0.5, 1, 1), RtnParams(1.0, 1.0, 0.5),
                                           np.linspace(0, 10, 101))
    np.testing.assert_allclose(fine.mandel_q[::50][1:], coarse.mandel_q[1:], rtol=0, atol=1e-6)


def test_photon_pmf_normalization_and_bounds():
    t = [0.0, 2.0, 10.0, 30.0]
    sys = SystemParams(0.3, 1.5, 1)
    pn = observables.photon_pmf(sys, RtnParams(1.0, 1.0, 0.5), 10, t)
    assert pn.min() >= -1e-9 and pn.max() <= 1 + 1e-9
    total = pn.sum(axis=1)
    assert np.all(total <= 1 + 1e-9)
    np.testing.assert_allclose(total[:2], 1.0, atol=1e-9)
    # with fewer orders the missing mass is exactly the dropped tail
    short = observables.photon_pmf(sys, RtnParams(1.0, 1.0, 0.5), 4, t)
    np.testing.assert_allclose(1 - short.sum(axis=1), 1 - total + pn[:, 5:].sum(axis=1), atol=1e-9)


def test_photon_pmf_matches_moments():
    t = [0.0, 3.0]
    sys = SystemParams(0.5, 1, 1)
    pn = observables.photon_pmf(sys, None, 10, t)
    obs = observables.compute_observables(sys, None, t)
    k = np.arange(11)
    assert abs(pn[1] @ k - obs.mean_n[1]) < 1e-8
    assert abs(pn[1] @ (k * (k - 1)) - obs.second_fact[1]) < 1e-7


def test_photon_pmf_rejects_bad_orders():
    with pytest.raises(ValueError, match="exceeds"):
        observables.photon_pmf(DECAY, None, 11, [1.0])
    with pytest.raises(ValueError):
        observables.photon_pmf(DECAY, None, -1, [1.0])


def test_photon_pmf_flags_negative_probabilities(monkeypatch):
    real = sle.average_series

    def corrupted(*args, **kwargs):
        series = real(*args, **kwargs)
        series.values[-1, bloch.P] = -1e-6
        return series

    monkeypatch.setattr(sle, "average_series", corrupted)
    with pytest.raises(observables.NumericalAccuracyError, match="p_0"):
        observables.photon_pmf(DECAY, None, 2, [0.0, 1.0])


def _resolvent_waiting_time(sys):
    gen = sle.build_noise_free_generator(sys, 0.0, 0)
    y0 = bloch.initial_state(0)
    return -spla.spsolve(gen.base.tocsc(), y0)[bloch.P]


def test_waiting_time_on_resonance_matches_independent_oracles():
    sys = SystemParams(0, 1, 1)
    wt = observables.waiting_time(sys, None)
    assert wt.mean > 1.0
    assert abs(wt.mean - _resolvent_waiting_time(sys)) < 1e-6
    t = np.linspace(0, wt.t_max, 200_001)
    p0 = bloch.noise_free_propagate(sys, CountingPoint(0.0, 0), t)[:, bloch.P]
    trapezoid = np.sum(0.5 * (p0[1:] + p0[:-1]) * np.diff(t))
    assert abs(wt.quadrature - trapezoid) < 1e-6


def test_waiting_time_with_noise_matches_resolvent():
    rtn = RtnParams(0.5, 1.0, 0.5)
    sys = SystemParams(0.5, 1, 1)
    wt = observables.waiting_time(sys, rtn)
    gen = sle.build_sle_generator_rtn(sys, rtn, 0.0, 0)
    init = sle.sle_initial(sle.initial_pmf(rtn, None), 0).reshape(-1)
    exact = -spla.spsolve(gen.matrix.tocsc(), init)[bloch.P::4].sum()
    assert abs(wt.mean - exact) < 1e-6


def test_waiting_time_grows_with_detuning():
    taus = [observables.waiting_time(SystemParams(d, 1, 1), None).mean for d in np.linspace(0, 5, 6)]
    assert np.all(np.diff(taus) > 0)


def test_driven_waiting_time_is_two_lifetimes():
    # the W and P rows of the resolvent force the integrals of U, V and W to vanish
    for d, om in ((0.0, 0.3), (2.0, 1.0), (5.0, 3.0)):
        assert abs(observables.waiting_time(SystemParams(d, om, 1), None).mean - 2.0) < 1e-6


def test_waiting_time_rejects_horizon_before_decay():
    with pytest.raises(ValueError, match="does not decay"):
        observables.waiting_time(SystemParams(0, 1, 1), None, t_max=1.0)


def test_sweep_collects_failures_without_aborting(monkeypatch):
    real = observables._sweep_point

    def flaky(task):
        if task[0].delta0 == 1.0:
            raise RuntimeError("synthetic failure")
        return real(task)

    monkeypatch.setattr(observables, "_sweep_point", flaky)
    table = observables.detuning_sweep(SystemParams(0, 1, 1), None, [0.0, 1.0, 2.0], [5.0], workers=1)
    assert not table.ok
    assert [d for d, _ in table.failures] == [1.0]
    assert "synthetic failure" in table.failures[0][1]
    assert np.isnan(table.columns["I"][1, 0])
    assert np.isfinite(table.columns["I"][[0, 2], 0]).all()


def test_sweep_values_match_direct_solves_and_steady_state():
    table = observables.detuning_sweep(SystemParams(0, 1, 1), None, [-1.0, 0.0, 2.0],
                                       [3.0, observables.STEADY], workers=1)
    assert table.ok
    for i, d in enumerate(table.deltas):
        obs = observables.compute_observables(SystemParams(d, 1, 1), None, [0.0, 3.0])
        assert table.columns["I"][i, 0] == pytest.approx(obs.intensity[-1], abs=1e-12)
        assert table.columns["Q"][i, 0] == pytest.approx(obs.mandel_q[-1], abs=1e-10)
        assert table.columns["I"][i, 1] == pytest.approx(
            bloch.steady_state_excitation(SystemParams(d, 1, 1)), abs=1e-10)
    assert np.isnan(table.columns["Q"][:, 1]).all()


def test_sweep_input_validation():
    with pytest.raises(ValueError, match="ascending"):
        observables.detuning_sweep(SystemParams(), None, [1.0, 0.0], [1.0])
    with pytest.raises(ValueError, match="times"):
        observables.detuning_sweep(SystemParams(), None, [0.0], [-1.0])


def test_sweep_mirror_in_asymmetry():
    deltas = np.linspace(-3, 3, 7)
    plus = observables.detuning_sweep(SystemParams(0, 1, 1), RtnParams(0.2, 1.0, 0.5), deltas, [4.0], workers=1)
    minus = observables.detuning_sweep(SystemParams(0, 1, 1), RtnParams(0.2, 1.0, -0.5), deltas, [4.0], workers=1)
    for name in ("I", "Q"):
        np.testing.assert_allclose(minus.columns[name][::-1], plus.columns[name], rtol=0, atol=1e-10)


def test_fast_rtn_is_sub_poissonian_on_resonance():
    obs = observables.compute_observables(SystemParams(0, 1, 1), RtnParams(1e4, 5.0, 0.0), [0.0, 10.0])
    assert obs.mandel_q[-1] < 0


def test_peak_location():
    x = np.linspace(-2, 2, 41)
    assert observables.peak_location(x, -(x - 0.237) ** 2) == pytest.approx(0.237, abs=1e-12)
    assert observables.peak_location(x, x) == 2.0
