import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp

from specdiff import bloch, noise, sle
from specdiff.bloch import CountingPoint, SystemParams
from specdiff.noise import OunParams, RtnParams, XiGrid

SYS = SystemParams(0.8, 1.0, 1.0)
T = np.linspace(0, 10, 11)


def test_dimensions():
    g = sle.build_sle_generator_oun(SYS, OunParams(1, 1), XiGrid(-6, 6, 201), 1.0, 0)
    assert g.dim == 804 and g.matrix.shape == (804, 804)
    r = sle.build_sle_generator_rtn(SYS, RtnParams(1, 1), 1.0, 0)
    assert r.matrix.shape == (8, 8)
    assert sle.build_sle_generator_rtn(SYS, RtnParams(1, 1), 1.0, 2).matrix.shape == (24, 24)


def test_dimension_guard():
    with pytest.raises(ValueError, match="coarsen"):
        sle.build_sle_generator_oun(SYS, OunParams(1, 1), XiGrid(-6, 6, 100_001), 1.0, 2)
    with pytest.raises(ValueError):
        sle.build_sle_generator_rtn(SYS, RtnParams(1, 1), 1.0, -1)


def test_rtn_matrix_layout():
    rtn = RtnParams(0.7, 1.5)
    g = sle.build_sle_generator_rtn(SYS, rtn, 0.4, 1).matrix.toarray()
    lam = np.eye(8) * rtn.lambda_switch
    plus = bloch.augmented_generator(SYS, 0.4, rtn.nu, 1)
    minus = bloch.augmented_generator(SYS, 0.4, -rtn.nu, 1)
    np.testing.assert_array_equal(g[:8, :8], plus - lam)
    np.testing.assert_array_equal(g[8:, 8:], minus - lam)
    np.testing.assert_array_equal(g[:8, 8:], lam)
    np.testing.assert_array_equal(g[8:, :8], lam)


def test_oun_matrix_layout_is_noise_major():
    grid = XiGrid(-3, 3, 25)
    oun = OunParams(1.0, 1.0)
    g = sle.build_sle_generator_oun(SYS, oun, grid, 1.0, 1).matrix.toarray()
    z = noise.ou_generator(grid, oun).toarray()
    block = 8
    for i, xi in enumerate(grid.nodes):
        diag = g[i * block:(i + 1) * block, i * block:(i + 1) * block]
        np.testing.assert_allclose(diag, bloch.augmented_generator(SYS, 1.0, xi, 1) + z[i, i] * np.eye(block),
                                   rtol=0, atol=1e-15)
    np.testing.assert_array_equal(g[0:block, block:2 * block], z[0, 1] * np.eye(block))


def test_full_matrix_propagation_matches_ring_propagation():
    rtn = RtnParams(0.7, 1.5, a=0.3)
    gen = sle.build_sle_generator_rtn(SYS, rtn, 1.0, 2)
    init = sle.sle_initial(noise.rtn_initial_pmf(rtn.a), 2)
    traj = sle.propagate(gen, init, T)
    for i, t in enumerate(T):
        ref = scipy.linalg.expm(gen.matrix.toarray() * t) @ init.reshape(-1)
        np.testing.assert_allclose(traj.blocks[i].reshape(-1), ref, rtol=1e-10, atol=1e-11)


def test_sle_initial():
    init = sle.sle_initial([0.75, 0.25], 1)
    np.testing.assert_array_equal(init[0], 0.75 * bloch.initial_state(1))
    np.testing.assert_array_equal(init[1], 0.25 * bloch.initial_state(1))
    np.testing.assert_array_equal(init.sum(axis=0), bloch.initial_state(1))
    with pytest.raises(ValueError, match="normalized"):
        sle.sle_initial([0.7, 0.2], 0)


def test_oun_stationary_initial_weights():
    oun = OunParams(1.0, 1.0)
    grid = XiGrid.for_params(oun)
    init = sle.sle_initial(sle.initial_pmf(oun, grid), 0)
    np.testing.assert_allclose(init[:, bloch.P], noise.ou_stationary_pmf(grid, oun), rtol=1e-15)


def test_zero_noise_rate_decouples_rtn():
    rtn = RtnParams(1e-300, 1.5, a=0.5)
    avg = sle.average_series(SYS, rtn, CountingPoint(1.0, 2), T).values
    plus = bloch.noise_free_propagate(SystemParams(SYS.delta0 + 1.5, 1, 1), CountingPoint(1.0, 2), T)
    minus = bloch.noise_free_propagate(SystemParams(SYS.delta0 - 1.5, 1, 1), CountingPoint(1.0, 2), T)
    np.testing.assert_allclose(avg, 0.75 * plus + 0.25 * minus, rtol=1e-10, atol=1e-11)


def test_zero_amplitude_rtn_equals_noise_free():
    ref = bloch.noise_free_propagate(SYS, CountingPoint(0.3, 2), T)
    for a in (-0.5, 0.0, 1.0):
        avg = sle.average_series(SYS, RtnParams(2.0, 0.0, a), CountingPoint(0.3, 2), T).values
        np.testing.assert_allclose(avg, ref, rtol=1e-11, atol=1e-12)


def test_static_oun_is_pmf_weighted_mixture():
    # a vanishing decay rate freezes every grid node
    oun = OunParams(1e-300, 1.0, a=0.3, chi=1.0)
    grid = XiGrid.for_params(oun, 61)
    pmf = noise.ou_initial_pmf(grid, oun)
    avg = sle.average_series(SYS, oun, CountingPoint(1.0, 1), T[:4], grid=grid).values
    mix = sum(w * bloch.noise_free_propagate(SystemParams(SYS.delta0 + x, 1, 1), CountingPoint(1.0, 1), T[:4])
              for w, x in zip(pmf, grid.nodes))
    np.testing.assert_allclose(avg, mix, rtol=1e-10, atol=1e-12)


def test_narrow_oun_approaches_noise_free():
    oun = OunParams(1.0, 1e-6)
    avg = sle.average_series(SYS, oun, CountingPoint(1.0, 2), T).values
    ref = bloch.noise_free_propagate(SYS, CountingPoint(1.0, 2), T)
    np.testing.assert_allclose(avg, ref, rtol=1e-6, atol=1e-7)


def test_trace_conservation_slow_rtn():
    avg = sle.average_series(SystemParams(0, 1, 1), RtnParams(1e-4, 5.0, 0.5), CountingPoint(1.0, 0),
                             np.linspace(0, 20, 41))
    assert np.abs(avg.component("P") - 1).max() <= 1e-8


def test_oun_noise_marginal_relaxes_to_stationary():
    oun = OunParams(1.0, 1.0, a=0.6, chi=1.0)
    grid = XiGrid.for_params(oun)
    gen = sle.build_sle_generator_oun(SystemParams(0, 1, 1), oun, grid, 1.0, 0)
    traj = sle.propagate(gen, sle.sle_initial(noise.ou_initial_pmf(grid, oun), 0), [0.0, 1.0, 25.0])
    marginal = traj.blocks[:, :, bloch.P]
    z = noise.ou_generator(grid, oun)
    stationary = noise.ou_stationary_pmf(grid, oun)
    tv = 0.5 * np.abs(marginal - stationary).sum(axis=1)
    assert tv[0] > tv[1] > tv[2]
    assert np.abs(z @ marginal[2]).max() < 1e-9


def test_mirror_symmetry_is_exact():
    for make in (lambda a: RtnParams(0.3, 1.0, a), lambda a: OunParams(0.3, 1.0, a, 1.0)):
        for s, n in ((1.0, 2), (0.0, 2)):
            plus = sle.average_series(SystemParams(0.7, 1, 1), make(0.6), CountingPoint(s, n), T).values
            minus = sle.average_series(SystemParams(-0.7, 1, 1), make(-0.6), CountingPoint(s, n), T).values
            cols = [j for j in range(plus.shape[1]) if j % 4 != bloch.U]
            np.testing.assert_allclose(minus[:, cols], plus[:, cols], rtol=0, atol=1e-10)


def test_complete_average():
    traj = sle.MarginalTrajectory(np.array([0.0, 1.0]), np.arange(16.0).reshape(2, 2, 4))
    np.testing.assert_array_equal(sle.complete_average(traj), traj.blocks.sum(axis=1))
    single = sle.MarginalTrajectory(np.array([0.0]), np.arange(4.0).reshape(1, 1, 4))
    np.testing.assert_array_equal(sle.complete_average(single), single.blocks[:, 0])
    scaled = sle.MarginalTrajectory(traj.times, 2.5 * traj.blocks)
    np.testing.assert_array_equal(sle.complete_average(scaled), 2.5 * sle.complete_average(traj))
    np.testing.assert_array_equal(sle.complete_average(traj, [1.0, 0.0]), traj.blocks[:, 0])
    with pytest.raises(ValueError):
        sle.complete_average(traj, [1.0])


def test_propagate_checks_layout():
    gen = sle.build_sle_generator_rtn(SYS, RtnParams(1, 1), 1.0, 1)
    with pytest.raises(ValueError, match="layout"):
        sle.propagate(gen, np.zeros((2, 4)), T)


def test_steady_state_detector():
    sys = SystemParams(0, 1, 1)
    gen = sle.build_noise_free_generator(sys, 1.0, 0)
    t, state = sle.steady_state(gen, sle.sle_initial([1.0], 0))
    v = state[0]
    assert np.abs(gen.base @ v).max() < 1e-12
    assert abs(0.5 * (v[bloch.W] + v[bloch.P]) - 1 / 3) < 1e-11
    assert t > 0


def test_steady_state_keeps_derivatives():
    sys = SystemParams(0, 1, 1)
    gen = sle.build_noise_free_generator(sys, 1.0, 1)
    t, state = sle.steady_state(gen, sle.sle_initial([1.0], 1))
    ref = bloch.noise_free_propagate(sys, CountingPoint(1.0, 1), [0.0, t])[-1]
    np.testing.assert_allclose(state[0], ref, rtol=1e-9)


def test_sparse_inputs_are_csr():
    g = sle.build_sle_generator_rtn(SYS, RtnParams(1, 1), 1.0, 0)
    assert sp.isspmatrix_csr(g.base) and sp.isspmatrix_csr(g.coupling)
