import math
import warnings

import numpy as np
import pytest
from scipy.special import jv

from zogesim import onebody as ob
from zogesim.model import ChainSpec, shift_origin


def test_small_chain_spectra():
    np.testing.assert_allclose(ob.solve(ChainSpec(2)).energies, [-0.5, 0.5], atol=1e-14)
    s = 1 / math.sqrt(2)
    np.testing.assert_allclose(ob.solve(ChainSpec(3)).energies, [-s, 0, s], atol=1e-14)
    v = ob.solve(ChainSpec(2)).vectors
    np.testing.assert_allclose(np.abs(v), s, atol=1e-14)
    assert v[0, 0] * v[0, 1] > 0  # ground state is the symmetric combination


def test_hamiltonian_structure_and_warning():
    h = ob.build_onebody_hamiltonian(ChainSpec(6, J=2.0, W=0.7, phi=0.4))
    np.testing.assert_array_equal(h.offdiag, -1.0)
    dense = h.dense()
    np.testing.assert_array_equal(dense, dense.T)
    with pytest.warns(UserWarning):
        ob.build_onebody_hamiltonian(ChainSpec(6, U=0.1))


@pytest.mark.parametrize("N", [7, 50, 500])
def test_clean_chain_closed_form(N):
    sol = ob.solve(ChainSpec(N))
    k = np.arange(1, N + 1)
    np.testing.assert_allclose(sol.energies, np.sort(-np.cos(k * np.pi / (N + 1))), atol=1e-10)
    assert np.all(np.abs(sol.energies) <= 1)


def test_solution_quality():
    spec = ChainSpec(500, W=0.5)
    h = ob.build_onebody_hamiltonian(spec)
    sol = ob.diagonalize(h)
    A = sol.vectors
    assert np.abs(A @ A.T - np.eye(500)).max() <= 1e-10
    res = h.dense() @ A.T - A.T * sol.energies
    assert np.abs(res).max() <= 1e-10 * h.norm()
    assert sol.energies.min() >= -1.5 and sol.energies.max() <= 1.5
    assert np.all(np.diff(sol.energies) >= 0)


def test_strong_disorder_localized_eigenstates():
    ipr = ob.ipr_eigenstates(ob.solve(ChainSpec(500, W=2.0)))
    assert ipr.min() > 0.05


def test_extended_ipr_closed_form():
    N = 500
    ipr = ob.ipr_eigenstates(ob.solve(ChainSpec(N)))
    # sum sin^4 over an open chain; the k = (N+1)/2 state is the exception
    np.testing.assert_allclose(np.median(ipr), 3 / (2 * (N + 1)), rtol=1e-6)
    assert np.all(np.abs(ipr - 3 / (2 * N)) < 3 / (2 * N) * 0.01 + 2e-5)


def test_identity_limit_iprs():
    h = ob.OneBodyHamiltonian(np.array([0.3, -0.1, 0.7]), np.zeros(2))
    sol = ob.diagonalize(h)
    np.testing.assert_allclose(ob.ipr_eigenstates(sol), 1.0)
    np.testing.assert_allclose(ob.ipr_sites(sol), 1.0)


def test_propagation_basics():
    sol = ob.solve(ChainSpec(40, W=0.9, phi=1.1))
    p0 = ob.propagate_amplitudes(sol, 17, 0.0)
    expect = np.zeros(40)
    expect[17] = 1
    np.testing.assert_allclose(p0.c, expect, atol=1e-12)
    assert ob.ipr_t(p0) == pytest.approx(1.0, abs=1e-12)
    for t in (0.3, 7.0, 250.0):
        assert abs(np.sum(ob.propagate_amplitudes(sol, 17, t).probabilities) - 1) < 1e-10
    with pytest.raises(IndexError):
        ob.propagate_amplitudes(sol, 40, 1.0)
    with pytest.raises(ValueError):
        ob.propagate_amplitudes(sol, 3, -1.0)


def test_bessel_law():
    N, n0, t = 201, 100, 5.0
    c = ob.propagate_amplitudes(ob.solve(ChainSpec(N)), n0, t).c
    m = np.arange(N) - n0
    np.testing.assert_allclose(np.abs(c) ** 2, jv(m, t) ** 2, atol=1e-8)


def test_strong_disorder_containment():
    N = 201
    sol = ob.solve(ChainSpec(N, W=2.0, phi=0.77))
    far = np.abs(np.arange(N) - 100) > N / 4
    for t in (1.0, 50.0, 500.0, 5000.0):
        p = ob.propagate_amplitudes(sol, 100, t).probabilities
        assert p[far].sum() < 1e-2


def test_uniform_ipr():
    prof = ob.AmplitudeProfile(0.0, np.full(25, 1 / 5.0 + 0j), 0)
    assert ob.ipr_t(prof) == pytest.approx(1 / 25)


def test_ipr_series_matches_profiles():
    sol = ob.solve(ChainSpec(30, W=1.2, phi=2.0))
    times = np.array([0.0, 1.0, 9.5])
    series = ob.ipr_series(sol, 4, times)
    for t, v in zip(times, series):
        assert v == pytest.approx(ob.ipr_t(ob.propagate_amplitudes(sol, 4, t)), abs=1e-14)


def test_equilibrium_window_insensitive():
    sol = ob.solve(ChainSpec(201, W=0.5, phi=0.9))
    a = ob.equilibrium_ipr(sol, 100, span=10)
    b = ob.equilibrium_ipr(sol, 100, span=20)
    assert abs(a - b) / a < 0.05


def test_ldos_single_level_and_errors():
    e = np.linspace(-2, 2, 11)
    np.testing.assert_allclose(ob.ldos_single_level(e, 0.3, 0.1),
                               (0.1 / math.pi) / ((e - 0.3) ** 2 + 0.01))
    with pytest.raises(ValueError):
        ob.ldos_decimation(ChainSpec(5), 2, e, 0.0)
    with pytest.raises(IndexError):
        ob.ldos_decimation(ChainSpec(5), 5, e, 0.1)


def test_ldos_matches_resolvent():
    spec = ChainSpec(12, W=0.8, phi=0.4)
    e = np.linspace(-2, 2, 41)
    eta = 0.05
    h = ob.build_onebody_hamiltonian(spec).dense()
    ref = [-np.linalg.inv((x + 1j * eta) * np.eye(12) - h)[5, 5].imag / math.pi for x in e]
    np.testing.assert_allclose(ob.ldos_decimation(spec, 5, e, eta), ref, rtol=1e-10, atol=1e-12)


def test_ldos_clean_chain_density():
    spec = ChainSpec(4001)
    e = np.linspace(-0.8, 0.8, 17)
    rho = ob.ldos_decimation(spec, 2000, e, 1e-3)
    np.testing.assert_allclose(rho, 1 / (math.pi * np.sqrt(1 - e ** 2)), rtol=0.05)


def test_ldos_normalization_and_gaps():
    spec = ChainSpec(301, W=0.5, phi=0.3)
    grid, eta = ob.default_ldos_grid(spec, 4001)
    rho = ob.ldos_decimation(spec, 150)
    assert np.all(rho >= 0)
    rho = ob.ldos_decimation(spec, 150, grid, eta)
    assert np.trapezoid(rho, grid) == pytest.approx(1.0, abs=0.02)
    # the quasiperiodic spectrum has visible gaps
    assert np.mean(rho < 0.01 * rho.max()) > 0.05


def test_edge_reports():
    assert ob.edge_state_report(ob.solve(ChainSpec(500))) == []
    s0 = ob.solve(ChainSpec(500, W=0.5, phi=shift_origin(0.0)))
    s1 = ob.solve(ChainSpec(500, W=0.5, phi=shift_origin(7 * math.pi / 20)))
    assert len(ob.edge_sides(ob.edge_state_report(s0), 500)) == 1
    assert ob.edge_sides(ob.edge_state_report(s1), 500) == {"left", "right"}
    with pytest.raises(ValueError):
        ob.edge_state_report(s0, threshold=0.0)


def test_edge_weight_in_ipr_sites():
    sol = ob.solve(ChainSpec(500, W=0.5, phi=shift_origin(7 * math.pi / 20)))
    ipr_n = ob.ipr_sites(sol)
    bulk = np.median(ipr_n)
    assert ipr_n[:5].max() > 5 * bulk and ipr_n[-5:].max() > 5 * bulk


def test_parseval():
    sol = ob.solve(ChainSpec(60, W=1.1, phi=0.2))
    np.testing.assert_allclose((sol.vectors ** 2).sum(axis=0), 1.0, atol=1e-12)


def test_no_warning_at_zero_u():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ob.solve(ChainSpec(10, W=0.3))
