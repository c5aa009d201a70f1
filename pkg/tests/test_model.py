import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zogesim.model import (GOLDEN_RATIO, ChainSpec, SiteFieldTable, fibonacci_ratio,
                           make_realizations, normalize_phase, onsite_potential,
                           shift_origin, site_energies)


def test_golden_ratio_full_precision():
    mpmath.mp.dps = 40
    assert GOLDEN_RATIO == float((1 + mpmath.sqrt(5)) / 2)
    assert ChainSpec(5).q == GOLDEN_RATIO


@pytest.mark.parametrize("kwargs", [
    dict(N=1), dict(N=2.5), dict(N=5, J=0), dict(N=5, J=-1), dict(N=5, W=-0.1),
    dict(N=5, U=-1), dict(N=5, q=float("nan")),
])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        ChainSpec(**kwargs)


def test_phase_normalized():
    assert ChainSpec(4, phi=2 * math.pi).phi == 0.0
    assert ChainSpec(4, phi=-0.5).phi == pytest.approx(2 * math.pi - 0.5)
    assert 0 <= normalize_phase(-1e-300) < 2 * math.pi


def test_potential_examples():
    assert onsite_potential(ChainSpec(3, W=1.0), 0) == -1.0
    assert onsite_potential(ChainSpec(3, W=0.0, phi=1.3), 2) == 0.0
    mpmath.mp.dps = 50
    q = (1 + mpmath.sqrt(5)) / 2
    exact = -mpmath.cos(2 * mpmath.pi * q)
    got = onsite_potential(ChainSpec(3, W=1.0), 1)
    assert abs(got - float(exact)) < 1e-14
    assert got == pytest.approx(0.7374, abs=5e-5)


def test_potential_index_error():
    with pytest.raises(IndexError):
        onsite_potential(ChainSpec(3, W=1.0), 3)
    with pytest.raises(IndexError):
        onsite_potential(ChainSpec(3, W=1.0), -1)


@settings(max_examples=60, deadline=None)
@given(N=st.integers(2, 300), W=st.floats(0, 5), phi=st.floats(-20, 20))
def test_field_table_properties(N, W, phi):
    spec = ChainSpec(N, W=W, phi=phi)
    eps = site_energies(spec)
    assert np.all(np.abs(eps) <= W + 1e-15)
    np.testing.assert_array_equal(eps, SiteFieldTable.build(spec).eps)
    shifted = site_energies(ChainSpec(N, W=W, phi=phi + 2 * math.pi))
    np.testing.assert_allclose(shifted, eps, atol=1e-12)
    if N >= 50:
        assert abs(eps.mean()) <= 2 * W / math.sqrt(N) + 1e-15
    for n in (0, N - 1):
        assert onsite_potential(spec, n) == eps[n]


def test_field_table_read_only():
    t = SiteFieldTable.build(ChainSpec(5, W=1))
    with pytest.raises(ValueError):
        t.eps[0] = 3.0


def test_realizations_explicit_and_seeded():
    base = ChainSpec(10)
    rs = make_realizations(base, phases=[0.0, 7 * math.pi / 20])
    assert rs.phases == (0.0, 7 * math.pi / 20)
    assert [s.phi for s in rs] == [0.0, 7 * math.pi / 20]
    a = make_realizations(base, 1, seed=3)
    b = make_realizations(base, 1, seed=3)
    assert a.phases == b.phases
    ten = make_realizations(base, 10, seed=5)
    assert len(set(ten.phases)) == 10
    assert all(0 <= p < 2 * math.pi for p in ten.phases)
    assert make_realizations(base, 4, seed=1).phases != make_realizations(base, 4, seed=2).phases


def test_realizations_errors():
    with pytest.raises(ValueError):
        make_realizations(ChainSpec(4), 0, seed=1)
    with pytest.raises(ValueError):
        make_realizations(ChainSpec(4), phases=[1.0, 1.0])


def test_config_round_trip():
    spec = ChainSpec(21, J=1.0, W=0.8, U=0.05, phi=1.234567890123)
    cfg = spec.to_config(seed=9)
    assert cfg["seed"] == "9"
    assert ChainSpec.from_config(cfg) == spec
    with pytest.raises(KeyError):
        ChainSpec.from_config({"n_sites": "3", "bogus": "1"})
    with pytest.raises(KeyError):
        ChainSpec.from_config({"w": "1"})


def test_fibonacci_and_origin_shift():
    assert fibonacci_ratio(1) == 1.0
    assert fibonacci_ratio(5) == 8 / 5
    assert abs(fibonacci_ratio(30) - GOLDEN_RATIO) < 1e-12
    # potential labelled from site 1 equals the 0-based one with a shifted phase
    phi = 0.3
    spec = ChainSpec(8, W=1.0, phi=shift_origin(phi))
    labelled = [-math.cos(2 * math.pi * GOLDEN_RATIO * m + phi) for m in range(1, 9)]
    np.testing.assert_allclose(site_energies(spec), labelled, atol=1e-12)
