import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bpgo import InvalidWeight, RasParams, ras_weighted_loss, trust_weight


def mp_weight(delta, alpha, k):
    mpmath.mp.dps = 40
    return 1 + mpmath.mpf(alpha) * (2 / (1 + mpmath.exp(-mpmath.mpf(k) * mpmath.mpf(delta))) - 1)


def test_zero_delta_is_neutral():
    for a in (0.0, 0.1, 0.5, 0.9, 2.0):
        assert trust_weight(0.0, RasParams(a, 3.0)) == 1.0


def test_reference_value():
    w = trust_weight(1.0, RasParams(0.5, 1.0))
    assert w == pytest.approx(1.231058578630005, abs=1e-15)
    assert abs(w - float(mp_weight(1.0, 0.5, 1.0))) < 1e-12


def test_limits():
    p = RasParams(0.5, 1.0)
    assert trust_weight(1e4, p) == pytest.approx(1.5, abs=1e-12)
    assert trust_weight(-1e4, p) == pytest.approx(0.5, abs=1e-12)


@given(st.floats(-30, 30), st.floats(0.01, 0.99), st.floats(0.1, 5))
def test_symmetry_and_bounds(delta, alpha, k):
    p = RasParams(alpha, k)
    w = trust_weight(delta, p)
    assert abs(w + trust_weight(-delta, p) - 2.0) < 1e-12
    assert 1 - alpha <= w <= 1 + alpha
    # below ~1e-16 the tanh term rounds away against 1.0
    if delta > 1e-12:
        assert w > 1.0
    elif delta < -1e-12:
        assert w < 1.0


def test_strict_bounds_in_unsaturated_range():
    p = RasParams(0.5, 1.0)
    for d in np.linspace(-30, 30, 601):
        assert 0.5 < trust_weight(d, p) < 1.5


def test_strict_monotonicity():
    p = RasParams(0.5, 1.0)
    ws = [trust_weight(d, p) for d in np.linspace(-20, 20, 4001)]
    assert np.all(np.diff(ws) > 0)


def test_alpha_zero_degenerates():
    p = RasParams(0.0, 1.0)
    for d in (-5.0, 0.0, 3.0):
        w = trust_weight(d, p)
        assert w == 1.0
        assert ras_weighted_loss(-0.37, w) == -0.37


def test_large_alpha_is_floored():
    w = trust_weight(-100.0, RasParams(1.5, 1.0))
    assert w == pytest.approx(1e-3)


def test_weighted_loss_examples():
    assert ras_weighted_loss(-0.4, 1.0) == -0.4
    assert ras_weighted_loss(2.0, 1.2311) == pytest.approx(2.4622, abs=1e-12)
    assert ras_weighted_loss(0.0, 0.7) == 0.0
    with pytest.raises(InvalidWeight):
        ras_weighted_loss(1.0, 0.0)


def test_param_validation():
    with pytest.raises(ValueError):
        RasParams(-0.1, 1.0)
    with pytest.raises(ValueError):
        RasParams(0.5, 0.0)
