import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nonlocality.analysis import (
    SweepRow,
    SweepTable,
    bootstrap_spread,
    ehrenfest_closed_form,
    ehrenfest_oracle,
    idler_ratio,
    polyfit_min,
    sigma_sweep,
    sweep_seed,
)
from nonlocality.model import ConfigError, ElectronField, NumericalError


def _table(s, e, stderr=0.001):
    return SweepTable([SweepRow(a, b, stderr, 0, 1000) for a, b in zip(s, e)])


def test_parabola_recovered_exactly():
    s = np.linspace(0.4, 1.4, 11)
    fit = polyfit_min(_table(s, (s - 0.82) ** 2 + 1.7736), degree=2)
    assert fit.sigma_star == pytest.approx(0.82, abs=1e-10)
    assert fit.energy_star == pytest.approx(1.7736, abs=1e-10)
    assert fit.residual_norm < 1e-12 and fit.unique


def test_quartic_minimum_by_bracketed_search():
    s = np.linspace(0.4, 1.4, 11)
    e = 1.7736 + 0.3 * (s - 0.82) ** 2 + 0.5 * (s - 0.82) ** 4
    fit = polyfit_min(_table(s, e), degree=4)
    assert fit.sigma_star == pytest.approx(0.82, abs=1e-7)
    assert fit.energy_star == pytest.approx(1.7736, abs=1e-10)


def test_flat_data_flagged_non_unique():
    s = np.linspace(0.4, 1.4, 11)
    fit = polyfit_min(_table(s, np.full(11, 1.0)), degree=4)
    assert not fit.unique
    assert 0.4 <= fit.sigma_star <= 1.4


@given(st.floats(-5, 5))
def test_fit_shift_invariance(c):
    s = np.linspace(0.4, 1.4, 11)
    e = 1.77 + 0.2 * (s - 0.9) ** 2 + 0.05 * np.sin(7 * s)
    a = polyfit_min(_table(s, e), 4)
    b = polyfit_min(_table(s, e + c), 4)
    assert b.sigma_star == pytest.approx(a.sigma_star, abs=1e-6)
    assert b.energy_star == pytest.approx(a.energy_star + c, abs=1e-8)


def test_fit_needs_enough_points_and_conditioning():
    with pytest.raises(ConfigError):
        polyfit_min(_table([0.5, 0.6, 0.7], [1, 2, 3]), degree=4)
    s = 1000 + np.linspace(0, 1e-3, 12)
    with pytest.raises(NumericalError):
        polyfit_min(_table(s, s**2), degree=10)


def test_non_converged_rows_excluded():
    s = np.linspace(0.4, 1.4, 11)
    rows = [SweepRow(a, (a - 0.8) ** 2, 0.0, 0, 10) for a in s]
    rows[3] = SweepRow(s[3], -100.0, 0.0, 0, 10, converged=False)
    fit = polyfit_min(SweepTable(rows), 2)
    assert fit.sigma_star == pytest.approx(0.8, abs=1e-10)


def test_sweep_rows_independent_of_order():
    def point(sigma, seed):
        r = np.random.default_rng(seed)
        return SweepRow(sigma, r.normal(), 0.1, seed, 10)

    a = sigma_sweep([0.4, 0.8, 1.2], point, 42, common_random_numbers=False)
    b = sigma_sweep([1.2, 0.4, 0.8], point, 42, common_random_numbers=False)
    assert [r.energy for r in a.rows] == [r.energy for r in b.rows]
    assert sweep_seed(42, 0.8) == a.rows[1].seed
    crn = sigma_sweep([0.4, 0.8], point, 42)
    assert {r.seed for r in crn.rows} == {42}


def test_sweep_marks_failures():
    def point(sigma, seed):
        if sigma > 1:
            raise NumericalError("boom")
        return SweepRow(sigma, 1.0, 0.1, seed, 10)

    t = sigma_sweep([0.5, 1.5], point)
    assert [r.converged for r in t.rows] == [True, False]
    assert len(t.usable().rows) == 1
    with pytest.raises(ConfigError):
        sigma_sweep([0.5, -1.0], point)


def test_ehrenfest_values():
    f = ElectronField(15.0, 5.0)
    assert ehrenfest_closed_form(f, 0.5, np.pi / 2) == pytest.approx(2.5, abs=1e-12)
    t = np.linspace(0, 6, 101)
    assert np.allclose(ehrenfest_closed_form(f, 0.5, t), -0.625 * np.sin(5 * t) + 3.125 * np.sin(t), atol=1e-12)
    assert np.all(ehrenfest_closed_form(ElectronField(0.0, 5.0), 0.5, t) == 0)


@pytest.mark.parametrize("f", [ElectronField(15.0, 5.0), ElectronField(3.0, 1.0, 0.4), ElectronField(2.0, 2.5, -1.75, t_on=0.7)])
def test_rk4_agrees_with_closed_form(f):
    t, x_rk = ehrenfest_oracle(f, 0.5, 6.0, 1e-3, method="rk4")
    _, x_cf = ehrenfest_oracle(f, 0.5, 6.0, 1e-3)
    assert np.max(np.abs(x_rk - x_cf)) < 1e-8


def test_closed_form_satisfies_ode():
    f = ElectronField(15.0, 5.0, 0.3)
    h = 1e-4
    t = np.linspace(0.1, 6, 200)
    x = lambda s: ehrenfest_closed_form(f, 0.5, s)  # noqa: E731
    acc = (x(t + h) - 2 * x(t) + x(t - h)) / h**2
    assert np.max(np.abs(acc + x(t) - f(t))) < 1e-4 * 15


def test_bad_oracle_inputs():
    with pytest.raises(ConfigError):
        ehrenfest_closed_form(ElectronField(1.0, 1.0), 0.0, 1.0)
    with pytest.raises(ConfigError):
        ehrenfest_oracle(ElectronField(1.0, 1.0), 0.5, 1.0, 0.1, method="euler")


def test_idler_ratio():
    a = np.array([0.0, 0.2, -0.4])
    r = idler_ratio(a, a)
    assert r.ratio == 1.0 and not r.infinite
    z = idler_ratio(a, np.zeros((3, 5)))
    assert z.infinite and z.ratio == np.inf
    assert idler_ratio(a, np.array([0.01, -0.004])).ratio == pytest.approx(40.0)


def test_bootstrap_spread():
    sd, err = bootstrap_spread([1.0, 2.0, 3.0])
    assert sd == pytest.approx(1.0)
    assert err == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        bootstrap_spread([1.0])
