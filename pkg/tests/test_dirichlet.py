import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brwre.dirichlet import (
    dirichlet_energy,
    domination_check,
    duality_defect,
    effective_conductance,
    energy_optimality,
    harmonic_solution,
    maximum_principle_defect,
    recurrence_diagnostic,
    series_parallel_1d,
)
from brwre.environment import EnvSpec, InvalidEnvironment, constant_conductances, homogeneous_environment

RANDOM = EnvSpec("conductances", "loguniform(0.2,5)")


@pytest.mark.parametrize("c,m", [(1.0, 3), (2.5, 7), (0.5, 0)])
def test_1d_constant_closed_form(c, m):
    env = constant_conductances(1, m, c)
    assert effective_conductance(env, m) == pytest.approx(2 * c / (m + 1), rel=1e-12)


def test_lu_and_cg_agree():
    env = RANDOM.sample(2, 8, 1)
    assert effective_conductance(env, 8, "lu") == pytest.approx(effective_conductance(env, 8, "cg"), rel=1e-10)


def test_energy_rejects_bad_boundary_values():
    env = homogeneous_environment(2, 2)
    f = np.zeros((7, 7))
    with pytest.raises(ValueError, match="f\\(0\\)"):
        dirichlet_energy(env, f, 2)
    f[3, 3] = 1.0
    f[0, 0] = 0.1
    with pytest.raises(ValueError, match="vanish"):
        dirichlet_energy(env, f, 2)


def test_energy_of_the_indicator():
    # f = 1 at 0, 0 elsewhere: energy is the total weight at 0
    env = RANDOM.sample(2, 2, 4)
    f = np.zeros((7, 7))
    f[3, 3] = 1.0
    assert dirichlet_energy(env, f, 2) == pytest.approx(env.pi_at((0, 0)))


def test_harmonic_solution_properties():
    env = RANDOM.sample(3, 4, 5)
    sol = harmonic_solution(env, 4)
    assert maximum_principle_defect(sol) == 0.0
    assert energy_optimality(env, sol, trials=10) >= -1e-12
    assert sol.inner().shape == (9, 9, 9)


def test_domination():
    env = RANDOM.sample(2, 6, 9)
    res = domination_check(env, 6)
    assert res["holds"]
    assert res["C"] <= res["energy_of_homogeneous_minimizer"] <= res["bound"]


def test_series_parallel_needs_d1():
    with pytest.raises(InvalidEnvironment):
        series_parallel_1d(RANDOM.sample(2, 2, 0), 2)


def test_recurrence_diagnostic_d2_homogeneous():
    rep = recurrence_diagnostic(EnvSpec("constant"), 2, [4, 8, 16], 1, seed=0)
    assert rep.passed
    means = [s["C_mean"] for s in rep.stats]
    assert means[0] > means[1] > means[2]


def test_recurrence_diagnostic_random_1d():
    rep = recurrence_diagnostic(RANDOM, 1, [4, 8, 16], 5, seed=3)
    assert rep.passed
    assert rep.parameters["replicates"] == 5


def test_recurrence_refuses_transient_dimension():
    with pytest.raises(InvalidEnvironment):
        recurrence_diagnostic(EnvSpec("constant"), 3, [2, 4], 1, 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(0, 4), st.integers(0, 2**31))
def test_duality_property(d, m, seed):
    env = EnvSpec("mixed", "loguniform(0.2,5)", "uniform(0,0.9)").sample(d, m, seed)
    assert duality_defect(env, m) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 12), st.integers(0, 2**31))
def test_series_parallel_property(m, seed):
    env = RANDOM.sample(1, 12, seed)
    assert effective_conductance(env, m) == pytest.approx(series_parallel_1d(env, m), rel=1e-10)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 2), st.integers(1, 5), st.integers(0, 2**31))
def test_rayleigh_monotonicity(d, m, seed):
    env = RANDOM.sample(d, m, seed)
    assert effective_conductance(env, m) < effective_conductance(env, m - 1)
