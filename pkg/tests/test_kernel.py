import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import comb

from brwre.environment import EnvSpec, InvalidEnvironment, homogeneous_environment
from brwre.kernel import (
    KilledWalk,
    first_moment_exact,
    green_constrained,
    green_origin,
    green_table,
    heat_kernel_sequence,
    homogeneous_green_oracle,
    srw_return_probabilities,
    transience_series,
)

RANDOM = EnvSpec("conductances", "uniform(0.5,2)")


@pytest.mark.parametrize("m", [0, 1, 4, 9])
def test_1d_green_gamblers_ruin(m):
    # SRW on [-m, m] killed outside: g^m(0, x) = m + 1 - |x|
    g = green_origin(homogeneous_environment(1, m), m)
    x = np.arange(-m, m + 1)
    np.testing.assert_allclose(g, m + 1 - np.abs(x), rtol=1e-12)


def test_3d_green_at_origin_matches_watson():
    # g(0,0) = 1 / P(no return) = 1.516386059... for the simple random walk on Z^3
    res = homogeneous_green_oracle(3, (0, 0, 0), (0, 0, 0), tol=1e-6)
    assert res["converged"]
    assert res["value"] == pytest.approx(1.516386059, abs=1e-4)


def test_green_oracle_refuses_recurrent_dimensions():
    with pytest.raises(InvalidEnvironment):
        homogeneous_green_oracle(2, (0, 0), (1, 0))


@pytest.mark.parametrize("method", ["dense", "lu", "cg"])
def test_solver_methods_agree(method):
    env = RANDOM.sample(2, 5, 1)
    ref = green_origin(env, 5, method="dense")
    np.testing.assert_allclose(green_origin(env, 5, method=method), ref, rtol=1e-10)


def test_green_table_symmetry_and_residual():
    env = EnvSpec("mixed", "loguniform(0.1,10)", "uniform(0,0.9)").sample(2, 4, 3)
    t = green_table(env, 4)
    assert t.symmetry_defect() < 1e-10
    assert t.residual < 1e-10
    assert np.all(t.values > 0)


def test_traps_do_not_change_green():
    hom = green_table(homogeneous_environment(2, 4), 4).values
    traps = green_table(EnvSpec("traps", None, "uniform(0,0.95)").sample(2, 4, 8), 4).values
    np.testing.assert_allclose(traps, hom, atol=1e-10)


def test_green_increases_with_the_box():
    env = RANDOM.sample(3, 6, 4)
    vals = [green_constrained(env, m).at((0, 0, 0), (0, 0, 0)) for m in range(1, 7)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_green_is_sum_of_heat_kernel():
    env = RANDOM.sample(2, 3, 6)
    P = heat_kernel_sequence(env, 3, (0, 0), 3000)
    np.testing.assert_allclose(P.sum(axis=0), green_origin(env, 3), rtol=1e-9)


def test_heat_kernel_symmetry():
    env = RANDOM.sample(2, 3, 2)
    x, y = (1, 0), (-2, 1)
    Px = heat_kernel_sequence(env, 3, x, 20)
    Py = heat_kernel_sequence(env, 3, y, 20)
    ix = (x[0] + 3) * 7 + x[1] + 3
    iy = (y[0] + 3) * 7 + y[1] + 3
    np.testing.assert_allclose(Px[:, iy], Py[:, ix], atol=1e-15)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_srw_return_probabilities_closed_forms(d):
    n = np.arange(0, 41, 2)
    p = srw_return_probabilities(d, 40)[n]
    k = n // 2
    if d == 1:
        exact = comb(n, k) / 2.0**n
    elif d == 2:
        exact = (comb(n, k) / 2.0**n) ** 2
    else:
        # sum over i + j + l = k of multinomial counts, divided by 6^n
        exact = np.array([
            sum(math.factorial(2 * kk) / (math.factorial(i) * math.factorial(j) * math.factorial(kk - i - j)) ** 2
                for i in range(kk + 1) for j in range(kk + 1 - i)) / 6.0 ** (2 * kk)
            for kk in k
        ])
    np.testing.assert_allclose(p, exact, rtol=1e-10)
    assert np.all(srw_return_probabilities(d, 41)[1::2] == 0)


def test_box_route_converges_to_exact_route():
    exact = transience_series(homogeneous_environment(3, 1), 60, route="exact-homogeneous")
    box = transience_series(homogeneous_environment(3, 40), 60, route="box")
    np.testing.assert_allclose(box.P, exact.P, atol=1e-14)
    assert exact.contamination[-1] == 0
    assert box.contamination[-1] < 1e-6


def test_first_moment_exact_1d():
    # binary law in d=1: E[L_m] = sum_x (m + 1 - |x|)^2
    m = 5
    res = first_moment_exact(homogeneous_environment(1, m), m, 1.0)
    x = np.arange(-m, m + 1)
    assert res["exact"] == pytest.approx(np.sum((m + 1 - np.abs(x)) ** 2.0))
    assert res["exact"] == res["paper_form"]


def test_root_correction_when_sigma2_differs():
    env = homogeneous_environment(1, 3)
    res = first_moment_exact(env, 3, 2.0)
    assert res["exact"] == pytest.approx(res["paper_form"] - 4.0)  # (1 - 2) g(0,0), g(0,0) = 4


def test_killed_walk_matches_green_without_kills():
    env = RANDOM.sample(3, 4, 7)
    w = KilledWalk(env, 4)
    np.testing.assert_allclose(w.green_from_origin(), green_origin(env, 4), rtol=1e-10)


def test_killed_walk_with_dead_origin():
    env = RANDOM.sample(2, 3, 7)
    killed = np.zeros((7, 7), dtype=bool)
    killed[3, 3] = True
    w = KilledWalk(env, 3, killed)
    assert not np.any(w.green_from_origin())


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_green_properties(d, m, seed):
    env = EnvSpec("mixed", "loguniform(0.2,5)", "uniform(0,0.8)").sample(d, m, seed)
    t = green_table(env, m)
    assert t.symmetry_defect() < 1e-10
    # the diagonal dominates each column: g(x,y) <= g(y,y)
    assert np.all(t.values <= np.diag(t.values)[None, :] * (1 + 1e-12))
