import json

import numpy as np
import pytest

from brwre.environment import EnvSpec, InvalidEnvironment, homogeneous_environment
from brwre.experiments import (
    QuenchedMoments,
    derive_seed,
    first_moment_check,
    green_lower_bound_probe,
    hitting_study,
    many_to_two_check,
    marginals_check,
    scaling_study,
    second_moment_ratio,
    summarize,
    variance_decomposition,
)
from brwre.genealogy import make_law
from brwre.kernel import first_moment_exact, green_origin
from brwre.snake import KillRule, SnakeSampler, sample_snakes

BINARY = make_law("binary")
GEOM = make_law("geometric")
RANDOM = EnvSpec("conductances", "uniform(0.5,2)")


def test_summarize_censoring_and_moments():
    v = np.array([1.0, 2.0, 3.0, 100.0])
    st = summarize(v, np.array([False, False, False, True]))
    assert st["n"] == 4 and st["censoring_rate"] == 0.25  # n counts every replicate
    assert st["mean"] == 2.0 and st["variance"] == 1.0
    assert st["second_moment"] == pytest.approx(14 / 3)


def test_derive_seed_is_stable_and_label_sensitive():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert len({derive_seed(1, i, j) for i in range(20) for j in range(20)}) == 400


def test_quenched_moments_first_moment_agrees_with_kernel():
    env = RANDOM.sample(3, 4, 1)
    for law in (BINARY, GEOM):
        qm = QuenchedMoments(env, 4, law)
        assert qm.mean == pytest.approx(first_moment_exact(env, 4, law.sigma2)["exact"], rel=1e-10)


def test_quenched_moments_box_zero():
    qm = QuenchedMoments(homogeneous_environment(2, 0), 0, BINARY)
    assert qm.mean == 1.0
    assert qm.variance == pytest.approx(0.0, abs=1e-12)


def test_quenched_second_moment_by_monte_carlo():
    env = RANDOM.sample(2, 3, 2)
    qm = QuenchedMoments(env, 3, GEOM)
    b = sample_snakes(SnakeSampler(env, GEOM, 3), 5, 60000)
    x2 = b.values**2
    assert abs(x2.mean() - qm.second_moment) < 4 * x2.std() / np.sqrt(len(x2))


def test_spine_visits_are_pi_times_green():
    env = RANDOM.sample(2, 3, 2)
    qm = QuenchedMoments(env, 3, BINARY)
    g = green_origin(env, 3)
    np.testing.assert_allclose(qm.spine_visits, env.pi_array(3).ravel() * g, rtol=1e-10)


def test_branch_mean_binary_equals_sigma2_pi0_g():
    env = RANDOM.sample(2, 3, 2)
    qm = QuenchedMoments(env, 3, BINARY)
    x = (1, -1)
    g = green_origin(env, 3)
    assert qm.branch_mean(x) == pytest.approx(qm.pi0 * g[qm.index(x)], rel=1e-10)


def test_first_moment_check_passes_and_serializes():
    env = RANDOM.sample(3, 3, 3)
    rep = first_moment_check(env, 3, BINARY, 20000, seed=1)
    assert rep.passed, rep.failures()
    doc = json.loads(rep.to_json())
    assert doc["schema_version"] == 1 and doc["experiment"] == "first-moment"
    assert {"mean", "se", "z"} <= set(doc["stats"][0])


def test_first_moment_check_with_traps_kill():
    env = EnvSpec("traps", None, "uniform(0,0.9)").sample(3, 3, 3)
    rep = first_moment_check(env, 3, BINARY, 20000, seed=1, kill=KillRule.box_and_traps(3, 2.0))
    assert rep.passed, rep.failures()
    assert rep.oracles["trap_fraction"] > 0


def test_first_moment_check_detects_a_wrong_oracle():
    # a deliberately tight tolerance must fail: the harness is not vacuous
    env = RANDOM.sample(3, 3, 3)
    rep = first_moment_check(env, 3, BINARY, 2000, seed=1, z_tol=1e-6)
    assert not rep.passed


def test_censoring_invalidates_report():
    env = homogeneous_environment(3, 5)
    rep = first_moment_check(env, 5, GEOM, 500, seed=0, node_cap=10)
    assert not rep.valid and not rep.passed


def test_marginals_small():
    env = RANDOM.sample(2, 3, 4)
    rep = marginals_check(env, 3, BINARY, [(1, 0), (0, -2)], 20000, seed=2)
    assert rep.passed, rep.failures()
    assert len(rep.stats) == 4


def test_variance_decomposition_small():
    env = RANDOM.sample(2, 3, 4)
    rep = variance_decomposition(env, 3, GEOM, 30000, seed=3)
    assert rep.passed, rep.failures()
    st = rep.stats[0]
    assert st["spine_part"] > 0 and st["tree_part"] > 0


def test_many_to_two_small_with_scaling():
    env = RANDOM.sample(2, 3, 4)
    rep = many_to_two_check(env, 3, (1, 0), BINARY, 20000, seed=4, scale_check=2.0)
    assert rep.passed, rep.failures()
    assert rep.oracles["scaled"]["identical_samples"]


def test_scaling_study_deterministic_env_uses_single_environment():
    rep = scaling_study(EnvSpec("constant"), 3, BINARY, [1, 2, 3, 4], 3000, seed=5)
    assert rep.passed, rep.failures()
    assert all(s["n_envs"] == 1 for s in rep.stats)


def test_scaling_study_argument_checks():
    with pytest.raises(InvalidEnvironment):
        scaling_study(EnvSpec("constant"), 2, BINARY, [1, 2, 3, 4], 10, seed=0)
    with pytest.raises(ValueError):
        scaling_study(EnvSpec("constant"), 3, BINARY, [1, 2, 3], 10, seed=0)
    with pytest.raises(ValueError):
        scaling_study(EnvSpec("constant"), 5, BINARY, [1, 3, 2], 10, seed=0)


def test_second_moment_ratio_homogeneous_has_exact_ratio():
    rep = second_moment_ratio(EnvSpec("constant"), 3, BINARY, [2, 4], 20000, seed=6)
    assert rep.passed, rep.failures()
    for st in rep.stats:
        assert abs(st["z_second_moment"]) < 4
        assert abs(st["ratio"] - st["exact_ratio"]) < 0.1


def test_second_moment_ratio_random_env_pairs():
    rep = second_moment_ratio(RANDOM, 3, BINARY, [2, 3], 2000, seed=7, n_envs=10)
    assert rep.passed, rep.failures()
    st = rep.stats[0]
    assert st["c1"] >= 1 - 0.2 and st["c2"] >= 1 - 0.2  # E[L^2] >= E[E^w[L]^2] >= E[L]^2 up to noise


def test_hitting_study_reports_in_low_dimension():
    rep = hitting_study(EnvSpec("constant"), 3, BINARY, [2, 4], [4, 6], 2000, seed=8)
    assert rep.passed
    assert rep.warnings
    f = {(s["m"], s["radius"]): s["frequency"] for s in rep.stats}
    assert f[(6, 2)] > f[(6, 4)] > 0


def test_hitting_study_d5_ratio():
    rep = hitting_study(EnvSpec("constant"), 5, BINARY, [1, 2], [3], 20000, seed=9)
    assert rep.oracles["predicted_ratio"] == 1 / 8
    assert rep.passed, (rep.failures(), rep.oracles)


def test_green_lower_bound_probe():
    env = homogeneous_environment(3, 8)
    rep = green_lower_bound_probe(env, [1, 2], K_values=(2, 4))
    assert rep.oracles["c_K4"] >= rep.oracles["c_K2"] > 0
    with pytest.raises(InvalidEnvironment):
        green_lower_bound_probe(env, [3], K_values=(4,))
