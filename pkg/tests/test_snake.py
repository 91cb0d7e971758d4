import numpy as np
import pytest

from brwre import core
from brwre.environment import EnvSpec, InvalidEnvironment, homogeneous_environment
from brwre.genealogy import make_law
from brwre.kernel import first_moment_exact
from brwre.snake import (
    Grid,
    KillRule,
    SnakeSampler,
    TrapKillSet,
    build_decomposition,
    finite_snake_hits,
    reroot,
    sample_snake_local_time,
    sample_snakes,
    sample_trees,
)

BINARY = make_law("binary")
GEOM = make_law("geometric")
RANDOM = EnvSpec("conductances", "uniform(0.5,2)")
TRAPS = EnvSpec("traps", None, "uniform(0,0.9)")

needs_compiled = pytest.mark.skipif(not core.HAVE_COMPILED, reason="compiled core not built")


def test_grid_roundtrip():
    g = Grid(3, 2)
    for idx in (0, 17, g.size - 1):
        assert g.index(g.coords(idx)) == idx
    field = np.arange(125.0)
    np.testing.assert_array_equal(g.restrict(g.embed(field)).ravel(), field)


def test_box_zero_is_deterministic():
    # Lambda_0 = {0}: only the root particle survives, so L_0 = 1
    env = homogeneous_environment(2, 0)
    b = sample_snakes(SnakeSampler(env, BINARY, 0), 1, 200)
    assert np.all(b.values == 1.0)
    assert first_moment_exact(env, 0, 1.0)["exact"] == 1.0


@needs_compiled
@pytest.mark.parametrize("law", [BINARY, GEOM], ids=["binary", "geometric"])
@pytest.mark.parametrize("kill", [KillRule.box(3), KillRule.box_and_traps(3, 1.2)], ids=["box", "traps"])
def test_backends_identical(law, kill):
    env = EnvSpec("mixed", "uniform(0.5,2)", "uniform(0,0.9)").sample(2, 3, 5)
    w = np.random.default_rng(0).random((2, Grid(2, 3).size))
    outs = []
    for backend in ("compiled", "python"):
        s = SnakeSampler(env, law, kill, node_cap=10**5, backend=backend)
        outs.append(s.run(9, 40, 150, w) + s.run_trees(9, 0, 150, (1, 0), "shifted"))
    for a, b in zip(*outs):
        np.testing.assert_array_equal(a, b)


def test_chunking_and_offsets_do_not_matter():
    env = RANDOM.sample(2, 4, 1)
    s = SnakeSampler(env, BINARY, 4)
    full = sample_snakes(s, 3, 5000)
    tail = sample_snakes(s, 3, 1000, first=4000)
    np.testing.assert_array_equal(full.visits[4000:], tail.visits)


def test_decomposition_matches_kernel_counts():
    env = RANDOM.sample(2, 4, 2)
    kill = KillRule.box(4)
    b = sample_snakes(SnakeSampler(env, BINARY, kill), 17, 30)
    for i in range(30):
        dec = build_decomposition(env, BINARY, kill, 17, i)
        dec.validate()
        assert dec.local_time_count() == b.visits[i]
        assert len(dec.spine) == b.spine_lengths[i]


def test_reroot_shifts_spine_and_environment():
    env = RANDOM.sample(2, 6, 3)
    dec = None
    for i in range(200):
        dec = build_decomposition(env, BINARY, KillRule.box(6), 5, i)
        if len(dec.spine) > 3:
            break
    r = reroot(reroot(dec))
    x2 = dec.spine[2]
    np.testing.assert_array_equal(r.spine, dec.spine[2:] - x2)
    assert r.offset == tuple(int(c) for c in x2)
    for t_new, t_old in zip(r.trees, dec.trees[2:]):
        np.testing.assert_array_equal(t_new.sites, t_old.sites - x2)
    assert r.env.weight((0, 0), (1, 0)) == env.weight(tuple(x2), tuple(x2 + [1, 0]))


def test_reroot_needs_two_spine_vertices():
    env = homogeneous_environment(1, 0)
    dec = build_decomposition(env, BINARY, KillRule.box(0), 0, 0)
    with pytest.raises(ValueError):
        reroot(dec)


def test_coupling_monotone_in_box_and_traps():
    env = TRAPS.sample(2, 6, 4)
    n = 400
    small = sample_snakes(SnakeSampler(env, BINARY, 3), 8, n).visits
    large = sample_snakes(SnakeSampler(env, BINARY, 6), 8, n).visits
    trapped = sample_snakes(SnakeSampler(env, BINARY, KillRule.box_and_traps(6, 1.5)), 8, n).visits
    assert np.all(small <= large) and np.all(trapped <= large)
    assert np.any(small < large)


def test_trap_kill_set():
    env = TRAPS.sample(2, 3, 1)
    ks = TrapKillSet(2.0)
    mask = ks.mask(env, 3)
    for x in [(0, 0), (1, 0), (2, -1), (3, 3)]:
        assert mask[x[0] + 3, x[1] + 3] == (env.pi_at(x) >= 2.0 * max(1, x[0] ** 2 + x[1] ** 2))
    assert TrapKillSet(float("inf")).fraction(env, 3) == 0.0
    with pytest.raises(ValueError):
        TrapKillSet(0.0)


def test_dead_origin_gives_zero():
    env = TRAPS.sample(2, 3, 1)
    R = env.pi_at((0, 0)) * 0.5
    b = sample_snakes(SnakeSampler(env, BINARY, KillRule.box_and_traps(3, R)), 0, 50)
    assert np.all(b.visits == 0)


def test_node_cap_censors():
    env = homogeneous_environment(3, 8)
    b = sample_snakes(SnakeSampler(env, GEOM, 8, node_cap=20), 0, 300)
    assert b.censoring_rate > 0
    full = sample_snakes(SnakeSampler(env, GEOM, 8), 0, 300)
    # a censored value is a lower bound
    assert np.all(b.visits[b.censored] <= full.visits[b.censored])
    assert np.array_equal(b.visits[~b.censored], full.visits[~b.censored])


def test_first_moment_small_sample():
    env = RANDOM.sample(2, 3, 6)
    b = sample_snakes(SnakeSampler(env, GEOM, 3), 2, 20000)
    exact = first_moment_exact(env, 3, GEOM.sigma2)["exact"]
    assert abs(b.values.mean() - exact) < 4 * b.values.std() / np.sqrt(len(b.values))


def test_single_sample_helpers():
    env = RANDOM.sample(2, 3, 6)
    s = sample_snake_local_time(env, 3, BINARY, seed=4)
    assert s.value == s.visits / env.pi_at((0, 0))
    with pytest.raises(ValueError):
        sample_snake_local_time(env, 3, BINARY, KillRule.box(2))


def test_hitting_indicator():
    env = homogeneous_environment(2, 4)
    assert finite_snake_hits(env, (0, 0), BINARY, 4, seed=1)  # the root sits on the target
    with pytest.raises(InvalidEnvironment):
        finite_snake_hits(env, (5, 0), BINARY, 4, seed=1)
    hits = [finite_snake_hits(env, (3, 0), BINARY, 4, seed=s) for s in range(300)]
    assert 0 < sum(hits) < 300


def test_tree_counts_match_branch_mean_sign():
    env = RANDOM.sample(2, 3, 6)
    counts, parts, cens = sample_trees(SnakeSampler(env, BINARY, 3), 0, 100, (3, 3), "shifted")
    assert not cens.any()
    assert np.all(parts >= 1)
    assert np.all(counts >= 0)


def test_sampler_validates_arguments():
    env = homogeneous_environment(2, 2)
    with pytest.raises(InvalidEnvironment):
        SnakeSampler(env, BINARY, 3)
    with pytest.raises(ValueError):
        SnakeSampler(env, BINARY, 2, node_cap=0)
