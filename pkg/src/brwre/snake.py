"""Critical snakes through the spine decomposition.

The snake indexed by Kesten's tree is simulated as a walk along the spine
that, at every spine vertex, grows one finite tree whose root has the shifted
law.  Particles are killed when they leave ``Lambda_m`` (and, for the
truncated process, when they land in the deep-trap set); the renormalized
local time at the origin is the number of surviving particles sitting at 0
divided by ``pi_omega(0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import core, rng
from .environment import Environment, InvalidEnvironment, box_sites
from .genealogy import OffspringLaw, draw
from .parallel import run_chunked

DEFAULT_NODE_CAP = 10**7
DEFAULT_TRAP_R = 100.0


@dataclass(frozen=True)
class TrapKillSet:
    """``A_omega = {x : pi_omega(x) >= R |x|^2}`` with ``|0|^2`` read as 1."""

    R: float = DEFAULT_TRAP_R

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError("trap threshold R must be positive")

    def mask(self, env: Environment, m: int) -> np.ndarray:
        """Boolean membership over ``Lambda_m`` (shape ``(2m+1,)*d``)."""
        if math.isinf(self.R):
            return np.zeros((2 * m + 1,) * env.d, dtype=bool)
        sites = box_sites(env.d, m)
        r2 = np.maximum(np.sum(sites.astype(float) ** 2, axis=1), 1.0)
        return (env.pi_array(m).ravel() >= self.R * r2).reshape((2 * m + 1,) * env.d)

    def contains(self, env: Environment, x) -> bool:
        r2 = max(sum(float(c) ** 2 for c in x), 1.0)
        return env.pi_at(x) >= self.R * r2

    def fraction(self, env: Environment, m: int) -> float:
        return float(self.mask(env, m).mean())


@dataclass(frozen=True)
class KillRule:
    """``Box(m)`` when ``traps`` is None, else ``BoxAndTraps(m, R)``."""

    m: int
    traps: TrapKillSet | None = None

    @classmethod
    def box(cls, m: int) -> "KillRule":
        return cls(m)

    @classmethod
    def box_and_traps(cls, m: int, R: float = DEFAULT_TRAP_R) -> "KillRule":
        return cls(m, TrapKillSet(R))

    def describe(self) -> str:
        return f"Box({self.m})" if self.traps is None else f"BoxAndTraps({self.m}, {self.traps.R})"


@dataclass
class LocalTimeSample:
    value: float
    visits: int
    particle_count: int
    spine_exit_step: int
    censored: bool


@dataclass
class Grid:
    """Flat indexing of ``Lambda_{m+1}`` used by the kernels."""

    d: int
    m: int

    @property
    def side(self) -> int:
        return 2 * self.m + 3

    @property
    def size(self) -> int:
        return self.side**self.d

    def strides(self) -> list[int]:
        return [self.side ** (self.d - 1 - i) for i in range(self.d)]

    def index(self, x) -> int:
        if len(x) != self.d or any(abs(int(c)) > self.m + 1 for c in x):
            raise InvalidEnvironment(f"site {tuple(x)} outside Lambda_{self.m + 1}")
        return sum((int(c) + self.m + 1) * s for c, s in zip(x, self.strides()))

    def coords(self, idx: int) -> tuple[int, ...]:
        out = []
        for s in self.strides():
            out.append(idx // s - self.m - 1)
            idx %= s
        return tuple(out)

    def offsets(self) -> np.ndarray:
        offs = [0]
        for s in self.strides():
            offs += [s, -s]
        return np.asarray(offs, dtype=np.int64)

    def embed(self, field_on_box: np.ndarray) -> np.ndarray:
        """Place a ``Lambda_m`` array into a zero-padded flat grid vector."""
        out = np.zeros((self.side,) * self.d)
        out[(slice(1, self.side - 1),) * self.d] = np.asarray(field_on_box).reshape((2 * self.m + 1,) * self.d)
        return out.ravel()

    def restrict(self, grid_vector: np.ndarray) -> np.ndarray:
        return np.asarray(grid_vector).reshape((self.side,) * self.d)[(slice(1, self.side - 1),) * self.d]


class SnakeSampler:
    """Precomputed tables for simulating snakes in ``env`` under a kill rule.

    Picklable, so it can be shipped to worker processes.
    """

    def __init__(
        self,
        env: Environment,
        law: OffspringLaw,
        kill: KillRule | int,
        node_cap: int = DEFAULT_NODE_CAP,
        backend: str | None = None,
    ):
        if isinstance(kill, int):
            kill = KillRule.box(kill)
        if not 0 <= kill.m <= env.M:
            raise InvalidEnvironment(f"kill radius m={kill.m} must lie in [0, {env.M}]")
        if node_cap < 1:
            raise ValueError("node_cap must be >= 1")
        self.env = env
        self.law = law
        self.kill = kill
        self.node_cap = int(node_cap)
        self.backend = backend
        self.grid = Grid(env.d, kill.m)
        killed = np.ones((self.grid.side,) * env.d, dtype=np.uint8)
        inner = (slice(1, self.grid.side - 1),) * env.d
        killed[inner] = 0
        if kill.traps is not None:
            killed[inner] |= kill.traps.mask(env, kill.m).astype(np.uint8)
        self.killed = np.ascontiguousarray(killed.ravel())
        self.origin = self.grid.index((0,) * env.d)
        self.offsets = self.grid.offsets()
        self.cum_move = env.move_table(kill.m)
        self.pi0 = env.pi_at((0,) * env.d)

    @property
    def m(self) -> int:
        return self.kill.m

    def _kernel(self):
        return core.backend(self.backend)

    def run(self, master_seed: int, first: int, n: int, spine_weights: np.ndarray | None = None):
        """Raw kernel output for replicates ``first .. first+n-1``."""
        w = np.zeros((0, self.grid.size)) if spine_weights is None else np.ascontiguousarray(spine_weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != self.grid.size:
            raise ValueError("spine weights must have shape (k, grid size)")
        return self._kernel().run_snakes(
            int(master_seed) & rng.MASK64,
            int(first),
            int(n),
            self.cum_move,
            self.offsets,
            self.killed,
            self.origin,
            self.law.cum_q,
            self.law.cum_sizebiased,
            self.node_cap,
            w,
        )

    def sample(self, seed: int) -> LocalTimeSample:
        """One snake; ``seed`` plays the role of the master seed of replicate 0."""
        counts, parts, length, cens, _ = self.run(seed, 0, 1)
        return LocalTimeSample(
            counts[0] / self.pi0, int(counts[0]), int(parts[0]), int(length[0]), bool(cens[0])
        )

    def run_trees(self, master_seed: int, first: int, n: int, start, root_law: str = "shifted",
                  target=None, stop_on_hit: bool = False):
        """Finite tree-indexed walks from ``start`` under the same kill rule."""
        s = self.grid.index(start)
        t = self.origin if target is None else self.grid.index(target)
        return self._kernel().run_trees(
            int(master_seed) & rng.MASK64,
            int(first),
            int(n),
            s,
            self.law.cum(root_law),
            self.law.cum_q,
            self.cum_move,
            self.offsets,
            self.killed,
            t,
            self.node_cap,
            bool(stop_on_hit),
        )


@dataclass
class _SnakeTask:
    sampler: SnakeSampler
    seed: int
    weights: np.ndarray | None

    def __call__(self, first, count):
        return self.sampler.run(self.seed, first, count, self.weights)


@dataclass
class _TreeTask:
    sampler: SnakeSampler
    seed: int
    start: tuple
    root_law: str
    target: tuple | None
    stop_on_hit: bool

    def __call__(self, first, count):
        return self.sampler.run_trees(self.seed, first, count, self.start, self.root_law, self.target, self.stop_on_hit)


@dataclass
class SnakeBatch:
    """Per-replicate output of many snakes."""

    visits: np.ndarray
    particles: np.ndarray
    spine_lengths: np.ndarray
    censored: np.ndarray
    spine_sums: np.ndarray
    pi0: float

    @property
    def values(self) -> np.ndarray:
        return self.visits / self.pi0

    @property
    def censoring_rate(self) -> float:
        return float(self.censored.mean()) if len(self.censored) else 0.0


def sample_snakes(
    sampler: SnakeSampler,
    master_seed: int,
    n: int,
    spine_weights: np.ndarray | None = None,
    workers: int | None = None,
    first: int = 0,
) -> SnakeBatch:
    counts, parts, lengths, cens, sums = run_chunked(_SnakeTask(sampler, master_seed, spine_weights), n, workers, first)
    return SnakeBatch(counts, parts, lengths, cens.astype(bool), sums, sampler.pi0)


def sample_trees(
    sampler: SnakeSampler,
    master_seed: int,
    n: int,
    start,
    root_law: str = "shifted",
    target=None,
    stop_on_hit: bool = False,
    workers: int | None = None,
):
    """``(counts, particles, censored)`` of finite snakes from ``start``."""
    task = _TreeTask(sampler, master_seed, tuple(start), root_law, None if target is None else tuple(target), stop_on_hit)
    counts, parts, cens = run_chunked(task, n, workers)
    return counts, parts, cens.astype(bool)


def sample_snake_local_time(env: Environment, m: int, law: OffspringLaw, kill: KillRule | None = None,
                            seed: int = 0, node_cap: int = DEFAULT_NODE_CAP) -> LocalTimeSample:
    """One draw of ``L_m`` (or of the trap-truncated local time under ``BoxAndTraps``)."""
    kill = KillRule.box(m) if kill is None else kill
    if kill.m != m:
        raise ValueError("kill rule radius differs from m")
    return SnakeSampler(env, law, kill, node_cap).sample(seed)


def finite_snake_hits(env: Environment, target, law: OffspringLaw, m_bound: int, seed: int,
                      node_cap: int = DEFAULT_NODE_CAP) -> bool:
    """Does an unconditioned BGW(q) snake from 0, killed outside ``Lambda_{m_bound}``, visit ``target``?"""
    if any(abs(int(c)) > m_bound for c in target):
        raise InvalidEnvironment("target must lie in the bounding box")
    sampler = SnakeSampler(env, law, KillRule.box(m_bound), node_cap)
    counts, _, cens = sampler.run_trees(seed, 0, 1, (0,) * env.d, "q", target, stop_on_hit=True)
    if cens[0]:
        raise RuntimeError("hitting replicate censored by node cap")
    return bool(counts[0] > 0)


# ---------------------------------------------------------------------------
# explicit decompositions


@dataclass
class TreeSnake:
    """A finite tree with the sites of its surviving nodes; node 0 is the root."""

    parent: np.ndarray
    sites: np.ndarray  # (n, d)
    keys: np.ndarray

    @property
    def size(self) -> int:
        return len(self.parent)


@dataclass
class SnakeDecomposition:
    """In-memory image of a (killed) snake under the spine decomposition."""

    env: Environment
    spine: np.ndarray  # (n_spine, d), spine[0] = 0
    trees: list[TreeSnake]
    kill: KillRule | None
    offset: tuple = ()  # total shift applied by re-rooting

    def local_time_count(self, at=None) -> int:
        at = np.zeros(self.env.d, dtype=np.int64) if at is None else np.asarray(at)
        return int(sum(np.sum(np.all(t.sites == at, axis=1)) for t in self.trees))

    def validate(self) -> None:
        if len(self.spine) and np.any(self.spine[0] != 0):
            raise AssertionError("spine must start at the origin")
        steps = np.abs(np.diff(self.spine, axis=0)).sum(axis=1)
        if np.any(steps > 1):
            raise AssertionError("consecutive spine positions must be neighbours or equal")
        for pos, t in zip(self.spine, self.trees):
            if np.any(t.sites[0] != pos):
                raise AssertionError("tree root label must equal its spine position")
            if self.kill is not None and not self.offset:
                if np.any(np.abs(t.sites) > self.kill.m):
                    raise AssertionError("surviving node outside the box")
            if t.size > 1 and np.any(np.abs(t.sites[1:] - t.sites[t.parent[1:]]).sum(axis=1) > 1):
                raise AssertionError("tree edges must be nearest-neighbour or holding moves")
        if len(self.trees) != len(self.spine):
            raise AssertionError("one finite tree per spine vertex")


def _ordered_distribution(env: Environment, x):
    dist = dict(env.transition_distribution(x))
    order = [tuple(x)]
    for i in range(env.d):
        for s in (1, -1):
            y = list(x)
            y[i] += s
            order.append(tuple(y))
    return order, [dist.get(y, 0.0) for y in order]


def _move(env: Environment, x: tuple, key: int) -> tuple:
    cache_key = ("ordered", x)
    entry = env._cache.get(cache_key)
    if entry is None:
        order, probs = _ordered_distribution(env, x)
        cum = np.cumsum(probs)
        cum[-1] = 1.0
        entry = (order, cum)
        env._cache[cache_key] = entry
    order, cum = entry
    return order[draw(cum, rng.u_move(key))]


def build_decomposition(env: Environment, law: OffspringLaw, kill: KillRule | None, master_seed: int,
                        index: int = 0, max_spine: int | None = None, node_cap: int = 10**6) -> SnakeDecomposition:
    """Materialize the spine, the finite trees and all surviving labels.

    Uses the same node-keyed randomness as the kernels, so the origin count
    equals the kernel's for the same ``(master_seed, index)``.  Without a kill
    rule the spine is truncated after ``max_spine`` vertices.  Under a kill
    rule that forbids the origin the decomposition is empty.
    """
    if kill is None and max_spine is None:
        raise ValueError("an unkilled snake needs max_spine")
    d = env.d
    killed_traps = None if kill is None or kill.traps is None else kill.traps.mask(env, kill.m)

    def dead(y) -> bool:
        if kill is None:
            return any(abs(c) > env.M for c in y)
        if any(abs(c) > kill.m for c in y):
            return True
        if killed_traps is not None:
            return bool(killed_traps[tuple(c + kill.m for c in y)])
        return False

    seed = rng.replicate_seed(master_seed, index)
    s = rng.spine_root_key(seed)
    x = (0,) * d
    spine, trees = [], []
    if dead(x):
        return SnakeDecomposition(env, np.zeros((0, d), dtype=np.int64), [], kill)
    total = 0
    while True:
        spine.append(x)
        k = draw(law.cum_sizebiased, rng.u_offspring(s))
        j = min(int(rng.u_spine(s) * k), k - 1)
        parent, sites, keys = [-1], [x], [s]
        stack = []
        for c in range(k):
            if c == j:
                continue
            ck = rng.child_key(s, c)
            y = _move(env, x, ck)
            if not dead(y):
                stack.append((y, ck, 0))
        while stack:
            y, key, par = stack.pop()
            me = len(sites)
            parent.append(par)
            sites.append(y)
            keys.append(key)
            total += 1
            if total > node_cap:
                raise RuntimeError("decomposition exceeded node cap")
            kk = draw(law.cum_q, rng.u_offspring(key))
            for c in range(kk):
                ck = rng.child_key(key, c)
                z = _move(env, y, ck)
                if not dead(z):
                    stack.append((z, ck, me))
        trees.append(TreeSnake(np.asarray(parent, dtype=np.int64), np.asarray(sites, dtype=np.int64).reshape(-1, d),
                               np.asarray(keys, dtype=np.uint64)))
        if max_spine is not None and len(spine) >= max_spine:
            break
        s = rng.child_key(s, j)
        x = _move(env, x, s)
        if dead(x):
            break
    return SnakeDecomposition(env, np.asarray(spine, dtype=np.int64).reshape(-1, d), trees, kill)


def reroot(dec: SnakeDecomposition) -> SnakeDecomposition:
    """Drop the first spine vertex and its tree; re-centre everything at the next spine vertex.

    Positions and labels are shifted by ``-x_1`` and the environment is
    replaced by ``shift(env, x_1)``.
    """
    if len(dec.spine) < 2:
        raise ValueError("spine exhausted: re-rooting needs at least two spine vertices")
    x1 = dec.spine[1].copy()
    trees = [TreeSnake(t.parent, t.sites - x1, t.keys) for t in dec.trees[1:]]
    prev = dec.offset or (0,) * dec.env.d
    return SnakeDecomposition(
        dec.env.shift(tuple(int(c) for c in x1)),
        dec.spine[1:] - x1,
        trees,
        dec.kill,
        tuple(int(a + b) for a, b in zip(prev, x1)),
    )


def site_weights_origin_indicator(grid: Grid, x) -> np.ndarray:
    w = np.zeros(grid.size)
    w[grid.index(x)] = 1.0
    return w
