"""Random environments on lattice boxes.

An :class:`Environment` holds nearest-neighbour conductances and/or trap
parameters on the box ``Lambda_{M+1}``, so that the quenched transition kernel
is fully defined from every site of ``Lambda_M``.  The outer shell is only
ever used as absorbing territory.

Edge weights are stored per direction: ``edges[i][a]`` is the weight of the
edge ``(x, x + e_i)`` where ``a = x + M + 1`` is the grid index of ``x``.
Along axis ``i`` that array is one shorter than the grid.
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "LatticeBox",
    "DistributionSpec",
    "Environment",
    "InvalidEnvironment",
    "sample_environment",
    "homogeneous_environment",
    "constant_conductances",
    "from_arrays",
    "save_environment",
    "load_environment",
    "verify_environment",
]

RHO_MAX = 1.0 - 1e-9
FORMAT_VERSION = 1
MAGIC = b"BRWREENV"
# refuse boxes whose stored arrays would exceed this many float64 entries
MAX_STORED_ENTRIES = 400_000_000


class InvalidEnvironment(ValueError):
    """Invalid environment specification or query."""


@dataclass(frozen=True)
class LatticeBox:
    """The box ``Z^d ∩ [-M, M]^d``."""

    d: int
    M: int

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise InvalidEnvironment(f"dimension must be an integer >= 1, got {self.d!r}")
        if int(self.M) != self.M or self.M < 0:
            raise InvalidEnvironment(f"radius must be an integer >= 0, got {self.M!r}")

    @property
    def side(self) -> int:
        return 2 * self.M + 1

    @property
    def n_sites(self) -> int:
        return self.side**self.d

    def contains(self, x: Sequence[int]) -> bool:
        return len(x) == self.d and all(abs(int(c)) <= self.M for c in x)

    def sites(self) -> np.ndarray:
        """All sites in lexicographic order, shape ``(n_sites, d)``."""
        return box_sites(self.d, self.M)

    def index(self, x: Sequence[int]) -> int:
        if not self.contains(x):
            raise InvalidEnvironment(f"site {tuple(x)} outside Lambda_{self.M}")
        idx = 0
        for c in x:
            idx = idx * self.side + (int(c) + self.M)
        return idx

    def neighbors(self, x: Sequence[int]) -> list[tuple[int, ...]]:
        """Lattice neighbours of ``x`` lying inside the box."""
        out = []
        for i in range(self.d):
            for s in (1, -1):
                y = list(x)
                y[i] += s
                if self.contains(y):
                    out.append(tuple(y))
        return out


def box_sites(d: int, m: int) -> np.ndarray:
    side = 2 * m + 1
    grids = np.indices((side,) * d).reshape(d, -1).T - m
    return np.ascontiguousarray(grids, dtype=np.int64)


_FAMILY_RE = re.compile(r"^\s*([A-Za-z]+)\s*\(([^)]*)\)\s*$")


@dataclass(frozen=True)
class DistributionSpec:
    """An i.i.d. marginal law for edge weights or trap parameters.

    ``family`` is one of ``constant``, ``uniform``, ``loguniform``, ``twopoint``;
    ``params`` follow the family: ``(c)``, ``(a, b)``, ``(a, b)``, ``(a, b, p)``
    where two-point draws ``a`` with probability ``p``.
    """

    family: str
    params: tuple[float, ...]
    target: str = "edge"  # "edge" or "trap"

    _ARITY = {"constant": 1, "uniform": 2, "loguniform": 2, "twopoint": 3}

    def __post_init__(self):
        fam = self.family.lower()
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if fam not in self._ARITY:
            raise InvalidEnvironment(f"unknown distribution family {self.family!r}")
        if len(self.params) != self._ARITY[fam]:
            raise InvalidEnvironment(f"{fam} takes {self._ARITY[fam]} parameters, got {len(self.params)}")
        if not all(math.isfinite(p) for p in self.params):
            raise InvalidEnvironment("distribution parameters must be finite")
        if self.target == "edge":
            self._check_edge()
        elif self.target == "trap":
            self._check_trap()
        else:
            raise InvalidEnvironment(f"unknown spec target {self.target!r}")

    def _check_edge(self):
        fam, p = self.family, self.params
        values = p[:2] if fam != "constant" else p
        if any(v <= 0 for v in values):
            raise InvalidEnvironment(f"edge weights must be > 0: {self}")
        if fam in ("uniform", "loguniform") and not p[0] < p[1]:
            raise InvalidEnvironment(f"need a < b: {self}")
        if fam == "twopoint" and not 0.0 <= p[2] <= 1.0:
            raise InvalidEnvironment(f"two-point probability out of [0,1]: {self}")

    def _check_trap(self):
        fam, p = self.family, self.params
        if fam == "loguniform":
            raise InvalidEnvironment("loguniform is not available for trap parameters")
        if fam == "uniform" and p[0] != 0.0:
            raise InvalidEnvironment("trap uniform law must be Uniform(0, r)")
        values = p[:2] if fam != "constant" else p
        if any(not 0.0 <= v <= RHO_MAX for v in values):
            raise InvalidEnvironment(f"trap parameters must lie in [0, 1-1e-9]: {self}")
        if fam == "uniform" and not p[1] > 0:
            raise InvalidEnvironment("trap uniform law needs r > 0")
        if fam == "twopoint" and not 0.0 <= p[2] <= 1.0:
            raise InvalidEnvironment(f"two-point probability out of [0,1]: {self}")

    @classmethod
    def parse(cls, text: str, target: str = "edge") -> "DistributionSpec":
        match = _FAMILY_RE.match(text)
        if not match:
            raise InvalidEnvironment(f"cannot parse distribution {text!r}")
        params = tuple(float(v) for v in match.group(2).split(",") if v.strip())
        return cls(match.group(1), params, target)

    def __str__(self) -> str:
        return f"{self.family}({','.join(repr(p) for p in self.params)})"

    @property
    def is_constant(self) -> bool:
        return self.family == "constant" or (
            self.family == "twopoint" and (self.params[2] in (0.0, 1.0) or self.params[0] == self.params[1])
        )

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        fam, p = self.family, self.params
        if fam == "constant":
            return np.broadcast_to(np.float64(p[0]), shape)
        if fam == "uniform":
            return rng.uniform(p[0], p[1], size=shape)
        if fam == "loguniform":
            return np.exp(rng.uniform(math.log(p[0]), math.log(p[1]), size=shape))
        u = rng.random(size=shape)
        return np.where(u < p[2], p[0], p[1])

    def mean(self) -> float:
        fam, p = self.family, self.params
        if fam == "constant":
            return p[0]
        if fam == "uniform":
            return 0.5 * (p[0] + p[1])
        if fam == "loguniform":
            return (p[1] - p[0]) / math.log(p[1] / p[0])
        return p[2] * p[0] + (1 - p[2]) * p[1]

    def variance(self) -> float:
        fam, p = self.family, self.params
        if fam == "constant":
            return 0.0
        if fam == "uniform":
            return (p[1] - p[0]) ** 2 / 12.0
        if fam == "loguniform":
            m2 = (p[1] ** 2 - p[0] ** 2) / (2 * math.log(p[1] / p[0]))
            return m2 - self.mean() ** 2
        return p[2] * (1 - p[2]) * (p[0] - p[1]) ** 2

    def mean_holding(self) -> float:
        """``E[1/(1-rho)]`` for a trap law."""
        fam, p = self.family, self.params
        if fam == "constant":
            return 1.0 / (1.0 - p[0])
        if fam == "uniform":
            return -math.log1p(-p[1]) / p[1]
        return p[2] / (1 - p[0]) + (1 - p[2]) / (1 - p[1])

    def support(self) -> tuple[float, float]:
        fam, p = self.family, self.params
        if fam == "constant":
            return (p[0], p[0])
        return (min(p[0], p[1]), max(p[0], p[1]))

    def moment_flags(self, p: float, q: float) -> dict:
        """Finiteness of ``E[w^p]`` and ``E[w^-q]``; recorded, never enforced."""
        lo, hi = self.support()
        return {"p": p, "q": q, "positive_moment_finite": math.isfinite(hi), "negative_moment_finite": lo > 0}


KINDS = ("conductances", "traps", "mixed")


@dataclass(frozen=True, eq=False)
class Environment:
    """A boxed realization of the environment, immutable after construction."""

    box: LatticeBox
    kind: str
    edges: tuple
    rho: np.ndarray | None
    edge_spec: DistributionSpec | None = None
    trap_spec: DistributionSpec | None = None
    seed: int | None = None
    shift_vector: tuple = ()
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def d(self) -> int:
        return self.box.d

    @property
    def M(self) -> int:
        return self.box.M

    @property
    def grid_side(self) -> int:
        return 2 * self.M + 3

    @property
    def is_homogeneous(self) -> bool:
        """True when every site sees the same weights (translation invariant)."""
        if self.edge_spec is None and self.kind != "traps":
            return False
        edges_const = self.kind == "traps" or (self.edge_spec is not None and self.edge_spec.is_constant)
        traps_const = self.rho is None or (self.trap_spec is not None and self.trap_spec.is_constant)
        return edges_const and traps_const

    def grid_index(self, x: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(c) + self.M + 1 for c in x)

    def _check_site(self, x, radius=None):
        radius = self.M if radius is None else radius
        if len(x) != self.d or any(abs(int(c)) > radius for c in x):
            raise InvalidEnvironment(f"site {tuple(x)} outside Lambda_{radius}")

    def weight(self, x: Sequence[int], y: Sequence[int]) -> float:
        """``omega_{x,y}``; zero for non-neighbours, the self-loop weight for ``x == y``."""
        x = tuple(int(c) for c in x)
        y = tuple(int(c) for c in y)
        self._check_site(x, self.M + 1)
        self._check_site(y, self.M + 1)
        diff = [b - a for a, b in zip(x, y)]
        if all(v == 0 for v in diff):
            return self.self_loop(x)
        nz = [i for i, v in enumerate(diff) if v != 0]
        if len(nz) != 1 or abs(diff[nz[0]]) != 1:
            return 0.0
        i = nz[0]
        lower = x if diff[i] == 1 else y
        return float(self.edges[i][self.grid_index(lower)])

    def self_loop(self, x: Sequence[int]) -> float:
        if self.rho is None:
            return 0.0
        r = float(self.rho[self.grid_index(x)])
        return r / (1.0 - r)

    def pi_at(self, x: Sequence[int]) -> float:
        x = tuple(int(c) for c in x)
        self._check_site(x)
        if self.kind == "traps":
            return 1.0 / (1.0 - float(self.rho[self.grid_index(x)]))
        total = self.self_loop(x)
        g = self.grid_index(x)
        for i in range(self.d):
            total += float(self.edges[i][g])
            back = list(g)
            back[i] -= 1
            total += float(self.edges[i][tuple(back)])
        return total

    def pi_array(self, m: int | None = None) -> np.ndarray:
        """``pi_omega`` on ``Lambda_m`` as a ``(2m+1,)*d`` array."""
        m = self.M if m is None else m
        if m > self.M:
            raise InvalidEnvironment(f"m={m} exceeds stored radius {self.M}")
        key = ("pi", m)
        if key not in self._cache:
            self._cache[key] = self._pi_on(m)
        return self._cache[key]

    def _pi_on(self, m: int) -> np.ndarray:
        lo, hi = self.M + 1 - m, self.M + 2 + m
        inner = (slice(lo, hi),) * self.d
        if self.kind == "traps":
            return 1.0 / (1.0 - np.asarray(self.rho[inner], dtype=np.float64))
        total = np.zeros((2 * m + 1,) * self.d)
        for i in range(self.d):
            fwd = list(inner)
            bwd = list(inner)
            bwd[i] = slice(lo - 1, hi - 1)
            total = total + self.edges[i][tuple(fwd)] + self.edges[i][tuple(bwd)]
        if self.rho is not None:
            r = np.asarray(self.rho[inner], dtype=np.float64)
            total = total + r / (1.0 - r)
        return total

    def transition_distribution(self, x: Sequence[int]) -> list[tuple[tuple[int, ...], float]]:
        """Quenched one-step law from ``x``: ``omega_{x,y} / pi_omega(x)``."""
        x = tuple(int(c) for c in x)
        if len(x) == self.d and any(abs(c) == self.M + 1 for c in x) and all(abs(c) <= self.M + 1 for c in x):
            raise InvalidEnvironment(f"site {x} lies on the outermost shell; its weights are not stored")
        self._check_site(x)
        p = self.pi_at(x)
        out = []
        loop = self.self_loop(x)
        if loop > 0:
            out.append((x, loop / p))
        for i in range(self.d):
            for s in (1, -1):
                y = list(x)
                y[i] += s
                y = tuple(y)
                out.append((y, self.weight(x, y) / p))
        return out

    def move_table(self, m: int) -> np.ndarray:
        """Cumulative move probabilities over the ``Lambda_{m+1}`` grid.

        Column order is ``[stay, +e1, -e1, ..., +ed, -ed]``.  Homogeneous
        environments return a single row shared by every site.  Rows on the
        outer shell are never read.
        """
        if m > self.M:
            raise InvalidEnvironment(f"m={m} exceeds stored radius {self.M}")
        key = ("move", m)
        if key in self._cache:
            return self._cache[key]
        d = self.d
        if self.is_homogeneous:
            probs = np.array([[p for _, p in self._homogeneous_row()]])
        else:
            side = 2 * m + 3
            probs = np.zeros((side,) * d + (2 * d + 1,))
            inner = (slice(1, side - 1),) * d
            pi = self.pi_array(m)
            lo, hi = self.M + 1 - m, self.M + 2 + m
            src = (slice(lo, hi),) * d
            if self.rho is not None:
                r = np.asarray(self.rho[src], dtype=np.float64)
                probs[inner + (0,)] = (r / (1.0 - r)) / pi
            for i in range(d):
                bwd = list(src)
                bwd[i] = slice(lo - 1, hi - 1)
                probs[inner + (1 + 2 * i,)] = self.edges[i][src] / pi
                probs[inner + (2 + 2 * i,)] = self.edges[i][tuple(bwd)] / pi
            probs = probs.reshape(-1, 2 * d + 1)
        cum = np.cumsum(probs, axis=1)
        cum[:, -1] = 1.0
        cum = np.ascontiguousarray(cum)
        self._cache[key] = cum
        return cum

    def _homogeneous_row(self):
        zero = (0,) * self.d
        dist = dict(self.transition_distribution(zero))
        row = [(zero, dist.get(zero, 0.0))]
        for i in range(self.d):
            for s in (1, -1):
                y = [0] * self.d
                y[i] = s
                row.append((tuple(y), dist[tuple(y)]))
        return row

    def shift(self, x: Sequence[int]) -> "Environment":
        """The shifted environment ``(tau_x omega)_{y,z} = omega_{y+x, z+x}``."""
        x = tuple(int(c) for c in x)
        if len(x) != self.d:
            raise InvalidEnvironment("shift vector has wrong dimension")
        r = max((abs(c) for c in x), default=0)
        if r > self.M:
            raise InvalidEnvironment(f"shift {x} larger than stored radius {self.M}")
        if r == 0:
            return self
        new_M = self.M - r
        side = 2 * new_M + 3
        edges = []
        for i in range(self.d):
            sl = []
            for j in range(self.d):
                start = x[j] + r
                length = side - 1 if j == i else side
                sl.append(slice(start, start + length))
            edges.append(self.edges[i][tuple(sl)])
        rho = None
        if self.rho is not None:
            rho = self.rho[tuple(slice(x[j] + r, x[j] + r + side) for j in range(self.d))]
        prev = self.shift_vector or (0,) * self.d
        return Environment(
            LatticeBox(self.d, new_M),
            self.kind,
            tuple(edges),
            rho,
            self.edge_spec,
            self.trap_spec,
            self.seed,
            tuple(a + b for a, b in zip(prev, x)),
        )

    def restrict(self, M: int) -> "Environment":
        """The same environment on a smaller box ``Lambda_M``."""
        if M > self.M:
            raise InvalidEnvironment(f"cannot restrict radius {self.M} to larger {M}")
        off = self.M - M
        side = 2 * M + 3
        edges = []
        for i in range(self.d):
            edges.append(
                self.edges[i][tuple(slice(off, off + (side - 1 if j == i else side)) for j in range(self.d))]
            )
        rho = None if self.rho is None else self.rho[(slice(off, off + side),) * self.d]
        return Environment(
            LatticeBox(self.d, M), self.kind, tuple(edges), rho, self.edge_spec, self.trap_spec, self.seed,
            self.shift_vector,
        )

    def scaled(self, factor: float) -> "Environment":
        """Multiply every conductance (and self-loop weight) by ``factor``."""
        if self.kind != "conductances":
            raise InvalidEnvironment("global scaling is defined for conductance environments")
        edges = tuple(np.asarray(e) * factor for e in self.edges)
        spec = None
        if self.edge_spec is not None and self.edge_spec.family == "constant":
            spec = DistributionSpec("constant", (self.edge_spec.params[0] * factor,))
        return Environment(self.box, self.kind, edges, None, spec, None, None, self.shift_vector)

    def mean_pi(self) -> float:
        """Analytic ``E[pi_omega(0)]`` under the sampling law."""
        d = self.d
        if self.kind == "traps":
            return self.trap_spec.mean_holding()
        total = 2 * d * self.edge_spec.mean()
        if self.kind == "mixed":
            total += self.trap_spec.mean_holding() - 1.0
        return total

    def povp_weight(self, mean_pi: float) -> float:
        """Density ``pi_omega(0) / E[pi_omega(0)]`` of the point-of-view measure."""
        if not mean_pi > 0:
            raise InvalidEnvironment("meanPi must be positive")
        return self.pi_at((0,) * self.d) / mean_pi

    def max_edge_weight(self, m: int | None = None) -> float:
        m = self.M if m is None else m
        off = self.M - m
        side = 2 * m + 3
        best = 0.0
        for i in range(self.d):
            sl = tuple(slice(off, off + (side - 1 if j == i else side)) for j in range(self.d))
            best = max(best, float(np.max(self.edges[i][sl])))
        return best

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"edges_{i}", np.asarray(e, dtype=np.float64)) for i, e in enumerate(self.edges)]
        if self.rho is not None:
            out.append(("rho", np.asarray(self.rho, dtype=np.float64)))
        return out

    def same_as(self, other: "Environment") -> bool:
        """Bit-exact equality of kind, box and stored arrays."""
        if self.kind != other.kind or self.box != other.box:
            return False
        a, b = self.arrays(), other.arrays()
        if [n for n, _ in a] != [n for n, _ in b]:
            return False
        return all(x.shape == y.shape and x.tobytes() == y.tobytes() for (_, x), (_, y) in zip(a, b))


def _edge_shapes(d: int, M: int) -> list[tuple[int, ...]]:
    side = 2 * M + 3
    return [tuple(side - 1 if j == i else side for j in range(d)) for i in range(d)]


def _check_size(d: int, M: int):
    if d * (2 * M + 3) ** d > MAX_STORED_ENTRIES:
        raise InvalidEnvironment(f"box d={d}, M={M} too large for addressable memory")


def sample_environment(
    box: LatticeBox,
    kind: str,
    seed: int,
    edge_spec: DistributionSpec | str | None = None,
    trap_spec: DistributionSpec | str | None = None,
) -> Environment:
    """Sample an i.i.d. environment on ``Lambda_{M+1}``.

    Draw order is fixed (edges direction by direction in lexicographic order,
    then trap parameters), so the result is bit-reproducible from
    ``(box, kind, specs, seed)``.
    """
    kind = kind.lower()
    if kind not in KINDS:
        raise InvalidEnvironment(f"unknown environment kind {kind!r}")
    if isinstance(edge_spec, str):
        edge_spec = DistributionSpec.parse(edge_spec, "edge")
    if isinstance(trap_spec, str):
        trap_spec = DistributionSpec.parse(trap_spec, "trap")
    if kind in ("conductances", "mixed") and edge_spec is None:
        raise InvalidEnvironment(f"{kind} environment needs an edge distribution")
    if kind in ("traps", "mixed") and trap_spec is None:
        raise InvalidEnvironment(f"{kind} environment needs a trap distribution")
    if kind == "conductances" and trap_spec is not None:
        raise InvalidEnvironment("conductance environments carry no trap parameters")
    if edge_spec is not None and edge_spec.target != "edge":
        raise InvalidEnvironment("edge distribution given a trap spec")
    if trap_spec is not None and trap_spec.target != "trap":
        raise InvalidEnvironment("trap distribution given an edge spec")
    d, M = box.d, box.M
    _check_size(d, M)
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    if kind == "traps":
        c = DistributionSpec("constant", (1.0 / (2 * d),))
        edges = tuple(c.sample(rng, s) for s in _edge_shapes(d, M))
        edge_spec = None
    else:
        edges = tuple(edge_spec.sample(rng, s) for s in _edge_shapes(d, M))
    rho = None
    if trap_spec is not None:
        rho = trap_spec.sample(rng, (2 * M + 3,) * d)
    return Environment(box, kind, edges, rho, edge_spec, trap_spec, int(seed))


def homogeneous_environment(d: int, M: int) -> Environment:
    """Simple random walk: unit total weight per site (``pi == 1``), no holding."""
    return sample_environment(LatticeBox(d, M), "traps", 0, trap_spec=DistributionSpec("constant", (0.0,), "trap"))


def constant_conductances(d: int, M: int, c: float = 1.0) -> Environment:
    return sample_environment(LatticeBox(d, M), "conductances", 0, edge_spec=DistributionSpec("constant", (c,)))


def from_arrays(edges: Sequence[np.ndarray], rho: np.ndarray | None = None, kind: str | None = None) -> Environment:
    """Wrap explicit arrays (no sampling provenance)."""
    edges = tuple(np.asarray(e, dtype=np.float64) for e in edges)
    d = len(edges)
    side = edges[0].shape[1] if d > 1 else edges[0].shape[0] + 1
    M = (side - 3) // 2
    for e, shape in zip(edges, _edge_shapes(d, M)):
        if e.shape != shape:
            raise InvalidEnvironment(f"edge array shape {e.shape} != {shape}")
        if not np.all(e > 0):
            raise InvalidEnvironment("edge weights must be strictly positive")
    if rho is not None:
        rho = np.asarray(rho, dtype=np.float64)
        if rho.shape != (2 * M + 3,) * d:
            raise InvalidEnvironment("trap array has wrong shape")
        if np.any(rho < 0) or np.any(rho > RHO_MAX):
            raise InvalidEnvironment("trap parameters must lie in [0, 1-1e-9]")
    kind = kind or ("conductances" if rho is None else "mixed")
    return Environment(LatticeBox(d, M), kind, edges, rho)


def save_environment(env: Environment, path, explicit_arrays: bool = True) -> None:
    """Write the self-describing environment container (see docs/formats.md)."""
    arrays = env.arrays() if explicit_arrays or env.seed is None else []
    header = {
        "format_version": FORMAT_VERSION,
        "d": env.d,
        "M": env.M,
        "kind": env.kind,
        "spec": {
            "edges": None if env.edge_spec is None else str(env.edge_spec),
            "traps": None if env.trap_spec is None else str(env.trap_spec),
        },
        "seed": env.seed,
        "shift": list(env.shift_vector) or None,
        "has_explicit_arrays": bool(arrays),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise InvalidEnvironment(f"{path}: not an environment file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise InvalidEnvironment(f"unsupported format_version {header.get('format_version')}")
    offset = 12 + n
    arrays = {}
    for item in header["arrays"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape))
        arrays[item["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(data):
        raise InvalidEnvironment(f"{path}: trailing bytes after arrays")
    return header, arrays


def _rederive(header) -> Environment:
    spec = header["spec"]
    edge = None if spec["edges"] is None else DistributionSpec.parse(spec["edges"], "edge")
    trap = None if spec["traps"] is None else DistributionSpec.parse(spec["traps"], "trap")
    shift = header.get("shift")
    r = max((abs(c) for c in shift), default=0) if shift else 0
    env = sample_environment(LatticeBox(header["d"], header["M"] + r), header["kind"], header["seed"], edge, trap)
    return env.shift(shift) if shift else env


def load_environment(path) -> Environment:
    header, arrays = _read(path)
    if not header["has_explicit_arrays"]:
        if header["seed"] is None:
            raise InvalidEnvironment("file has neither arrays nor a seed")
        return _rederive(header)
    d = header["d"]
    edges = tuple(arrays[f"edges_{i}"] for i in range(d))
    spec = header["spec"]
    return Environment(
        LatticeBox(d, header["M"]),
        header["kind"],
        edges,
        arrays.get("rho"),
        None if spec["edges"] is None else DistributionSpec.parse(spec["edges"], "edge"),
        None if spec["traps"] is None else DistributionSpec.parse(spec["traps"], "trap"),
        header["seed"],
        tuple(header.get("shift") or ()),
    )


def verify_environment(path) -> tuple[bool, str]:
    """Re-derive from (spec, seed) and compare bit-exactly with stored arrays."""
    header, arrays = _read(path)
    if header["seed"] is None:
        return False, "no seed stored; nothing to re-derive"
    if not header["has_explicit_arrays"]:
        return True, "no explicit arrays; environment is defined by its seed"
    stored = load_environment(path)
    fresh = _rederive(header)
    if stored.same_as(fresh):
        return True, "re-derivation matches stored arrays bit-exactly"
    return False, "stored arrays differ from re-derivation"


def sites_of(d: int, m: int) -> Iterable[tuple[int, ...]]:
    for row in box_sites(d, m):
        yield tuple(int(v) for v in row)


@dataclass(frozen=True)
class EnvSpec:
    """Environment law: a kind plus its edge and/or trap marginals.

    ``kind="constant"`` is the simple random walk (``pi == 1``).
    """

    kind: str
    edge_spec: DistributionSpec | None = None
    trap_spec: DistributionSpec | None = None

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if isinstance(self.edge_spec, str):
            object.__setattr__(self, "edge_spec", DistributionSpec.parse(self.edge_spec, "edge"))
        if isinstance(self.trap_spec, str):
            object.__setattr__(self, "trap_spec", DistributionSpec.parse(self.trap_spec, "trap"))
        if kind == "constant":
            if self.edge_spec is not None or self.trap_spec is not None:
                raise InvalidEnvironment("the constant environment takes no distributions")
            return
        if kind not in KINDS:
            raise InvalidEnvironment(f"unknown environment kind {kind!r}")
        # validate the combination once, on a one-site box
        sample_environment(LatticeBox(1, 0), kind, 0, self.edge_spec, self.trap_spec)

    @property
    def is_deterministic(self) -> bool:
        if self.kind == "constant":
            return True
        specs = [s for s in (self.edge_spec, self.trap_spec) if s is not None]
        return all(s.is_constant for s in specs)

    def sample(self, d: int, M: int, seed: int) -> Environment:
        if self.kind == "constant":
            return homogeneous_environment(d, M)
        return sample_environment(LatticeBox(d, M), self.kind, seed, self.edge_spec, self.trap_spec)

    def mean_pi(self, d: int) -> float:
        """Analytic ``E[pi(0)]``."""
        if self.kind == "constant":
            return 1.0
        if self.kind == "traps":
            return self.trap_spec.mean_holding()
        base = 2 * d * self.edge_spec.mean()
        if self.kind == "mixed":
            base += self.trap_spec.mean_holding() - 1.0
        return base

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "edges": None if self.edge_spec is None else str(self.edge_spec),
            "traps": None if self.trap_spec is None else str(self.trap_spec),
        }
