"""Critical offspring laws and Galton-Watson tree samplers.

Three reproduction laws derive from a critical law ``q``:

* ``q`` itself, used by every ordinary individual;
* the size-biased law ``(k q_k)``, used by spine individuals of Kesten's tree;
* the shifted law ``((k+1) q_{k+1})``, the root law of a finite tree hanging
  off the spine (equivalently the number of non-spine children of a spine
  individual).

All laws are sampled by inverting a cumulative table with one uniform.  The
table for Geometric(1/2) is built from closed-form CDFs and truncated where
the remaining mass is below double resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng as _rng

ROOT_LAWS = ("q", "shifted", "sizebiased")
GEOMETRIC_TERMS = 64


class InvalidLaw(ValueError):
    pass


class NodeCapExceeded(RuntimeError):
    """A sampled tree outgrew ``node_cap``; the replicate must count as censored."""

    def __init__(self, node_cap: int):
        super().__init__(f"tree exceeded node cap {node_cap}")
        self.node_cap = node_cap


def _cum(probs: np.ndarray) -> np.ndarray:
    c = np.cumsum(probs)
    c[-1] = 1.0
    return np.ascontiguousarray(c)


def draw(cum: np.ndarray, u: float) -> int:
    """Smallest ``k`` with ``u < cum[k]``."""
    k = 0
    while u >= cum[k]:
        k += 1
    return k


@dataclass(frozen=True, eq=False)
class OffspringLaw:
    """A critical reproduction law with its derived laws and moments."""

    name: str
    probs: np.ndarray
    cum_q: np.ndarray
    cum_sizebiased: np.ndarray
    cum_shifted: np.ndarray
    mean: float
    sigma2: float
    third_moment: float

    @property
    def shifted_probs(self) -> np.ndarray:
        return np.diff(self.cum_shifted, prepend=0.0)

    @property
    def sizebiased_probs(self) -> np.ndarray:
        return np.diff(self.cum_sizebiased, prepend=0.0)

    def cum(self, which: str) -> np.ndarray:
        if which == "q":
            return self.cum_q
        if which == "shifted":
            return self.cum_shifted
        if which == "sizebiased":
            return self.cum_sizebiased
        raise InvalidLaw(f"unknown root law {which!r}; expected one of {ROOT_LAWS}")

    @property
    def shifted_factorial2(self) -> float:
        """``E[c(c-1)]`` for the shifted law: ``sum k(k-1)(k-2) q_k``."""
        k = np.arange(len(self.probs), dtype=float)
        return float(np.sum(k * (k - 1) * (k - 2) * self.probs))

    @property
    def many_to_two_constant(self) -> float:
        """``3 * max(sigma^2 + 1, sum k^3 q_k)``."""
        return 3.0 * max(self.sigma2 + 1.0, self.third_moment)

    def describe(self) -> dict:
        return {"name": self.name, "sigma2": self.sigma2, "third_moment": self.third_moment}


def make_law(representation: str | Sequence[float]) -> OffspringLaw:
    """Build a critical law from probabilities ``(q_0, ..., q_K)``, ``"binary"``,
    or ``"geometric"`` (``q_k = 2^-(k+1)``)."""
    if isinstance(representation, str):
        key = representation.strip().lower()
        if key in ("geometric", "geometric(1/2)", "geom"):
            return _geometric()
        if key == "binary":
            return make_law([0.5, 0.0, 0.5])
        try:
            representation = [float(v) for v in key.strip("[]()").split(",")]
        except ValueError as exc:
            raise InvalidLaw(f"cannot parse offspring law {representation!r}") from exc
    q = np.asarray(representation, dtype=float)
    if q.ndim != 1 or len(q) == 0:
        raise InvalidLaw("offspring probabilities must be a non-empty vector")
    if np.any(q < 0) or not np.all(np.isfinite(q)):
        raise InvalidLaw("offspring probabilities must be nonnegative")
    if abs(q.sum() - 1.0) > 1e-12:
        raise InvalidLaw(f"offspring probabilities sum to {q.sum()!r}, not 1")
    k = np.arange(len(q), dtype=float)
    mean = float(np.sum(k * q))
    if abs(mean - 1.0) > 1e-9:
        raise InvalidLaw(f"law is not critical: mean {mean!r}")
    sigma2 = float(np.sum(k * (k - 1) * q))
    if sigma2 <= 0:
        raise InvalidLaw("degenerate law: sigma^2 = 0")
    sb = k * q
    shifted = k[1:] * q[1:]
    name = "binary" if len(q) == 3 and q[0] == 0.5 and q[2] == 0.5 else "explicit"
    return OffspringLaw(
        name=name,
        probs=q,
        cum_q=_cum(q),
        cum_sizebiased=_cum(sb),
        cum_shifted=_cum(shifted if len(shifted) else np.array([1.0])),
        mean=mean,
        sigma2=sigma2,
        third_moment=float(np.sum(k**3 * q)),
    )


def _geometric() -> OffspringLaw:
    n = GEOMETRIC_TERMS
    k = np.arange(n, dtype=float)
    probs = 0.5 ** (k + 1)
    cum_q = 1.0 - 0.5 ** (k + 1)
    cum_sb = 1.0 - (k + 2) * 0.5 ** (k + 1)
    cum_sh = 1.0 - (k + 3) * 0.5 ** (k + 2)
    for c in (cum_q, cum_sb, cum_sh):
        c[-1] = 1.0
    return OffspringLaw(
        name="geometric",
        probs=probs,
        cum_q=np.ascontiguousarray(cum_q),
        cum_sizebiased=np.ascontiguousarray(cum_sb),
        cum_shifted=np.ascontiguousarray(cum_sh),
        mean=1.0,
        sigma2=2.0,
        third_moment=13.0,
    )


@dataclass(frozen=True)
class FiniteTree:
    """Ordered rooted tree stored flat in breadth-first order; node 0 is the root."""

    parent: np.ndarray
    child_count: np.ndarray
    keys: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.parent)

    def children(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.parent == i)

    def validate(self) -> None:
        n = self.node_count
        if n == 0 or self.parent[0] != -1 or np.any(self.parent[1:] < 0):
            raise AssertionError("tree must have exactly one root at index 0")
        if np.any(self.parent[1:] >= np.arange(1, n)):
            raise AssertionError("parents must precede children")
        counts = np.bincount(self.parent[1:], minlength=n) if n > 1 else np.zeros(1, dtype=int)
        if not np.array_equal(counts, self.child_count):
            raise AssertionError("child counts inconsistent with parent links")


def sample_bgw(law: OffspringLaw, root_law: str = "q", seed: int = 0, node_cap: int = 10**7) -> FiniteTree:
    """Galton-Watson tree: the root reproduces by ``root_law``, everyone else by ``q``.

    Randomness is keyed by node, so the tree coincides with the genealogy the
    snake simulators draw from the same seed.
    """
    if node_cap < 1:
        raise ValueError("node_cap must be >= 1")
    root_cum = law.cum(root_law)
    parent = [-1]
    counts = []
    keys = [_rng.tree_root_key(seed)]
    head = 0
    while head < len(keys):
        key = keys[head]
        k = draw(root_cum if head == 0 else law.cum_q, _rng.u_offspring(key))
        counts.append(k)
        if len(keys) + k > node_cap:
            raise NodeCapExceeded(node_cap)
        for c in range(k):
            parent.append(head)
            keys.append(_rng.child_key(key, c))
        head += 1
    return FiniteTree(
        np.asarray(parent, dtype=np.int64),
        np.asarray(counts, dtype=np.int64),
        np.asarray(keys, dtype=np.uint64),
    )


def spine_step(law: OffspringLaw, key: int) -> tuple[int, int]:
    """One spine individual: returns ``(spine child index, number of non-spine children)``.

    ``K`` is size-biased and the continuing child is uniform among the ``K``
    children; ``K - 1`` then follows the shifted law.
    """
    k = draw(law.cum_sizebiased, _rng.u_offspring(key))
    j = min(int(_rng.u_spine(key) * k), k - 1)
    return j, k - 1
