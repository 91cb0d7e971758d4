"""Counter-based random streams keyed by tree nodes.

Every node of a snake carries a 64-bit key; its offspring count, its
displacement from the parent and (on the spine) the choice of spine child are
pure functions of that key.  Two simulations of the same replicate therefore
agree on every particle they both keep alive, whatever the box or kill rule,
which is what makes coupled comparisons (``L_m <= L_m'``) exact.

The compiled core re-implements exactly the same arithmetic.
"""

from __future__ import annotations

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
CHILD_SALT = 0x632BE59BD9B4E019
SALT_ROOT = 0xD1B54A32D192ED03
SALT_TREE = 0x8CB92BA72F3D8DD7
SALT_OFF = 0xA0761D6478BD642F
SALT_MOVE = 0xE7037ED1A0B428DB
SALT_SPINE = 0x8EBC6AF09C88C6E3
INV_2_53 = 1.0 / 9007199254740992.0


def mix64(z: int) -> int:
    """SplitMix64 finalizer on an unsigned 64-bit integer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def to_uniform(z: int) -> float:
    """Map a 64-bit word to a double in [0, 1) using its top 53 bits."""
    return (z >> 11) * INV_2_53


def replicate_seed(master_seed: int, index: int) -> int:
    """Seed of replicate ``index``; independent of how replicates are scheduled."""
    return mix64((master_seed & MASK64) ^ mix64((index + 1) * GOLDEN))


def child_key(key: int, i: int) -> int:
    return mix64(((key ^ CHILD_SALT) + GOLDEN * (i + 1)) & MASK64)


def spine_root_key(seed: int) -> int:
    return mix64((seed & MASK64) ^ SALT_ROOT)


def tree_root_key(seed: int) -> int:
    return mix64((seed & MASK64) ^ SALT_TREE)


def u_offspring(key: int) -> float:
    return to_uniform(mix64(key ^ SALT_OFF))


def u_move(key: int) -> float:
    return to_uniform(mix64(key ^ SALT_MOVE))


def u_spine(key: int) -> float:
    return to_uniform(mix64(key ^ SALT_SPINE))
