"""Pure-Python snake kernels.

Reference implementation of the compiled core in ``_core.pyx``; both consume
the same node-keyed random words in the same way and return identical results.
Used automatically when the extension is not built, or with
``BRWRE_BACKEND=python``.
"""

from __future__ import annotations

import numpy as np

from .rng import (
    child_key,
    replicate_seed,
    spine_root_key,
    tree_root_key,
    u_move,
    u_offspring,
    u_spine,
)


def _draw(cum, u):
    k = 0
    while u >= cum[k]:
        k += 1
    return k


def run_snakes(master_seed, first, n, cum_move, offsets, killed, origin, cum_q, cum_sb, node_cap, spine_weights):
    """Simulate replicates ``first .. first+n-1`` of the spine-decomposed snake.

    Returns ``(counts, particles, spine_lengths, censored, spine_sums)``.
    """
    cum_move = [list(r) for r in np.asarray(cum_move)]
    uniform = len(cum_move) == 1
    offsets = [int(o) for o in offsets]
    killed = np.asarray(killed)
    cum_q = list(cum_q)
    cum_sb = list(cum_sb)
    weights = np.asarray(spine_weights, dtype=np.float64)
    n_w = weights.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    particles = np.zeros(n, dtype=np.int64)
    spine_len = np.zeros(n, dtype=np.int64)
    censored = np.zeros(n, dtype=np.uint8)
    sums = np.zeros((n, n_w))

    def step(site, key):
        row = cum_move[0] if uniform else cum_move[site]
        return site + offsets[_draw(row, u_move(key))]

    for r in range(n):
        seed = replicate_seed(master_seed, first + r)
        if killed[origin]:
            continue
        s = spine_root_key(seed)
        x = origin
        count = 0
        nodes = 0
        length = 0
        cens = False
        acc = [0.0] * n_w
        while True:
            length += 1
            for j in range(n_w):
                acc[j] += weights[j, x]
            nodes += 1
            if x == origin:
                count += 1
            k = _draw(cum_sb, u_offspring(s))
            spine_child = min(int(u_spine(s) * k), k - 1)
            stack = []
            for c in range(k):
                if c == spine_child:
                    continue
                ck = child_key(s, c)
                y = step(x, ck)
                if not killed[y]:
                    stack.append((y, ck))
            while stack:
                y, key = stack.pop()
                nodes += 1
                if nodes > node_cap:
                    cens = True
                    break
                if y == origin:
                    count += 1
                kk = _draw(cum_q, u_offspring(key))
                for c in range(kk):
                    ck = child_key(key, c)
                    z = step(y, ck)
                    if not killed[z]:
                        stack.append((z, ck))
            if cens:
                break
            s = child_key(s, spine_child)
            x = step(x, s)
            if killed[x]:
                break
        counts[r] = count
        particles[r] = nodes
        spine_len[r] = length
        censored[r] = cens
        sums[r] = acc
    return counts, particles, spine_len, censored, sums


def run_trees(master_seed, first, n, start, root_cum, cum_q, cum_move, offsets, killed, target, node_cap, stop_on_hit):
    """Finite tree-indexed walks from ``start``; counts visits to ``target``.

    Returns ``(counts, particles, censored)``.
    """
    cum_move = [list(r) for r in np.asarray(cum_move)]
    uniform = len(cum_move) == 1
    offsets = [int(o) for o in offsets]
    killed = np.asarray(killed)
    cum_q = list(cum_q)
    root_cum = list(root_cum)
    counts = np.zeros(n, dtype=np.int64)
    particles = np.zeros(n, dtype=np.int64)
    censored = np.zeros(n, dtype=np.uint8)
    for r in range(n):
        if killed[start]:
            continue
        seed = replicate_seed(master_seed, first + r)
        stack = [(start, tree_root_key(seed), True)]
        count = 0
        nodes = 0
        cens = False
        while stack:
            y, key, is_root = stack.pop()
            nodes += 1
            if nodes > node_cap:
                cens = True
                break
            if y == target:
                count += 1
                if stop_on_hit:
                    break
            kk = _draw(root_cum if is_root else cum_q, u_offspring(key))
            for c in range(kk):
                ck = child_key(key, c)
                row = cum_move[0] if uniform else cum_move[y]
                z = y + offsets[_draw(row, u_move(ck))]
                if not killed[z]:
                    stack.append((z, ck, False))
        counts[r] = count
        particles[r] = nodes
        censored[r] = cens
    return counts, particles, censored
