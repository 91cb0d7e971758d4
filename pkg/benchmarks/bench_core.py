"""Compare the compiled snake kernel with the pure-Python fallback.

    python3 benchmarks/bench_core.py --d 3 --m 6 --replicates 2000

Both backends run the same replicates from the same seed. The script checks
that their outputs agree exactly and reports particles per second for each.
"""

import argparse
import time

import numpy as np

from brwre import core
from brwre.environment import EnvSpec
from brwre.genealogy import make_law
from brwre.snake import SnakeSampler


def run(backend, env, law, m, seed, n):
    sampler = SnakeSampler(env, law, m, backend=backend)
    t0 = time.perf_counter()
    batch = sampler.run(seed, 0, n)
    return batch, time.perf_counter() - t0


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--m", type=int, default=6)
    p.add_argument("--replicates", type=int, default=2000)
    p.add_argument("--python-replicates", type=int, default=None,
                   help="replicates for the slow backend (default: replicates / 10)")
    p.add_argument("--edges", default="uniform(0.5,2)")
    p.add_argument("--law", default="binary")
    p.add_argument("--seed", type=int, default=1)
    a = p.parse_args(argv)

    env = EnvSpec("conductances", a.edges).sample(a.d, a.m, a.seed)
    law = make_law(a.law)
    n_py = a.python_replicates or max(1, a.replicates // 10)

    rows = []
    if core.HAVE_COMPILED:
        full, t = run("compiled", env, law, a.m, a.seed, a.replicates)
        parts = float(np.sum(full[1]))
        rows.append(("compiled", a.replicates, t, parts / t))
    else:
        print("compiled core not built; timing the Python backend only")
        full = None
    small, t = run("python", env, law, a.m, a.seed, n_py)
    parts = float(np.sum(small[1]))
    rows.append(("python", n_py, t, parts / t))

    print(f"d={a.d} m={a.m} law={a.law} edges={a.edges}")
    print(f"{'backend':<10}{'replicates':>12}{'seconds':>12}{'particles/s':>16}")
    for name, n, t, rate in rows:
        print(f"{name:<10}{n:>12}{t:>12.3f}{rate:>16.3e}")
    if full is not None:
        same = all(np.array_equal(x[:n_py], y) for x, y in zip(full, small))
        print(f"speed-up: {rows[0][3] / rows[1][3]:.1f}x   identical outputs on shared replicates: {same}")
        if not same:
            raise SystemExit(1)


if __name__ == "__main__":
    main()
