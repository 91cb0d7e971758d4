"""Command-line entry point: ``brwre <command> [options]``.

Exit status: 0 when every enabled check passes, 1 when a check fails (the
failing verdicts are listed on stderr), 2 for configuration errors (a JSON
diagnostic object on stderr).
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys

import numpy as np
import scipy

from . import __version__, core
from .config import ConfigError, RunConfig, build_config, read_config_file
from .environment import InvalidEnvironment, load_environment, save_environment, verify_environment

CSV_SCHEMA = 1

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def versions() -> dict:
    return {
        "brwre": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "backend": core.backend_name(),
    }


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser):
    g = p.add_argument_group("environment")
    g.add_argument("--config", help="flat key = value config file (command line wins)")
    g.add_argument("--d", type=int)
    g.add_argument("--M", type=int, help="box radius of the stored environment")
    g.add_argument("--kind", choices=("constant", "conductances", "traps", "mixed"))
    g.add_argument("--edges", help="edge law, e.g. 'uniform(0.5,2)'")
    g.add_argument("--traps", help="trap law, e.g. 'uniform(0,0.9)'")
    g.add_argument("--env-file", help="load the environment from this file instead of sampling")
    g.add_argument("--env-seed", type=int, help="environment seed (defaults to --seed)")
    g.add_argument("--seed", type=int)
    o = p.add_argument_group("output")
    o.add_argument("--out", help="main output path (JSON or CSV by command); stdout if omitted")
    o.add_argument("--csv", help="long-format CSV companion")
    o.add_argument("--z-tol", type=float, help="z-score tolerance for Monte Carlo checks (default 3)")
    o.add_argument("--duality-tol", type=float, help="tolerance for exact identities (default 1e-9)")


def _sim(p: argparse.ArgumentParser):
    g = p.add_argument_group("simulation")
    g.add_argument("--law", help="binary, geometric, or probabilities q0,q1,...")
    g.add_argument("--m", type=int)
    g.add_argument("--m-grid", help="comma-separated box radii")
    g.add_argument("--replicates", help="replicate count, or one count per grid point")
    g.add_argument("--node-cap", type=int)
    g.add_argument("--kill", choices=("box", "traps"))
    g.add_argument("--R", type=float, help="trap kill threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brwre", description="Critical branching random walks in random environments.")
    parser.add_argument("--version", action="version", version=f"brwre {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("env", help="sample, save, load or verify an environment file")
    p.add_argument("action", choices=("sample", "load", "verify"))
    p.add_argument("path", nargs="?", help="environment file (same as --env-file / --out)")
    p.add_argument("--no-arrays", dest="explicit_arrays", action="store_const", const=False,
                   help="store only the (spec, seed) provenance")
    _common(p)

    p = sub.add_parser("green", help="constrained Green's function table")
    _common(p)
    p.add_argument("--m", type=int)
    p.add_argument("--sources", choices=("origin", "all"))

    p = sub.add_parser("series", help="return probabilities and the transience series")
    _common(p)
    p.add_argument("--m", type=int)
    p.add_argument("--n-max", type=int)
    p.add_argument("--route", choices=("auto", "exact-homogeneous", "box"))

    p = sub.add_parser("snake", help="one CSV row per simulated snake")
    _common(p)
    _sim(p)

    p = sub.add_parser("experiment", help="Monte Carlo experiments with verdicts")
    p.add_argument("action", choices=("first-moment", "scaling", "second-moment", "many-to-two", "variance",
                                       "hitting", "marginals"))
    _common(p)
    _sim(p)
    p.add_argument("--x", help="start site for many-to-two, e.g. 2,0,0")
    p.add_argument("--sites", help="sites for marginals, e.g. '1,0,0; 0,2,1'")
    p.add_argument("--radii", help="hitting target radii")
    p.add_argument("--m-bounds", help="hitting box bounds")
    p.add_argument("--n-envs", type=int, help="environments per grid point (annealed runs)")
    p.add_argument("--quenched", action="store_const", const=True, help="fix one environment")
    p.add_argument("--scale-check", type=float, help="also run with conductances scaled by this factor")

    p = sub.add_parser("conductance", help="effective conductance and the recurrence diagnostic")
    _common(p)
    p.add_argument("--m", type=int)
    p.add_argument("--m-grid")
    p.add_argument("--replicates")
    p.add_argument("--recurrence", action="store_true", help="average over resampled environments")

    p = sub.add_parser("reroot-demo", help="build a spine decomposition and re-root it")
    _common(p)
    _sim(p)
    p.add_argument("--steps", type=int)
    return parser


def _cli_values(ns: argparse.Namespace) -> dict:
    vals = {k: v for k, v in vars(ns).items() if v is not None}
    if ns.command == "env" and ns.path:
        vals.setdefault("env_file" if ns.action != "sample" else "out", ns.path)
    return vals


# ---------------------------------------------------------------------------
# helpers


def _env(cfg: RunConfig, radius: int | None = None):
    if cfg.env_file:
        return load_environment(cfg.env_file)
    M = cfg.M
    if M is None:
        M = radius
    if M is None:
        raise ConfigError([{"field": "M", "message": "box radius required (give --M or --m)"}])
    if radius is not None and radius > M:
        raise ConfigError([{"field": "m", "message": f"m={radius} exceeds M={M}"}])
    seed = cfg.env_seed if cfg.env_seed is not None else cfg.seed
    return cfg.env_spec().sample(cfg.d, M, seed)


def _radius(cfg: RunConfig, env=None) -> int:
    if cfg.m is not None:
        return cfg.m
    if cfg.M is not None:
        return cfg.M
    if env is not None:
        return env.M
    raise ConfigError([{"field": "m", "message": "give --m or --M"}])


def _header(cfg: RunConfig) -> list:
    return [f"# brwre-csv schema={CSV_SCHEMA}",
            "# config=" + json.dumps(_jsonable(cfg.resolved()), sort_keys=True),
            "# versions=" + json.dumps(versions(), sort_keys=True)]


def write_csv(path, cfg: RunConfig, columns, rows) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        for line in _header(cfg):
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    finally:
        if path:
            fh.close()


def read_csv(path):
    """Rows of a brwre CSV as dicts, skipping the ``#`` header lines."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def emit_json(cfg: RunConfig, payload: dict, path=None) -> None:
    doc = {"config": cfg.resolved(), "seed": cfg.seed, "versions": versions()} | payload
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=False)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _fail(verdicts) -> int:
    for v in verdicts:
        print(f"FAILED: {v.name}: value={v.value!r} bound={v.bound!r} {v.detail}".rstrip(), file=sys.stderr)
    return EXIT_FAIL


# ---------------------------------------------------------------------------
# commands


def cmd_env(cfg: RunConfig) -> int:
    if cfg.action == "sample":
        if not cfg.out:
            raise ConfigError([{"field": "out", "message": "env sample needs an output path"}])
        env = _env(cfg)
        save_environment(env, cfg.out, cfg.explicit_arrays)
        print(json.dumps({"written": cfg.out, "d": env.d, "M": env.M, "kind": env.kind, "seed": env.seed,
                          "mean_pi_box": float(env.pi_array().mean())}))
        return EXIT_OK
    if not cfg.env_file:
        raise ConfigError([{"field": "env_file", "message": f"env {cfg.action} needs a file"}])
    if cfg.action == "load":
        env = load_environment(cfg.env_file)
        pi = env.pi_array()
        print(json.dumps({"d": env.d, "M": env.M, "kind": env.kind, "seed": env.seed,
                          "edges": None if env.edge_spec is None else str(env.edge_spec),
                          "traps": None if env.trap_spec is None else str(env.trap_spec),
                          "pi_min": float(pi.min()), "pi_max": float(pi.max()), "pi_mean": float(pi.mean())}))
        return EXIT_OK
    ok, msg = verify_environment(cfg.env_file)
    print(json.dumps({"file": cfg.env_file, "verified": ok, "message": msg}))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_green(cfg: RunConfig) -> int:
    from .kernel import green_table

    env = _env(cfg, cfg.m)
    m = _radius(cfg, env)
    if cfg.sources == "all":
        table = green_table(env, m)
    else:
        table = green_table(env, m, [(0,) * env.d])
    from .environment import box_sites

    sites = box_sites(env.d, m)
    d = env.d
    cols = [f"x{i + 1}" for i in range(d)] + [f"y{i + 1}" for i in range(d)] + ["g_value"]

    def rows():
        for j, s in enumerate(table.sources):
            x = sites[s]
            for k, y in enumerate(sites):
                yield [*x.tolist(), *y.tolist(), table.values[j, k]]

    write_csv(cfg.out, cfg, cols, rows())
    summary = {"m": m, "method": table.method, "residual": table.residual, "symmetry_defect": table.symmetry_defect()}
    print(json.dumps(summary), file=sys.stderr)
    return EXIT_OK


def cmd_series(cfg: RunConfig) -> int:
    from .kernel import transience_series

    env = _env(cfg, cfg.m)
    ts = transience_series(env, cfg.n_max, cfg.m, cfg.route)
    n = np.arange(cfg.n_max + 1)
    write_csv(cfg.out, cfg, ["n", "P_n", "S_n", "contamination"], zip(n, ts.P, ts.partial_sums, ts.contamination))
    lo, hi = max(1, cfg.n_max // 20), cfg.n_max // 2
    summary = {"route": ts.route, "box_radius": ts.box_radius}
    if hi > lo:
        summary["decay_fit"] = ts.decay_fit(lo, hi) | {"n_range": [lo, hi], "expected": -env.d / 2}
    print(json.dumps(summary), file=sys.stderr)
    return EXIT_OK


def _kill_rule(cfg: RunConfig, m: int):
    from .snake import KillRule

    return KillRule.box(m) if cfg.kill == "box" else KillRule.box_and_traps(m, cfg.R)


def cmd_snake(cfg: RunConfig) -> int:
    from .experiments import summarize
    from .snake import SnakeSampler, sample_snakes

    env = _env(cfg, cfg.m)
    m = _radius(cfg, env)
    law = cfg.offspring_law()
    sampler = SnakeSampler(env, law, _kill_rule(cfg, m), cfg.node_cap)
    n = cfg.replicates[0]
    b = sample_snakes(sampler, cfg.seed, n, workers=cfg.workers)
    write_csv(cfg.out, cfg, ["replicate", "value", "particle_count", "spine_exit_step", "censored"],
              zip(range(n), b.values, b.particles, b.spine_lengths, b.censored))
    print(json.dumps(summarize(b.values, b.censored) | {"m": m}), file=sys.stderr)
    return EXIT_OK


def cmd_experiment(cfg: RunConfig) -> int:
    from . import experiments as ex

    law = cfg.offspring_law()
    a = cfg.action
    kw = {"workers": cfg.workers, "node_cap": cfg.node_cap}
    if a in ("scaling", "second-moment", "hitting"):
        spec = cfg.env_spec()
        grid = cfg.m_grid
        if a == "hitting":
            radii = cfg.radii or [4, 8]
            bounds = cfg.m_bounds or [2 * max(radii), 3 * max(radii)]
            rep = ex.hitting_study(spec, cfg.d, law, radii, bounds, cfg.replicates[0], cfg.seed, **kw)
        else:
            if grid is None:
                grid = [4, 8, 16] if cfg.d >= 5 else [4, 8, 16, 32]
            if a == "scaling":
                rep = ex.scaling_study(spec, cfg.d, law, grid, cfg.reps, cfg.seed, cfg.n_envs, cfg.quenched,
                                       z_tol=cfg.z_tol, **kw)
            else:
                rep = ex.second_moment_ratio(spec, cfg.d, law, grid, cfg.reps, cfg.seed, cfg.n_envs,
                                             z_tol=cfg.z_tol, **kw)
    else:
        env = _env(cfg, cfg.m)
        m = _radius(cfg, env)
        n = cfg.replicates[0]
        if a == "first-moment":
            rep = ex.first_moment_check(env, m, law, n, cfg.seed, kill=_kill_rule(cfg, m), z_tol=cfg.z_tol, **kw)
        elif a == "many-to-two":
            x = cfg.x or [0] * env.d
            rep = ex.many_to_two_check(env, m, x, law, n, cfg.seed, scale_check=cfg.scale_check, z_tol=cfg.z_tol, **kw)
        elif a == "variance":
            rep = ex.variance_decomposition(env, m, law, n, cfg.seed, kill=_kill_rule(cfg, m), z_tol=cfg.z_tol, **kw)
        else:
            sites = cfg.sites or [[1] + [0] * (env.d - 1)]
            rep = ex.marginals_check(env, m, law, sites, n, cfg.seed, z_tol=cfg.z_tol, **kw)
    emit_json(cfg, {"report": rep.to_dict()}, cfg.out)
    if cfg.csv:
        write_csv(cfg.csv, cfg, ["experiment", "m", "statistic", "value"], rep.long_rows())
    if rep.experiment == "scaling" and "fit" in rep.oracles and rep.oracles["fit"].get("model") == "bounded":
        verdict = "bounded" if rep.passed else "not bounded"
        print(f"verdict: {verdict} (ratio {rep.oracles['fit']['ratio']:.4f})", file=sys.stderr)
    return EXIT_OK if rep.passed else _fail(rep.failures())


def cmd_conductance(cfg: RunConfig) -> int:
    from .dirichlet import harmonic_solution, recurrence_diagnostic
    from .kernel import green_origin

    grid = cfg.m_grid or ([cfg.m] if cfg.m is not None else None)
    if cfg.recurrence:
        if grid is None:
            grid = [4, 8, 16, 32]
        rep = recurrence_diagnostic(cfg.env_spec(), cfg.d, grid, cfg.replicates[0], cfg.seed)
        emit_json(cfg, {"report": rep.to_dict()}, cfg.out)
        if cfg.csv:
            write_csv(cfg.csv, cfg, ["m", "C_value", "residual"], [(s["m"], s["C_mean"], s["residual"]) for s in rep.stats])
        return EXIT_OK if rep.passed else _fail(rep.failures())
    env = _env(cfg, max(grid) if grid else None)
    grid = grid or [env.M]
    rows, bad = [], []
    for m in grid:
        sol = harmonic_solution(env, m)
        g = green_origin(env, m)
        defect = abs(sol.energy * g[(len(g) - 1) // 2] - 1.0)
        rows.append((m, sol.energy, sol.residual, defect))
        if defect > cfg.duality_tol:
            bad.append(m)
    write_csv(cfg.out, cfg, ["m", "C_value", "residual", "duality_defect"], rows)
    if bad:
        print(f"FAILED: duality C*g(0,0)=1 beyond {cfg.duality_tol} at m={bad}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_reroot(cfg: RunConfig) -> int:
    from .snake import build_decomposition, reroot

    env = _env(cfg, cfg.m)
    m = _radius(cfg, env)
    law = cfg.offspring_law()
    steps = cfg.steps
    kill = _kill_rule(cfg, m)
    dec = None
    for idx in range(10_000):
        dec = build_decomposition(env, law, kill, cfg.seed, idx)
        if len(dec.spine) > steps:
            break
    else:
        raise InvalidEnvironment("no replicate with a long enough spine")
    dec.validate()
    cur = dec
    problems = []
    for _ in range(steps):
        cur = reroot(cur)
    xn = dec.spine[steps]
    if not np.array_equal(cur.spine, dec.spine[steps:] - xn):
        problems.append("spine after re-rooting differs from the shifted tail")
    # transition weights at shifted labels agree with the originals
    for t_new, t_old in zip(cur.trees, dec.trees[steps:]):
        for y_new, y_old in zip(t_new.sites[:5], t_old.sites[:5]):
            for i in range(env.d):
                e = np.zeros(env.d, dtype=int)
                e[i] = 1
                try:
                    same = cur.env.weight(tuple(y_new), tuple(y_new + e)) == env.weight(tuple(y_old), tuple(y_old + e))
                except InvalidEnvironment:  # outside the shrunken box of the shifted environment
                    continue
                if not same:
                    problems.append(f"weight mismatch at {tuple(y_old)}")
    emit_json(cfg, {"replicate": idx, "steps": steps, "spine": dec.spine.tolist(), "rerooted_spine": cur.spine.tolist(),
                    "offset": list(cur.offset), "local_time_count": dec.local_time_count(),
                    "problems": problems}, cfg.out)
    for p in problems:
        print(f"FAILED: {p}", file=sys.stderr)
    return EXIT_OK if not problems else EXIT_FAIL


COMMANDS = {"env": cmd_env, "green": cmd_green, "series": cmd_series, "snake": cmd_snake,
            "experiment": cmd_experiment, "conductance": cmd_conductance, "reroot-demo": cmd_reroot}


def _config_error(diags) -> int:
    print(json.dumps({"error": "config", "diagnostics": diags}), file=sys.stderr)
    return EXIT_CONFIG


def main(argv=None) -> int:
    parser = build_parser()
    ns, extra = parser.parse_known_args(argv)
    # argparse binds an optional positional before later flags; accept a trailing env path
    if ns.command == "env" and ns.path is None and len(extra) == 1 and not extra[0].startswith("-"):
        ns.path, extra = extra[0], []
    if extra:
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    recurrence = getattr(ns, "recurrence", False)
    try:
        file_values = read_config_file(ns.config) if getattr(ns, "config", None) else {}
        cfg = build_config(_cli_values(ns), file_values)
        cfg.recurrence = recurrence
        return COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        return _config_error(exc.diagnostics)
    except (ValueError, OSError) as exc:  # includes InvalidEnvironment and InvalidLaw
        return _config_error([{"field": type(exc).__name__, "message": str(exc)}])


if __name__ == "__main__":
    sys.exit(main())
