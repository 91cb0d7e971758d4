"""Exact constrained heat kernels and Green's functions.

For a box ``Lambda_m`` the walk killed on exiting has the sub-stochastic
matrix ``Q = Pi^-1 W`` where ``W`` holds the weights between sites of the box
(self-loops on the diagonal).  The pi-weighted operator

    A = Pi (I - Q) = diag(pi) - W

is symmetric positive definite, and its inverse is exactly the constrained
Green's function: ``A^-1[x, y] = g^m(x, y)``.  All solves go through ``A``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import gammaln
from scipy.stats import binom

from .environment import Environment, InvalidEnvironment, box_sites

DENSE_LIMIT = 5000
CG_RTOL = 1e-12
CG_MAXITER = 100_000


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def _flat_index(d: int, m: int, x) -> int:
    side = 2 * m + 1
    idx = 0
    for c in x:
        c = int(c)
        if abs(c) > m:
            raise InvalidEnvironment(f"site {tuple(x)} outside Lambda_{m}")
        idx = idx * side + (c + m)
    return idx


def _check_m(env: Environment, m: int):
    if not 0 <= m <= env.M:
        raise InvalidEnvironment(f"constraint radius m={m} must lie in [0, {env.M}]")


def weight_matrix(env: Environment, m: int) -> sp.csr_matrix:
    """Symmetric sparse ``W`` on ``Lambda_m``: edge weights plus self-loops on the diagonal."""
    _check_m(env, m)
    d = env.d
    side = 2 * m + 1
    n = side**d
    ids = np.arange(n).reshape((side,) * d)
    off = env.M + 1 - m
    rows, cols, vals = [], [], []
    for i in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[i] = slice(0, side - 1)
        hi[i] = slice(1, side)
        a = ids[tuple(lo)].ravel()
        b = ids[tuple(hi)].ravel()
        w_sl = tuple(slice(off, off + side - 1) if j == i else slice(off, off + side) for j in range(d))
        w = np.asarray(env.edges[i][w_sl], dtype=float).ravel()
        rows += [a, b]
        cols += [b, a]
        vals += [w, w]
    if env.rho is not None:
        r = np.asarray(env.rho[(slice(off, off + side),) * d], dtype=float).ravel()
        rows.append(np.arange(n))
        cols.append(np.arange(n))
        vals.append(r / (1.0 - r))
    W = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return W.tocsr()


@dataclass
class ConstrainedOperator:
    """The walk in ``env`` killed on leaving ``Lambda_m``."""

    env: Environment
    m: int
    pi: np.ndarray = field(init=False)
    W: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        _check_m(self.env, self.m)
        self.pi = self.env.pi_array(self.m).ravel()
        self.W = weight_matrix(self.env, self.m)

    @property
    def d(self) -> int:
        return self.env.d

    @property
    def n(self) -> int:
        return len(self.pi)

    @property
    def Q(self) -> sp.csr_matrix:
        return sp.diags(1.0 / self.pi) @ self.W

    @property
    def A(self) -> sp.csr_matrix:
        return (sp.diags(self.pi) - self.W).tocsr()

    def index(self, x) -> int:
        return _flat_index(self.d, self.m, x)

    def sites(self) -> np.ndarray:
        return box_sites(self.d, self.m)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.Q.sum(axis=1)).ravel()

    def reversibility_defect(self) -> float:
        """``max |pi(x) Q[x,y] - pi(y) Q[y,x]|`` over stored pairs."""
        F = (sp.diags(self.pi) @ self.Q).tocsr()
        D = (F - F.T).tocoo()
        return float(np.max(np.abs(D.data))) if D.nnz else 0.0

    def visit_residual(self, x_index: int, g: np.ndarray) -> float:
        """``||(I - Q^T) v - e_x||_inf`` for expected visits ``v = pi * g``."""
        v = self.pi * g
        r = v - self.Q.T @ v
        r[x_index] -= 1.0
        return float(np.max(np.abs(r)))


@dataclass
class GreenTable:
    """Columns ``g^m(x, .)`` for a set of sources ``x``."""

    m: int
    d: int
    sources: np.ndarray  # flat indices into Lambda_m
    values: np.ndarray  # shape (len(sources), n_sites)
    method: str
    residual: float
    iterations: int = 0

    def at(self, x, y) -> float:
        xi = _flat_index(self.d, self.m, x)
        row = np.flatnonzero(self.sources == xi)
        if len(row) == 0:
            raise KeyError(f"source {tuple(x)} not solved")
        return float(self.values[row[0], _flat_index(self.d, self.m, y)])

    def column(self, x) -> np.ndarray:
        xi = _flat_index(self.d, self.m, x)
        row = np.flatnonzero(self.sources == xi)
        return self.values[row[0]]

    def as_box(self, x) -> np.ndarray:
        return self.column(x).reshape((2 * self.m + 1,) * self.d)

    def symmetry_defect(self) -> float:
        """``max |g(x,y) - g(y,x)|`` over pairs with both endpoints among the sources."""
        sub = self.values[:, self.sources]
        return float(np.max(np.abs(sub - sub.T)))


def _solve(op: ConstrainedOperator, B: np.ndarray, method: str):
    n = op.n
    if method == "auto":
        method = "lu" if B.shape[1] > 1 or n <= DENSE_LIMIT else "cg"
    if method == "dense":
        if n > DENSE_LIMIT:
            raise ValueError(f"dense solve limited to {DENSE_LIMIT} unknowns")
        X = scipy.linalg.solve(op.A.toarray(), B, assume_a="pos")
        return X, method, 0
    if method == "lu":
        lu = spla.splu(op.A.tocsc())
        return lu.solve(B), method, 0
    if method == "cg":
        A = op.A
        precond = sp.diags(1.0 / A.diagonal())
        X = np.empty_like(B)
        total = 0
        for j in range(B.shape[1]):
            count = [0]

            def cb(_xk, count=count):
                count[0] += 1

            x, info = spla.cg(A, B[:, j], rtol=CG_RTOL, atol=0.0, maxiter=CG_MAXITER, M=precond, callback=cb)
            if info != 0:
                res = float(np.linalg.norm(A @ x - B[:, j]) / np.linalg.norm(B[:, j]))
                raise SolverError("conjugate gradient did not converge", res)
            X[:, j] = x
            total += count[0]
        return X, method, total
    raise ValueError(f"unknown solver method {method!r}")


def green_table(env: Environment, m: int, sources=None, method: str = "auto") -> GreenTable:
    """Solve ``A g = e_x`` for each source (all of ``Lambda_m`` by default)."""
    op = ConstrainedOperator(env, m)
    if sources is None:
        src = np.arange(op.n)
    else:
        src = np.asarray([op.index(x) for x in sources], dtype=np.int64)
    B = np.zeros((op.n, len(src)))
    B[src, np.arange(len(src))] = 1.0
    X, used, iters = _solve(op, B, method)
    G = np.ascontiguousarray(X.T)
    residual = max(op.visit_residual(int(s), G[j]) for j, s in enumerate(src)) if len(src) <= 64 else _block_residual(op, src, G)
    if residual > 1e-10:
        raise SolverError("Green solve residual above 1e-10", residual)
    return GreenTable(m, env.d, src, G, used, residual, iters)


def _block_residual(op: ConstrainedOperator, src, G) -> float:
    V = G * op.pi[None, :]
    R = V - (op.Q.T @ V.T).T
    R[np.arange(len(src)), src] -= 1.0
    return float(np.max(np.abs(R)))


def green_constrained(env: Environment, m: int, x=None, method: str = "auto") -> GreenTable:
    """``g^m(x, .)`` on ``Lambda_m`` (default source: the origin)."""
    x = (0,) * env.d if x is None else tuple(x)
    return green_table(env, m, [x], method)


def green_origin(env: Environment, m: int, method: str = "auto") -> np.ndarray:
    """``g^m(0, .)`` as a flat vector over ``Lambda_m``."""
    return green_constrained(env, m, None, method).values[0]


def iter_heat_kernel(env: Environment, m: int, x, n_max: int):
    """Yield ``(n, P^m_n(x, .), mass)`` for ``n = 0..n_max``; ``mass`` is the surviving probability."""
    op = ConstrainedOperator(env, m)
    QT = op.Q.T.tocsr()
    mu = np.zeros(op.n)
    mu[op.index(x)] = 1.0
    for n in range(n_max + 1):
        yield n, mu / op.pi, float(mu.sum())
        if n < n_max:
            mu = QT @ mu


def heat_kernel_sequence(env: Environment, m: int, x, n_max: int) -> np.ndarray:
    """Rows ``P^m_n(x, .)`` for ``n = 0..n_max`` (shape ``(n_max+1, |Lambda_m|)``)."""
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    _check_m(env, m)
    if any(abs(int(c)) > m for c in x):
        raise InvalidEnvironment(f"source {tuple(x)} outside Lambda_{m}")
    return np.array([p for _, p, _ in iter_heat_kernel(env, m, x, n_max)])


def return_probabilities(env: Environment, m: int, n_max: int):
    """``P^m_n(0,0)`` and the killed mass ``1 - P(survive n steps)`` for ``n <= n_max``."""
    origin = _flat_index(env.d, m, (0,) * env.d)
    diag = np.empty(n_max + 1)
    killed = np.empty(n_max + 1)
    for n, p, mass in iter_heat_kernel(env, m, (0,) * env.d, n_max):
        diag[n] = p[origin]
        killed[n] = max(0.0, 1.0 - mass)
    return diag, killed


def srw_return_probabilities(d: int, n_max: int, laziness: float = 0.0) -> np.ndarray:
    """Exact ``P(X_n = 0)`` for the (lazy) simple random walk on ``Z^d``.

    A ``d``-dimensional step picks a coordinate uniformly, so conditioning on
    how many steps hit the first coordinate gives a binomial convolution of
    the one-dimensional returns with the ``(d-1)``-dimensional ones.
    """
    n = np.arange(n_max + 1)
    k = n.astype(float)
    even = (n % 2) == 0
    p1 = np.zeros(n_max + 1)
    p1[even] = np.exp(gammaln(k[even] + 1) - 2 * gammaln(k[even] / 2 + 1) - k[even] * math.log(2.0))
    p = p1
    for dim in range(2, d + 1):
        nxt = np.zeros(n_max + 1)
        for t in range(n_max + 1):
            j = np.arange(t + 1)
            nxt[t] = np.sum(binom.pmf(j, t, 1.0 / dim) * p1[j] * p[t - j])
        p = nxt
    if laziness > 0:
        lazy = np.zeros(n_max + 1)
        for t in range(n_max + 1):
            j = np.arange(t + 1)
            lazy[t] = np.sum(binom.pmf(j, t, 1.0 - laziness) * p[j])
        p = lazy
    return p


def _homogeneous_laziness(env: Environment) -> tuple[float, float] | None:
    """``(pi, holding probability)`` when ``env`` is a homogeneous nearest-neighbour walk."""
    if not env.is_homogeneous:
        return None
    zero = (0,) * env.d
    return env.pi_at(zero), env.self_loop(zero) / env.pi_at(zero)


@dataclass
class TransienceSeries:
    """Partial sums ``S_N = sum_{n<=N} (n+1) P_n(0,0)`` with diagnostics."""

    d: int
    P: np.ndarray  # P_n(0,0), n = 0..n_max
    partial_sums: np.ndarray
    contamination: np.ndarray  # upper bound on |S_N - S_N(unconstrained)|
    route: str  # "exact-homogeneous" or "box"
    box_radius: int | None = None

    def decay_fit(self, n_lo: int, n_hi: int) -> dict:
        """Least-squares slope of ``log P_{2n}(0,0)`` against ``log n`` for ``n_lo <= n <= n_hi``."""
        return decay_exponent(self.P, n_lo, n_hi)

    def growth_exponent(self, Ns) -> dict:
        Ns = np.asarray(Ns)
        return loglog_fit(Ns, self.partial_sums[Ns])


def loglog_fit(x, y) -> dict:
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss = np.sum((ly - ly.mean()) ** 2)
    return {"exponent": float(slope), "intercept": float(intercept), "r2": float(1 - np.sum(resid**2) / ss) if ss > 0 else 1.0}


def decay_exponent(P: np.ndarray, n_lo: int, n_hi: int) -> dict:
    n = np.arange(n_lo, n_hi + 1)
    vals = P[2 * n]
    if np.any(vals <= 0):
        raise ValueError("non-positive return probabilities in the fit window")
    return loglog_fit(n, vals)


def transience_series(env: Environment, n_max: int, m: int | None = None, route: str = "auto") -> TransienceSeries:
    """Partial sums of the snake's expected local time series at the origin.

    Homogeneous environments use exact lattice-path return probabilities (no
    boundary).  Otherwise the walk is run in ``Lambda_m`` (default ``m = M``)
    and the contamination bound ``sum (n+1) P(killed by n) / pi(0)`` is reported.
    """
    hom = _homogeneous_laziness(env)
    if route == "auto":
        route = "exact-homogeneous" if hom is not None else "box"
    if route == "exact-homogeneous":
        if hom is None:
            raise InvalidEnvironment("exact route requires a homogeneous environment")
        pi0, lazy = hom
        P = srw_return_probabilities(env.d, n_max, lazy) / pi0
        contamination = np.zeros(n_max + 1)
        box = None
    elif route == "box":
        box = env.M if m is None else m
        P, killed = return_probabilities(env, box, n_max)
        pi0 = env.pi_at((0,) * env.d)
        n = np.arange(n_max + 1)
        contamination = np.cumsum((n + 1) * killed) / pi0
    else:
        raise ValueError(f"unknown route {route!r}")
    n = np.arange(n_max + 1)
    S = np.cumsum((n + 1) * P)
    return TransienceSeries(env.d, P, S, contamination, route, box)


def first_moment_exact(env: Environment, m: int, sigma2: float, g0: np.ndarray | None = None) -> dict:
    """Exact quenched ``E[L_m]``.

    ``paper_form`` is ``sigma^2 sum_x pi(x) g^m(0,x)^2``.  ``exact`` adds the
    root correction ``(1 - sigma^2) g^m(0,0)``: the spine individual itself is
    counted once, not ``sigma^2`` times.  They agree when ``sigma^2 = 1``.
    """
    g = green_origin(env, m) if g0 is None else g0
    pi = env.pi_array(m).ravel()
    origin = _flat_index(env.d, m, (0,) * env.d)
    paper = float(sigma2 * np.sum(pi * g * g))
    return {"paper_form": paper, "exact": paper + (1.0 - sigma2) * float(g[origin])}


def homogeneous_green_oracle(d: int, x, y, tol: float = 1e-6, m_start: int = 4, m_max: int | None = None) -> dict:
    """Green's function ``g(x, y)`` of the simple random walk (``pi = 1``), ``d >= 3``.

    Constrained values ``g^m`` on a geometric sequence of boxes are
    extrapolated in ``1/m`` (four-point Richardson, eliminating the leading
    ``m^(2-d)`` term and the next two) until two successive extrapolations
    agree within ``tol``.
    """
    from .environment import homogeneous_environment

    if d <= 2:
        raise InvalidEnvironment("g = +infinity for d <= 2 (recurrent walk)")
    x, y = tuple(x), tuple(y)
    diff = tuple(b - a for a, b in zip(x, y))
    r = max(abs(c) for c in diff) if diff else 0
    if m_max is None:
        m_max = {3: 64, 4: 24}.get(d, 12)
    if m_start < 1:
        raise ValueError("m_start must be >= 1")
    ms, vals, extrap = [], [], []
    for m in _box_sequence(max(m_start, 2 * r), m_max):
        env = homogeneous_environment(d, m)
        g = green_constrained(env, m)  # translation invariance: g(x,y) = g(0, y-x)
        ms.append(m)
        vals.append(g.at((0,) * d, diff))
        est = _richardson(ms[-4:], vals[-4:], d)
        extrap.append(est)
        if len(ms) >= 4 and abs(extrap[-1] - extrap[-2]) < tol:
            return {"value": est, "converged": True, "m": ms, "raw": vals, "estimates": extrap}
    return {"value": extrap[-1], "converged": False, "m": ms, "raw": vals, "estimates": extrap}


def _box_sequence(m0: int, m_max: int):
    """``m0, 1.5 m0, 2 m0, 3 m0, 4 m0, ...`` (rounded), capped at ``m_max``."""
    k = 0
    while True:
        m = int(round(m0 * (2 ** (k // 2)) * (1.5 if k % 2 else 1.0)))
        if m > m_max:
            return
        yield m
        k += 1


def _richardson(ms, vals, d) -> float:
    """Fit ``g^m = g + sum_k c_k m^-(d-2+k-1)`` through the available points."""
    k = len(ms)
    if k == 1:
        return vals[0]
    powers = [(d - 2) + j for j in range(k - 1)]
    A = np.array([[1.0] + [float(mm) ** -p for p in powers] for mm in ms])
    coef = np.linalg.solve(A, np.asarray(vals))
    return float(coef[0])


SPLU_LIMIT = 8_000


class KilledWalk:
    """The walk in ``env`` killed on leaving ``Lambda_m`` or on entering ``killed``.

    ``killed`` is an optional boolean array over ``Lambda_m``.  Vectors are
    indexed by flat ``Lambda_m`` sites; killed sites carry zeros.  ``solve``
    applies the inverse of ``A`` restricted to the live sites, which is the
    Green's function of the killed walk.
    """

    def __init__(self, env: Environment, m: int, killed: np.ndarray | None = None):
        self.op = ConstrainedOperator(env, m)
        self.env = env
        self.m = m
        alive = np.ones(self.op.n, dtype=bool) if killed is None else ~np.asarray(killed, dtype=bool).ravel()
        self.alive = alive
        self.live = np.flatnonzero(alive)
        A = self.op.A.tocsr()[self.live][:, self.live]
        self._A = A.tocsc()
        self._lu = spla.splu(self._A) if len(self.live) <= SPLU_LIMIT and len(self.live) else None
        self._M = sp.diags(1.0 / A.diagonal()) if len(self.live) else None
        self.max_residual = 0.0

    @property
    def pi(self) -> np.ndarray:
        return self.op.pi

    @property
    def origin(self) -> int:
        return self.op.index((0,) * self.env.d)

    def solve(self, b: np.ndarray) -> np.ndarray:
        out = np.zeros(self.op.n)
        if not len(self.live):
            return out
        rhs = np.asarray(b, dtype=float)[self.live]
        if not np.any(rhs):
            return out
        if self._lu is not None:
            x = self._lu.solve(rhs)
        else:
            x, info = spla.cg(self._A, rhs, rtol=CG_RTOL, atol=0.0, maxiter=CG_MAXITER, M=self._M)
            if info != 0:
                raise SolverError("conjugate gradient did not converge", float(np.linalg.norm(self._A @ x - rhs) / np.linalg.norm(rhs)))
        res = float(np.linalg.norm(self._A @ x - rhs, np.inf) / max(np.linalg.norm(rhs, np.inf), 1e-300))
        self.max_residual = max(self.max_residual, res)
        out[self.live] = x
        return out

    def visits(self, f: np.ndarray) -> np.ndarray:
        """``(I - Q)^-1 f``: expected sum of ``f`` along the killed walk, per start site."""
        return self.solve(self.pi * np.asarray(f, dtype=float))

    def apply_Q(self, f: np.ndarray) -> np.ndarray:
        """One step of the killed walk: ``(Q f)(x) = sum_y p(x, y) f(y)`` over live ``y``."""
        f = np.where(self.alive, f, 0.0)
        out = (self.op.W @ f) / self.pi
        return np.where(self.alive, out, 0.0)

    def green_from_origin(self) -> np.ndarray:
        """``g(0, .)`` of the killed walk (zero vector if the origin is killed)."""
        e = np.zeros(self.op.n)
        e[self.origin] = 1.0
        return self.solve(e)
